"""Synthetic scenario generator: worlds, motion plans, radar + IMU simulation.

The radar forward model samples visible surfaces on the sensor's angular
grid (one candidate return per grid cell, nearest surface wins). Each
resolution cell is subdivided `sensor.oversample` times per axis to mimic
the multiple detections per beam that imaging radars report. A static
point's noise-free Doppler is -d . v, with d the unit direction to the
point and v the sensor-origin velocity, both in the sensor frame.

The IMU model inverts strapdown: gyro = body rate, accelerometer = specific
force R^T (a_world - g), plus bias random walks and white noise. The AHRS
channel carries the true attitude perturbed by a yaw random walk whose RMS
reaches heading_drift_deg_per_hour after one hour; the walk realization is
drawn from a dedicated substream and scaled by the rate, so inflating the
drift rate rescales the same realization.
"""

import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import CubicSpline

from .dataio import (
    Dataset,
    Extrinsics,
    ImuSample,
    RadarScan,
    SensorModel,
    Trajectory,
    write_dataset,
)
from .geometry import (
    GRAVITY_W,
    Pose,
    pose_compose,
    pose_inverse,
    quat_about_z,
    quat_mul,
    quat_to_matrix,
    so3_exp,
)

_MIN_RAY_RANGE = 0.2  # m, returns closer than this are discarded

SCENARIOS = ("tunnel", "forest_loop", "rectangle")

SENSOR_PROFILES = {
    # short-range high-resolution imaging radar (mine/forest rig)
    "hugin": SensorModel(fov_h=80.0, fov_v=30.0, res_h=1.25, res_v=1.7,
                         res_range=0.1, max_range=42.0, rate=16.0,
                         doppler_sigma=0.05, range_sigma=0.05, oversample=3),
    # long-range radar with wider horizontal FOV (car-park rig)
    "eagle": SensorModel(fov_h=120.0, fov_v=30.0, res_h=0.5, res_v=1.0,
                         res_range=0.16, max_range=350.0, rate=10.0,
                         doppler_sigma=0.12, range_sigma=0.1, oversample=1),
    # cut-down profiles that keep suites fast
    "test_sparse": SensorModel(fov_h=80.0, fov_v=30.0, res_h=2.5, res_v=3.0,
                               res_range=0.1, max_range=30.0, rate=5.0,
                               doppler_sigma=0.05, range_sigma=0.08, oversample=1),
    "test_dense": SensorModel(fov_h=120.0, fov_v=30.0, res_h=1.0, res_v=1.5,
                              res_range=0.16, max_range=120.0, rate=5.0,
                              doppler_sigma=0.1, range_sigma=0.05, oversample=1),
}


@dataclass
class NoiseModel:
    gyro_sigma: float = 1e-4          # rad/s/sqrt(Hz)
    accel_sigma: float = 1.5e-3       # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 2e-6      # rad/s * 1/sqrt(s)
    accel_bias_walk: float = 4e-5     # m/s^2 * 1/sqrt(s)
    gyro_bias_init: float = 5e-5      # rad/s, std of the drawn initial bias
    accel_bias_init: float = 5e-3     # m/s^2
    gyro_bias_fixed: np.ndarray | None = None   # overrides the drawn bias
    accel_bias_fixed: np.ndarray | None = None
    doppler_sigma: float = 0.05       # m/s
    range_sigma: float = 0.05         # m
    angular_jitter_deg: float = 0.05  # deg
    outlier_fraction: float = 0.0
    outlier_doppler_span: float = 20.0  # m/s, half-width of the uniform draw
    displace_outliers: bool = False
    heading_drift_deg_per_hour: float = 3.0

    def __post_init__(self):
        for name in ("gyro_sigma", "accel_sigma", "gyro_bias_walk", "accel_bias_walk",
                     "gyro_bias_init", "accel_bias_init", "doppler_sigma", "range_sigma",
                     "angular_jitter_deg", "outlier_fraction", "heading_drift_deg_per_hour"):
            if getattr(self, name) < 0:
                raise ValueError(f"noise field {name} must be non-negative")

    @classmethod
    def zero(cls):
        return cls(gyro_sigma=0.0, accel_sigma=0.0, gyro_bias_walk=0.0,
                   accel_bias_walk=0.0, gyro_bias_init=0.0, accel_bias_init=0.0,
                   doppler_sigma=0.0, range_sigma=0.0, angular_jitter_deg=0.0,
                   outlier_fraction=0.0, heading_drift_deg_per_hour=0.0)


# ---------------------------------------------------------------------------
# world geometry


def _hash01(seed, *index_arrays):
    """Deterministic pseudo-random floats in [0, 1) from integer lattices."""
    with np.errstate(over="ignore"):
        h = np.full(index_arrays[0].shape, 0x9E3779B97F4A7C15, dtype=np.uint64)
        h ^= np.uint64((seed * 0x2545F4914F6CDD1D) & 0xFFFFFFFFFFFFFFFF)
        for a in index_arrays:
            h ^= a.astype(np.int64).view(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
            h ^= h >> np.uint64(31)
            h *= np.uint64(0x94D049BB133111EB)
        return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


_MAX_SCATTER_LEVEL = 6   # coarsest lattice = texel * 2^6
_MAX_FOOTPRINT = 3.0     # m, cap on the effective (grazing-stretched) footprint


def _dominant_scatterer(s1, s2, texel, sid, footprint):
    """Pick the strongest world-fixed scatterer within the beam footprint.

    The lattice is hierarchical: each hit competes on the lattice level whose
    cell size matches its footprint, so the selected return is the dominant
    scatterer of that resolution cell and sticks to the same physical spot
    across viewpoints instead of sliding with the sensor's sampling grid.
    """
    fp = np.clip(footprint, 0.55 * texel, _MAX_FOOTPRINT)
    level = np.clip(np.ceil(np.log2(fp / texel)).astype(int), 0, _MAX_SCATTER_LEVEL)
    offs = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1],
                                indexing="ij"), axis=-1).reshape(-1, 2)
    out_u = np.empty_like(s1)
    out_v = np.empty_like(s2)
    for lev in np.unique(level):
        sel = level == lev
        cell = texel * (1 << int(lev))
        seed = sid + 97 * int(lev)
        i0 = np.floor(s1[sel] / cell)
        j0 = np.floor(s2[sel] / cell)
        I = i0[:, None] + offs[:, 0]
        J = j0[:, None] + offs[:, 1]
        refl = _hash01(seed + 2, I, J)
        cu = (I + 0.15 + 0.7 * _hash01(seed, I, J)) * cell
        cv = (J + 0.15 + 0.7 * _hash01(seed + 1, I, J)) * cell
        fp_sel = fp[sel][:, None]
        inside = (np.abs(cu - s1[sel][:, None]) <= fp_sel) \
            & (np.abs(cv - s2[sel][:, None]) <= fp_sel)
        inside[:, 4] = True  # the hit's own cell always qualifies
        refl = np.where(inside, refl, -1.0)
        k = np.argmax(refl, axis=1)
        rows = np.arange(int(np.count_nonzero(sel)))
        out_u[sel] = cu[rows, k]
        out_v[sel] = cv[rows, k]
    return out_u, out_v


@dataclass
class RectPatch:
    """Planar rectangle: corner + two orthogonal edges."""

    corner: np.ndarray
    edge1: np.ndarray  # unit
    len1: float
    edge2: np.ndarray  # unit
    len2: float

    def __post_init__(self):
        self.corner = np.asarray(self.corner, dtype=float)
        self.edge1 = np.asarray(self.edge1, dtype=float)
        self.edge2 = np.asarray(self.edge2, dtype=float)
        self.normal = np.cross(self.edge1, self.edge2)
        if self.len1 <= 0 or self.len2 <= 0:
            raise ValueError("patch extents must be positive")

    def snap(self, hits, dirs, texel, sid, footprint):
        """Return the dominant world-fixed scatterer near each hit point.

        The footprint stretches by the inverse sine of the grazing angle, the
        along-surface extent of the beam.
        """
        graze = np.abs(dirs @ (self.normal / np.linalg.norm(self.normal)))
        fp = footprint / np.maximum(graze, 0.05)
        rel = hits - self.corner
        u, v = _dominant_scatterer(rel @ self.edge1, rel @ self.edge2,
                                   texel, sid, fp)
        u = np.clip(u, 0.0, self.len1)
        v = np.clip(v, 0.0, self.len2)
        return self.corner + u[:, None] * self.edge1 + v[:, None] * self.edge2

    def aabb(self):
        pts = np.stack([
            self.corner,
            self.corner + self.edge1 * self.len1,
            self.corner + self.edge2 * self.len2,
            self.corner + self.edge1 * self.len1 + self.edge2 * self.len2,
        ])
        return pts.min(axis=0), pts.max(axis=0)

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        offset = float((self.corner - origin) @ self.normal)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, offset / denom, np.inf)
            hit = origin + t[:, None] * dirs - self.corner
            s1 = hit @ self.edge1
            s2 = hit @ self.edge2
        ok = (t > _MIN_RAY_RANGE) & (s1 >= 0) & (s1 <= self.len1) \
            & (s2 >= 0) & (s2 <= self.len2)
        return np.where(ok, t, np.inf)


@dataclass
class Cylinder:
    """Vertical cylinder (tree trunk, pillar)."""

    center_xy: np.ndarray
    radius: float
    z0: float
    z1: float

    def __post_init__(self):
        self.center_xy = np.asarray(self.center_xy, dtype=float)
        if self.radius <= 0 or self.z1 <= self.z0:
            raise ValueError("degenerate cylinder")

    def aabb(self):
        cx, cy = self.center_xy
        r = self.radius
        return (np.array([cx - r, cy - r, self.z0]),
                np.array([cx + r, cy + r, self.z1]))

    def intersect(self, origin, dirs):
        rel = origin[:2] - self.center_xy
        a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
        b = 2.0 * (rel[0] * dirs[:, 0] + rel[1] * dirs[:, 1])
        c = rel[0] ** 2 + rel[1] ** 2 - self.radius ** 2
        disc = b * b - 4.0 * a * c
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where((disc > 0) & (a > 1e-12),
                         (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a), np.inf)
        z = origin[2] + t * dirs[:, 2]
        ok = (t > _MIN_RAY_RANGE) & (z >= self.z0) & (z <= self.z1)
        return np.where(ok, t, np.inf)

    def snap(self, hits, dirs, texel, sid, footprint):
        rel = hits[:, :2] - self.center_xy
        theta = np.arctan2(rel[:, 1], rel[:, 0])
        normal = np.concatenate([rel / np.linalg.norm(rel, axis=1, keepdims=True),
                                 np.zeros((len(rel), 1))], axis=1)
        graze = np.abs(np.einsum("ni,ni->n", dirs, normal))
        fp = footprint / np.maximum(graze, 0.05)
        u, z = _dominant_scatterer(theta * self.radius, hits[:, 2],
                                   texel, sid, fp)
        z = np.clip(z, self.z0, self.z1)
        th = u / self.radius
        return np.stack([self.center_xy[0] + self.radius * np.cos(th),
                         self.center_xy[1] + self.radius * np.sin(th), z], axis=1)


class World:
    """Surfaces plus an optional world-fixed scatterer texture.

    texture > 0 snaps every return to a deterministic lattice of scatterers
    (spacing = texture, in meters) carried by the surface. Without it, the
    ray-grid samples slide along surfaces as the sensor translates, which
    correlates the sampling with the sensor pose and starves scan matching
    of world-fixed structure.
    """

    def __init__(self, surfaces, texture: float = 0.0):
        if not surfaces:
            raise ValueError("world needs at least one surface")
        self.surfaces = list(surfaces)
        self.texture = float(texture)
        self._aabbs = [s.aabb() for s in self.surfaces]

    def cast(self, origin, dirs, max_range):
        """(hit distance, winning surface index) per ray; inf / -1 on miss."""
        t = np.full(len(dirs), np.inf)
        sidx = np.full(len(dirs), -1, dtype=int)
        for k, (surface, (lo, hi)) in enumerate(zip(self.surfaces, self._aabbs)):
            nearest = np.linalg.norm(origin - np.clip(origin, lo, hi))
            if nearest > max_range:
                continue
            tk = surface.intersect(origin, dirs)
            closer = tk < t
            t[closer] = tk[closer]
            sidx[closer] = k
        miss = t > max_range
        t[miss] = np.inf
        sidx[miss] = -1
        return t, sidx

    def snap_hits(self, hits, sidx, dirs, footprint):
        if self.texture <= 0:
            return hits
        out = hits.copy()
        for k in np.unique(sidx):
            sel = sidx == k
            out[sel] = self.surfaces[k].snap(hits[sel], dirs[sel], self.texture,
                                             77 + 13 * int(k), footprint[sel])
        return out


# ---------------------------------------------------------------------------
# motion plans


class MotionPlan:
    """Piecewise motion: exact holds and clamped cubic splines between them.

    Attitude follows the path tangent: yaw from the horizontal velocity,
    pitch from the climb angle, roll zero. Holds carry the attitude of the
    adjacent motion so heading is continuous.
    """

    def __init__(self, segments, waypoints):
        self.segments = segments  # list of dicts, time-ordered
        self.waypoints = waypoints  # [(t, Pose)], the spec-level view
        self.t0 = segments[0]["t0"]
        self.t1 = segments[-1]["t1"]

    @classmethod
    def from_waypoints(cls, times, positions):
        """Build from timestamped positions; repeated positions become holds."""
        times = np.asarray(times, dtype=float)
        positions = np.asarray(positions, dtype=float)
        if len(times) < 2 or np.any(np.diff(times) <= 0):
            raise ValueError("waypoint times must be strictly increasing, >= 2 points")
        # split into alternating hold / move runs
        same = np.all(positions[1:] == positions[:-1], axis=1)
        segments = []
        i = 0
        while i < len(times) - 1:
            j = i
            if same[i]:
                while j < len(same) and same[j]:
                    j += 1
                segments.append({"kind": "hold", "t0": times[i], "t1": times[j],
                                 "pos": positions[i].copy(), "yaw": 0.0,
                                 "pitch": 0.0})
            else:
                while j < len(same) and not same[j]:
                    j += 1
                knots_t = times[i:j + 1]
                knots_p = positions[i:j + 1]
                spline = CubicSpline(knots_t, knots_p, axis=0,
                                     bc_type=((1, np.zeros(3)), (1, np.zeros(3))))
                segments.append({"kind": "move", "t0": times[i], "t1": times[j],
                                 "spline": spline})
            i = j
        # propagate hold yaw from adjacent motion
        for k, seg in enumerate(segments):
            if seg["kind"] != "hold":
                continue
            neighbor = None
            for other in segments[k + 1:]:
                if other["kind"] == "move":
                    neighbor = (other, other["t0"])
                    break
            if neighbor is None:
                for other in reversed(segments[:k]):
                    if other["kind"] == "move":
                        neighbor = (other, other["t1"])
                        break
            if neighbor is not None:
                yaw, pitch = _spline_heading(neighbor[0]["spline"], neighbor[1])
                seg["yaw"], seg["pitch"] = yaw, pitch
        plan = cls(segments, [])
        plan.waypoints = [(float(t), plan.pose_at(float(t))) for t in times]
        return plan

    def _segment(self, t):
        if t < self.t0 - 1e-9 or t > self.t1 + 1e-9:
            raise ValueError(f"time {t} outside plan span [{self.t0}, {self.t1}]")
        for seg in self.segments:
            if t <= seg["t1"]:
                return seg
        return self.segments[-1]

    def position(self, t):
        seg = self._segment(t)
        return seg["pos"].copy() if seg["kind"] == "hold" else seg["spline"](t)

    def velocity_world(self, t):
        seg = self._segment(t)
        return np.zeros(3) if seg["kind"] == "hold" else seg["spline"](t, 1)

    def accel_world(self, t):
        seg = self._segment(t)
        return np.zeros(3) if seg["kind"] == "hold" else seg["spline"](t, 2)

    def heading(self, t):
        """(yaw, pitch) of the tangent frame at time t."""
        seg = self._segment(t)
        if seg["kind"] == "hold":
            return seg["yaw"], seg["pitch"]
        return _spline_heading(seg["spline"], t)

    def yaw(self, t):
        return self.heading(t)[0]

    def yaw_rate(self, t):
        seg = self._segment(t)
        if seg["kind"] == "hold":
            return 0.0
        v = seg["spline"](t, 1)
        a = seg["spline"](t, 2)
        speed2 = v[0] ** 2 + v[1] ** 2
        if speed2 < 1e-12:
            return 0.0
        return float((v[0] * a[1] - v[1] * a[0]) / speed2)

    def pitch_rate(self, t, h=1e-3):
        seg = self._segment(t)
        if seg["kind"] == "hold":
            return 0.0
        lo = max(float(t) - h, seg["t0"])
        hi = min(float(t) + h, seg["t1"])
        if hi <= lo:
            return 0.0
        p0 = _spline_heading(seg["spline"], lo)[1]
        p1 = _spline_heading(seg["spline"], hi)[1]
        return (p1 - p0) / (hi - lo)

    def rotation_quat(self, t):
        yaw, pitch = self.heading(t)
        return quat_mul(quat_about_z(yaw), so3_exp(np.array([0.0, pitch, 0.0])))

    def pose_at(self, t) -> Pose:
        return Pose(t, self.rotation_quat(t), self.position(t))

    def angular_velocity_body(self, t):
        """Body rate of the tangent frame R = Rz(yaw) Ry(pitch)."""
        _, pitch = self.heading(t)
        dpsi = self.yaw_rate(t)
        dtheta = self.pitch_rate(t)
        return np.array([-dpsi * np.sin(pitch), dtheta, dpsi * np.cos(pitch)])

    def twist_body(self, t):
        """(v_body, omega_body) at time t."""
        R = quat_to_matrix(self.rotation_quat(t))
        return R.T @ self.velocity_world(t), self.angular_velocity_body(t)


def _spline_heading(spline, t):
    v = spline(t, 1)
    if v[0] ** 2 + v[1] ** 2 < 1e-16:
        # zero-speed knot (clamped end); take the heading just inside
        lo, hi = spline.x[0], spline.x[-1]
        for nudge in (1e-3, 1e-2, 1e-1):
            tt = min(max(t + nudge if t < 0.5 * (lo + hi) else t - nudge, lo), hi)
            v = spline(tt, 1)
            if v[0] ** 2 + v[1] ** 2 >= 1e-16:
                break
    yaw = float(np.arctan2(v[1], v[0]))
    speed = float(np.linalg.norm(v))
    pitch = 0.0 if speed < 1e-8 else float(-np.arcsin(np.clip(v[2] / speed, -1, 1)))
    return yaw, pitch


@dataclass
class _SpeedProfile:
    """Cruise with raised-cosine ramps, so acceleration is continuous
    (zero at both ends) and strapdown re-integration has nothing to jump over.
    """

    total_s: float
    speed: float
    accel: float  # peak ramp acceleration

    def __post_init__(self):
        if np.isinf(self.accel):
            self.peak = self.speed
            self.t_ramp = 0.0
        else:
            # cosine ramp of peak accel a covers s = v^2 pi / (4 a) per side
            self.peak = min(self.speed,
                            np.sqrt(2.0 * self.accel * self.total_s / np.pi))
            self.t_ramp = self.peak * np.pi / (2.0 * self.accel)
        self.s_ramp = self.peak * self.t_ramp / 2.0
        self.t_cruise = (self.total_s - 2.0 * self.s_ramp) / self.peak
        self.duration = 2.0 * self.t_ramp + self.t_cruise

    def s_of_t(self, t):
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.duration)
        if self.t_ramp == 0.0:
            return self.peak * t

        def ramp(tt):
            return 0.5 * self.peak * (
                tt - self.t_ramp / np.pi * np.sin(np.pi * tt / self.t_ramp))

        up = t <= self.t_ramp
        down = t >= self.duration - self.t_ramp
        cruise = ~up & ~down
        s = np.empty_like(t)
        s[up] = ramp(t[up])
        s[cruise] = self.s_ramp + self.peak * (t[cruise] - self.t_ramp)
        s[down] = self.total_s - ramp(self.duration - t[down])
        return s


def plan_along_path(path_xyz, speed, accel=1.5, hold_start=1.5, hold_end=0.5,
                    dt_knot=0.1):
    """Motion plan following a polyline at a smooth-ramp speed profile."""
    path_xyz = np.asarray(path_xyz, dtype=float)
    seg = np.linalg.norm(np.diff(path_xyz, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 1e-12])
    path_xyz = path_xyz[keep]
    seg = seg[seg > 1e-12]
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = float(s[-1])
    profile = _SpeedProfile(total, speed, accel)
    n = max(int(np.ceil(profile.duration / dt_knot)), 8)
    t_knots = np.linspace(0.0, profile.duration, n + 1)
    # smooth chord-length parameterization; linear interpolation of the
    # polyline would alias the sagitta into spline curvature
    smooth = CubicSpline(s, path_xyz, axis=0)
    pts = smooth(profile.s_of_t(t_knots))
    pts[0], pts[-1] = path_xyz[0], path_xyz[-1]
    times = list(t_knots + hold_start)
    waypts = list(pts)
    if hold_start > 0:
        times = [0.0] + times
        waypts = [pts[0]] + waypts
    if hold_end > 0:
        times = times + [times[-1] + hold_end]
        waypts = waypts + [pts[-1]]
    return MotionPlan.from_waypoints(np.array(times), np.stack(waypts))


# ---------------------------------------------------------------------------
# sensors


def simulate_radar_scan(world: World, pose: Pose, velocity: np.ndarray,
                        sensor: SensorModel, noise: NoiseModel, rng) -> RadarScan:
    """One radar frame from a sensor at `pose` moving at `velocity`.

    `pose` is the radar's world pose and `velocity` the linear velocity of
    the radar origin expressed in the radar frame (body-to-sensor lever
    effects are the caller's job). Doppler is positive for receding targets.
    """
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    n_az = max(int(round(sensor.fov_h / sensor.res_h)) * sensor.oversample, 1)
    n_el = max(int(round(sensor.fov_v / sensor.res_v)) * sensor.oversample, 1)
    az = np.deg2rad(-sensor.fov_h / 2 + (np.arange(n_az) + 0.5) * sensor.fov_h / n_az)
    el = np.deg2rad(-sensor.fov_v / 2 + (np.arange(n_el) + 0.5) * sensor.fov_v / n_el)
    az, el = (g.ravel() for g in np.meshgrid(az, el, indexing="ij"))
    if noise.angular_jitter_deg > 0:
        jitter = np.deg2rad(noise.angular_jitter_deg)
        az = az + rng.normal(0.0, jitter, az.shape)
        el = el + rng.normal(0.0, jitter, el.shape)
    cos_el = np.cos(el)
    dirs = np.stack([cos_el * np.cos(az), cos_el * np.sin(az), np.sin(el)], axis=1)
    R = pose.rot()
    dirs_w = dirs @ R.T
    t_hit, sidx = world.cast(pose.p, dirs_w, sensor.max_range)
    hit = np.isfinite(t_hit)
    n = int(np.count_nonzero(hit))
    if n == 0:
        return RadarScan(pose.t, np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    hits_w = pose.p + t_hit[hit, None] * dirs_w[hit]
    res_rad = np.deg2rad(max(sensor.res_h, sensor.res_v))
    footprint = 0.5 * res_rad * t_hit[hit]
    hits_w = world.snap_hits(hits_w, sidx[hit], dirs_w[hit], footprint)
    local = (hits_w - pose.p) @ R
    r = np.linalg.norm(local, axis=1)
    # scatterer selection can wander outside the sampled cone; those returns
    # are not physical detections of this frame and are dropped
    az_pt = np.arctan2(local[:, 1], local[:, 0])
    el_pt = np.arcsin(np.clip(local[:, 2] / r, -1.0, 1.0))
    keep = ((r <= sensor.max_range)
            & (np.abs(az_pt) <= np.deg2rad(sensor.fov_h) / 2)
            & (np.abs(el_pt) <= np.deg2rad(sensor.fov_v) / 2))
    local, r = local[keep], r[keep]
    n = len(r)
    if n == 0:
        return RadarScan(pose.t, np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    dirs = local / r[:, None]
    if noise.range_sigma > 0:
        r = np.maximum(r + rng.normal(0.0, noise.range_sigma, n), _MIN_RAY_RANGE)
    doppler = -(dirs @ np.asarray(velocity, dtype=float))
    if noise.doppler_sigma > 0:
        doppler = doppler + rng.normal(0.0, noise.doppler_sigma, n)
    positions = dirs * r[:, None]
    if noise.outlier_fraction > 0:
        mask = rng.random(n) < noise.outlier_fraction
        span = noise.outlier_doppler_span
        doppler[mask] = rng.uniform(-span, span, int(mask.sum()))
        if noise.displace_outliers:
            positions[mask] += rng.uniform(-1.5, 1.5, (int(mask.sum()), 3))
    power = 40.0 - 20.0 * np.log10(np.maximum(r, 0.5)) + rng.normal(0.0, 1.5, n)
    return RadarScan(pose.t, positions, doppler, power)


def simulate_imu(plan: MotionPlan, noise: NoiseModel, rate: float,
                 gravity: np.ndarray = GRAVITY_W, rng=0, with_ahrs=True) -> list:
    """Inverse-strapdown IMU stream over the whole plan."""
    if rate <= 0:
        raise ValueError("imu rate must be positive")
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    rng_white, rng_bias, rng_ahrs = rng.spawn(3)
    dt = 1.0 / rate
    n = int(np.floor((plan.t1 - plan.t0) * rate)) + 1
    times = plan.t0 + np.arange(n) * dt

    gyro_white = rng_white.normal(0.0, noise.gyro_sigma * np.sqrt(rate), (n, 3))
    accel_white = rng_white.normal(0.0, noise.accel_sigma * np.sqrt(rate), (n, 3))
    bg0 = (noise.gyro_bias_fixed if noise.gyro_bias_fixed is not None
           else rng_bias.normal(0.0, noise.gyro_bias_init, 3))
    ba0 = (noise.accel_bias_fixed if noise.accel_bias_fixed is not None
           else rng_bias.normal(0.0, noise.accel_bias_init, 3))
    bg = bg0 + np.cumsum(rng_bias.normal(0.0, noise.gyro_bias_walk * np.sqrt(dt), (n, 3)), axis=0)
    ba = ba0 + np.cumsum(rng_bias.normal(0.0, noise.accel_bias_walk * np.sqrt(dt), (n, 3)), axis=0)

    # standardized yaw walk scaled by the drift rate: RMS(rate * walk) after
    # one hour equals heading_drift_deg_per_hour
    unit_walk = np.concatenate([[0.0], np.cumsum(
        rng_ahrs.normal(0.0, np.sqrt(dt / 3600.0), n - 1))]) if n > 1 else np.zeros(1)
    yaw_err = np.deg2rad(noise.heading_drift_deg_per_hour) * unit_walk

    samples = []
    for i, t in enumerate(times):
        q_true = plan.rotation_quat(t)
        R = quat_to_matrix(q_true)
        omega = plan.angular_velocity_body(t) + bg[i] + gyro_white[i]
        f = R.T @ (plan.accel_world(t) - gravity) + ba[i] + accel_white[i]
        att = None
        if with_ahrs:
            att = quat_mul(quat_about_z(yaw_err[i]), q_true)
        samples.append(ImuSample(float(t), omega, f, att))
    return samples


# ---------------------------------------------------------------------------
# scenario worlds


def _patch_x(corner, dx, dz):
    return RectPatch(np.asarray(corner, float), np.array([1.0, 0, 0]), dx,
                     np.array([0.0, 0, 1.0]), dz)


def _patch_y(corner, dy, dz):
    return RectPatch(np.asarray(corner, float), np.array([0.0, 1.0, 0]), dy,
                     np.array([0.0, 0, 1.0]), dz)


def _floor(x0, x1, y0, y1, z=0.0):
    return RectPatch(np.array([x0, y0, z]), np.array([1.0, 0, 0]), x1 - x0,
                     np.array([0.0, 1.0, 0]), y1 - y0)


def build_tunnel_world(length=500.0, width=10.0, height=6.0,
                       alcove_period=25.0, alcove_depth=3.0, alcove_len=4.0,
                       featureless=False, margin=15.0, texture=0.15):
    """Straight mine drift: floor, ceiling, walls, periodic side alcoves."""
    surfaces = [
        _floor(-margin, length + margin, -width / 2 - alcove_depth - 2,
               width / 2 + alcove_depth + 2, 0.0),
        _floor(-margin, length + margin, -width / 2 - alcove_depth - 2,
               width / 2 + alcove_depth + 2, height),
        _patch_y(np.array([-margin, -width / 2, 0.0]), width, height),  # start cap
        _patch_y(np.array([length + margin, -width / 2, 0.0]), width, height),  # end cap
    ]
    if featureless:
        surfaces.append(_patch_x(np.array([-margin, width / 2, 0.0]),
                                 length + 2 * margin, height))
        surfaces.append(_patch_x(np.array([-margin, -width / 2, 0.0]),
                                 length + 2 * margin, height))
        return World(surfaces, texture=texture)
    for side in (+1, -1):
        y = side * width / 2
        # alcoves stagger: left wall openings offset half a period
        starts = np.arange(alcove_period / 2 if side > 0 else alcove_period,
                           length - alcove_len, alcove_period)
        prev = -margin
        for s0 in starts:
            surfaces.append(_patch_x(np.array([prev, y, 0.0]), s0 - prev, height))
            back_y = y + side * alcove_depth
            surfaces.append(_patch_x(np.array([s0, back_y, 0.0]), alcove_len, height))
            surfaces.append(RectPatch(np.array([s0, y, 0.0]), np.array([0.0, side, 0.0]),
                                      alcove_depth, np.array([0.0, 0, 1.0]), height))
            surfaces.append(RectPatch(np.array([s0 + alcove_len, y, 0.0]),
                                      np.array([0.0, side, 0.0]), alcove_depth,
                                      np.array([0.0, 0, 1.0]), height))
            prev = s0 + alcove_len
        surfaces.append(_patch_x(np.array([prev, y, 0.0]),
                                 length + margin - prev, height))
    return World(surfaces, texture=texture)


def build_forest_world(loop_radius=20.0, n_trees=90, extent=45.0, rng=None,
                       texture=0.15):
    """Flat clearing with scattered trunks around a loop corridor."""
    rng = np.random.default_rng(rng)
    surfaces = [_floor(-extent, extent, -extent, extent + 2 * loop_radius, 0.0)]
    center = np.array([0.0, loop_radius])
    placed = 0
    while placed < n_trees:
        p = rng.uniform(-extent + 2, extent - 2, 2)
        p[1] += loop_radius
        d_path = abs(np.linalg.norm(p - center) - loop_radius)
        if d_path < 2.0:  # keep the driving corridor clear
            continue
        surfaces.append(Cylinder(p, float(rng.uniform(0.12, 0.4)), 0.0, 8.0))
        placed += 1
    return World(surfaces, texture=texture)


def build_rectangle_world(width=26.0, depth=18.0, wall_offset=9.0,
                          n_pillars=12, rng=None, texture=0.15):
    """Walled yard with pillars: the car-park analogue."""
    rng = np.random.default_rng(rng)
    x0, x1 = -wall_offset, width + wall_offset
    y0, y1 = -wall_offset, depth + wall_offset
    h = 6.0
    surfaces = [
        _floor(x0, x1, y0, y1, 0.0),
        _patch_x(np.array([x0, y0, 0.0]), x1 - x0, h),
        _patch_x(np.array([x0, y1, 0.0]), x1 - x0, h),
        _patch_y(np.array([x0, y0, 0.0]), y1 - y0, h),
        _patch_y(np.array([x1, y0, 0.0]), y1 - y0, h),
    ]
    for _ in range(n_pillars):
        p = rng.uniform([2.0, 2.0], [width - 2.0, depth - 2.0])
        surfaces.append(Cylinder(p, 0.3, 0.0, 4.0))
    return World(surfaces, texture=texture)


def _rounded_rect_path(width, depth, corner_r, ds=0.2):
    """Closed rounded-rectangle polyline starting at (0, 0) heading +x."""
    w, d, r = width, depth, corner_r
    pts = []

    def arc(cx, cy, a0, a1):
        n = max(int(abs(a1 - a0) * r / ds), 4)
        for a in np.linspace(a0, a1, n, endpoint=False):
            pts.append([cx + r * np.cos(a), cy + r * np.sin(a)])

    def line(p0, p1):
        p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
        n = max(int(np.linalg.norm(p1 - p0) / ds), 2)
        for u in np.linspace(0.0, 1.0, n, endpoint=False):
            pts.append(list(p0 + u * (p1 - p0)))

    line([0, 0], [w - r, 0])
    arc(w - r, r, -np.pi / 2, 0.0)
    line([w, r], [w, d - r])
    arc(w - r, d - r, 0.0, np.pi / 2)
    line([w - r, d], [r, d])
    arc(r, d - r, np.pi / 2, np.pi)
    line([0, d - r], [0, r])
    arc(r, r, np.pi, 1.5 * np.pi)
    line([r, 0], [0, 0])
    pts.append([0.0, 0.0])  # exact closure
    return np.array(pts)


def _circle_path(radius, ds=0.2, closed=True):
    n = max(int(2 * np.pi * radius / ds), 16)
    a = np.linspace(-np.pi / 2, 1.5 * np.pi, n + 1)
    xy = np.stack([radius * np.cos(a), radius * np.sin(a) + radius], axis=1)
    xy[0] = [0.0, 0.0]
    if closed:
        xy[-1] = [0.0, 0.0]  # exact closure
    return xy


@dataclass
class ScenarioConfig:
    scenario: str = "tunnel"
    length: float = 500.0          # tunnel only
    width: float = 10.0
    speed: float = 5.833           # 21 km/h
    body_height: float = 1.7
    featureless: bool = False
    bump_height: float = 0.0
    bump_at_s: float = -1.0        # path distance of the bump, <0 disables
    bump_len: float = 2.0
    undulation_amp: float = 0.0    # m, gentle grade changes along the path
    undulation_period: float = 40.0
    loop_radius: float = 20.0      # forest only
    rect_width: float = 26.0       # rectangle only
    rect_depth: float = 18.0
    corner_radius: float = 2.5
    hold_start: float = 1.5
    hold_end: float = 0.5
    accel: float = 1.5
    imu_rate: float = 200.0


def build_scenario(cfg: ScenarioConfig, seed: int):
    """World plus motion plan for one named scenario."""
    world_rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    if cfg.scenario == "tunnel":
        world = build_tunnel_world(length=cfg.length, width=cfg.width,
                                   featureless=cfg.featureless)
        n = max(int(cfg.length / 0.25), 8)
        s = np.linspace(0.0, cfg.length, n + 1)
        path = np.stack([s, np.zeros_like(s), np.full_like(s, cfg.body_height)], axis=1)
        speed = cfg.speed
    elif cfg.scenario == "forest_loop":
        world = build_forest_world(loop_radius=cfg.loop_radius, rng=world_rng)
        xy = _circle_path(cfg.loop_radius)
        path = np.concatenate([xy, np.full((len(xy), 1), cfg.body_height)], axis=1)
        speed = min(cfg.speed, 3.8)
    elif cfg.scenario == "rectangle":
        world = build_rectangle_world(width=cfg.rect_width, depth=cfg.rect_depth,
                                      rng=world_rng)
        xy = _rounded_rect_path(cfg.rect_width - 6.0, cfg.rect_depth - 6.0,
                                cfg.corner_radius) + np.array([3.0, 3.0])
        path = np.concatenate([xy, np.full((len(xy), 1), cfg.body_height)], axis=1)
        speed = min(cfg.speed, 1.5)
    else:
        raise ValueError(f"unknown scenario '{cfg.scenario}'")
    if cfg.undulation_amp > 0:
        seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        # fade the grade in and out so the run still starts and ends level
        fade = np.clip(np.minimum(s, s[-1] - s) / cfg.undulation_period, 0.0, 1.0)
        path[:, 2] += cfg.undulation_amp * fade * np.sin(
            2 * np.pi * s / cfg.undulation_period)
    if cfg.bump_height > 0 and cfg.bump_at_s >= 0:
        seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        u = (s - cfg.bump_at_s) / cfg.bump_len
        in_bump = (u >= 0) & (u <= 1)
        path[in_bump, 2] += cfg.bump_height * 0.5 * (1 - np.cos(2 * np.pi * u[in_bump]))
    plan = plan_along_path(path, speed, accel=cfg.accel,
                           hold_start=cfg.hold_start, hold_end=cfg.hold_end)
    return world, plan


def _scan_times(plan, rate):
    n = int(np.floor((plan.t1 - plan.t0) * rate)) + 1
    # microsecond grid, so scan filenames round-trip bit exactly
    return np.round((plan.t0 + np.arange(n) / rate) * 1e6) / 1e6


def simulate_session(world: World, plan: MotionPlan, sensor: SensorModel,
                     noise: NoiseModel, seed: int,
                     extrinsics: Extrinsics | None = None,
                     imu_rate: float = 200.0) -> Dataset:
    """Full in-memory session: scans, IMU stream, ground truth."""
    extrinsics = extrinsics or Extrinsics.identity()
    ss = np.random.SeedSequence([seed, 1])
    imu_seed, scans_seed = ss.spawn(2)
    imu = simulate_imu(plan, noise, imu_rate, GRAVITY_W,
                       np.random.default_rng(imu_seed))
    r_from_b = extrinsics.radar_from_imu
    lever = extrinsics.lever_arm()
    times = _scan_times(plan, sensor.rate)
    scan_rngs = np.random.default_rng(scans_seed).spawn(len(times))
    scans = []
    truth = []
    for t, rng in zip(times, scan_rngs):
        body = plan.pose_at(float(t))
        truth.append(body)
        v_body, omega = plan.twist_body(float(t))
        # radar pose in the world and radar-origin velocity in the radar frame
        radar = pose_compose(body, pose_inverse(r_from_b))
        radar = Pose(float(t), radar.q, radar.p)
        v_sensor = r_from_b.rot() @ (v_body + np.cross(omega, lever))
        scans.append(simulate_radar_scan(world, radar, v_sensor, sensor, noise, rng))
    return Dataset(scans, imu, Trajectory(truth), extrinsics, sensor)


def generate_session(scenario: str, sensor: SensorModel, noise: NoiseModel,
                     seed: int, out_dir: str | None = None,
                     cfg: ScenarioConfig | None = None) -> Dataset:
    """Build a scenario session and optionally write it as a dataset directory."""
    cfg = replace(cfg or ScenarioConfig(), scenario=scenario)
    world, plan = build_scenario(cfg, seed)
    data = simulate_session(world, plan, sensor, noise, seed,
                            imu_rate=cfg.imu_rate)
    if out_dir is not None:
        write_dataset(data, out_dir)
    return data

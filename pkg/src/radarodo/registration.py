"""Scan-matching odometry: point-to-plane ICP against a density-capped local
map (6-DOF or heading-only 4-DOF), scan-to-scan generalized ICP with
radar-specific anisotropic point covariances, and NDT. Every optimizer can be
seeded with a motion prior.

All optimizers run Gauss-Newton with the rotation parameterized by a local
3-vector (world-side perturbation), solved by a minimum-norm least-squares
step so unobservable directions (e.g. the axis of a featureless tunnel) stay
at the prior instead of diverging.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .dataio import RadarScan, SensorModel, Trajectory
from .geometry import (
    Pose,
    euler_zyx,
    pose_compose,
    pose_inverse,
    quat_to_matrix,
    rot_z,
    so3_exp,
)


class NoValidVoxelsError(Exception):
    pass


@dataclass
class RegistrationResult:
    pose: Pose
    converged: bool
    iterations: int
    final_residual: float
    match_count: int


@dataclass
class IcpConfig:
    max_match_distance: float = 1.0
    cauchy_scale: float = 0.3
    min_matches: int = 30
    max_iterations: int = 50
    update_tol: float = 1e-4      # m and rad
    min_point_distance: float = 0.1
    normal_k: int = 15


@dataclass
class GicpConfig:
    max_match_distance: float = 1.0
    min_matches: int = 30
    max_iterations: int = 50
    update_tol: float = 1e-4
    angular_scale: float = 1.0    # multiplies the sensor angular resolution
    cov_floor: float = 1e-6       # m^2, eigenvalue floor per point covariance
    max_step_t: float = 1.0       # per-iteration step clamps
    max_step_r: float = 0.5


@dataclass
class NdtConfig:
    voxel_size: float = 2.0
    min_voxel_points: int = 5
    eig_floor_rel: float = 1e-3
    eig_floor_abs: float = 9e-4   # m^2; a voxel Gaussian cannot be narrower
                                  # than the sensor noise
    min_matches: int = 30
    max_iterations: int = 50
    update_tol: float = 1e-4
    max_step_t: float = 1.0
    max_step_r: float = 0.5


# ---------------------------------------------------------------------------
# neighbor search


class NeighborIndex:
    """Exact nearest-neighbor index over a fixed point set."""

    def __init__(self, points: np.ndarray):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        if len(self.points) == 0:
            raise ValueError("empty index")
        self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)


def knn(index: NeighborIndex, query: np.ndarray, k: int):
    """The k nearest points, ascending distance, ties broken by insertion order.

    k larger than the index returns every point.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    k_eff = min(k, len(index))
    d, _ = index.tree.query(query, k=k_eff)
    d_max = float(np.max(np.atleast_1d(d)))
    # re-collect within the kth radius so boundary ties resolve by index
    cand = index.tree.query_ball_point(np.asarray(query, dtype=float),
                                       d_max * (1 + 1e-12) + 1e-300)
    cand = np.sort(np.asarray(cand, dtype=int))
    dist = np.linalg.norm(index.points[cand] - query, axis=1)
    order = np.lexsort((cand, dist))[:k_eff]
    chosen = cand[order]
    return [(index.points[i], float(np.linalg.norm(index.points[i] - query)))
            for i in chosen]


# ---------------------------------------------------------------------------
# normals


def estimate_normals(points: np.ndarray, k: int = 15, origin=None, tree=None):
    """Per-point normals from the k-NN scatter matrix.

    Returns (normals, valid); neighborhoods of rank < 2 are flagged invalid.
    Normals flip toward `origin` (the sensor) when given.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    if n < 3:
        raise ValueError("need at least 3 points for normals")
    k_eff = min(k, n)
    tree = tree or cKDTree(points)
    _, idx = tree.query(points, k=k_eff)
    return _normals_for(points, points, np.atleast_2d(idx), origin)


def _normals_for(query_points, cloud, neighbor_idx, origin):
    neigh = cloud[neighbor_idx]                       # (n, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    scatter = np.einsum("nki,nkj->nij", centered, centered)
    w, v = np.linalg.eigh(scatter)
    normals = v[:, :, 0]
    valid = w[:, 1] > 1e-8 * np.maximum(w[:, 2], 1e-12)
    if origin is not None:
        flip = np.einsum("ni,ni->n", normals, origin - query_points) < 0
        normals[flip] = -normals[flip]
    normals[~valid] = np.nan
    return normals, valid


# ---------------------------------------------------------------------------
# local map


class LocalMap:
    """Accumulated world-frame points with normals and a density cap: no two
    map points closer than min_point_distance."""

    def __init__(self, min_point_distance: float = 0.1, normal_k: int = 15):
        self.min_point_distance = float(min_point_distance)
        self.normal_k = int(normal_k)
        self.points = np.zeros((0, 3))
        self.normals = np.zeros((0, 3))
        self.valid = np.zeros(0, dtype=bool)
        self._tree = None
        self._match_tree = None
        self._match_idx = None

    def __len__(self):
        return len(self.points)

    def tree(self):
        return self._tree

    def insert(self, scan: RadarScan, pose: Pose) -> int:
        """Add scan points seen from `pose`; returns how many survived the
        density cap. Normals are (re)estimated for new points and for
        existing points whose neighborhoods the new points enter."""
        if len(scan) == 0:
            return 0
        pts = pose.transform(scan.positions)
        if self._tree is not None:
            d, _ = self._tree.query(pts, k=1)
            pts = pts[d >= self.min_point_distance]
        accepted = _greedy_thin(pts, self.min_point_distance)
        if len(accepted) == 0:
            return 0
        first_new = len(self.points)
        self.points = np.vstack([self.points, accepted])
        self.normals = np.vstack([self.normals, np.full_like(accepted, np.nan)])
        self.valid = np.concatenate([self.valid, np.zeros(len(accepted), dtype=bool)])
        self._tree = cKDTree(self.points)
        self._refresh_normals(np.arange(first_new, len(self.points)), pose.p)
        return len(accepted)

    def _refresh_normals(self, new_idx, origin):
        if len(self.points) < 3:
            return
        k_eff = min(self.normal_k, len(self.points))
        _, neigh = self._tree.query(self.points[new_idx], k=k_eff)
        neigh = np.atleast_2d(neigh)
        affected = np.unique(np.concatenate([new_idx, neigh.ravel()]))
        _, idx = self._tree.query(self.points[affected], k=k_eff)
        normals, valid = _normals_for(self.points[affected], self.points,
                                      np.atleast_2d(idx), origin)
        self.normals[affected] = normals
        self.valid[affected] = valid
        match_idx = np.flatnonzero(self.valid)
        self._match_idx = match_idx
        self._match_tree = cKDTree(self.points[match_idx]) if len(match_idx) else None

    def match(self, queries, max_dist):
        """Nearest valid-normal map point per query; (target_idx, ok_mask)."""
        if self._match_tree is None:
            return np.zeros(len(queries), dtype=int), np.zeros(len(queries), dtype=bool)
        d, i = self._match_tree.query(queries, k=1,
                                      distance_upper_bound=max_dist)
        ok = np.isfinite(d)
        safe = np.where(ok, i, 0)
        return self._match_idx[safe], ok


def _greedy_thin(pts, min_dist):
    """Keep points in order, dropping any within min_dist of a kept one."""
    if len(pts) == 0:
        return pts
    cell = min_dist
    grid = {}
    kept = []
    for p in pts:
        key = tuple(np.floor(p / cell).astype(int))
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for j in grid.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                        if np.dot(p - kept[j], p - kept[j]) < min_dist * min_dist:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            grid.setdefault(key, []).append(len(kept))
            kept.append(p)
    return np.array(kept).reshape(len(kept), 3)


def map_insert(local_map: LocalMap, scan: RadarScan, pose: Pose) -> LocalMap:
    """Functional alias for LocalMap.insert."""
    local_map.insert(scan, pose)
    return local_map


# ---------------------------------------------------------------------------
# point-to-plane ICP


def icp_point_to_plane(scan: RadarScan, local_map: LocalMap, prior: Pose,
                       dof: str = "full6",
                       cfg: IcpConfig | None = None) -> RegistrationResult:
    """Register a sensor-frame scan against the map from a prior pose.

    dof="yaw_only4" optimizes translation and heading only; roll and pitch
    stay exactly at the prior's values (the rotation is composed as
    Rz(yaw) @ M with M the prior's yaw-free factor, which preserves the
    matrix row roll/pitch are read from bit-for-bit).
    """
    cfg = cfg or IcpConfig()
    if dof not in ("full6", "yaw_only4"):
        raise ValueError(f"unknown dof '{dof}'")
    pts = scan.positions
    R = prior.rot().copy()
    t = prior.p.copy()
    if dof == "yaw_only4":
        yaw0 = euler_zyx(R)[0]
        M_rp = rot_z(-yaw0) @ R
        psi = yaw0
    converged = False
    iterations = 0
    residual = np.inf
    matches = 0
    for iterations in range(1, cfg.max_iterations + 1):
        moved = pts @ R.T + t
        tgt_idx, ok = local_map.match(moved, cfg.max_match_distance)
        matches = int(np.count_nonzero(ok))
        if matches < cfg.min_matches:
            return RegistrationResult(prior, False, iterations, np.inf, matches)
        p = pts[ok]
        q = local_map.points[tgt_idx[ok]]
        n = local_map.normals[tgt_idx[ok]]
        r = np.einsum("ij,ij->i", n, moved[ok] - q)
        w = 1.0 / (1.0 + (r / cfg.cauchy_scale) ** 2)
        Rp = moved[ok] - t
        if dof == "full6":
            # world-side rotation perturbation: d(Exp(dth) R p)/ddth = -[Rp]x,
            # so the residual row is n^T(-[Rp]x) = (Rp x n)^T
            J = np.hstack([n, np.cross(Rp, n)])
        else:
            ez = np.array([0.0, 0.0, 1.0])
            J_psi = np.einsum("ij,ij->i", n, np.cross(ez, Rp))
            J = np.hstack([n, J_psi[:, None]])
        H = (J * w[:, None]).T @ J
        b = (J * w[:, None]).T @ r
        delta = np.linalg.lstsq(H, -b, rcond=None)[0]
        if dof == "full6":
            t = t + delta[0:3]
            R = quat_to_matrix(so3_exp(delta[3:6])) @ R
            step = max(np.linalg.norm(delta[0:3]), np.linalg.norm(delta[3:6]))
        else:
            t = t + delta[0:3]
            psi = psi + delta[3]
            R = rot_z(psi) @ M_rp
            step = max(np.linalg.norm(delta[0:3]), abs(delta[3]))
        residual = float(np.sqrt(np.mean(r ** 2)))
        if step < cfg.update_tol:
            converged = True
            break
    pose = Pose.from_matrix(scan.t, R, t)
    return RegistrationResult(pose, converged, iterations, residual, matches)


def run_icp_odometry(scans, prior_trajectory: Trajectory, dof: str = "full6",
                     cfg: IcpConfig | None = None) -> Trajectory:
    """Scan-to-submap odometry: register each scan against the accumulated
    map, seed with the prior trajectory's relative motion, insert at the
    estimated pose. Non-converged frames fall back to the prior."""
    cfg = cfg or IcpConfig()
    scans = list(scans)
    if len(scans) != len(prior_trajectory):
        raise ValueError("prior trajectory must have one pose per scan")
    for scan, pose in zip(scans, prior_trajectory):
        if abs(scan.t - pose.t) > 1e-9:
            raise ValueError(f"prior timestamp {pose.t} != scan timestamp {scan.t}")
    local_map = LocalMap(cfg.min_point_distance, cfg.normal_k)
    est = [Pose(scans[0].t, prior_trajectory[0].q, prior_trajectory[0].p)]
    local_map.insert(scans[0], est[0])
    for k in range(1, len(scans)):
        rel = pose_compose(pose_inverse(prior_trajectory[k - 1]), prior_trajectory[k])
        prior_k = pose_compose(est[-1], rel)
        result = icp_point_to_plane(scans[k], local_map, prior_k, dof, cfg)
        pose_k = result.pose if result.converged else prior_k
        est.append(pose_k)
        local_map.insert(scans[k], pose_k)
    return Trajectory(est)


# ---------------------------------------------------------------------------
# APDGICP (distribution-to-distribution with radar covariances)


def point_covariances(scan: RadarScan, sensor: SensorModel,
                      cfg: GicpConfig | None = None) -> np.ndarray:
    """Per-point anisotropic covariance: fixed range variance, tangential
    variances growing linearly with range via the angular resolution."""
    cfg = cfg or GicpConfig()
    d = scan.directions()
    r = np.linalg.norm(scan.positions, axis=1)
    ez = np.array([0.0, 0.0, 1.0])
    e_az = np.cross(np.broadcast_to(ez, d.shape), d)
    norms = np.linalg.norm(e_az, axis=1, keepdims=True)
    small = norms[:, 0] < 1e-9
    if np.any(small):
        e_az[small] = np.cross(np.array([1.0, 0, 0]), d[small])
        norms = np.linalg.norm(e_az, axis=1, keepdims=True)
    e_az /= norms
    e_el = np.cross(d, e_az)
    s_az = cfg.angular_scale * np.deg2rad(sensor.res_h) * r
    s_el = cfg.angular_scale * np.deg2rad(sensor.res_v) * r
    s_r = np.full_like(r, sensor.range_sigma)
    cov = (np.einsum("n,ni,nj->nij", np.maximum(s_r, np.sqrt(cfg.cov_floor)) ** 2, d, d)
           + np.einsum("n,ni,nj->nij", np.maximum(s_az, np.sqrt(cfg.cov_floor)) ** 2, e_az, e_az)
           + np.einsum("n,ni,nj->nij", np.maximum(s_el, np.sqrt(cfg.cov_floor)) ** 2, e_el, e_el))
    return cov


def apdgicp(source: RadarScan, target: RadarScan, prior: Pose | None,
            sensor: SensorModel,
            cfg: GicpConfig | None = None) -> RegistrationResult:
    """Generalized ICP between two scans with range-adaptive covariances.

    Returns the pose mapping source-frame points into the target frame.
    The prior seeds the optimization (identity when absent).
    """
    cfg = cfg or GicpConfig()
    t_stamp = source.t
    prior = prior or Pose.identity(t_stamp)
    if len(source) < cfg.min_matches or len(target) < cfg.min_matches:
        return RegistrationResult(prior, False, 0, np.inf, 0)
    cov_s = point_covariances(source, sensor, cfg)
    cov_t = point_covariances(target, sensor, cfg)
    tree = cKDTree(target.positions)
    pts = source.positions
    R = prior.rot().copy()
    t = prior.p.copy()
    converged = False
    iterations = 0
    residual = np.inf
    matches = 0
    for iterations in range(1, cfg.max_iterations + 1):
        moved = pts @ R.T + t
        d, idx = tree.query(moved, k=1, distance_upper_bound=cfg.max_match_distance)
        ok = np.isfinite(d)
        matches = int(np.count_nonzero(ok))
        if matches < cfg.min_matches:
            return RegistrationResult(prior, False, iterations, np.inf, matches)
        p = pts[ok]
        q = target.positions[idx[ok]]
        e = moved[ok] - q
        W = np.linalg.inv(cov_t[idx[ok]] + R @ cov_s[ok] @ R.T)
        # world-side perturbation: d(Exp(dth) R p)/ddth = -[Rp]x
        B = -_skew_batch(p @ R.T)
        H = np.zeros((6, 6))
        g = np.zeros(6)
        WB = np.einsum("nij,njk->nik", W, B)
        H[0:3, 0:3] = W.sum(axis=0)
        H[0:3, 3:6] = WB.sum(axis=0)
        H[3:6, 0:3] = H[0:3, 3:6].T
        H[3:6, 3:6] = np.einsum("nji,njk->ik", B, WB)
        We = np.einsum("nij,nj->ni", W, e)
        g[0:3] = We.sum(axis=0)
        g[3:6] = np.einsum("nji,nj->i", B, We)
        delta = np.linalg.lstsq(H, -g, rcond=None)[0]
        dt = _clamp(delta[0:3], cfg.max_step_t)
        dth = _clamp(delta[3:6], cfg.max_step_r)
        t = t + dt
        R = quat_to_matrix(so3_exp(dth)) @ R
        residual = float(np.sqrt(np.mean(np.einsum("ni,ni->n", e, We))))
        if max(np.linalg.norm(dt), np.linalg.norm(dth)) < cfg.update_tol:
            converged = True
            break
    pose = Pose.from_matrix(t_stamp, R, t)
    return RegistrationResult(pose, converged, iterations, residual, matches)


def _skew_batch(v):
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _clamp(v, limit):
    n = np.linalg.norm(v)
    return v if n <= limit else v * (limit / n)


# ---------------------------------------------------------------------------
# NDT


def _voxel_gaussians(points, cfg: NdtConfig):
    keys = np.floor(points / cfg.voxel_size).astype(np.int64)
    buckets = {}
    for i, key in enumerate(map(tuple, keys)):
        buckets.setdefault(key, []).append(i)
    gauss = {}
    for key, idx in buckets.items():
        if len(idx) < cfg.min_voxel_points:
            continue
        pts = points[idx]
        mu = pts.mean(axis=0)
        centered = pts - mu
        cov = centered.T @ centered / (len(idx) - 1)
        w, v = np.linalg.eigh(cov)
        w = np.maximum(w, max(cfg.eig_floor_rel * w[-1], cfg.eig_floor_abs))
        gauss[key] = (mu, v @ np.diag(1.0 / w) @ v.T)
    return gauss


def ndt_register(source: RadarScan, target: RadarScan, prior: Pose | None,
                 cfg: NdtConfig | None = None) -> RegistrationResult:
    """Point-to-distribution NDT: target binned into voxel Gaussians, source
    points scored under them, pose optimized by Gauss-Newton from the prior."""
    cfg = cfg or NdtConfig()
    t_stamp = source.t
    prior = prior or Pose.identity(t_stamp)
    gauss = _voxel_gaussians(target.positions, cfg)
    if not gauss:
        raise NoValidVoxelsError(
            f"target scan yields no voxel with >= {cfg.min_voxel_points} points")
    pts = source.positions
    R = prior.rot().copy()
    t = prior.p.copy()
    converged = False
    iterations = 0
    residual = np.inf
    matches = 0
    for iterations in range(1, cfg.max_iterations + 1):
        moved = pts @ R.T + t
        keys = np.floor(moved / cfg.voxel_size).astype(np.int64)
        e_list, W_list, p_list = [], [], []
        for i, key in enumerate(map(tuple, keys)):
            g = gauss.get(key)
            if g is None:
                continue
            e_list.append(moved[i] - g[0])
            W_list.append(g[1])
            p_list.append(pts[i])
        matches = len(e_list)
        if matches < cfg.min_matches:
            return RegistrationResult(prior, False, iterations, np.inf, matches)
        e = np.array(e_list)
        W = np.array(W_list)
        p = np.array(p_list)
        B = -_skew_batch(p @ R.T)
        H = np.zeros((6, 6))
        g_vec = np.zeros(6)
        WB = np.einsum("nij,njk->nik", W, B)
        H[0:3, 0:3] = W.sum(axis=0)
        H[0:3, 3:6] = WB.sum(axis=0)
        H[3:6, 0:3] = H[0:3, 3:6].T
        H[3:6, 3:6] = np.einsum("nji,njk->ik", B, WB)
        We = np.einsum("nij,nj->ni", W, e)
        g_vec[0:3] = We.sum(axis=0)
        g_vec[3:6] = np.einsum("nji,nj->i", B, We)
        delta = np.linalg.lstsq(H, -g_vec, rcond=None)[0]
        dt = _clamp(delta[0:3], cfg.max_step_t)
        dth = _clamp(delta[3:6], cfg.max_step_r)
        t = t + dt
        R = quat_to_matrix(so3_exp(dth)) @ R
        residual = float(np.sqrt(np.mean(np.einsum("ni,ni->n", e, We))))
        if max(np.linalg.norm(dt), np.linalg.norm(dth)) < cfg.update_tol:
            converged = True
            break
    pose = Pose.from_matrix(t_stamp, R, t)
    return RegistrationResult(pose, converged, iterations, residual, matches)


# ---------------------------------------------------------------------------
# scan-to-scan odometry


def run_scan_to_scan_odometry(scans, variant: str, sensor: SensorModel,
                              prior_trajectory: Trajectory | None = None,
                              cfg=None) -> Trajectory:
    """Chain per-pair relative poses from apdgicp or ndt."""
    scans = list(scans)
    if len(scans) < 2:
        raise ValueError("scan-to-scan odometry needs >= 2 scans")
    if variant not in ("apdgicp", "ndt"):
        raise ValueError(f"unknown scan-to-scan variant '{variant}'")
    if prior_trajectory is not None and len(prior_trajectory) != len(scans):
        raise ValueError("prior trajectory must have one pose per scan")
    start = (Pose(scans[0].t, prior_trajectory[0].q, prior_trajectory[0].p)
             if prior_trajectory is not None else Pose.identity(scans[0].t))
    est = [start]
    for k in range(1, len(scans)):
        rel_prior = None
        if prior_trajectory is not None:
            rel_prior = pose_compose(pose_inverse(prior_trajectory[k - 1]),
                                     prior_trajectory[k])
        try:
            if variant == "apdgicp":
                result = apdgicp(scans[k], scans[k - 1], rel_prior, sensor, cfg)
            else:
                result = ndt_register(scans[k], scans[k - 1], rel_prior, cfg)
        except NoValidVoxelsError as exc:
            raise NoValidVoxelsError(
                f"frame {k} (t={scans[k].t:.3f}): {exc}") from exc
        rel = result.pose if result.converged else (rel_prior or Pose.identity(scans[k].t))
        pose_k = pose_compose(est[-1], rel)
        est.append(Pose(scans[k].t, pose_k.q, pose_k.p))
    return Trajectory(est)

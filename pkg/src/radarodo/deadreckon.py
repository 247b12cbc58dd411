"""IMU+Doppler dead reckoning: rotate the radar ego-velocity into the world
frame with the AHRS attitude and integrate it between consecutive scans
under a constant-velocity assumption. No scan matching, no filter state, and
deliberately no confidence output.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataio import Extrinsics, Trajectory
from .egovel import (
    EstimationFailedError,
    InsufficientPointsError,
    RansacConfig,
    ransac_ego_velocity,
    velocity_to_body,
)
from .geometry import Pose, quat_rotate, slerp

log = logging.getLogger(__name__)


@dataclass
class DeadReckonConfig:
    on_failure: str = "hold_velocity"   # or "zero_velocity"
    attitude_source: str = "ahrs"       # or "external"
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        if self.on_failure not in ("hold_velocity", "zero_velocity"):
            raise ValueError(f"invalid on_failure '{self.on_failure}'")
        if self.attitude_source not in ("ahrs", "external"):
            raise ValueError(f"invalid attitude_source '{self.attitude_source}'")


class AttitudeInterpolator:
    """Slerp over a time-ordered attitude track, nearest-sample gyro lookup."""

    def __init__(self, times, quats, omegas=None):
        self.times = np.asarray(times, dtype=float)
        if len(self.times) == 0:
            raise ValueError("empty attitude track")
        self.quats = quats
        self.omegas = omegas

    @classmethod
    def from_imu(cls, imu):
        stamped = [(s.t, s.attitude, s.angular_velocity) for s in imu
                   if s.attitude is not None]
        if not stamped:
            raise ValueError("IMU stream carries no AHRS attitude")
        t, q, w = zip(*stamped)
        return cls(np.array(t), list(q), list(w))

    @classmethod
    def from_trajectory(cls, traj):
        return cls(traj.times(), [p.q for p in traj], None)

    def covers(self, t0, t1):
        return self.times[0] <= t0 and t1 <= self.times[-1]

    def attitude(self, t):
        i = int(np.searchsorted(self.times, t))
        if i == 0:
            return self.quats[0]
        if i >= len(self.times):
            return self.quats[-1]
        lo, hi = self.times[i - 1], self.times[i]
        alpha = (t - lo) / (hi - lo)
        return slerp(self.quats[i - 1], self.quats[i], alpha)

    def angular_velocity(self, t):
        if self.omegas is None:
            return np.zeros(3)
        i = int(np.clip(np.searchsorted(self.times, t), 0, len(self.times) - 1))
        if i > 0 and t - self.times[i - 1] < self.times[i] - t:
            i -= 1
        return self.omegas[i]


def integrate_step(pose: Pose, attitude: np.ndarray, v_body: np.ndarray,
                   dt: float) -> Pose:
    """Advance one scan interval: translation += R(attitude) v_body dt."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return Pose(pose.t + dt, attitude, pose.p + quat_rotate(attitude, v_body) * dt)


def run_dead_reckoning(scans, imu, extrinsics: Extrinsics,
                       cfg: DeadReckonConfig | None = None, seed: int = 0,
                       external_attitude: Trajectory | None = None) -> Trajectory:
    """One pose per radar scan, starting at the origin.

    The velocity measured at scan k is applied over [t_{k-1}, t_k] (backward
    rectangle rule). Ego-velocity failures fall back to the configured
    policy; attitude is interpolated to the scan timestamp.
    """
    cfg = cfg or DeadReckonConfig()
    scans = list(scans)
    if not scans:
        raise ValueError("empty scan stream")
    if cfg.attitude_source == "external":
        if external_attitude is None:
            raise ValueError("attitude_source=external requires a trajectory")
        att = AttitudeInterpolator.from_trajectory(external_attitude)
    else:
        att = AttitudeInterpolator.from_imu(list(imu))
    if not att.covers(scans[0].t, scans[-1].t):
        raise ValueError("attitude track does not cover the scan interval")

    seeds = np.random.SeedSequence(seed).generate_state(len(scans))
    poses = []
    pose = None
    held_velocity = np.zeros(3)
    failures = 0
    for k, scan in enumerate(scans):
        attitude = att.attitude(scan.t)
        try:
            est = ransac_ego_velocity(scan, cfg.ransac, seed=int(seeds[k]))
            est = velocity_to_body(est, extrinsics, att.angular_velocity(scan.t))
            v_body = est.velocity
            held_velocity = v_body
        except (EstimationFailedError, InsufficientPointsError) as exc:
            failures += 1
            log.warning("scan %d (t=%.3f): ego-velocity failed (%s); policy=%s",
                        k, scan.t, exc, cfg.on_failure)
            v_body = held_velocity if cfg.on_failure == "hold_velocity" else np.zeros(3)
            if cfg.on_failure == "zero_velocity":
                held_velocity = np.zeros(3)
        if pose is None:
            pose = Pose(scan.t, attitude, np.zeros(3))
        else:
            pose = integrate_step(pose, attitude, v_body, scan.t - pose.t)
        poses.append(pose)
    if failures:
        log.info("dead reckoning: %d/%d scans fell back to %s",
                 failures, len(scans), cfg.on_failure)
    return Trajectory(poses)

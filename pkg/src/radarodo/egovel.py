"""Ego-velocity from a single Doppler scan: least squares inside 3-point RANSAC.

Measurement model per static target i with unit direction d_i (sensor to
target) and radial velocity r_i (positive receding):

    d_i . v + r_i = 0

so v solves  argmin sum (d_i . v + r_i)^2.  RANSAC draws minimal 3-point
hypotheses, scores consensus by |d . v + r| < threshold, and refits the best
consensus set by least squares.
"""

from dataclasses import dataclass

import numpy as np

from .dataio import Extrinsics, RadarScan
from .geometry import quat_rotate

_COND_LIMIT = 1e6  # direction matrices worse than this are degenerate


class InsufficientPointsError(Exception):
    pass


class DegenerateGeometryError(Exception):
    def __init__(self, cond):
        super().__init__(f"direction matrix condition number {cond:.3g} "
                         f"exceeds {_COND_LIMIT:.0e} (coplanar geometry)")
        self.cond = float(cond)


class EstimationFailedError(Exception):
    """No consensus set reached the configured inlier ratio."""


@dataclass
class RansacConfig:
    inlier_threshold: float = 0.2      # m/s
    max_iterations: int = 100
    min_inlier_ratio: float = 0.2
    success_probability: float = 0.999
    doppler_sigma: float = 0.05        # m/s, floor for the residual variance

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if not (0 < self.min_inlier_ratio < 1 and 0 < self.success_probability < 1):
            raise ValueError("ratios must lie in (0, 1)")


@dataclass
class EgoVelocityEstimate:
    t: float
    velocity: np.ndarray       # (3,) m/s, sensor frame
    covariance: np.ndarray     # (3, 3)
    inlier_count: int
    inlier_mask: np.ndarray    # (N,) bool


def _direction_cond(A):
    """Condition number of the direction matrix via its 3x3 normal matrix."""
    w = np.linalg.eigvalsh(A.T @ A)
    lo = max(float(w[0]), 0.0)
    if lo == 0.0:
        return np.inf
    return float(np.sqrt(w[-1] / lo))


def lsq_velocity(directions: np.ndarray, dopplers: np.ndarray,
                 doppler_sigma: float = 0.05):
    """Normal-equation solve; returns (velocity, covariance).

    The residual variance estimate is floored at doppler_sigma^2 (and set to
    it outright for minimal 3-point sets) so perfectly consistent scans do
    not produce a zero covariance.
    """
    A = np.asarray(directions, dtype=float)
    r = np.asarray(dopplers, dtype=float)
    n = len(r)
    if n < 3:
        raise InsufficientPointsError(f"need >= 3 points, got {n}")
    cond = _direction_cond(A)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise DegenerateGeometryError(cond)
    AtA = A.T @ A
    v = np.linalg.solve(AtA, -(A.T @ r))
    if n == 3:
        sigma2 = doppler_sigma ** 2
    else:
        rss = float(np.sum((A @ v + r) ** 2))
        sigma2 = max(rss / (n - 3), doppler_sigma ** 2)
    cov = sigma2 * np.linalg.inv(AtA)
    return v, cov


def ransac_ego_velocity(scan: RadarScan, cfg: RansacConfig | None = None,
                        seed: int = 0) -> EgoVelocityEstimate:
    """3-point RANSAC around lsq_velocity; deterministic for a fixed seed."""
    cfg = cfg or RansacConfig()
    n = len(scan)
    if n < 3:
        raise InsufficientPointsError(f"scan has {n} points, need >= 3")
    dirs = scan.directions()
    dop = scan.doppler
    rng = np.random.default_rng(seed)

    best_mask = None
    best_count = 2
    bound = cfg.max_iterations
    i = 0
    while i < bound:
        i += 1
        idx = rng.choice(n, 3, replace=False)
        A = dirs[idx]
        cond = _direction_cond(A)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            continue
        v = np.linalg.solve(A, -dop[idx])
        mask = np.abs(dirs @ v + dop) < cfg.inlier_threshold
        count = int(np.count_nonzero(mask))
        if count > best_count:
            best_count = count
            best_mask = mask
            # adaptive bound: enough draws to hit an all-inlier sample with
            # probability success_probability at the current inlier ratio
            w = count / n
            if w >= 1.0:
                bound = i
            else:
                denom = np.log1p(-w ** 3)
                if denom < 0:
                    bound = min(bound, int(np.ceil(
                        np.log1p(-cfg.success_probability) / denom)))

    if best_mask is None or best_count < cfg.min_inlier_ratio * n:
        raise EstimationFailedError(
            f"best consensus {best_count}/{n} below ratio {cfg.min_inlier_ratio}")
    # refit and re-select until the consensus set settles: the band must be
    # centered on the fitted model, not the noisy 3-point hypothesis, or the
    # truncation biases the estimate by a few sigma/sqrt(N)
    mask = best_mask
    v = cov = None
    for _ in range(4):
        try:
            v, cov = lsq_velocity(dirs[mask], dop[mask], cfg.doppler_sigma)
        except (DegenerateGeometryError, InsufficientPointsError):
            raise EstimationFailedError("consensus set geometry is degenerate") from None
        refined = np.abs(dirs @ v + dop) < cfg.inlier_threshold
        if np.array_equal(refined, mask):
            break
        mask = refined
    count = int(np.count_nonzero(mask))
    if count < cfg.min_inlier_ratio * n:
        raise EstimationFailedError(
            f"refined consensus {count}/{n} below ratio {cfg.min_inlier_ratio}")
    return EgoVelocityEstimate(scan.t, v, cov, count, mask)


def velocity_to_body(est: EgoVelocityEstimate, extrinsics: Extrinsics,
                     omega_body: np.ndarray) -> EgoVelocityEstimate:
    """Express a radar-frame estimate at the IMU body origin.

    v_body = R_body_radar v_radar - omega x lever, with the lever arm the
    radar origin in the body frame; the covariance rotates congruently.
    """
    R_rb = extrinsics.radar_from_imu.rot()
    lever = extrinsics.lever_arm()
    v_body = R_rb.T @ est.velocity - np.cross(np.asarray(omega_body, float), lever)
    cov = R_rb.T @ est.covariance @ R_rb
    return EgoVelocityEstimate(est.t, v_body, cov, est.inlier_count, est.inlier_mask)

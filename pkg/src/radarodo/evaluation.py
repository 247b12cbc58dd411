"""Trajectory metrics: timestamp association, rigid alignment, APE, and RPE
over fixed path-distance steps. Translation RPE is reported as a percentage
of the step, rotation RPE in absolute degrees; step windows are disjoint and
measured along the reference trajectory.
"""

from dataclasses import dataclass

import numpy as np

from .dataio import Trajectory
from .geometry import Pose, pose_compose, pose_inverse, so3_log


class AssociationError(Exception):
    pass


class DegenerateTrajectoryError(Exception):
    pass


@dataclass
class EvalStats:
    errors: np.ndarray
    rmse: float
    mean: float
    median: float
    max: float
    count: int

    @classmethod
    def from_errors(cls, errors) -> "EvalStats":
        errors = np.asarray(errors, dtype=float)
        if len(errors) == 0:
            raise ValueError("no error samples")
        return cls(errors,
                   rmse=float(np.sqrt(np.mean(errors ** 2))),
                   mean=float(np.mean(errors)),
                   median=float(np.median(errors)),
                   max=float(np.max(errors)),
                   count=len(errors))


def associate(traj_a: Trajectory, traj_b: Trajectory, max_dt: float):
    """Greedy nearest-timestamp pairing, each pose used at most once."""
    if len(traj_a) == 0 or len(traj_b) == 0:
        raise AssociationError("empty trajectory")
    ta, tb = traj_a.times(), traj_b.times()
    candidates = []
    for i, t in enumerate(ta):
        j = int(np.searchsorted(tb, t))
        for jj in (j - 1, j):
            if 0 <= jj < len(tb) and abs(tb[jj] - t) <= max_dt:
                candidates.append((abs(tb[jj] - t), i, jj))
    candidates.sort()
    used_a, used_b = set(), set()
    pairs = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    if not pairs:
        raise AssociationError(
            f"no timestamp pairs within {max_dt} s between trajectories")
    pairs.sort()
    return pairs


def umeyama_align(est: Trajectory, ref: Trajectory,
                  max_dt: float | None = None) -> Pose:
    """Closed-form rigid transform (no scale) minimizing sum |T p_est - p_ref|^2.

    Collinear position sets still return the SVD minimizer (the component
    about the degenerate axis is arbitrary but cost-optimal); fully
    coincident sets are rejected.
    """
    pairs = associate(est, ref, np.inf if max_dt is None else max_dt)
    if len(pairs) < 3:
        raise DegenerateTrajectoryError("need >= 3 associated poses")
    p_est = np.array([est[i].p for i, _ in pairs])
    p_ref = np.array([ref[j].p for _, j in pairs])
    mu_e = p_est.mean(axis=0)
    mu_r = p_ref.mean(axis=0)
    C = (p_ref - mu_r).T @ (p_est - mu_e) / len(pairs)
    if not np.any(np.abs(C) > 1e-15):
        raise DegenerateTrajectoryError("coincident position sets")
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_r - R @ mu_e
    return Pose.from_matrix(0.0, R, t)


def ape_translation(est: Trajectory, ref: Trajectory,
                    max_dt: float | None = None) -> EvalStats:
    """Absolute position error after rigid alignment of est onto ref."""
    pairs = associate(est, ref, np.inf if max_dt is None else max_dt)
    T = umeyama_align(est, ref, np.inf if max_dt is None else max_dt)
    R, t = T.rot(), T.p
    errors = [np.linalg.norm(R @ est[i].p + t - ref[j].p) for i, j in pairs]
    return EvalStats.from_errors(errors)


def _path_steps(ref, idx_pairs, step):
    """Disjoint index windows whose reference path length first reaches step."""
    ref_pts = np.array([ref[j].p for _, j in idx_pairs])
    seg = np.linalg.norm(np.diff(ref_pts, axis=0), axis=1)
    windows = []
    i = 0
    while i < len(idx_pairs) - 1:
        acc = 0.0
        j = i
        while j < len(idx_pairs) - 1:
            acc += seg[j]
            j += 1
            if acc >= step:
                break
        if acc < step:
            break
        windows.append((i, j))
        i = j
    return windows


def rpe(est: Trajectory, ref: Trajectory, step: float,
        max_dt: float | None = None):
    """Relative pose error over path-distance steps.

    Returns (translation stats in percent of step, rotation stats in deg).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    pairs = associate(est, ref, np.inf if max_dt is None else max_dt)
    windows = _path_steps(ref, pairs, step)
    if not windows:
        raise DegenerateTrajectoryError(
            f"reference path shorter than one {step} m step")
    trans, rot = [], []
    for a, b in windows:
        ia, ja = pairs[a]
        ib, jb = pairs[b]
        rel_ref = pose_compose(pose_inverse(ref[ja]), ref[jb])
        rel_est = pose_compose(pose_inverse(est[ia]), est[ib])
        err = pose_compose(pose_inverse(rel_ref), rel_est)
        trans.append(np.linalg.norm(err.p) / step * 100.0)
        rot.append(np.rad2deg(np.linalg.norm(so3_log(err.q))))
    return EvalStats.from_errors(trans), EvalStats.from_errors(rot)


def write_error_samples(stats: EvalStats, path: str, label: str = "error"):
    """Per-sample CSV; stats are recomputable from it bit-exactly."""
    with open(path, "w") as f:
        f.write(f"index,{label}\n")
        for i, e in enumerate(stats.errors):
            f.write(f"{i},{float(e)!r}\n")


def read_error_samples(path: str) -> EvalStats:
    with open(path, "r") as f:
        rows = f.read().splitlines()[1:]
    return EvalStats.from_errors([float(r.split(",")[1]) for r in rows if r])


def summary_row(stats: EvalStats) -> dict:
    return {"rmse": stats.rmse, "mean": stats.mean, "median": stats.median,
            "max": stats.max, "count": stats.count}

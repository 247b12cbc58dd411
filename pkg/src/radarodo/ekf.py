"""Loosely-coupled error-state Kalman filter: IMU strapdown propagation with
Doppler ego-velocity updates.

Nominal state: position p, velocity v (world), attitude q (world-from-body),
gyro bias bg, accel bias ba. The 15-dim error state is
[dp, dv, dtheta, dbg, dba] with a multiplicative body-side attitude error
(q_true = q ⊗ Exp(dtheta)).

Discrete propagation over one IMU step dt with w = gyro - bg, f = accel - ba:

    q <- q ⊗ Exp(w dt)
    v <- v + (R f + g) dt
    p <- p + v dt + 0.5 (R f + g) dt^2

Error transition blocks (R the pre-update attitude matrix):

    dp     <- dp + dv dt - 0.5 R [f]x dtheta dt^2 - 0.5 R dba dt^2
    dv     <- dv - R [f]x dtheta dt - R dba dt
    dtheta <- Exp(w dt)^T dtheta - Jr(w dt) dbg dt
    biases <- random walk

Ego-velocity measurements arrive with a configurable lag and are applied to
the *current* state without recomputing the past, reproducing the behavior
of trigger-less operation; lag 0 gives the idealized filter.
"""

from dataclasses import dataclass, field

import numpy as np

from .dataio import Extrinsics, Trajectory
from .egovel import (
    EgoVelocityEstimate,
    EstimationFailedError,
    InsufficientPointsError,
    RansacConfig,
    ransac_ego_velocity,
    velocity_to_body,
)
from .geometry import (
    GRAVITY_W,
    Pose,
    quat_mul,
    quat_to_matrix,
    skew,
    so3_exp,
)

# chi-square 0.999 quantile, 3 degrees of freedom
CHI2_3DOF_999 = 16.266


@dataclass
class EkfConfig:
    gyro_noise: float = 1e-4          # rad/s/sqrt(Hz)
    accel_noise: float = 1.5e-3       # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 2e-6
    accel_bias_walk: float = 4e-5
    init_pos_std: float = 1e-6        # odometry frame is pinned at the origin
    init_vel_std: float = 0.05
    init_att_std: float = 0.02        # rad, roll/pitch from standstill accel
    init_yaw_std: float = 1e-4        # yaw defines the odometry frame
    init_bg_std: float = 2e-4
    init_ba_std: float = 0.05
    doppler_noise_scale: float = 1.0  # >= 1; the dampening knob
    meas_noise_floor: float = 0.05    # m/s, added in quadrature per axis;
                                      # covers model mismatch (lag, vibration)
                                      # that the LSQ covariance cannot see
    measurement_lag: float = 0.1      # s; 0 gives the idealized filter
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY_W.copy())
    outlier_gate_chi2: float = CHI2_3DOF_999
    init_duration: float = 1.0        # s of assumed standstill
    standstill_gyro_std: float = 0.01   # rad/s, detection threshold
    standstill_accel_std: float = 0.1   # m/s^2
    initial_attitude: np.ndarray = field(
        default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        for name in ("gyro_noise", "accel_noise", "gyro_bias_walk", "accel_bias_walk"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.measurement_lag < 0:
            raise ValueError("measurement_lag must be >= 0")
        if self.doppler_noise_scale < 1.0:
            raise ValueError("doppler_noise_scale must be >= 1")

    @classmethod
    def from_noise_model(cls, noise, **overrides):
        """Match the filter's process noise to a synth NoiseModel."""
        kw = dict(gyro_noise=max(noise.gyro_sigma, 1e-6),
                  accel_noise=max(noise.accel_sigma, 1e-5),
                  gyro_bias_walk=max(noise.gyro_bias_walk, 1e-9),
                  accel_bias_walk=max(noise.accel_bias_walk, 1e-8))
        kw.update(overrides)
        return cls(**kw)


@dataclass
class EkfState:
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    bg: np.ndarray
    ba: np.ndarray
    P: np.ndarray  # 15x15
    t: float

    @classmethod
    def initial(cls, t, q0, cfg: EkfConfig, bg0=None):
        P = np.zeros((15, 15))
        P[0:3, 0:3] = np.eye(3) * cfg.init_pos_std ** 2
        P[3:6, 3:6] = np.eye(3) * cfg.init_vel_std ** 2
        P[6:9, 6:9] = np.diag([cfg.init_att_std ** 2, cfg.init_att_std ** 2,
                               cfg.init_yaw_std ** 2])
        P[9:12, 9:12] = np.eye(3) * cfg.init_bg_std ** 2
        P[12:15, 12:15] = np.eye(3) * cfg.init_ba_std ** 2
        return cls(np.zeros(3), np.zeros(3), np.asarray(q0, dtype=float),
                   np.zeros(3) if bg0 is None else np.asarray(bg0, dtype=float),
                   np.zeros(3), P, float(t))

    def pose(self) -> Pose:
        return Pose(self.t, self.q, self.p)


def _right_jacobian(theta):
    """Right Jacobian of SO(3) at rotation vector theta."""
    t2 = float(theta @ theta)
    S = skew(theta)
    if t2 < 1e-12:
        return np.eye(3) - 0.5 * S + S @ S / 6.0
    t = np.sqrt(t2)
    return (np.eye(3) - (1.0 - np.cos(t)) / t2 * S
            + (t - np.sin(t)) / (t2 * t) * (S @ S))


def propagation_jacobian(state: EkfState, imu, dt: float) -> np.ndarray:
    """Discrete 15x15 error-state transition for one strapdown step."""
    w = imu.angular_velocity - state.bg
    f = imu.linear_acceleration - state.ba
    R = quat_to_matrix(state.q)
    dtheta = w * dt
    F = np.eye(15)
    Rfx = R @ skew(f)
    F[0:3, 3:6] = np.eye(3) * dt
    F[0:3, 6:9] = -0.5 * Rfx * dt * dt
    F[0:3, 12:15] = -0.5 * R * dt * dt
    F[3:6, 6:9] = -Rfx * dt
    F[3:6, 12:15] = -R * dt
    F[6:9, 6:9] = quat_to_matrix(so3_exp(dtheta)).T
    F[6:9, 9:12] = -_right_jacobian(dtheta) * dt
    return F


def propagate(state: EkfState, imu, dt: float, cfg: EkfConfig) -> EkfState:
    """One strapdown step with covariance propagation."""
    if dt <= 0 or dt > 0.1:
        raise ValueError(f"propagation step dt={dt} outside (0, 0.1] s")
    w = imu.angular_velocity - state.bg
    f = imu.linear_acceleration - state.ba
    R = quat_to_matrix(state.q)
    dtheta = w * dt
    # midpoint attitude for the specific-force rotation: the zero-order hold
    # otherwise leaves rotation-rate-proportional velocity transients that
    # measurement updates would misattribute to attitude error
    R_mid = quat_to_matrix(quat_mul(state.q, so3_exp(0.5 * dtheta)))
    a_world = R_mid @ f + cfg.gravity

    q_new = quat_mul(state.q, so3_exp(dtheta))
    v_new = state.v + a_world * dt
    p_new = state.p + state.v * dt + 0.5 * a_world * dt * dt

    F = propagation_jacobian(state, imu, dt)
    Q = np.zeros((15, 15))
    Q[3:6, 3:6] = np.eye(3) * cfg.accel_noise ** 2 * dt
    Q[6:9, 6:9] = np.eye(3) * cfg.gyro_noise ** 2 * dt
    Q[9:12, 9:12] = np.eye(3) * cfg.gyro_bias_walk ** 2 * dt
    Q[12:15, 12:15] = np.eye(3) * cfg.accel_bias_walk ** 2 * dt
    P = F @ state.P @ F.T + Q
    P = 0.5 * (P + P.T)
    return EkfState(p_new, v_new, q_new, state.bg.copy(), state.ba.copy(),
                    P, state.t + dt)


def update_doppler(state: EkfState, est: EgoVelocityEstimate,
                   cfg: EkfConfig):
    """Body-frame velocity update; returns (state, accepted).

    Gated measurements are skipped; an infinite doppler_noise_scale disables
    updates entirely so the filter reduces to pure IMU integration.
    """
    if not np.isfinite(cfg.doppler_noise_scale):
        return state, False
    R = quat_to_matrix(state.q)
    v_body = R.T @ state.v
    y = est.velocity - v_body
    H = np.zeros((3, 15))
    H[:, 3:6] = R.T
    H[:, 6:9] = skew(v_body)
    R_meas = (est.covariance
              + np.eye(3) * cfg.meas_noise_floor ** 2) * cfg.doppler_noise_scale
    S = H @ state.P @ H.T + R_meas
    S_inv = np.linalg.inv(S)
    m2 = float(y @ S_inv @ y)
    if m2 > cfg.outlier_gate_chi2:
        return state, False
    K = state.P @ H.T @ S_inv
    dx = K @ y
    IKH = np.eye(15) - K @ H
    P = IKH @ state.P @ IKH.T + K @ R_meas @ K.T
    P = 0.5 * (P + P.T)
    return EkfState(
        state.p + dx[0:3],
        state.v + dx[3:6],
        quat_mul(state.q, so3_exp(dx[6:9])),
        state.bg + dx[9:12],
        state.ba + dx[12:15],
        P, state.t), True


@dataclass
class EkfDiagnostics:
    init_from_standstill: bool
    gate_count: int = 0
    update_count: int = 0
    failed_scans: int = 0
    bias_times: list = field(default_factory=list)
    gyro_bias: list = field(default_factory=list)
    accel_bias: list = field(default_factory=list)
    min_p_eig: float = np.inf


def _standstill_init(imu, cfg: EkfConfig):
    window = [s for s in imu if s.t <= imu[0].t + cfg.init_duration]
    if len(window) < 5:
        return None
    gyro = np.stack([s.angular_velocity for s in window])
    acc = np.stack([s.linear_acceleration for s in window])
    if (np.max(np.std(gyro, axis=0)) > cfg.standstill_gyro_std
            or np.max(np.std(acc, axis=0)) > cfg.standstill_accel_std):
        return None
    f = acc.mean(axis=0)
    g = np.linalg.norm(cfg.gravity)
    pitch = -np.arcsin(np.clip(f[0] / g, -1.0, 1.0))
    roll = np.arctan2(f[1], f[2])
    q0 = quat_mul(so3_exp(np.array([0.0, pitch, 0.0])),
                  so3_exp(np.array([roll, 0.0, 0.0])))
    q0 = quat_mul(np.array([1.0, 0, 0, 0]), q0)
    bg0 = gyro.mean(axis=0)
    return window[-1].t, q0, bg0


def run_ekf(scans, imu, extrinsics: Extrinsics, cfg: EkfConfig | None = None,
            seed: int = 0, check_psd: bool = False):
    """Full pipeline; returns (Trajectory, EkfDiagnostics).

    IMU-rate propagation; each scan's ego-velocity is applied at
    scan time + measurement_lag against whatever the state is then. The
    trajectory is sampled exactly at the scan timestamps.
    """
    cfg = cfg or EkfConfig()
    scans = list(scans)
    imu = list(imu)
    if not scans or not imu:
        raise ValueError("empty scan or IMU stream")
    init = _standstill_init(imu, cfg)
    if init is None:
        t_start = imu[0].t + cfg.init_duration
        state = EkfState.initial(t_start, cfg.initial_attitude, cfg)
        diag = EkfDiagnostics(init_from_standstill=False)
    else:
        t_start, q0, bg0 = init
        state = EkfState.initial(t_start, q0, cfg, bg0=bg0)
        diag = EkfDiagnostics(init_from_standstill=True)

    # ego-velocity measurements, each due at scan time + lag and applied at
    # the first filter step from then on (the filter runs on the IMU clock)
    seeds = np.random.SeedSequence(seed).generate_state(len(scans))
    pending = []
    for k, scan in enumerate(scans):
        if scan.t < t_start:
            continue
        try:
            est = ransac_ego_velocity(scan, cfg.ransac, seed=int(seeds[k]))
        except (EstimationFailedError, InsufficientPointsError):
            diag.failed_scans += 1
            continue
        pending.append((scan.t + cfg.measurement_lag, est))
    pending.sort(key=lambda item: item[0])

    poses = {}
    for scan in scans:
        if scan.t <= t_start:
            poses[scan.t] = Pose(scan.t, state.q, np.zeros(3))
    sample_times = sorted(s.t for s in scans if s.t > t_start)

    state_box = [state]

    def track_psd():
        if check_psd:
            diag.min_p_eig = min(diag.min_p_eig,
                                 float(np.linalg.eigvalsh(state_box[0].P)[0]))

    pend_i = [0]

    def apply_due(cur_input):
        while pend_i[0] < len(pending) and pending[pend_i[0]][0] <= state_box[0].t:
            est = pending[pend_i[0]][1]
            omega = cur_input.angular_velocity - state_box[0].bg
            est_body = velocity_to_body(est, extrinsics, omega)
            new_state, accepted = update_doppler(state_box[0], est_body, cfg)
            state_box[0] = new_state
            track_psd()
            if accepted:
                diag.update_count += 1
                diag.bias_times.append(new_state.t)
                diag.gyro_bias.append(new_state.bg.copy())
                diag.accel_bias.append(new_state.ba.copy())
            elif np.isfinite(cfg.doppler_noise_scale):
                diag.gate_count += 1
            pend_i[0] += 1

    def advance_to(t_next, cur_input):
        """Propagate to t_next, stopping at scan sample times on the way."""
        nonlocal samp_i
        while state_box[0].t < t_next:
            t_sub = t_next
            if samp_i < len(sample_times) and sample_times[samp_i] <= t_next:
                t_sub = sample_times[samp_i]
            if t_sub > state_box[0].t:
                state_box[0] = propagate(state_box[0], cur_input,
                                         t_sub - state_box[0].t, cfg)
                track_psd()
            apply_due(cur_input)
            if samp_i < len(sample_times) and sample_times[samp_i] == state_box[0].t:
                poses[state_box[0].t] = state_box[0].pose()
                samp_i += 1

    samp_i = 0
    boundaries = [s for s in imu if s.t > t_start]
    pre = [s for s in imu if s.t <= t_start]
    cur_input = pre[-1] if pre else imu[0]
    for sample in boundaries:
        advance_to(sample.t, cur_input)
        apply_due(cur_input)
        cur_input = sample
    # scan timestamps just past the IMU stream, reachable within one step
    while (samp_i < len(sample_times)
           and sample_times[samp_i] - state_box[0].t <= 0.1):
        advance_to(sample_times[samp_i], cur_input)

    traj = Trajectory([poses[t] for t in sorted(poses)])
    return traj, diag


def run_pure_imu(scans, imu, extrinsics, cfg: EkfConfig | None = None,
                 seed: int = 0):
    """The same pipeline with updates disabled (infinite measurement noise)."""
    from dataclasses import replace
    cfg = replace(cfg or EkfConfig(), doppler_noise_scale=np.inf)
    return run_ekf(scans, imu, extrinsics, cfg, seed)

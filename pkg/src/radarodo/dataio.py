"""On-disk session format and trajectory files.

A session is a directory:

    imu.csv            t,wx,wy,wz,ax,ay,az,qw,qx,qy,qz   (quat fields empty
                       when no AHRS attitude is available for that sample)
    scans/<t>.csv      x,y,z,doppler,power; the filename is the scan
                       timestamp printed with 6 decimals
    ground_truth.csv   t,x,y,z,qw,qx,qy,qz               (optional)
    extrinsics.csv     x,y,z,qw,qx,qy,qz                 (radar_from_imu)
    sensor.csv         sensor model row, see SENSOR_HEADER

Trajectory outputs use the ground-truth schema. All numeric fields are
written with %.17g so a read/write round trip is bit exact; scan timestamps
must therefore sit on the 1-microsecond grid that the filename encodes.
Doppler sign is normalized to positive-receding on read when the sensor row
sets doppler_flip=1.
"""

import os
from dataclasses import dataclass, field, fields

import numpy as np

from .geometry import Pose

FLOAT_FMT = "%.17g"

IMU_HEADER = "t,wx,wy,wz,ax,ay,az,qw,qx,qy,qz"
SCAN_HEADER = "x,y,z,doppler,power"
TRAJ_HEADER = "t,x,y,z,qw,qx,qy,qz"
EXTRINSICS_HEADER = "x,y,z,qw,qx,qy,qz"
SENSOR_HEADER = ("fov_h,fov_v,res_h,res_v,res_range,max_range,rate,"
                 "doppler_sigma,range_sigma,oversample,doppler_flip")


class DataFormatError(Exception):
    """Malformed or inconsistent session data; message names file and line."""


@dataclass
class RadarPoint:
    position: np.ndarray  # (3,) m, sensor frame
    doppler: float        # m/s, radial, positive = receding
    power: float          # dB


class RadarScan:
    """One radar frame, stored as arrays: positions (N,3), doppler (N), power (N)."""

    __slots__ = ("t", "positions", "doppler", "power")

    def __init__(self, t, positions, doppler, power):
        self.t = float(t)
        self.positions = np.atleast_2d(np.asarray(positions, dtype=float))
        self.doppler = np.asarray(doppler, dtype=float)
        self.power = np.asarray(power, dtype=float)
        if self.positions.shape != (len(self.doppler), 3):
            raise ValueError("positions must be (N, 3) matching doppler length")

    @classmethod
    def from_points(cls, t, points):
        if not points:
            return cls(t, np.zeros((0, 3)), np.zeros(0), np.zeros(0))
        return cls(t,
                   np.stack([p.position for p in points]),
                   np.array([p.doppler for p in points]),
                   np.array([p.power for p in points]))

    def point(self, i: int) -> RadarPoint:
        return RadarPoint(self.positions[i], float(self.doppler[i]), float(self.power[i]))

    def directions(self) -> np.ndarray:
        """Unit directions from the sensor to each point."""
        r = np.linalg.norm(self.positions, axis=1)
        return self.positions / r[:, None]

    def __len__(self):
        return len(self.doppler)


@dataclass
class ImuSample:
    t: float
    angular_velocity: np.ndarray      # rad/s, body
    linear_acceleration: np.ndarray   # m/s^2, body, specific force (includes gravity)
    attitude: np.ndarray | None = None  # AHRS world-from-body quaternion, optional


@dataclass
class Extrinsics:
    """Rigid mount: maps IMU-body coordinates into the radar frame."""

    radar_from_imu: Pose

    @classmethod
    def identity(cls):
        return cls(Pose.identity())

    @classmethod
    def from_mount(cls, q_body_from_radar, radar_position_in_body):
        """Build from the radar's mount pose expressed in the body frame."""
        from .geometry import quat_conj, quat_rotate
        q_rb = quat_conj(np.asarray(q_body_from_radar, dtype=float))
        t = -quat_rotate(q_rb, np.asarray(radar_position_in_body, dtype=float))
        return cls(Pose(0.0, q_rb, t))

    def lever_arm(self) -> np.ndarray:
        """Radar origin expressed in the IMU body frame."""
        p = self.radar_from_imu
        return -(p.rot().T @ p.p)


class Trajectory:
    """Time-ordered 6-DOF poses; the universal pipeline output."""

    def __init__(self, poses):
        self.poses = list(poses)
        ts = [p.t for p in self.poses]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def times(self) -> np.ndarray:
        return np.array([p.t for p in self.poses])

    def positions(self) -> np.ndarray:
        return np.array([p.p for p in self.poses]).reshape(len(self.poses), 3)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)


@dataclass
class SensorModel:
    """Imaging-radar sampling model.

    oversample subdivides each resolution cell to approximate the multiple
    detections per beam that real sensors report; it is part of the sensor
    row so a dataset pins its own density.
    """

    fov_h: float = 80.0       # deg
    fov_v: float = 30.0       # deg
    res_h: float = 1.25       # deg
    res_v: float = 1.7        # deg
    res_range: float = 0.1    # m
    max_range: float = 42.0   # m
    rate: float = 16.0        # Hz
    doppler_sigma: float = 0.05  # m/s
    range_sigma: float = 0.05    # m
    oversample: int = 3
    doppler_flip: bool = False

    def __post_init__(self):
        for name in ("fov_h", "fov_v", "res_h", "res_v", "res_range",
                     "max_range", "rate", "doppler_sigma", "range_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"sensor field {name} must be positive")
        if self.fov_h > 360 or self.fov_v > 180:
            raise ValueError("sensor FOV out of range")
        if self.oversample < 1:
            raise ValueError("oversample must be >= 1")


@dataclass
class Dataset:
    scans: list
    imu: list
    ground_truth: Trajectory | None
    extrinsics: Extrinsics
    sensor: SensorModel


def _fmt(x: float) -> str:
    return FLOAT_FMT % x


def _require_monotonic(ts, what, path):
    ts = np.asarray(ts)
    if len(ts) > 1 and np.any(np.diff(ts) <= 0):
        i = int(np.argmax(np.diff(ts) <= 0))
        raise DataFormatError(f"{path}: {what} timestamps not strictly increasing "
                              f"around entry {i + 1}")


def _parse_rows(path, header, n_cols, optional_tail=0):
    """Parse a CSV with strict column counts; report file and line on errors."""
    with open(path, "r") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != header:
        raise DataFormatError(f"{path}:1: expected header '{header}'")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if not (n_cols - optional_tail <= len(parts) <= n_cols):
            raise DataFormatError(f"{path}:{ln}: expected {n_cols} columns, got {len(parts)}")
        try:
            row = [float(p) if p != "" else np.nan for p in parts]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{ln}: {exc}") from None
        row += [np.nan] * (n_cols - len(row))
        rows.append(row)
    return np.array(rows, dtype=float).reshape(len(rows), n_cols)


def scan_filename(t: float) -> str:
    return f"{t:.6f}.csv"


def _check_microsecond_grid(t: float, what: str):
    if float(f"{t:.6f}") != t:
        raise DataFormatError(
            f"{what} timestamp {t!r} is not on the microsecond grid the "
            f"scan filename encodes")


def write_scan(scan: RadarScan, scans_dir: str):
    _check_microsecond_grid(scan.t, "scan")
    rows = [SCAN_HEADER]
    for i in range(len(scan)):
        p = scan.positions[i]
        rows.append(",".join((_fmt(p[0]), _fmt(p[1]), _fmt(p[2]),
                              _fmt(scan.doppler[i]), _fmt(scan.power[i]))))
    with open(os.path.join(scans_dir, scan_filename(scan.t)), "w") as f:
        f.write("\n".join(rows) + "\n")


def read_scan(path: str) -> RadarScan:
    t = float(os.path.basename(path)[:-4])
    data = _parse_rows(path, SCAN_HEADER, 5)
    return RadarScan(t, data[:, 0:3], data[:, 3], data[:, 4])


def write_imu(samples, path: str):
    rows = [IMU_HEADER]
    for s in samples:
        base = [_fmt(s.t)] + [_fmt(v) for v in s.angular_velocity] \
            + [_fmt(v) for v in s.linear_acceleration]
        if s.attitude is None:
            base += ["", "", "", ""]
        else:
            base += [_fmt(v) for v in s.attitude]
        rows.append(",".join(base))
    with open(path, "w") as f:
        f.write("\n".join(rows) + "\n")


def read_imu(path: str) -> list:
    data = _parse_rows(path, IMU_HEADER, 11)
    _require_monotonic(data[:, 0], "imu", path)
    samples = []
    for row in data:
        att = None if np.any(np.isnan(row[7:11])) else row[7:11].copy()
        samples.append(ImuSample(row[0], row[1:4].copy(), row[4:7].copy(), att))
    return samples


def write_trajectory(traj: Trajectory, path: str):
    rows = [TRAJ_HEADER]
    for pose in traj:
        rows.append(",".join([_fmt(pose.t)] + [_fmt(v) for v in pose.p]
                             + [_fmt(v) for v in pose.q]))
    with open(path, "w") as f:
        f.write("\n".join(rows) + "\n")


def read_trajectory(path: str) -> Trajectory:
    data = _parse_rows(path, TRAJ_HEADER, 8)
    _require_monotonic(data[:, 0], "trajectory", path)
    return Trajectory([Pose(r[0], r[4:8], r[1:4]) for r in data])


def write_extrinsics(ext: Extrinsics, path: str):
    pose = ext.radar_from_imu
    row = ",".join([_fmt(v) for v in pose.p] + [_fmt(v) for v in pose.q])
    with open(path, "w") as f:
        f.write(EXTRINSICS_HEADER + "\n" + row + "\n")


def read_extrinsics(path: str) -> Extrinsics:
    data = _parse_rows(path, EXTRINSICS_HEADER, 7)
    if len(data) != 1:
        raise DataFormatError(f"{path}: expected exactly one extrinsics row")
    r = data[0]
    return Extrinsics(Pose(0.0, r[3:7], r[0:3]))


def write_sensor(sensor: SensorModel, path: str):
    vals = [_fmt(sensor.fov_h), _fmt(sensor.fov_v), _fmt(sensor.res_h),
            _fmt(sensor.res_v), _fmt(sensor.res_range), _fmt(sensor.max_range),
            _fmt(sensor.rate), _fmt(sensor.doppler_sigma), _fmt(sensor.range_sigma),
            str(int(sensor.oversample)), str(int(sensor.doppler_flip))]
    with open(path, "w") as f:
        f.write(SENSOR_HEADER + "\n" + ",".join(vals) + "\n")


def read_sensor(path: str) -> SensorModel:
    data = _parse_rows(path, SENSOR_HEADER, 11)
    if len(data) != 1:
        raise DataFormatError(f"{path}: expected exactly one sensor row")
    r = data[0]
    return SensorModel(*r[0:9], oversample=int(r[9]), doppler_flip=bool(int(r[10])))


def write_dataset(data: Dataset, path: str):
    """Write a complete session directory; deterministic for identical input."""
    os.makedirs(path, exist_ok=True)
    scans_dir = os.path.join(path, "scans")
    os.makedirs(scans_dir, exist_ok=True)
    ts = [s.t for s in data.scans]
    _require_monotonic(ts, "scan", path)
    for scan in data.scans:
        write_scan(scan, scans_dir)
    write_imu(data.imu, os.path.join(path, "imu.csv"))
    write_extrinsics(data.extrinsics, os.path.join(path, "extrinsics.csv"))
    write_sensor(data.sensor, os.path.join(path, "sensor.csv"))
    if data.ground_truth is not None:
        write_trajectory(data.ground_truth, os.path.join(path, "ground_truth.csv"))


def read_dataset(path: str) -> Dataset:
    """Load a session; scans and imu come back in timestamp order."""
    imu_path = os.path.join(path, "imu.csv")
    scans_dir = os.path.join(path, "scans")
    for required in (imu_path, scans_dir,
                     os.path.join(path, "extrinsics.csv"),
                     os.path.join(path, "sensor.csv")):
        if not os.path.exists(required):
            raise DataFormatError(f"missing required entry: {required}")
    sensor = read_sensor(os.path.join(path, "sensor.csv"))
    names = sorted(os.listdir(scans_dir), key=lambda n: float(n[:-4]))
    scans = [read_scan(os.path.join(scans_dir, n)) for n in names]
    _require_monotonic([s.t for s in scans], "scan", scans_dir)
    if sensor.doppler_flip:
        for s in scans:
            s.doppler = -s.doppler
        sensor.doppler_flip = False
    imu = read_imu(imu_path)
    gt_path = os.path.join(path, "ground_truth.csv")
    gt = read_trajectory(gt_path) if os.path.exists(gt_path) else None
    return Dataset(scans, imu, gt, read_extrinsics(os.path.join(path, "extrinsics.csv")), sensor)


def read_kv(path: str) -> dict:
    """Flat key=value config file; '#' starts a comment line."""
    out = {}
    with open(path, "r") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{ln}: expected key=value")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def write_kv(data: dict, path: str):
    with open(path, "w") as f:
        for key in data:
            f.write(f"{key}={data[key]}\n")

import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radarodo.dataio import (
    DataFormatError,
    Dataset,
    Extrinsics,
    ImuSample,
    RadarPoint,
    RadarScan,
    SensorModel,
    Trajectory,
    read_dataset,
    read_kv,
    read_trajectory,
    write_dataset,
    write_kv,
    write_trajectory,
)
from radarodo.geometry import Pose, so3_exp

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def micro_time(k):
    return k / 1e6


def make_scan(rng, t, n=5):
    pos = rng.uniform(-10, 10, (n, 3))
    pos[np.linalg.norm(pos, axis=1) < 0.1] += 1.0
    return RadarScan(t, pos, rng.normal(0, 1, n), rng.uniform(0, 30, n))


def make_imu(rng, t, with_attitude=True):
    att = so3_exp(rng.uniform(-1, 1, 3)) if with_attitude else None
    return ImuSample(t, rng.normal(0, 1, 3), rng.normal(0, 1, 3), att)


def make_dataset(rng, n_scans=2, n_imu=10):
    scans = [make_scan(rng, micro_time(62_500 * (i + 1))) for i in range(n_scans)]
    imu = [make_imu(rng, 0.0025 * (i + 1), with_attitude=(i % 3 != 0))
           for i in range(n_imu)]
    gt = Trajectory([Pose(s.t, so3_exp(rng.uniform(-1, 1, 3)), rng.uniform(-5, 5, 3))
                     for s in scans])
    ext = Extrinsics(Pose(0.0, so3_exp(rng.uniform(-1, 1, 3)), rng.uniform(-1, 1, 3)))
    return Dataset(scans, imu, gt, ext, SensorModel())


def test_minimal_dataset_counts(tmp_path):
    rng = np.random.default_rng(0)
    data = make_dataset(rng, n_scans=1, n_imu=10)
    write_dataset(data, str(tmp_path / "sess"))
    loaded = read_dataset(str(tmp_path / "sess"))
    assert len(loaded.scans) == 1
    assert len(loaded.imu) == 10


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    data = make_dataset(rng, n_scans=3, n_imu=25)
    path = str(tmp_path / "sess")
    write_dataset(data, path)
    loaded = read_dataset(path)
    for a, b in zip(data.scans, loaded.scans):
        assert a.t == b.t
        assert np.all(a.positions == b.positions)
        assert np.all(a.doppler == b.doppler)
        assert np.all(a.power == b.power)
    for a, b in zip(data.imu, loaded.imu):
        assert a.t == b.t
        assert np.all(a.angular_velocity == b.angular_velocity)
        assert np.all(a.linear_acceleration == b.linear_acceleration)
        if a.attitude is None:
            assert b.attitude is None
        else:
            assert np.all(a.attitude == b.attitude)
    for a, b in zip(data.ground_truth, loaded.ground_truth):
        assert a.t == b.t and np.all(a.p == b.p) and np.all(a.q == b.q)
    assert np.all(data.extrinsics.radar_from_imu.p == loaded.extrinsics.radar_from_imu.p)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_round_trip_property(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    data = make_dataset(rng, n_scans=int(rng.integers(1, 4)), n_imu=int(rng.integers(1, 8)))
    path = str(tmp_path_factory.mktemp("rt") / "sess")
    write_dataset(data, path)
    loaded = read_dataset(path)
    for a, b in zip(data.scans, loaded.scans):
        assert np.all(a.positions == b.positions) and np.all(a.doppler == b.doppler)
    for a, b in zip(data.imu, loaded.imu):
        assert np.all(a.linear_acceleration == b.linear_acceleration)


def test_malformed_scan_row_names_line(tmp_path):
    rng = np.random.default_rng(2)
    data = make_dataset(rng, n_scans=1)
    path = str(tmp_path / "sess")
    write_dataset(data, path)
    scan_file = os.path.join(path, "scans", os.listdir(os.path.join(path, "scans"))[0])
    with open(scan_file, "a") as f:
        f.write("1.0,2.0,3.0,4.0\n")
    bad_line = len(data.scans[0]) + 2
    with pytest.raises(DataFormatError) as exc:
        read_dataset(path)
    assert f":{bad_line}:" in str(exc.value)
    assert "columns" in str(exc.value)


def test_missing_file_rejected(tmp_path):
    rng = np.random.default_rng(3)
    data = make_dataset(rng)
    path = str(tmp_path / "sess")
    write_dataset(data, path)
    os.remove(os.path.join(path, "imu.csv"))
    with pytest.raises(DataFormatError, match="missing"):
        read_dataset(path)


def test_non_monotonic_imu_rejected(tmp_path):
    rng = np.random.default_rng(4)
    data = make_dataset(rng)
    data.imu[3] = ImuSample(data.imu[2].t, np.zeros(3), np.zeros(3), None)
    path = str(tmp_path / "sess")
    write_dataset(data, path)
    with pytest.raises(DataFormatError, match="increasing"):
        read_dataset(path)


def test_empty_trajectory_header_only(tmp_path):
    path = str(tmp_path / "traj.csv")
    write_trajectory(Trajectory([]), path)
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines == ["t,x,y,z,qw,qx,qy,qz"]


def test_two_pose_trajectory_rows(tmp_path):
    path = str(tmp_path / "traj.csv")
    traj = Trajectory([Pose.identity(0.0), Pose.identity(0.5)])
    write_trajectory(traj, path)
    with open(path) as f:
        lines = f.read().splitlines()
    assert len(lines) == 3
    assert float(lines[1].split(",")[0]) < float(lines[2].split(",")[0])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=6),
       st.integers(0, 1000))
def test_trajectory_round_trip_exact(tmp_path_factory, positions, seed):
    rng = np.random.default_rng(seed)
    poses = [Pose(float(i), so3_exp(rng.uniform(-2, 2, 3)), np.array(p))
             for i, p in enumerate(positions)]
    path = str(tmp_path_factory.mktemp("traj") / "t.csv")
    write_trajectory(Trajectory(poses), path)
    loaded = read_trajectory(path)
    for a, b in zip(poses, loaded):
        assert a.t == b.t
        assert np.all(a.p == b.p)
        assert np.all(a.q == b.q)


def test_doppler_flip_normalized_on_read(tmp_path):
    rng = np.random.default_rng(5)
    data = make_dataset(rng, n_scans=1)
    original = data.scans[0].doppler.copy()
    data.sensor.doppler_flip = True
    path = str(tmp_path / "sess")
    write_dataset(data, path)
    loaded = read_dataset(path)
    assert np.all(loaded.scans[0].doppler == -original)
    assert loaded.sensor.doppler_flip is False


def test_off_grid_scan_timestamp_rejected(tmp_path):
    rng = np.random.default_rng(6)
    scan = make_scan(rng, 0.1234567)
    data = Dataset([scan], [make_imu(rng, 0.0)], None, Extrinsics.identity(), SensorModel())
    with pytest.raises(DataFormatError, match="microsecond"):
        write_dataset(data, str(tmp_path / "sess"))


def test_kv_round_trip(tmp_path):
    path = str(tmp_path / "cfg.txt")
    cfg = {"scenario": "tunnel", "length": "500.0", "seed": "7"}
    write_kv(cfg, path)
    assert read_kv(path) == cfg


def test_kv_rejects_garbage(tmp_path):
    path = str(tmp_path / "cfg.txt")
    with open(path, "w") as f:
        f.write("scenario tunnel\n")
    with pytest.raises(DataFormatError, match=":1:"):
        read_kv(path)


def test_radar_point_accessors():
    scan = RadarScan.from_points(0.0, [RadarPoint(np.array([1.0, 2, 3]), -0.5, 10.0)])
    assert len(scan) == 1
    pt = scan.point(0)
    assert pt.doppler == -0.5
    assert np.allclose(scan.directions()[0], np.array([1, 2, 3]) / np.sqrt(14))

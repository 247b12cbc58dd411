import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radarodo.dataio import Extrinsics, RadarScan
from radarodo.egovel import (
    DegenerateGeometryError,
    EstimationFailedError,
    InsufficientPointsError,
    RansacConfig,
    lsq_velocity,
    ransac_ego_velocity,
    velocity_to_body,
)
from radarodo.geometry import Pose, quat_about_z, so3_exp, vec3
from radarodo.synth import SENSOR_PROFILES, NoiseModel, build_tunnel_world, simulate_radar_scan


def random_directions(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def scan_from_directions(dirs, doppler, t=0.0, ranges=None):
    r = np.ones(len(dirs)) * 10.0 if ranges is None else ranges
    return RadarScan(t, dirs * r[:, None], doppler, np.zeros(len(dirs)))


def tunnel_scan(v_world, seed=0, noise=None, profile="hugin", x=25.0):
    world = build_tunnel_world(length=80.0)
    pose = Pose(0.0, np.array([1.0, 0, 0, 0]), vec3(x, 0, 1.7))
    return simulate_radar_scan(world, pose, np.asarray(v_world, float),
                               SENSOR_PROFILES[profile],
                               noise or NoiseModel.zero(), seed)


def test_axis_aligned_directions():
    dirs = np.eye(3)
    v, cov = lsq_velocity(dirs, np.array([-1.0, 0.0, 0.0]))
    assert np.allclose(v, [1, 0, 0], atol=1e-12)
    assert cov.shape == (3, 3)


def test_stationary_gives_zero():
    rng = np.random.default_rng(0)
    dirs = random_directions(rng, 50)
    v, _ = lsq_velocity(dirs, np.zeros(50))
    assert np.allclose(v, 0, atol=1e-12)


def test_lsq_against_svd_oracle_and_truth():
    rng = np.random.default_rng(42)
    v_true = vec3(3.0, -1.0, 0.5)
    dirs = random_directions(rng, 100)
    sigma = 0.05
    dop = -(dirs @ v_true) + rng.normal(0, sigma, 100)
    v, cov = lsq_velocity(dirs, dop, sigma)
    # independent route: SVD least squares on the raw system
    v_oracle = np.linalg.lstsq(dirs, -dop, rcond=None)[0]
    assert np.allclose(v, v_oracle, atol=1e-10)
    # per-axis three-sigma interval from the estimator covariance
    std = np.sqrt(np.diag(np.linalg.inv(dirs.T @ dirs))) * sigma
    assert np.all(np.abs(v - v_true) < 3 * std)
    assert np.all(np.abs(v - v_true) < 3 * sigma)  # sanity scale


def test_covariance_matches_definition():
    rng = np.random.default_rng(7)
    dirs = random_directions(rng, 60)
    dop = -(dirs @ vec3(1, 2, 3)) + rng.normal(0, 0.1, 60)
    v, cov = lsq_velocity(dirs, dop, 0.01)
    rss = np.sum((dirs @ v + dop) ** 2)
    expected = rss / 57 * np.linalg.inv(dirs.T @ dirs)
    assert np.allclose(cov, expected, atol=1e-12)
    assert np.allclose(cov, cov.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_sigma_floor_for_minimal_and_clean_sets():
    dirs = np.eye(3)
    _, cov = lsq_velocity(dirs, np.array([-1.0, 0, 0]), doppler_sigma=0.05)
    assert np.allclose(cov, 0.05 ** 2 * np.eye(3), atol=1e-15)
    rng = np.random.default_rng(1)
    d = random_directions(rng, 40)
    _, cov2 = lsq_velocity(d, -(d @ vec3(1, 0, 0)), doppler_sigma=0.05)
    assert np.all(np.linalg.eigvalsh(cov2) >= 0.05 ** 2 * 0.5 / 40)


def test_coplanar_directions_degenerate():
    rng = np.random.default_rng(2)
    planar = rng.normal(size=(20, 3))
    planar[:, 2] = 0.0
    planar /= np.linalg.norm(planar, axis=1, keepdims=True)
    with pytest.raises(DegenerateGeometryError) as exc:
        lsq_velocity(planar, np.zeros(20))
    assert exc.value.cond > 1e6


def test_ransac_noise_free_tunnel():
    scan = tunnel_scan(vec3(5, 0, 0))
    est = ransac_ego_velocity(scan, RansacConfig(), seed=0)
    assert np.allclose(est.velocity, [5, 0, 0], atol=1e-9)
    assert est.inlier_count == len(scan)
    assert np.all(est.inlier_mask)


def test_ransac_equals_lsq_on_outlier_free_data():
    scan = tunnel_scan(vec3(4, 1, 0), seed=1)
    est = ransac_ego_velocity(scan, RansacConfig(), seed=5)
    v, cov = lsq_velocity(scan.directions(), scan.doppler)
    assert np.all(est.inlier_mask)
    assert np.allclose(est.velocity, v, atol=0)
    assert np.allclose(est.covariance, cov, atol=0)


def test_ransac_with_outliers_majority_of_seeds():
    v_true = vec3(5.8, 0.3, -0.1)
    noise = NoiseModel(doppler_sigma=0.05, range_sigma=0.0,
                       angular_jitter_deg=0.0, outlier_fraction=0.3)
    ok_bound = 0
    ok_retained = 0
    runs = 20
    for seed in range(runs):
        scan = tunnel_scan(v_true, seed=seed, noise=noise)
        clean = tunnel_scan(v_true, seed=seed, noise=NoiseModel(
            doppler_sigma=0.05, range_sigma=0.0, angular_jitter_deg=0.0))
        true_inlier = clean.doppler == scan.doppler
        est = ransac_ego_velocity(scan, RansacConfig(), seed=seed)
        A = scan.directions()[est.inlier_mask]
        std = 0.05 * np.sqrt(np.diag(np.linalg.inv(A.T @ A)))
        if np.all(np.abs(est.velocity - v_true) < 3 * std):
            ok_bound += 1
        retained = np.count_nonzero(est.inlier_mask & true_inlier)
        if retained >= 0.95 * np.count_nonzero(true_inlier):
            ok_retained += 1
    assert ok_bound >= int(0.95 * runs)
    assert ok_retained == runs


def test_ransac_insufficient_points():
    scan = scan_from_directions(np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.zeros(2))
    with pytest.raises(InsufficientPointsError):
        ransac_ego_velocity(scan)


def test_ransac_fails_without_consensus():
    rng = np.random.default_rng(3)
    dirs = random_directions(rng, 200)
    dop = rng.uniform(-20, 20, 200)  # pure noise, no consistent motion
    scan = scan_from_directions(dirs, dop)
    with pytest.raises(EstimationFailedError):
        ransac_ego_velocity(scan, RansacConfig(min_inlier_ratio=0.5), seed=0)


def test_ransac_deterministic():
    scan = tunnel_scan(vec3(3, 0, 0), noise=NoiseModel(outlier_fraction=0.2))
    a = ransac_ego_velocity(scan, seed=9)
    b = ransac_ego_velocity(scan, seed=9)
    assert np.all(a.velocity == b.velocity)
    assert np.all(a.inlier_mask == b.inlier_mask)


def test_reorder_invariance_of_consensus_fit():
    scan = tunnel_scan(vec3(5, 0, 0), noise=NoiseModel(doppler_sigma=0.02,
                                                       outlier_fraction=0.1))
    est = ransac_ego_velocity(scan, seed=0)
    dirs = scan.directions()[est.inlier_mask]
    dop = scan.doppler[est.inlier_mask]
    order = np.argsort(dop, kind="stable")
    v_sorted, _ = lsq_velocity(dirs[order], dop[order])
    v_plain, _ = lsq_velocity(dirs, dop)
    assert np.allclose(v_sorted, v_plain, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_covariance_congruence_under_rotation(seed):
    rng = np.random.default_rng(seed)
    dirs = random_directions(rng, 40)
    dop = -(dirs @ vec3(1.0, -2.0, 0.5)) + rng.normal(0, 0.05, 40)
    v, cov = lsq_velocity(dirs, dop)
    R = np.asarray(so3_exp(rng.uniform(-2, 2, 3)), dtype=float)
    from radarodo.geometry import quat_to_matrix
    R = quat_to_matrix(so3_exp(rng.uniform(-2, 2, 3)))
    v2, cov2 = lsq_velocity(dirs @ R.T, dop)
    assert np.allclose(v2, R @ v, atol=1e-10)
    assert np.allclose(cov2, R @ cov @ R.T, atol=1e-10)


def test_throughput_10k_points():
    noise = NoiseModel(doppler_sigma=0.05, outlier_fraction=0.3)
    scans = [tunnel_scan(vec3(5.8, 0, 0), seed=s, noise=noise) for s in range(10)]
    assert all(len(s) > 8000 for s in scans)
    cfg = RansacConfig()
    t0 = time.perf_counter()
    for seed, scan in enumerate(scans):
        ransac_ego_velocity(scan, cfg, seed=seed)
    per_scan = (time.perf_counter() - t0) / len(scans)
    assert per_scan < 0.010, f"{per_scan * 1e3:.2f} ms/scan"


def test_velocity_to_body_identity():
    est = ransac_ego_velocity(tunnel_scan(vec3(2, 0, 0)), seed=0)
    out = velocity_to_body(est, Extrinsics.identity(), np.zeros(3))
    assert np.all(out.velocity == est.velocity)
    assert np.all(out.covariance == est.covariance)


def test_velocity_to_body_rotation():
    from radarodo.egovel import EgoVelocityEstimate
    est = EgoVelocityEstimate(0.0, vec3(1, 0, 0), np.eye(3) * 0.01, 3,
                              np.ones(3, dtype=bool))
    # radar yawed +90 deg relative to the body
    ext = Extrinsics.from_mount(quat_about_z(np.pi / 2), np.zeros(3))
    out = velocity_to_body(est, ext, np.zeros(3))
    assert np.allclose(out.velocity, [0, 1, 0], atol=1e-12)


def test_velocity_to_body_lever_arm():
    from radarodo.egovel import EgoVelocityEstimate
    est = EgoVelocityEstimate(0.0, np.zeros(3), np.eye(3) * 0.01, 3,
                              np.ones(3, dtype=bool))
    ext = Extrinsics.from_mount(np.array([1.0, 0, 0, 0]), vec3(1, 0, 0))
    out = velocity_to_body(est, ext, vec3(0, 0, 1))
    assert np.allclose(out.velocity, [0, -1, 0], atol=1e-12)

import numpy as np
import pytest

from radarodo.dataio import SensorModel
from radarodo.synth import (
    NoiseModel,
    ScenarioConfig,
    build_scenario,
    simulate_session,
)

# fast radar profile at the paper-like 16 Hz frame rate
SPARSE16 = SensorModel(fov_h=80.0, fov_v=30.0, res_h=2.5, res_v=3.0,
                       res_range=0.1, max_range=30.0, rate=16.0,
                       doppler_sigma=0.05, range_sigma=0.08, oversample=1)


def build_session(scenario="tunnel", sensor=SPARSE16, noise=None, seed=0,
                  imu_rate=200.0, **cfg_kwargs):
    cfg = ScenarioConfig(scenario=scenario, imu_rate=imu_rate, **cfg_kwargs)
    world, plan = build_scenario(cfg, seed)
    return simulate_session(world, plan, sensor, noise or NoiseModel.zero(),
                            seed, imu_rate=imu_rate)


@pytest.fixture(scope="session")
def tunnel_clean_500m():
    """Noise-free 500 m tunnel; the dead-reckoning / EKF drift oracle."""
    return build_session(length=500.0, seed=1)


@pytest.fixture(scope="session")
def static_session():
    """~6 s standstill with mild sensor noise."""
    from radarodo.synth import MotionPlan, build_tunnel_world
    world = build_tunnel_world(length=60.0)
    plan = MotionPlan.from_waypoints(
        [0.0, 3.0, 6.0], np.tile(np.array([20.0, 0.0, 1.7]), (3, 1)))
    noise = NoiseModel(doppler_sigma=0.03, range_sigma=0.03,
                       angular_jitter_deg=0.02)
    return simulate_session(world, plan, SPARSE16, noise, seed=2, imu_rate=200.0)

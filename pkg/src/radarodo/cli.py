"""Command-line entry point: synthesize sessions, run odometry variants,
evaluate trajectories, benchmark stages.

    radarodo synth --scenario tunnel --seed 7 --out session/
    radarodo odom --session session/ --variant imu_doppler --out runs/
    radarodo eval --est runs/imu_doppler.csv --ref session/ground_truth.csv --out eval/
    radarodo bench --session session/ --variant imu_doppler

Every run writes a manifest (flat key=value, every default materialized) next
to its outputs; feeding a manifest back through --config reproduces the run
bit for bit. RADARODO_OUT overrides the default output directory.
"""

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import __version__
from .dataio import (
    Dataset,
    read_dataset,
    read_kv,
    read_trajectory,
    write_kv,
    write_trajectory,
)
from .deadreckon import DeadReckonConfig, run_dead_reckoning
from .egovel import RansacConfig, ransac_ego_velocity, velocity_to_body
from .ekf import EkfConfig, run_ekf
from .evaluation import ape_translation, associate, rpe, umeyama_align, write_error_samples
from .geometry import Pose
from .registration import (
    GicpConfig,
    IcpConfig,
    NdtConfig,
    run_icp_odometry,
    run_scan_to_scan_odometry,
)
from .synth import SENSOR_PROFILES, NoiseModel, ScenarioConfig, generate_session
from . import svgplot

VARIANTS = ("imu_doppler", "ekf", "ekf_dampened", "icp6", "icp4",
            "apdgicp", "apdgicp_prior", "ndt")
PRIOR_VARIANTS = ("icp6", "icp4", "apdgicp_prior", "ndt")


class AssociationFailure(Exception):
    """Evaluation could not pair an estimate with the reference."""


def _coerce(value: str, target_type):
    if target_type is bool:
        return value.lower() in ("1", "true", "yes", "on")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


def apply_overrides(obj, overrides: dict, prefix: str):
    """Set dataclass fields from 'prefix.field=value' entries."""
    for field in dataclasses.fields(obj):
        key = f"{prefix}.{field.name}"
        if key in overrides:
            current = getattr(obj, field.name)
            target = type(current) if current is not None else str
            if isinstance(current, np.ndarray):
                vals = [float(v) for v in overrides[key].split()]
                setattr(obj, field.name, np.array(vals))
            elif dataclasses.is_dataclass(current):
                continue
            else:
                setattr(obj, field.name, _coerce(overrides[key], target))
    return obj


def flatten_config(obj, prefix: str, out: dict):
    """Materialize every field (defaults included) into the manifest."""
    for field in dataclasses.fields(obj):
        value = getattr(obj, field.name)
        key = f"{prefix}.{field.name}"
        if dataclasses.is_dataclass(value):
            flatten_config(value, key, out)
        elif isinstance(value, np.ndarray):
            out[key] = " ".join(repr(float(v)) for v in value)
        elif value is None:
            out[key] = ""
        else:
            out[key] = repr(value) if isinstance(value, float) else str(value)
    return out


def _out_dir(arg_out, default):
    return arg_out or os.environ.get("RADARODO_OUT") or default


def _load_config_file(path):
    return read_kv(path) if path else {}


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    overrides = _load_config_file(args.config)
    scen_cfg = apply_overrides(ScenarioConfig(), overrides, "scenario")
    noise = apply_overrides(NoiseModel(), overrides, "noise")
    sensor = SENSOR_PROFILES[args.sensor]
    sensor = apply_overrides(dataclasses.replace(sensor), overrides, "sensor")
    data = generate_session(args.scenario, sensor, noise, args.seed,
                            out_dir=args.out, cfg=scen_cfg)
    manifest = {"command": "synth", "scenario": args.scenario,
                "sensor_profile": args.sensor, "seed": str(args.seed),
                "version": __version__}
    flatten_config(scen_cfg, "scenario", manifest)
    flatten_config(noise, "noise", manifest)
    flatten_config(sensor, "sensor", manifest)
    write_kv(manifest, os.path.join(args.out, "session.manifest"))
    span = data.ground_truth.times()
    print(f"synth: {args.scenario} seed={args.seed} -> {args.out} "
          f"({len(data.scans)} scans, {len(data.imu)} imu samples, "
          f"{span[-1] - span[0]:.1f} s)")
    return 0


# ---------------------------------------------------------------------------
# odom


def _run_variant(variant: str, data: Dataset, overrides: dict, seed: int):
    """Returns (trajectory, config snapshot dict, extras dict)."""
    snapshot = {}
    extras = {}
    if variant == "imu_doppler":
        cfg = DeadReckonConfig()
        apply_overrides(cfg, overrides, "deadreckon")
        apply_overrides(cfg.ransac, overrides, "ransac")
        traj = run_dead_reckoning(data.scans, data.imu, data.extrinsics, cfg,
                                  seed=seed)
        flatten_config(cfg, "deadreckon", snapshot)
    elif variant in ("ekf", "ekf_dampened"):
        cfg = EkfConfig()
        if variant == "ekf_dampened":
            cfg.doppler_noise_scale = 10.0
        apply_overrides(cfg, overrides, "ekf")
        apply_overrides(cfg.ransac, overrides, "ransac")
        traj, diag = run_ekf(data.scans, data.imu, data.extrinsics, cfg, seed=seed)
        flatten_config(cfg, "ekf", snapshot)
        extras["diagnostics"] = diag
    elif variant in ("icp6", "icp4"):
        prior = _run_variant("imu_doppler", data, overrides, seed)[0]
        cfg = IcpConfig()
        apply_overrides(cfg, overrides, "icp")
        dof = "full6" if variant == "icp6" else "yaw_only4"
        traj = run_icp_odometry(data.scans, prior, dof, cfg)
        flatten_config(cfg, "icp", snapshot)
        extras["prior"] = prior
    elif variant in ("apdgicp", "apdgicp_prior", "ndt"):
        prior = None
        if variant in ("apdgicp_prior", "ndt"):
            prior = _run_variant("imu_doppler", data, overrides, seed)[0]
            extras["prior"] = prior
        if variant == "ndt":
            cfg = NdtConfig()
            apply_overrides(cfg, overrides, "ndt")
            traj = run_scan_to_scan_odometry(data.scans, "ndt", data.sensor,
                                             prior_trajectory=prior, cfg=cfg)
            flatten_config(cfg, "ndt", snapshot)
        else:
            cfg = GicpConfig()
            apply_overrides(cfg, overrides, "gicp")
            traj = run_scan_to_scan_odometry(data.scans, "apdgicp", data.sensor,
                                             prior_trajectory=prior, cfg=cfg)
            flatten_config(cfg, "gicp", snapshot)
    else:
        raise ValueError(f"unknown variant '{variant}'")
    return traj, snapshot, extras


def cmd_odom(args) -> int:
    out_dir = _out_dir(args.out, os.path.join(args.session, "odom"))
    os.makedirs(out_dir, exist_ok=True)
    overrides = _load_config_file(args.config)
    data = read_dataset(args.session)
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    for variant in variants:
        traj, snapshot, extras = _run_variant(variant, data, overrides, args.seed)
        traj_path = os.path.join(out_dir, f"{variant}.csv")
        write_trajectory(traj, traj_path)
        manifest = {"command": "odom", "session": args.session,
                    "variant": variant, "seed": str(args.seed),
                    "trajectory": traj_path, "version": __version__}
        if variant in PRIOR_VARIANTS:
            prior_path = os.path.join(out_dir, f"{variant}.prior.csv")
            write_trajectory(extras["prior"], prior_path)
            manifest["prior_source"] = "imu_doppler"
            manifest["prior_trajectory"] = prior_path
        manifest.update(snapshot)
        write_kv(manifest, os.path.join(out_dir, f"{variant}.manifest"))
        if "diagnostics" in extras:
            diag = extras["diagnostics"]
            with open(os.path.join(out_dir, f"{variant}.diag.csv"), "w") as f:
                f.write("t,bgx,bgy,bgz,bax,bay,baz\n")
                for t, bg, ba in zip(diag.bias_times, diag.gyro_bias, diag.accel_bias):
                    f.write(",".join([repr(float(t))] + [repr(float(v)) for v in bg]
                                     + [repr(float(v)) for v in ba]) + "\n")
            manifest["gate_count"] = str(diag.gate_count)
        print(f"odom: {variant} on {args.session} -> {traj_path} "
              f"({len(traj)} poses)")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    out_dir = _out_dir(args.out, "eval_out")
    os.makedirs(out_dir, exist_ok=True)
    ref = read_trajectory(args.ref)
    steps = args.steps
    summary_path = os.path.join(out_dir, "summary.csv")
    ape_series = {}
    xy_series = {"reference": (ref.positions()[:, 0], ref.positions()[:, 1])}
    rpe_groups = {s: {} for s in steps}
    rows = []
    for est_path in args.est:
        label = os.path.splitext(os.path.basename(est_path))[0]
        est = read_trajectory(est_path)
        try:
            pairs = associate(est, ref, args.max_dt)
        except Exception as exc:
            raise AssociationFailure(f"{est_path}: {exc}") from exc
        ape = ape_translation(est, ref, args.max_dt)
        write_error_samples(ape, os.path.join(out_dir, f"{label}.ape.csv"),
                            "ape_m")
        times = [est[i].t for i, _ in pairs]
        T = umeyama_align(est, ref, args.max_dt)
        aligned = np.array([T.rot() @ est[i].p + T.p for i, _ in pairs])
        refs = np.array([ref[j].p for _, j in pairs])
        ape_series[label] = (np.array(times) - times[0],
                             np.linalg.norm(aligned - refs, axis=1))
        xy_series[label] = (aligned[:, 0], aligned[:, 1])
        row = {"variant": label, "ape_rmse_m": ape.rmse, "ape_median_m": ape.median,
               "ape_max_m": ape.max}
        for step in steps:
            t_stats, r_stats = rpe(est, ref, step, args.max_dt)
            write_error_samples(t_stats, os.path.join(
                out_dir, f"{label}.rpe{step:g}m.trans.csv"), "trans_percent")
            write_error_samples(r_stats, os.path.join(
                out_dir, f"{label}.rpe{step:g}m.rot.csv"), "rot_deg")
            rpe_groups[step][label] = (t_stats, r_stats)
            row[f"rpe{step:g}_trans_median_pct"] = t_stats.median
            row[f"rpe{step:g}_rot_median_deg"] = r_stats.median
            print(f"eval: {label} rpe@{step:g}m median translation "
                  f"{t_stats.median:.4g} % | rotation {r_stats.median:.4g} deg")
        print(f"eval: {label} ape median {ape.median:.4g} m (rmse {ape.rmse:.4g})")
        rows.append(row)
    keys = list(rows[0])
    with open(summary_path, "w") as f:
        f.write(",".join(keys) + "\n")
        for row in rows:
            f.write(",".join(str(row[k]) for k in keys) + "\n")
    svgplot.line_chart(ape_series, "time [s]", "APE [m]",
                       "absolute position error", os.path.join(out_dir, "ape.svg"))
    svgplot.xy_plot(xy_series, "aligned trajectories (top view)",
                    os.path.join(out_dir, "trajectory_xy.svg"))
    for step in steps:
        svgplot.box_summary(
            {lab: st_pair[0].errors for lab, st_pair in rpe_groups[step].items()},
            "translation RPE [%]", f"RPE translation, {step:g} m steps",
            os.path.join(out_dir, f"rpe{step:g}m_trans.svg"))
        svgplot.box_summary(
            {lab: st_pair[1].errors for lab, st_pair in rpe_groups[step].items()},
            "rotation RPE [deg]", f"RPE rotation, {step:g} m steps",
            os.path.join(out_dir, f"rpe{step:g}m_rot.svg"))
    print(f"eval: summary -> {summary_path}")
    return 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    totals = []
    stage_stats = {}
    for rep in range(args.repeat):
        t_start = time.perf_counter()
        stages = {}
        t0 = time.perf_counter()
        data = read_dataset(args.session)
        stages["read"] = time.perf_counter() - t0

        if args.variant == "imu_doppler":
            cfg = RansacConfig()
            seeds = np.random.SeedSequence(args.seed).generate_state(len(data.scans))
            per_scan = []
            ests = []
            t0 = time.perf_counter()
            for k, scan in enumerate(data.scans):
                t1 = time.perf_counter()
                try:
                    ests.append(ransac_ego_velocity(scan, cfg, seed=int(seeds[k])))
                except Exception:
                    ests.append(None)
                per_scan.append(time.perf_counter() - t1)
            stages["ego_velocity"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            run_dead_reckoning(data.scans, data.imu, data.extrinsics, seed=args.seed)
            stages["dead_reckoning_total"] = time.perf_counter() - t0
            if rep == 0:
                print(f"bench: ego-velocity mean {np.mean(per_scan) * 1e3:.2f} ms"
                      f" / scan over {len(per_scan)} scans "
                      f"(max {np.max(per_scan) * 1e3:.2f} ms)")
        else:
            t0 = time.perf_counter()
            _run_variant(args.variant, data, {}, args.seed)
            stages["pipeline"] = time.perf_counter() - t0
        total = time.perf_counter() - t_start
        totals.append(total)
        for k, v in stages.items():
            stage_stats.setdefault(k, []).append(v)
    print(f"bench: {args.variant} on {args.session}, {args.repeat} repeats")
    for k, vals in stage_stats.items():
        print(f"  {k:22s} mean {np.mean(vals):8.3f} s  (min {np.min(vals):.3f}, "
              f"max {np.max(vals):.3f})")
    stage_sum = sum(np.mean(v) for v in stage_stats.values())
    mean_total = float(np.mean(totals))
    print(f"  {'stage sum':22s} {stage_sum:13.3f} s vs wall total {mean_total:.3f} s "
          f"({abs(stage_sum - mean_total) / mean_total * 100:.1f}% apart)")
    if args.repeat > 1:
        print(f"  repeat stddev {np.std(totals):.4f} s over totals {['%.3f' % t for t in totals]}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="radarodo",
        description="Doppler-radar/IMU odometry workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic session")
    p.add_argument("--scenario", required=True,
                   choices=("tunnel", "forest_loop", "rectangle"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--sensor", default="hugin", choices=sorted(SENSOR_PROFILES))
    p.add_argument("--config", help="key=value file with scenario./noise./sensor. overrides")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("odom", help="run an odometry variant on a session")
    p.add_argument("--session", required=True)
    p.add_argument("--variant", required=True, choices=VARIANTS + ("all",))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output dir (default <session>/odom or $RADARODO_OUT)")
    p.add_argument("--config", help="key=value file; manifests replay bit-exactly")
    p.set_defaults(func=cmd_odom)

    p = sub.add_parser("eval", help="APE/RPE against a reference trajectory")
    p.add_argument("--est", nargs="+", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--steps", nargs="+", type=float, default=[1.0, 10.0])
    p.add_argument("--max-dt", type=float, default=0.05,
                   help="association tolerance, default half a 10 Hz scan period")
    p.add_argument("--out", help="output dir (default eval_out or $RADARODO_OUT)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="wall-clock per stage")
    p.add_argument("--session", required=True)
    p.add_argument("--variant", default="imu_doppler", choices=VARIANTS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeat", type=int, default=2)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:
        print(f"radarodo {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

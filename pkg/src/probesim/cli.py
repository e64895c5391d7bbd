"""Command-line entry point: render sweeps, roll out policies, benchmark.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal
invariant violation (scripts depend on these).
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
import time
import zlib

import numpy as np

from . import datasets as ds
from .acoustics import (
    UsSimulator,
    boundary_and_incidence,
    impedance_map,
    reflection_term,
    remaining_energy,
    scatter_term,
)
from .envs import ConfigError, Patient, load_setup, make_env
from .experts import heuristic_recon_plan, nav_expert, surgery_expert
from .geometry import Pose, rotation_with_z_axis
from .rng import stream
from .volume import VolumeFormatError, extract_plane_slices


def write_png_gray(path, image):
    """Minimal 8-bit grayscale PNG writer (inspection only)."""
    img = np.clip(np.asarray(image) * 255.0, 0, 255).astype(np.uint8)
    h, w = img.shape
    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(h))

    def chunk(tag, data):
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body))

    header = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    with open(path, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n")
        f.write(chunk(b"IHDR", header))
        f.write(chunk(b"IDAT", zlib.compress(raw, 6)))
        f.write(chunk(b"IEND", b""))


def _load_patient(args) -> Patient:
    if args.patient:
        return Patient.load(args.patient)
    kind, _, seed = args.phantom.partition(":")
    return Patient.from_phantom(kind, int(seed or 0))


def _parse_pose(text, patient) -> Pose:
    try:
        x, y, yaw = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--pose wants 'x,y,yaw', got {text!r}: {exc}") from exc
    z, normal = patient.skin.sample(x, y)
    return Pose(np.array([x, y, z]), rotation_with_z_axis(-normal, yaw))


def _sweep_poses(patient, n, seed):
    gen = stream(seed, 0x7E)
    poses = []
    for _ in range(n):
        for _attempt in range(100):
            x = gen.uniform(-60.0, 60.0)
            y = gen.uniform(-60.0, 60.0)
            try:
                z, normal = patient.skin.sample(x, y)
            except ValueError:
                continue
            poses.append(
                Pose(np.array([x, y, z]), rotation_with_z_axis(-normal, gen.uniform(1.5, 3.5)))
            )
            break
        else:
            raise RuntimeError("could not place a sweep pose on the skin")
    return poses


def _stage_breakdown(patient, pose, spec, params):
    """Representative per-stage timings from the functional pipeline."""
    timings = {}
    t0 = time.perf_counter()
    slices = extract_plane_slices(patient.ct, patient.labels, pose, spec)
    timings["slice_sample_ms"] = (time.perf_counter() - t0) * 1e3
    labels2d = slices.labels[0]
    t0 = time.perf_counter()
    z = impedance_map(slices.ct[0], labels2d, patient.table, params)
    e = remaining_energy(labels2d, patient.table, params, spec.res_z)
    g, theta = boundary_and_incidence(labels2d, params)
    reflection_term(z, e, g, theta, params, spec)
    timings["reflection_ms"] = (time.perf_counter() - t0) * 1e3
    t0 = time.perf_counter()
    scatter_term(labels2d, slices.positions[0], patient.noise, patient.table, e, params, spec)
    timings["scatter_ms"] = (time.perf_counter() - t0) * 1e3
    return timings


def cmd_render(args) -> int:
    patient = _load_patient(args)
    setup = load_setup(args.config) if args.config else load_setup(args.task or "nav")
    spec = setup.params.image
    params = setup.us
    if args.pose:
        poses = [_parse_pose(p, patient) for p in args.pose]
    else:
        poses = _sweep_poses(patient, args.frames, args.seed)
    os.makedirs(args.out, exist_ok=True)
    sim = UsSimulator(
        patient.ct, patient.labels, patient.table, patient.noise, params, spec,
        threads=args.threads,
    )
    try:
        sim.render_batch(poses[:1])  # compile before timing
        t0 = time.perf_counter()
        frames = sim.render_batch(poses)
        elapsed = time.perf_counter() - t0
    finally:
        sim.close()
    for i, frame in enumerate(frames):
        frame.astype("<f4").tofile(os.path.join(args.out, f"frame_{i:05d}.f32"))
        if args.format == "png":
            for e in range(frame.shape[0]):
                suffix = f".e{e}" if frame.shape[0] > 1 else ""
                write_png_gray(
                    os.path.join(args.out, f"frame_{i:05d}{suffix}.png"), frame[e]
                )
    report = {
        "frames": len(poses),
        "image": [spec.elevation, spec.height, spec.width],
        "seconds_total": elapsed,
        "ms_per_frame": elapsed / len(poses) * 1e3,
        "fps": len(poses) / elapsed if elapsed > 0 else float("inf"),
        "threads": args.threads,
        "stages": _stage_breakdown(patient, poses[0], spec, params),
    }
    with open(os.path.join(args.out, "timing.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


class _HeuristicPolicy:
    """Open-loop boustrophedon plans, one per slot, built at episode start."""

    def __init__(self):
        self.plans = None
        self.t = 0

    def __call__(self, obs, info, env):
        if env.step_count == 0:
            starts = info["pose_xy_yaw_pitch"]
            self.plans = [
                heuristic_recon_plan(env.config, starts[i]) for i in range(env.n_envs)
            ]
            self.t = 0
        actions = np.zeros((env.n_envs, env.action_dim))
        for i, plan in enumerate(self.plans):
            if self.t < len(plan):
                actions[i] = plan[self.t]
        self.t += 1
        return actions


def _make_policy(name, task):
    if name == "zero":
        return lambda obs, info, env: np.zeros((env.n_envs, env.action_dim))
    if name == "expert":
        if task == "nav":
            return lambda obs, info, env: nav_expert(info["state"], env.config)
        if task == "surgery":
            return lambda obs, info, env: surgery_expert(info["state"], env.config)
        raise ConfigError(f"no scripted expert for task {task!r}; recon uses --policy heuristic")
    if name == "heuristic":
        if task != "recon":
            raise ConfigError("--policy heuristic is the reconstruction baseline only")
        return _HeuristicPolicy()
    raise ConfigError(f"unknown policy {name!r}")


def cmd_rollout(args) -> int:
    setup = load_setup(args.config) if args.config else load_setup(args.task)
    if args.task and setup.task != args.task:
        raise ConfigError(f"--task {args.task} conflicts with config task {setup.task}")
    patient = Patient.from_config(setup.patient)
    per_episode = []
    if args.out:
        policy = _make_policy(args.policy, setup.task)
        dirs = ds.record_rollouts(
            setup,
            policy,
            args.episodes,
            args.seed,
            args.out,
            record_observations=args.record_obs,
            patient=patient,
        )
        for ep_dir in dirs:
            meta, _ = ds.load_episode(ep_dir)
            per_episode.append(meta["final_metrics"])
        if args.format == "png" and args.record_obs:
            _export_pngs(dirs)
    else:
        env = make_env(setup, n_envs=args.envs, render=False, patient=patient)
        try:
            remaining = args.episodes
            while remaining > 0:
                n_now = min(args.envs, remaining)
                policy = _make_policy(args.policy, setup.task)
                seeds = np.array(
                    [ds.episode_seed(args.seed, args.episodes - remaining + i)
                     for i in range(env.n_envs)],
                    dtype=np.uint64,
                )
                obs, info = env.reset(seeds)
                for _ in range(env.config.episode_len):
                    res = env.step(policy(obs, info, env))
                    obs, info = res.observation, res.info
                metrics = res.info["metrics"]
                for i in range(n_now):
                    per_episode.append({k: float(v[i]) for k, v in metrics.items()})
                remaining -= n_now
        finally:
            env.close()
    table = _metric_table(per_episode)
    if args.format == "csv":
        print(table["csv"])
    else:
        print(json.dumps(table["summary"], indent=2, sort_keys=True))
    if args.out:
        with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as f:
            json.dump({"episodes": per_episode, "summary": table["summary"]}, f,
                      indent=2, sort_keys=True)
    return 0


def _export_pngs(episode_dirs):
    for ep_dir in episode_dirs:
        manifest_path = os.path.join(ep_dir, "shape.json")
        if not os.path.exists(manifest_path):
            continue
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        for name, shape in manifest["components"].items():
            if len(shape) < 2:
                continue
            suffix = ".f32" if name == "obs" else f".{name}.f32"
            path = os.path.join(ep_dir, f"obs_{0:06d}{suffix}")
            if os.path.exists(path):
                arr = np.fromfile(path, dtype="<f4").reshape(shape)
                img = arr if arr.ndim == 2 else arr[arr.shape[0] // 2]
                write_png_gray(path.replace(".f32", ".png"), img)


def _metric_table(per_episode):
    if not per_episode:
        return {"csv": "", "summary": {}}
    keys = sorted(per_episode[0])
    lines = [",".join(["episode"] + keys)]
    for i, row in enumerate(per_episode):
        lines.append(",".join([str(i)] + [repr(row[k]) for k in keys]))
    summary = {
        k: {
            "mean": float(np.mean([row[k] for row in per_episode])),
            "std": float(np.std([row[k] for row in per_episode])),
        }
        for k in keys
    }
    return {"csv": "\n".join(lines), "summary": summary}


BENCH_SCHEMA = {
    "required": ["n_envs", "frames", "image", "threads", "results"],
    "results_required": ["threads", "ms_per_batch_median", "ms_per_batch_min", "fps"],
}


def validate_bench_report(report) -> bool:
    if not all(k in report for k in BENCH_SCHEMA["required"]):
        return False
    return all(
        all(k in entry for k in BENCH_SCHEMA["results_required"])
        for entry in report["results"]
    )


def cmd_bench(args) -> int:
    patient = _load_patient(args)
    setup = load_setup("nav")
    spec = setup.params.image
    poses = _sweep_poses(patient, args.envs, args.seed)
    thread_counts = sorted({1, args.threads} | set(args.scan_threads or []))
    results = []
    for threads in thread_counts:
        sim = UsSimulator(
            patient.ct, patient.labels, patient.table, patient.noise, setup.us, spec,
            threads=threads,
        )
        try:
            sim.render_batch(poses)  # warm-up and JIT
            samples = []
            for _ in range(args.frames):
                t0 = time.perf_counter()
                sim.render_batch(poses)
                samples.append((time.perf_counter() - t0) * 1e3)
        finally:
            sim.close()
        results.append(
            {
                "threads": threads,
                "ms_per_batch_median": float(np.median(samples)),
                "ms_per_batch_min": float(np.min(samples)),
                "fps": float(args.envs / (np.median(samples) / 1e3)),
            }
        )
    report = {
        "n_envs": args.envs,
        "frames": args.frames,
        "image": [spec.height, spec.width],
        "threads": args.threads,
        "results": results,
    }
    if not validate_bench_report(report):
        raise AssertionError("benchmark report failed its own schema")
    out = json.dumps(report, indent=2, sort_keys=True)
    print(out)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.json"), "w", encoding="utf-8") as f:
            f.write(out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="probesim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=max(1, os.cpu_count() or 1))
        p.add_argument("--out", default=None)
        p.add_argument("--patient", default=None, help="patient directory (svol + landmarks)")
        p.add_argument("--phantom", default="torso:0", help="kind:seed procedural patient")

    render = sub.add_parser("render", help="render ultrasound frames")
    common(render)
    render.add_argument("--task", choices=["nav", "recon", "surgery"], default=None)
    render.add_argument("--config", default=None)
    render.add_argument("--frames", type=int, default=1)
    render.add_argument("--pose", action="append", help="x,y,yaw skin pose (repeatable)")
    render.add_argument("--format", choices=["raw", "png"], default="raw")
    render.set_defaults(fn=cmd_render, out="render_out")

    rollout = sub.add_parser("rollout", help="roll out a policy, report metrics")
    common(rollout)
    rollout.add_argument("--task", choices=["nav", "recon", "surgery"], default=None)
    rollout.add_argument("--config", default=None)
    rollout.add_argument("--policy", choices=["expert", "zero", "heuristic"], default="expert")
    rollout.add_argument("--envs", type=int, default=1)
    rollout.add_argument("--episodes", type=int, default=1)
    rollout.add_argument("--record-obs", action="store_true")
    rollout.add_argument("--format", choices=["json", "csv", "png"], default="json")
    rollout.set_defaults(fn=cmd_rollout)

    bench = sub.add_parser("bench", help="throughput benchmark")
    common(bench)
    bench.add_argument("--envs", type=int, default=100)
    bench.add_argument("--frames", type=int, default=10)
    bench.add_argument("--scan-threads", type=int, nargs="*", default=None)
    bench.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (VolumeFormatError, FileNotFoundError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - the contract maps these to exit 4
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Single command-line entry point: train, eval, bench, map, fuse, plot.

Training is configured by a YAML file (every key optional, unknown keys
rejected); `--set section.key=value` flags override file values. The env var
NAVGYM_THREADS caps the size of each worker pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import acnet, fusion, ga3c, geometry, sim_env, worldmap

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class ConfigError(Exception):
    pass


def default_config() -> dict:
    """The full run configuration with documented defaults."""
    return {
        "output_dir": "runs/latest",
        "seed": 0,
        "train": {
            "num_agents": 32,
            "num_trainers": 8,
            "num_predictors": 2,
            "prediction_batch_max": 32,
            "training_batch_size": 32,
            "t_max": 5,
            "gamma": 0.99,
            "total_episodes": 1000,
            "checkpoint_every": 500,
            "maps": ["simple_room"],
            "map_weights": None,
            "weight_schedule": [],  # entries: {episode: N, weights: [...]}
            "max_steps": 1000,
        },
        "robot": {
            "radius": 0.177,
            "v_max": 0.6,
            "dt": 0.5,
            "goal_radius": 0.3,
            "collision_substeps": 5,
        },
        "scanner": {
            "num_beams": 1081,
            "fov": 270.0,
            "angular_step": 0.25,
            "max_range": 20.0,
            "min_range": 0.06,
            "noise_sigma": 0.02,
        },
        "network": {
            "learning_rate": 3.0e-4,
            "rmsprop_decay": 0.99,
            "rmsprop_epsilon": 1.0e-6,
            "entropy_beta": 0.01,
            "value_coef": 0.5,
        },
    }


def _merge_config(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        here = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here} must be a mapping")
            _merge_config(base[key], value, here + ".")
        else:
            base[key] = value


def _apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key.path=value, got {assignment!r}")
    key_path, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw)
    node = config
    parts = key_path.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {key_path}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key: {key_path}")
    node[parts[-1]] = value


def load_run_config(config_path: str | None, overrides: list[str]) -> dict:
    config = default_config()
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config file is not valid YAML: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a mapping")
        _merge_config(config, loaded)
    for assignment in overrides:
        _apply_set(config, assignment)
    return config


def config_hash(config: dict) -> int:
    return acnet.config_hash(json.dumps(config, sort_keys=True))


def _thread_cap() -> int | None:
    raw = os.environ.get("NAVGYM_THREADS")
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"NAVGYM_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError("NAVGYM_THREADS must be >= 1")
    return cap


def build_train_config(config: dict) -> ga3c.TrainConfig:
    sc = config["scanner"]
    scanner = geometry.ScannerSpec(
        num_beams=sc["num_beams"],
        fov=sc["fov"],
        angular_step=sc["angular_step"],
        max_range=sc["max_range"],
        min_range=sc["min_range"],
        noise_sigma=sc["noise_sigma"],
    )
    rb = config["robot"]
    robot = sim_env.RobotSpec(
        radius=rb["radius"],
        v_max=rb["v_max"],
        dt=rb["dt"],
        goal_radius=rb["goal_radius"],
        collision_substeps=rb["collision_substeps"],
    )
    tr = config["train"]
    env = sim_env.EnvConfig(
        robot=robot,
        scanner=scanner,
        actions=sim_env.default_action_set(robot.v_max),
        max_steps=tr["max_steps"],
    )
    net = acnet.NetConfig(num_beams=scanner.num_beams)
    nw = config["network"]
    cap = _thread_cap()

    def capped(n: int) -> int:
        return n if cap is None else min(n, cap)

    schedule = tuple(
        (int(entry["episode"]), tuple(float(w) for w in entry["weights"]))
        for entry in tr["weight_schedule"]
    )
    weights = tr["map_weights"]
    try:
        return ga3c.TrainConfig(
            num_agents=capped(tr["num_agents"]),
            num_trainers=capped(tr["num_trainers"]),
            num_predictors=capped(tr["num_predictors"]),
            prediction_batch_max=tr["prediction_batch_max"],
            training_batch_size=tr["training_batch_size"],
            t_max=tr["t_max"],
            gamma=tr["gamma"],
            total_episodes=tr["total_episodes"],
            checkpoint_every=tr["checkpoint_every"],
            seed=config["seed"],
            maps=tuple(tr["maps"]),
            map_weights=None if weights is None else tuple(weights),
            weight_schedule=schedule,
            env=env,
            net=net,
            learning_rate=nw["learning_rate"],
            rmsprop_decay=nw["rmsprop_decay"],
            rmsprop_epsilon=nw["rmsprop_epsilon"],
            entropy_beta=nw["entropy_beta"],
            value_coef=nw["value_coef"],
        )
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(str(e)) from None


def cmd_train(args) -> int:
    try:
        config = load_run_config(args.config, args.set or [])
        if args.episodes is not None:
            config["train"]["total_episodes"] = args.episodes
        if args.seed is not None:
            config["seed"] = args.seed
        if args.output is not None:
            config["output_dir"] = args.output
        train_config = build_train_config(config)
        maps = [worldmap.resolve_map(name) for name in train_config.maps]
    except (ConfigError, worldmap.MapError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    digest = config_hash(config)
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config_snapshot.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(config, f, sort_keys=True)

    initial = None
    if args.resume is not None:
        try:
            params, opt, meta = acnet.load_checkpoint_file(args.resume, expected_config_hash=digest)
        except (FileNotFoundError, acnet.CheckpointError) as e:
            print(f"error: cannot resume: {e}", file=sys.stderr)
            return EXIT_CONFIG
        initial = (params, opt, meta["episode_count"])
        print(f"resuming from episode {meta['episode_count']}")

    try:
        result = ga3c.run_training(train_config, out, maps=maps, initial=initial, config_hash=digest)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: training failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"episodes_completed={result.episodes_completed}")
    print(f"metrics={result.metrics_path}")
    print(f"checkpoint={result.final_checkpoint}")
    if result.interrupted:
        print("interrupted=true")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        config = load_run_config(args.config, args.set or [])
        train_config = build_train_config(config)
        wmap = worldmap.resolve_map(args.map)
        params, _, _ = acnet.load_checkpoint_file(args.checkpoint)
    except (ConfigError, worldmap.MapError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, acnet.CheckpointError) as e:
        print(f"error: cannot load checkpoint: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        metrics = ga3c.evaluate(
            params, wmap, args.episodes, args.seed,
            env_config=train_config.env,
            trajectory_dir=args.trajectories,
        )
    except Exception as e:  # noqa: BLE001
        print(f"error: evaluation failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    for key, value in metrics.as_dict().items():
        print(f"{key}={value}")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        wmap = worldmap.resolve_map(args.map)
    except worldmap.MapError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    spec = geometry.ScannerSpec()
    rng = np.random.default_rng(0)
    poses = [
        geometry.Pose(
            geometry.Vec2(
                rng.uniform(wmap.bounds.min.x, wmap.bounds.max.x),
                rng.uniform(wmap.bounds.min.y, wmap.bounds.max.y),
            ),
            rng.uniform(-np.pi, np.pi),
        )
        for _ in range(max(args.iterations, 1))
    ]
    packed = wmap.packed

    t0 = time.perf_counter()
    for pose in poses:
        geometry.cast_scan(pose, packed, spec)
    batched_dt = time.perf_counter() - t0

    scalar_poses = poses[: max(1, min(len(poses), 5))]
    t0 = time.perf_counter()
    for pose in scalar_poses:
        geometry.cast_scan_scalar(pose, wmap.obstacles, spec)
    scalar_dt = time.perf_counter() - t0

    batched_rate = len(poses) / batched_dt
    scalar_rate = len(scalar_poses) / scalar_dt
    print(f"map={wmap.name}")
    print(f"obstacles={len(wmap.obstacles)}")
    print(f"beams={spec.num_beams}")
    print(f"batched_scans_per_sec={batched_rate:.2f}")
    print(f"scalar_scans_per_sec={scalar_rate:.4f}")
    print(f"speedup={batched_rate / scalar_rate:.2f}")
    return EXIT_OK


def cmd_map(args) -> int:
    try:
        with open(args.svg, "r", encoding="utf-8") as f:
            svg = f.read()
        name = args.name or Path(args.out).stem
        wmap = worldmap.convert_svg(svg, args.scale, name=name)
        worldmap.save_map_file(wmap, args.out)
    except (OSError, ValueError, worldmap.MapError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {args.out}: {len(wmap.obstacles)} obstacles, "
          f"{len(wmap.spawn_regions)} spawn / {len(wmap.goal_regions)} goal regions")
    return EXIT_OK


def cmd_fuse(args) -> int:
    spec = geometry.ScannerSpec()
    vspec = fusion.VirtualScanSpec(
        fov=args.camera_fov,
        height_band=(args.z_min, args.z_max),
        min_depth=args.min_depth,
    )
    try:
        laser = fusion.load_scan_file(args.scan, max_range=spec.max_range)
        cloud = fusion.load_pointcloud_file(args.cloud)
        virtual = fusion.pointcloud_to_scan(cloud, vspec, spec)
        fused = fusion.fuse_scans(laser, virtual)
        fusion.save_scan_file(fused, args.out)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {args.out}: {fused.num_beams} ranges")
    return EXIT_OK


_PLOT_TEMPLATE = """\
# Training curves for {metrics}. Render with: gnuplot {script}
set datafile separator ","
set terminal pngcairo size 1400,500
set output "{png}"
set multiplot layout 1,2
set xlabel "episode"
set ylabel "score (total_reward)"
plot "{metrics}" every ::1 using 1:4 with dots notitle, \\
     "{metrics}" every ::1 using 1:4 smooth bezier with lines lw 2 title "score"
set ylabel "steps"
plot "{metrics}" every ::1 using 1:5 with dots notitle, \\
     "{metrics}" every ::1 using 1:5 smooth bezier with lines lw 2 title "steps"
unset multiplot
"""


def cmd_plot(args) -> int:
    if not Path(args.metrics).exists():
        print(f"error: metrics file not found: {args.metrics}", file=sys.stderr)
        return EXIT_CONFIG
    script = _PLOT_TEMPLATE.format(
        metrics=args.metrics,
        script=args.out,
        png=str(Path(args.out).with_suffix(".png")),
    )
    try:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(script)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {args.out}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # usage errors are exit code 1 (argparse defaults to 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="navgym", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a navigation policy")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value, e.g. --set train.num_agents=4")
    p.add_argument("--episodes", type=int, help="shortcut for train.total_episodes")
    p.add_argument("--seed", type=int, help="shortcut for seed")
    p.add_argument("--output", help="shortcut for output_dir")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with the greedy policy")
    p.add_argument("checkpoint")
    p.add_argument("map", help="builtin map name or map file path")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="YAML run configuration (for env parameters)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--trajectories", help="directory for per-episode trajectory CSVs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time scalar vs batched scan casting")
    p.add_argument("map", help="builtin map name or map file path")
    p.add_argument("--iterations", type=int, default=50, help="batched scans to time")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("map", help="convert an SVG drawing to a map file")
    p.add_argument("svg")
    p.add_argument("--scale", type=float, required=True, help="pixels per meter")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--name", help="map name (default: output stem)")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("fuse", help="fuse a laser scan with a recorded point cloud")
    p.add_argument("--scan", required=True, help="laser scan file, one range per line")
    p.add_argument("--cloud", required=True, help="point cloud file, 'x y z' per line")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--camera-fov", type=float, default=90.0)
    p.add_argument("--z-min", type=float, default=0.02)
    p.add_argument("--z-max", type=float, default=0.42)
    p.add_argument("--min-depth", type=float, default=0.2)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("plot", help="emit a gnuplot script for a metrics CSV")
    p.add_argument("metrics")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

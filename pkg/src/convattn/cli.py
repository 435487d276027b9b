"""Command-line entry point.

Subcommands: train, reparam-check, fourier, schedule, interp. Every run
writes a manifest before doing work and finalizes it with a status, so no
artifact exists without a manifest accounting for it.

Exit codes: 0 success, 1 reparam-check failure, 2 config/usage error,
3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__, limit_blas_threads
from .checkpoint import CheckpointError, load_checkpoint, model_from_checkpoint, read_container
from .config import ConfigError, PRESETS, apply_overrides, build_train_config, load_config_file, load_preset
from .data import DataError
from .reparam import reparameterize, verify_equivalence
from .schedule import SwitchSchedule, switch_epochs
from .spectral import auto_bin_width, delta_log_amplitude, depth_profile, depth_profile_rows, feature_spectrum, TARGET_FREQS
from .tensor import ShapeError, Tensor
from .train import DivergenceError, TrainConfig, load_dataset, run_interpolation_suite, train

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    out_dir: str
    started_at: str
    version: str = __version__
    status: str = "running"
    finished_at: str | None = None
    artifacts: dict = field(default_factory=dict)
    error: str | None = None

    def write(self) -> None:
        os.makedirs(self.out_dir, exist_ok=True)
        with open(os.path.join(self.out_dir, "manifest.json"), "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _timestamp() -> str:
    return time.strftime("%Y%m%dT%H%M%S")


def _make_out_dir(args, command: str, seed: int) -> str:
    if args.out:
        return args.out
    return os.path.join("runs", f"{command}-{_timestamp()}-seed{seed}")


def _resolve_config(args) -> TrainConfig:
    mapping: dict = {}
    if args.preset:
        mapping.update(load_preset(args.preset))
    if args.config:
        mapping.update(load_config_file(args.config))
    mapping = apply_overrides(mapping, args.set)
    if getattr(args, "data_dir", None):
        mapping["data_dir"] = args.data_dir
    return build_train_config(mapping)


def _populated_targets(config: TrainConfig, bin_width: float = 0.0) -> tuple[list[float], float]:
    """Standard target frequencies restricted to bins the grid populates."""
    h_t, w_t = config.grid_hw()
    width = bin_width or auto_bin_width(h_t, w_t)
    if h_t < 2 or w_t < 2:
        return [], width
    probe = feature_spectrum(_noise_grid(h_t, w_t, 1, 1), bin_width=width)
    targets = []
    for f in TARGET_FREQS:
        idx = min(int(f / width), len(probe.counts) - 1)
        if probe.counts[idx] > 0:
            targets.append(f)
    return targets, width


def _noise_grid(h_t: int, w_t: int, batch: int, d: int, seed: int = 0):
    from .blocks import TokenGrid

    rng = np.random.default_rng(seed)
    return TokenGrid(Tensor(rng.standard_normal((batch, h_t, w_t, d))), h_t, w_t)


def _write_profile_csv(path: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write("depth,f,delta_log_amp\n")
        for depth, f, v in rows:
            fh.write(f"{depth:.6f},{f:.6f},{v:.6f}\n")


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    try:
        config = _resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = _make_out_dir(args, "train", config.seed)
    manifest = RunManifest("train", sys.argv[1:], config.to_dict(), config.seed, out_dir, _timestamp())
    manifest.write()
    try:
        result = train(config, out_dir=out_dir, resume_from=args.resume_from)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        with open(metrics_path, "w") as fh:
            for m in result.metrics:
                fh.write(json.dumps(m) + "\n")
        manifest.artifacts["metrics"] = metrics_path
        manifest.artifacts["checkpoint"] = result.checkpoint_path

        targets, width = _populated_targets(config)
        if targets:
            eval_ds = load_dataset(config, "test")
            probe = eval_ds.images[: min(256, len(eval_ds))]
            profile = depth_profile(result.model, probe, epoch=config.total_epochs,
                                    sched=config.schedule(), targets=targets, bin_width=width)
            profile_path = os.path.join(out_dir, "depth_profile.csv")
            _write_profile_csv(profile_path, depth_profile_rows(profile))
            manifest.artifacts["depth_profile"] = profile_path
            if len(targets) < len(TARGET_FREQS):
                manifest.artifacts["depth_profile_note"] = (
                    f"grid {config.grid_hw()} populates only {len(targets)} of "
                    f"{len(TARGET_FREQS)} standard frequencies"
                )
        manifest.status = "completed"
        manifest.finished_at = _timestamp()
        manifest.write()
        last = result.metrics[-1]
        print(f"done: {len(result.metrics)} epochs, top1 {last['top1']:.2f}, top5 {last['top5']:.2f}")
        return EXIT_OK
    except DataError as exc:
        manifest.status, manifest.error = "failed", str(exc)
        manifest.finished_at = _timestamp()
        manifest.write()
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        manifest.status, manifest.error = "diverged", str(exc)
        manifest.finished_at = _timestamp()
        manifest.write()
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


# --------------------------------------------------------------------------
# reparam-check


def cmd_reparam_check(args) -> int:
    if args.kernel_size % 2 == 0:
        print("kernel size must be odd", file=sys.stderr)
        return EXIT_CONFIG
    try:
        h_t, w_t = (int(p) for p in args.grid.lower().split("x"))
    except ValueError:
        print(f"--grid must look like 8x8, got {args.grid!r}", file=sys.stderr)
        return EXIT_CONFIG
    from .blocks import ConvMixer

    rng = np.random.default_rng(args.seed)
    kernel = Tensor(rng.normal(0.0, 0.1, (args.kernel_size, args.kernel_size, args.dim, args.dim)))
    bias = Tensor(rng.normal(0.0, 0.1, args.dim))
    conv = ConvMixer(kernel, bias)
    attn = reparameterize(conv, (h_t, w_t), beta=args.beta)
    if args.perturb:
        attn.w_o.data[0, 0, 0] += args.perturb
    report = verify_equivalence(conv, attn, num_samples=args.samples, tolerance=args.tol,
                                seed=args.seed + 1)
    print(report.to_json(indent=2))
    return EXIT_OK if report.passed else EXIT_FAIL


# --------------------------------------------------------------------------
# fourier


def cmd_fourier(args) -> int:
    out_dir = args.out or os.path.dirname(args.checkpoint) or "."
    try:
        header, tensors = load_checkpoint(args.checkpoint)
        model = model_from_checkpoint(header, tensors)
        config = TrainConfig.from_dict(header["config"])
    except (CheckpointError, OSError) as exc:
        print(f"cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_DATA
    h_t, w_t = config.grid_hw()
    if h_t < 2 or w_t < 2:
        print(f"token grid {h_t}x{w_t} too small for spectral analysis; need at least 2x2", file=sys.stderr)
        return EXIT_CONFIG

    manifest = RunManifest("fourier", sys.argv[1:], config.to_dict(), config.seed, out_dir, _timestamp())
    manifest.artifacts["tap"] = args.tap
    manifest.write()
    try:
        if args.feature_dump:
            _, dump_tensors = read_container(args.feature_dump)
            rows = []
            for name in sorted(dump_tensors):
                maps = dump_tensors[name]
                profile = feature_spectrum_from_maps(maps, args.bin_width)
                for f in TARGET_FREQS:
                    rows.append((name, f, delta_log_amplitude(profile, f)))
            path = os.path.join(out_dir, "feature_dump_profile.csv")
            with open(path, "w") as fh:
                fh.write("map,f,delta_log_amp\n")
                for name, f, v in rows:
                    fh.write(f"{name},{f:.6f},{v:.6f}\n")
            manifest.artifacts["profile"] = path
        else:
            if args.random_batch:
                rng = np.random.default_rng(config.seed)
                images = rng.random((args.random_batch, *config.image_hw, config.in_channels)).astype(np.float32)
            else:
                if args.data:
                    from dataclasses import replace

                    config = replace(config, data_dir=args.data)
                ds = load_dataset(config, "test")
                images = ds.images[: args.batch]
            targets, width = _populated_targets(config, args.bin_width)
            if not targets:
                print(f"no standard target frequency is populated on a {h_t}x{w_t} grid; "
                      "grids of at least 2x2 tokens and a compatible bin width are needed", file=sys.stderr)
                manifest.status, manifest.error = "failed", "no populated target frequencies"
                manifest.write()
                return EXIT_CONFIG
            if len(targets) < len(TARGET_FREQS):
                manifest.artifacts["note"] = (
                    f"grid {h_t}x{w_t} populates only {len(targets)} of {len(TARGET_FREQS)} "
                    "standard frequencies"
                )
            profile = depth_profile(model, images, targets=targets, tap=args.tap, bin_width=width)
            csv_path = os.path.join(out_dir, "depth_profile.csv")
            _write_profile_csv(csv_path, depth_profile_rows(profile))
            json_path = os.path.join(out_dir, "depth_profile.json")
            with open(json_path, "w") as fh:
                json.dump(profile.to_dict(), fh, indent=2)
            manifest.artifacts["csv"] = csv_path
            manifest.artifacts["json"] = json_path
        manifest.status = "completed"
        manifest.finished_at = _timestamp()
        manifest.write()
        return EXIT_OK
    except DataError as exc:
        manifest.status, manifest.error = "failed", str(exc)
        manifest.write()
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ShapeError as exc:
        manifest.status, manifest.error = "failed", str(exc)
        manifest.write()
        print(f"geometry mismatch: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        manifest.status, manifest.error = "failed", str(exc)
        manifest.write()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def feature_spectrum_from_maps(maps: np.ndarray, bin_width: float | None):
    from .spectral import spectrum_of_maps

    if maps.ndim == 4:  # [batch, h, w, d] feature dump
        maps = np.moveaxis(maps, -1, 1).reshape(-1, maps.shape[1], maps.shape[2])
    width = bin_width or auto_bin_width(maps.shape[-2], maps.shape[-1])
    return spectrum_of_maps(maps, bin_width=width)


# --------------------------------------------------------------------------
# schedule


def cmd_schedule(args) -> int:
    if args.layers < 1 or args.epochs < 1:
        print("need --layers >= 1 and --epochs >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        sched = SwitchSchedule(args.epochs, args.layers, args.kind, args.e_switch)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    table = switch_epochs(sched)
    if args.format == "json":
        payload = {"T": args.epochs, "L": args.layers, "kind": args.kind,
                   "switches": [{"layer": layer, "first_sa_epoch": e} for layer, e in table]}
        if args.kind == "all-sa":
            payload["note"] = "all layers SA from epoch 1"
        print(json.dumps(payload, indent=2))
    else:
        print("layer,first_sa_epoch")
        for layer, e in table:
            print(f"{layer},{e}")
        if args.kind == "all-sa":
            print("# all layers SA from epoch 1")
    return EXIT_OK


# --------------------------------------------------------------------------
# interp


def cmd_interp(args) -> int:
    try:
        config = _resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = _make_out_dir(args, "interp", config.seed)
    manifest = RunManifest("interp", sys.argv[1:], config.to_dict(), config.seed, out_dir, _timestamp())
    manifest.write()
    try:
        results = run_interpolation_suite(config, out_dir, resume=args.resume)
        combined = os.path.join(out_dir, "interpolation_combined.csv")
        with open(combined, "w") as fh:
            fh.write("conv_epochs,sa_epochs,depth,f,delta_log_amp\n")
            for rec in results:
                for depth, f, v in depth_profile_rows(rec["profile"]):
                    fh.write(f"{rec['e_switch']},{rec['sa_epochs']},{depth:.6f},{f:.6f},{v:.6f}\n")
        manifest.artifacts["combined"] = combined
        manifest.artifacts["settings"] = [
            {"conv_epochs": r["e_switch"], "sa_epochs": r["sa_epochs"], "top1": r["top1"],
             "checkpoint": r["checkpoint"], "csv": r["csv"]}
            for r in results
        ]
        manifest.status = "completed"
        manifest.finished_at = _timestamp()
        manifest.write()
        print(f"4 settings trained; combined profile at {combined}")
        return EXIT_OK
    except DataError as exc:
        manifest.status, manifest.error = "failed", str(exc)
        manifest.write()
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        manifest.status, manifest.error = "diverged", str(exc)
        manifest.write()
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


# --------------------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a key = value config file")
    p.add_argument("--preset", choices=PRESETS, help="packaged preset to start from")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--data-dir", help="dataset directory (overrides config)")
    p.add_argument("--out", help="output directory (default: runs/<cmd>-<timestamp>-seed<seed>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convattn", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"convattn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model under a switch schedule")
    _add_config_args(p)
    p.add_argument("--resume-from", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reparam-check", help="verify conv -> attention function preservation")
    p.add_argument("--kernel-size", "-K", type=int, default=3)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--grid", default="8x8")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=100.0)
    p.add_argument("--perturb", type=float, default=0.0,
                   help="sanity flag: nudge one output-projection entry to force a failure")
    p.set_defaults(func=cmd_reparam_check)

    p = sub.add_parser("fourier", help="depth profile of a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--feature-dump", help="analyze an offline feature dump instead of running the model")
    p.add_argument("--random-batch", type=int, default=0,
                   help="probe with N random images instead of dataset images")
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--tap", choices=("post-residual", "pre-residual"), default="post-residual")
    p.add_argument("--bin-width", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fourier)

    p = sub.add_parser("schedule", help="print the per-layer switch table")
    p.add_argument("--epochs", "-T", type=int, required=True)
    p.add_argument("--layers", "-L", type=int, required=True)
    p.add_argument("--kind", default="linear", choices=("linear", "uniform", "all-conv", "all-sa"))
    p.add_argument("--e-switch", type=int, default=None)
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("interp", help="run the four-setting interpolation suite")
    _add_config_args(p)
    p.add_argument("--resume", action="store_true", help="reuse checkpoints already in the output directory")
    p.set_defaults(func=cmd_interp)

    return parser


def main(argv=None) -> int:
    limit_blas_threads()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""``medttt {train|eval|oracle-check|bench|synth} --config FILE [--seed N] [--out DIR] [k=v ...]``.

Exit codes: 0 success, 1 validation/property failure, 2 usage error, 3 IO error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from . import bench as bench_mod
from .checks import equivalence_suite
from .data import DataError, NetpbmError, TilingError, is_writable_dir, load_split, read_manifest, synth_dataset
from .losses import CSV_HEADER, LossConfig, MetricsError
from .model import (
    CheckpointError,
    ModelConfig,
    ModelConfigError,
    ablation_setting,
    build_model,
    load_checkpoint,
    model_summary_json,
)
from .train import TRAIN_LOG_HEADER, TrainingAborted, evaluate_metrics, fit

log = logging.getLogger("medttt")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
COMMANDS = ("train", "eval", "oracle-check", "bench", "synth")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Every knob of every command; unused fields are ignored by a given command."""

    seed: int = 0
    out: str = "runs"
    dataset: str = "synth"
    manifest: str = ""
    setting: str = "full"
    model: dict = field(default_factory=dict)
    # training
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-2
    momentum: float = 0.9
    clip_norm: float | None = 1.0
    augment: str = "none"
    alpha: float = 0.5
    target_val_dice: float | None = None
    # evaluation
    checkpoint: str = ""
    split: str = "val"
    # synthetic data
    n: int = 64
    size: int = 64
    # oracle check (eta / scale_mismatch inject faults)
    check_scale: float = 1.0
    eta: float = 0.5
    scale_mismatch: bool = False
    # bench
    impls: list = field(default_factory=lambda: ["ttt_minibatch", "softmax_attn"])
    T_ttt: list = field(default_factory=lambda: [4096, 8192, 16384, 32768, 65536, 131072, 262144])
    T_attn: list = field(default_factory=lambda: [512, 1024, 2048, 4096, 8192, 16384, 32768])
    b: int = 16
    d: int = 8
    reps: int = 5
    warmup: int = 2

    def model_config(self) -> ModelConfig:
        base = ModelConfig.from_dict({**self.model, "seed": self.seed})
        return ablation_setting(self.setting, base)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """``a.b=v`` sets ``raw['a']['b']``; values are JSON when they parse, else strings."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, val = item.split("=", 1)
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(val)
    return out


def resolve_config(path: str | None, seed: int | None, out: str | None, overrides: list[str]) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"config {path}: top level must be an object")
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**raw)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(text.encode("utf-8"))


def _echo_config(cfg: RunConfig, out: Path) -> None:
    _write_text(out / "config.json", json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    mcfg = cfg.model_config()
    # ModelConfig defaults get filled in before echoing so the echo is complete
    cfg.model = {k: v for k, v in mcfg.to_dict().items() if k not in ("seed", "use_mr_block", "use_fff", "use_ttt")}
    _echo_config(cfg, out)
    manifest = read_manifest(cfg.manifest)
    train, val = load_split(manifest, "train"), load_split(manifest, "val")
    model = build_model(mcfg)
    _write_text(out / "model.json", model_summary_json(model) + "\n")
    log_path = out / "train_log.csv"
    _write_text(log_path, TRAIN_LOG_HEADER + "\n")

    def append(rec):
        with open(log_path, "ab") as fh:
            fh.write((rec.csv_row() + "\n").encode("utf-8"))

    t0 = time.perf_counter()
    try:
        history = fit(
            model, train, val, cfg.epochs,
            batch_size=cfg.batch_size, lr=cfg.lr, momentum=cfg.momentum, clip_norm=cfg.clip_norm,
            seed=cfg.seed, augment=cfg.augment, loss_cfg=LossConfig(cfg.alpha),
            checkpoint_path=out / "best.ckpt", target_val_dice=cfg.target_val_dice, on_epoch=append,
        )
    except TrainingAborted as exc:
        print(f"training aborted: {exc}; last good checkpoint kept at {out / 'best.ckpt'}", file=sys.stderr)
        return EXIT_FAIL
    best = max(history, key=lambda r: r.val_dice)
    print(f"{len(history)} epochs in {time.perf_counter() - t0:.1f}s; best val dice {best.val_dice:.4f} at epoch {best.epoch}")
    print(f"checkpoint: {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _echo_config(cfg, out)
    model = build_model(cfg.model_config())
    model.load_state_dict(load_checkpoint(cfg.checkpoint))
    samples = load_split(read_manifest(cfg.manifest), cfg.split)
    report = evaluate_metrics(model, samples, cfg.batch_size)
    row = report.csv_row(cfg.dataset, cfg.split, cfg.setting)
    _write_text(out / "metrics.csv", CSV_HEADER + "\n" + row + "\n")
    print(CSV_HEADER)
    print(row)
    return EXIT_OK


def cmd_oracle_check(cfg: RunConfig) -> int:
    results = equivalence_suite(cfg.check_scale, eta=cfg.eta, scale_mismatch=cfg.scale_mismatch)
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    if cfg.out:
        rows = ["check,passed,max_dev,tol,worst_seed"]
        rows += [f"{r.name},{int(r.passed)},{r.max_dev:.6e},{r.tol:.0e},{r.worst_seed}" for r in results]
        _write_text(Path(cfg.out) / "oracle_check.csv", "\n".join(rows) + "\n")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    rows = [bench_mod.BENCH_HEADER]
    slopes = ["impl,T_min,T_max,slope"]
    for impl in cfg.impls:
        Ts = cfg.T_attn if impl in ("softmax_attn", "ttt_online") else cfg.T_ttt
        recs = bench_mod.run_bench(impl, Ts, cfg.b, cfg.d, cfg.reps, cfg.warmup, cfg.seed)
        rows += [r.csv_row() for r in recs]
        slope = bench_mod.loglog_slope(recs)
        slopes.append(f"{impl},{recs[0].T},{recs[-1].T},{slope:.4f}")
        print(f"{impl}: log-log slope {slope:.3f} over T={recs[0].T}..{recs[-1].T}")
    print(f"b-doubling output change in batch-at-init mode: {bench_mod.b_invariance():.2e}")
    _write_text(out / "bench.csv", "\n".join(rows) + "\n")
    _write_text(out / "slopes.csv", "\n".join(slopes) + "\n")
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    if not is_writable_dir(cfg.out):
        raise PermissionError(f"output directory {cfg.out} is not writable")
    path = synth_dataset(cfg.n, cfg.size, cfg.seed, cfg.out, tile=cfg.model_config().tile)
    print(path)
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "oracle-check": cmd_oracle_check,
    "bench": cmd_bench,
    "synth": cmd_synth,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="medttt", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_intermixed_args(argv)
        cfg = resolve_config(args.config, args.seed, args.out, args.overrides)
        if args.command in ("train", "eval") and not cfg.manifest:
            raise UsageError(f"{args.command} needs a manifest (config key 'manifest')")
        if args.command == "eval" and not cfg.checkpoint:
            raise UsageError("eval needs a checkpoint (config key 'checkpoint')")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return HANDLERS[args.command](cfg)
    except ModelConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DataError, NetpbmError, TilingError, CheckpointError, MetricsError, bench_mod.BenchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

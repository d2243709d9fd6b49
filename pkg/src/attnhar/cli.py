"""Command-line pipeline: synth -> train -> eval / attention-dump, plus gradcheck.

Exit codes: 0 ok, 2 usage or configuration, 3 numeric failure, 4 I/O.
Output directories default to ``$ATTNHAR_OUT`` (or ``./runs``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (MANIFEST_FORMAT, MANIFEST_NAME, SynthSpec, benchmark_spec, interpolate_nans,
                   load_manifest_splits, signal_power, standardize, synth_generate, write_csv,
                   write_manifest)
from .errors import AttnHarError, ConfigError, DimensionError, NumericError
from .evaluation import attention_summary, evaluate
from .model import HarModel, ModelConfig, load_checkpoint
from .ndcore import Rng
from .training import (TrainConfig, gradcheck, linear_model_factory, tiny_model_factory,
                       train)

log = logging.getLogger("attnhar")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "ATTNHAR_OUT"

DEFAULT_SPLITS = {"train": 20_000, "val": 5_000, "test": 5_000}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_run_manifest(out: Path, command: str, config: dict, seed, inputs: list, outputs: list,
                       started: float) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    path = out / "run_manifest.json"
    write_atomic(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return path


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _out_dir(arg) -> Path:
    out = Path(arg if arg is not None else os.environ.get(OUT_ENV, "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    started = time.time()
    inputs = []
    splits = dict(DEFAULT_SPLITS)
    if args.spec is None:
        spec = benchmark_spec(args.snr_db if args.snr_db is not None else 6.0)
    else:
        path = _require_file(args.spec, "synthetic spec file")
        inputs.append(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        splits = {**splits, **raw.pop("splits", {})}
        snr_db = raw.pop("snr_db", None)
        spec = SynthSpec.from_dict(raw)
        if args.snr_db is not None or snr_db is not None:
            target = args.snr_db if args.snr_db is not None else snr_db
            spec.noise_std = float(np.sqrt(signal_power(spec) / 10 ** (target / 10.0)))
    out = _out_dir(args.out)
    root = Rng(args.seed)
    written, stats = {}, None
    for k, (name, n) in enumerate(splits.items()):
        raw_x, labels = synth_generate(root.spawn(10 + k), spec, int(n))
        if name == "train":
            _, mean, std = standardize(interpolate_nans(raw_x))
            stats = (mean, std)
        written[name] = write_csv(out / f"{name}.csv", raw_x, labels, spec.channel_names)
    entries = {
        "format": MANIFEST_FORMAT,
        "version": "1",
        "channels": ",".join(spec.channel_names),
        "label_column": "label",
        "timestamp_column": "t",
        "delimiter": ",",
        "sampling_rate": repr(float(spec.sampling_rate)),
        "n_classes": str(len(spec.classes)),
        "class_names": ",".join(c.name for c in spec.classes),
        "seed": str(args.seed),
    }
    for name, path in written.items():
        entries[f"split.{name}"] = path.name
        entries[f"split.{name}.sha256"] = sha256_file(path)
    if stats is not None:
        entries["norm.mean"] = ",".join(repr(float(v)) for v in stats[0])
        entries["norm.std"] = ",".join(repr(float(v)) for v in stats[1])
    manifest = write_manifest(out / MANIFEST_NAME, entries)
    config = {"spec": asdict(spec), "splits": splits}
    write_run_manifest(out, "synth", config, args.seed, inputs, [*written.values(), manifest], started)
    print(f"wrote {len(written)} splits to {out}")
    return EXIT_OK


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    path = _require_file(path, "config file")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None


_TRAIN_DEFAULTS = {
    "variant": "attention", "epochs": 30, "lr": 0.001, "batch": 100, "seed": 0,
    "lr_decay": 0.98, "dropout": 0.5, "patience": 5, "window": 24,
}


def _resolve(args, file_cfg: dict, defaults: dict) -> tuple[dict, dict]:
    """CLI flag > config file > built-in default; also reports where each value came from."""
    values, sources = {}, {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            values[key], sources[key] = flag, "flag"
        elif key in file_cfg:
            values[key], sources[key] = file_cfg[key], "config"
        else:
            values[key], sources[key] = default, "default"
    return values, sources


def _manifest_path(data) -> Path:
    path = Path(data)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return _require_file(path, "dataset manifest")


def cmd_train(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config)
    cfg, sources = _resolve(args, file_cfg, _TRAIN_DEFAULTS)
    manifest = _manifest_path(args.data)
    splits, meta = load_manifest_splits(manifest)
    if "train" not in splits:
        raise ConfigError(f"{manifest}: no train split")
    tr = splits["train"]
    model_cfg = ModelConfig(n_channels=tr.n_channels, n_classes=int(meta.get("n_classes", tr.labels.max() + 1)),
                            variant=cfg["variant"], window=int(cfg["window"]), dropout=float(cfg["dropout"]))
    train_cfg = TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch"]), lr=float(cfg["lr"]),
                            lr_decay=float(cfg["lr_decay"]), seed=int(cfg["seed"]),
                            patience=int(cfg["patience"]), window=int(cfg["window"]),
                            log_timing=args.log_timing)
    model = HarModel(model_cfg, seed=train_cfg.seed)
    out = _out_dir(args.out)
    result = train(model, tr, splits.get("val"), train_cfg)
    ckpt = out / "checkpoint.bin"
    log_path = out / "train_log.jsonl"
    write_atomic(ckpt, result.best_checkpoint)
    write_atomic(log_path, result.log_lines().encode())
    config = {"model": asdict(model_cfg), "train": asdict(train_cfg), "sources": sources,
              "epoch_seconds": [round(s, 3) for s in result.epoch_seconds]}
    inputs = [manifest] + [manifest.parent / meta[f"split.{s}"] for s in splits]
    write_run_manifest(out, "train", config, train_cfg.seed, inputs, [ckpt, log_path], started)
    print(f"best epoch {result.best_epoch}; checkpoint {ckpt}")
    return EXIT_OK


def _load_for_eval(args):
    ckpt = _require_file(args.checkpoint, "checkpoint")
    model, header = load_checkpoint(ckpt)
    manifest = _manifest_path(args.data)
    splits, _ = load_manifest_splits(manifest, [args.split])
    ds = splits[args.split]
    if ds.n_channels != model.cfg.n_channels:
        raise DimensionError(
            f"checkpoint expects frames ({model.cfg.window}, {model.cfg.n_channels}) but dataset "
            f"{args.split} has samples ({len(ds)}, {ds.n_channels})")
    return model, ds, [ckpt, manifest]


def cmd_eval(args) -> int:
    started = time.time()
    model, ds, inputs = _load_for_eval(args)
    report = evaluate(model, ds, include_null=not args.exclude_null)
    path = Path(args.report)
    write_atomic(path, report.to_json().encode())
    write_run_manifest(path.parent, "eval", {"split": args.split, "exclude_null": args.exclude_null},
                       None, inputs, [path], started)
    lo, hi = report.wilson_low, report.wilson_high
    print(f"mean F1 {report.mean_f1:.4f}  accuracy {report.accuracy:.4f}  95% Wilson [{lo:.4f}, {hi:.4f}]")
    return EXIT_OK


def cmd_attention_dump(args) -> int:
    started = time.time()
    model, ds, inputs = _load_for_eval(args)
    summary, weights, _ = attention_summary(model, ds)
    sums = weights.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > 1e-9:
        raise NumericError("attention weights do not sum to one")
    path = Path(args.csv)
    write_atomic(path, summary.to_csv().encode())
    write_run_manifest(path.parent, "attention-dump", {"split": args.split}, None, inputs, [path], started)
    last = summary.medians.shape[1]
    for k, row in zip(summary.classes, summary.medians):
        early = max(row[0], row[1]) if last > 1 else row[0]
        print(f"class {k}: median w1={row[0]:.3f} w2={row[1] if last > 1 else float('nan'):.3f} "
              f"w{last}={row[-1]:.3f} early<=last: {early <= row[-1]}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    checks = [("linear", linear_model_factory(args.seed), min(args.tolerance, 1e-6)),
              ("baseline", tiny_model_factory("baseline", args.seed), args.tolerance),
              ("attention", tiny_model_factory("attention", args.seed), args.tolerance)]
    for name, factory, tol in checks:
        report = gradcheck(factory, tolerance=tol)
        print(f"[{name}] tolerance {tol:g}: {'PASS' if report.passed else 'FAIL'}")
        for line in report.lines():
            print("  " + line)
        ok &= report.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnhar", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic activity dataset")
    s.add_argument("--spec", help="JSON spec file (default: built-in 4-class benchmark)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--snr-db", type=float, dest="snr_db")
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a baseline or attention model")
    t.add_argument("--data", required=True, help="dataset manifest or its directory")
    t.add_argument("--variant")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr-decay", type=float, dest="lr_decay")
    t.add_argument("--dropout", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--window", type=int)
    t.add_argument("--config", help="JSON file with defaults for the flags above")
    t.add_argument("--log-timing", action="store_true", help="add wall-clock seconds to the log")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    for name, func, target, flag in [("eval", cmd_eval, "report", "--report"),
                                     ("attention-dump", cmd_attention_dump, "csv", "--csv")]:
        e = sub.add_parser(name)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--split", default="test")
        e.add_argument(flag, dest=target, required=True)
        if name == "eval":
            e.add_argument("--exclude-null", action="store_true", help="leave class 0 out of mean F1")
        e.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="finite-difference check of the tiny models")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "variant", None) is not None and args.variant not in ("baseline", "attention"):
        parser.error(f"invalid variant {args.variant!r}")
    try:
        return args.func(args)
    except AttnHarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

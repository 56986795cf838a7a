"""``neurogame`` command line: train, eval and inspect-shapley.

Errors go to stderr as one line, ``neurogame: error[<kind>]: <message>``.
Exit codes: 2 usage/config, 3 dataset, 4 numeric divergence, 5 checkpoint or
shape mismatch, 6 model without NEUROGAME layers.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .data import DatasetError, load_directory, read_image, split, synth_bars, to_arrays
from .models import CheckpointError, load_checkpoint
from .training import TrainingDiverged, evaluate, run_training

EXIT_CODES = {"config": 2, "usage": 2, "dataset": 3, "divergence": 4, "checkpoint": 5, "shape": 5, "model": 6}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise CliError("config", str(exc)) from None
    if args.out:
        cfg.output_dir = args.out
    try:
        summary = run_training(cfg)
    except DatasetError as exc:
        raise CliError("dataset", str(exc)) from None
    except TrainingDiverged as exc:
        raise CliError("divergence", f"non-finite values at {exc}") from None
    test = summary.get("test_metrics") or {}
    shown = {k: v for k, v in test.items() if k != "brackets"}
    print(f"run written to {cfg.output_dir}; test {json.dumps(shown, sort_keys=True)}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _parse_synth(spec: str) -> dict:
    """``synth-bars:n=200,size=16,noise=0.3,seed=7,channels=1,age=1``."""
    opts = {}
    body = spec.split(":", 1)[1] if ":" in spec else ""
    for part in filter(None, body.split(",")):
        key, _, val = part.partition("=")
        opts[key.strip()] = val.strip()
    casts = {"n": int, "size": int, "noise": float, "seed": int, "channels": int, "age": int}
    unknown = set(opts) - set(casts)
    if unknown:
        raise CliError("usage", f"unknown synth-bars option(s): {', '.join(sorted(unknown))}")
    try:
        return {k: casts[k](v) for k, v in opts.items()}
    except ValueError as exc:
        raise CliError("usage", f"bad synth-bars option: {exc}") from None


def _eval_samples(data: str | None, header: dict, input_shape: tuple, has_age: bool):
    cfg = header.get("config") or {}
    ds = cfg.get("dataset") or {}
    if data is None:
        if ds.get("kind") == "synth-bars":
            data = "synth-bars:n={n_samples},size={image_size},noise={noise},seed={seed},channels={channels}".format(**ds)
        elif ds.get("path"):
            data = ds["path"]
        else:
            raise CliError("usage", "--data is required when the checkpoint records no dataset")
    if data.startswith("synth-bars"):
        o = _parse_synth(data)
        size = o.get("size", input_shape[0])
        return synth_bars(
            o.get("n", 2000), size, o.get("noise", 0.3), o.get("seed", 7), o.get("channels", input_shape[2]),
            with_age=bool(o.get("age", has_age)),
        )
    path = Path(data)
    naming = "csv-manifest" if path.suffix.lower() == ".csv" or (path / "manifest.csv").is_file() else "utkface"
    return load_directory(path, naming, input_shape)


def format_brackets(rows: list[dict]) -> str:
    lines = [f"{'Class':<12}{'n':>6}{'Gender %':>10}{'Age %':>9}{'Gender and Age %':>18}"]
    for r in rows:
        cells = ["-" if r[k] is None else f"{r[k]:.2f}" for k in ("gender", "age", "gender_and_age")]
        lines.append(f"{r['class']:<12}{r['n']:>6}{cells[0]:>10}{cells[1]:>9}{cells[2]:>18}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    try:
        model, header = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CliError("checkpoint", str(exc)) from None
    input_shape = tuple(model.spec.input_shape)
    has_age = "age" in model.heads
    try:
        samples = _eval_samples(args.data, header, input_shape, has_age)
        if args.split != "all":
            ds = (header.get("config") or {}).get("dataset") or {}
            parts = split(samples, ds.get("seed", 7), tuple(ds.get("split", (0.8, 0.1, 0.1))))
            samples = parts[("train", "val", "test").index(args.split)]
        if not samples:
            raise DatasetError("empty dataset")
        x, gender, age = to_arrays(samples)
    except DatasetError as exc:
        raise CliError("dataset", str(exc)) from None
    if x.shape[1:] != input_shape:
        raise CliError("shape", f"dataset images {x.shape[1:]} do not match checkpoint input {input_shape}")
    if has_age and age is None:
        raise CliError("dataset", "model has an age head but the dataset lacks age labels")
    metrics = evaluate(model, x, gender, age, table=True)
    metrics["checkpoint"] = str(args.checkpoint)
    metrics["iteration"] = model.iteration
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("metrics.json")
    out.write_text(json.dumps(metrics, indent=2, sort_keys=True), encoding="utf-8")
    flat = {k: v for k, v in metrics.items() if k not in ("brackets",)}
    print(json.dumps(flat, sort_keys=True))
    if "brackets" in metrics:
        print(format_brackets(metrics["brackets"]))
    return 0


# ---------------------------------------------------------------------------
# inspect-shapley


def cmd_inspect(args) -> int:
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CliError("checkpoint", str(exc)) from None
    layers = model.neurogame_layers()
    if not layers:
        raise CliError("model", f"{model.spec.name} has no NEUROGAME layers")
    try:
        image = read_image(args.image, tuple(model.spec.input_shape))
    except (OSError, ValueError) as exc:
        raise CliError("dataset", f"cannot read image {args.image}: {exc}") from None
    if args.iteration is not None:
        if args.iteration < 1:
            raise CliError("usage", "--iteration must be >= 1")
        model.iteration = args.iteration
    for layer in layers:
        layer.config = replace(layer.config, infer_identity=False)
    model.collect_diagnostics(True)
    model.forward(image[None], training=False)
    report = {
        "checkpoint": str(args.checkpoint),
        "image": str(args.image),
        "iteration": model.iteration,
        "layers": [
            {"name": layer.name, "mask_population": int(layer.last_mask.mask.sum()), "records": layer.diagnostics}
            for layer in layers
        ],
    }
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neurogame", description="Train and inspect NEUROGAME filtering networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a YAML config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="override output_dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="image directory, manifest CSV, or synth-bars:k=v,...")
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    e.add_argument("--out", help="metrics.json path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-shapley", help="dump coalition payoffs and Shapley values for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--iteration", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_inspect)
    return p


def _thread_limit():
    raw = os.environ.get("NEUROGAME_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError("config", "environment NEUROGAME_THREADS: must be a positive integer") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        # divergence is caught by explicit finiteness checks, not by numpy warnings
        with _thread_limit(), np.errstate(over="ignore", invalid="ignore", under="ignore", divide="ignore"):
            return args.func(args)
    except CliError as exc:
        msg = " ".join(str(exc).split())
        print(f"neurogame: error[{exc.kind}]: {msg}", file=sys.stderr)
        return EXIT_CODES[exc.kind]


if __name__ == "__main__":
    sys.exit(main())

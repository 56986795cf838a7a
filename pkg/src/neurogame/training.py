"""Training loop, evaluation metrics and run-directory persistence."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, builder_kwargs, dump_config
from .data import AGE_BRACKETS, MAX_AGE, DatasetError, Sample, augment, bracket_label, load_directory, split, synth_bars, to_arrays
from .models import BUILDERS, Model, save_checkpoint

log = logging.getLogger(__name__)

METRICS_FIELDS = ("epoch", "split", "loss_gender", "loss_age", "acc_gender", "acc_ageclass", "acc_joint", "seconds")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over every parameter of a model, keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.hyper = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.states: dict[str, T.AdamState] = {}

    def step(self, model: Model) -> None:
        grads = model.gradients()
        for name, layer, key in model.param_slots():
            p = layer.params[key]
            state = self.states.get(name) or T.AdamState.zeros_like(p, **self.hyper)
            layer.params[key], self.states[name] = T.adam_step(p, grads[name].astype(p.dtype, copy=False), state)


# ---------------------------------------------------------------------------
# losses and metrics


def loss_and_grads(outputs: dict, gender: np.ndarray, age: np.ndarray | None, age_weight: float = 1.0):
    losses, grads = {}, {}
    pg = outputs["gender"]
    losses["gender"] = T.binary_cross_entropy(pg, gender)
    grads["gender"] = T.binary_cross_entropy_grad(pg, gender.astype(pg.dtype))
    if "age" in outputs:
        pa = outputs["age"]
        losses["age"] = T.mean_absolute_error(pa, age)
        grads["age"] = age_weight * T.mean_absolute_error_grad(pa, age.astype(pa.dtype))
    return losses, grads


def _classes(ages: np.ndarray) -> np.ndarray:
    edges = np.array([hi for _, hi in AGE_BRACKETS])
    a = np.floor(np.clip(ages, 0, MAX_AGE))
    return np.searchsorted(edges, a, side="left")


def prediction_metrics(pred_gender, gender, pred_age=None, age=None) -> dict:
    """Losses and accuracies; age-class accuracy compares bracket ids."""
    out = {"n": int(len(gender)), "loss_gender": T.binary_cross_entropy(pred_gender, gender)}
    g_ok = (pred_gender >= 0.5) == (gender >= 0.5)
    out["acc_gender"] = float(g_ok.mean())
    if pred_age is not None and age is not None:
        out["loss_age"] = T.mean_absolute_error(pred_age, age)
        a_ok = _classes(np.asarray(pred_age, dtype=np.float64)) == _classes(np.asarray(age, dtype=np.float64))
        out["acc_ageclass"] = float(a_ok.mean())
        out["acc_joint"] = float((g_ok & a_ok).mean())
    return out


def bracket_table(pred_gender, gender, pred_age, age) -> list[dict]:
    """Per true-age-bracket success rates for gender, age class and both.

    One row per bracket (14 rows); brackets without samples report None.
    """
    true_cls = _classes(np.asarray(age, dtype=np.float64))
    g_ok = (pred_gender >= 0.5) == (gender >= 0.5)
    a_ok = true_cls == _classes(np.asarray(pred_age, dtype=np.float64))
    rows = []
    for k in range(len(AGE_BRACKETS)):
        sel = true_cls == k
        n = int(sel.sum())
        rate = (lambda ok: float(100.0 * ok[sel].mean())) if n else (lambda ok: None)
        rows.append({"class": bracket_label(k), "n": n, "gender": rate(g_ok), "age": rate(a_ok), "gender_and_age": rate(g_ok & a_ok)})
    return rows


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> dict[str, np.ndarray]:
    outs: dict[str, list] = {}
    for s in range(0, len(x), batch_size):
        for head, y in model.forward(x[s : s + batch_size], training=False).items():
            outs.setdefault(head, []).append(y)
    return {k: np.concatenate(v) for k, v in outs.items()}


def evaluate(model: Model, x, gender, age=None, batch_size: int = 256, table: bool = False) -> dict:
    if len(x) == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    pred = predict(model, x, batch_size)
    metrics = prediction_metrics(pred["gender"], gender, pred.get("age"), age if "age" in pred else None)
    if table and "age" in pred and age is not None:
        metrics["brackets"] = bracket_table(pred["gender"], gender, pred["age"], age)
    return metrics


# ---------------------------------------------------------------------------
# data for a run


@dataclass
class Splits:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]


def load_samples(cfg: RunConfig) -> list[Sample]:
    d = cfg.dataset
    if d.kind == "synth-bars":
        return synth_bars(d.n_samples, d.image_size, d.noise, d.seed, d.channels, with_age=d.with_age)
    naming = "utkface" if d.kind == "utkface" else "csv-manifest"
    return load_directory(d.path, naming, cfg.input_shape())


def load_splits(cfg: RunConfig) -> Splits:
    samples = load_samples(cfg)
    if cfg.has_age and any(s.age is None for s in samples):
        raise DatasetError(f"{cfg.model} needs age labels for every sample")
    train, val, test = split(samples, cfg.dataset.seed, tuple(cfg.dataset.split))
    if not train:
        raise DatasetError("training split is empty")
    return Splits(train, val, test)


def make_model(cfg: RunConfig) -> Model:
    spec = BUILDERS[cfg.model](**builder_kwargs(cfg))
    return Model(spec, seed=cfg.seed, dtype=np.dtype(cfg.dtype))


# ---------------------------------------------------------------------------
# loop


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def train_epoch(model: Model, opt: Adam, samples: list[Sample], cfg: RunConfig, rng: np.random.Generator, diag_fh=None) -> dict:
    order = rng.permutation(len(samples))
    sums: dict[str, float] = {}
    seen = 0
    for s in range(0, len(order), cfg.batch_size):
        idx = order[s : s + cfg.batch_size]
        batch = [samples[k] for k in idx]
        if cfg.dataset.augment:
            seeds = rng.integers(2**63, size=len(batch))
            batch = [augment(b, int(sd)) for b, sd in zip(batch, seeds)]
        x, gender, age = to_arrays(batch)
        want_diag = diag_fh is not None and cfg.diagnostics_every and model.iteration % cfg.diagnostics_every == 0
        model.collect_diagnostics(bool(want_diag))
        try:
            out = model.forward(x, training=True)
            losses, grads = loss_and_grads(out, gender, age, cfg.age_loss_weight)
            bad = [k for k, v in losses.items() if not np.isfinite(v)]
            if bad:
                raise T.NonFiniteError(f"non-finite {', '.join(bad)} loss")
            model.backward(grads)
            opt.step(model)
        except T.NonFiniteError as exc:
            raise TrainingDiverged(f"iteration {model.iteration}: {exc}") from None
        if want_diag:
            for layer in model.neurogame_layers():
                for rec in layer.diagnostics:
                    diag_fh.write(json.dumps(rec) + "\n")
        m = prediction_metrics(out["gender"], gender, out.get("age"), age if "age" in out else None)
        for k, v in m.items():
            if k != "n":
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        seen += len(idx)
        if cfg.iteration_unit == "step":
            model.iteration += 1
    model.collect_diagnostics(False)
    if cfg.iteration_unit == "epoch":
        model.iteration += 1
    return {k: v / seen for k, v in sums.items()}


def _row(epoch: int, split_name: str, m: dict, seconds) -> dict:
    row = {"epoch": epoch, "split": split_name}
    for k in METRICS_FIELDS[2:-1]:
        row[k] = _fmt(m.get(k))
    row["seconds"] = _fmt(seconds)
    return row


def run_training(cfg: RunConfig, out_dir=None) -> dict:
    """Train per ``cfg``, writing metrics.csv, timings.csv, a checkpoint and configs."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(dump_config(cfg), encoding="utf-8")

    splits = load_splits(cfg)
    model = make_model(cfg)
    opt = Adam(lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    val_arrays = to_arrays(splits.val) if splits.val else None

    metrics_buf = io.StringIO()
    writer = csv.DictWriter(metrics_buf, fieldnames=METRICS_FIELDS, lineterminator="\n")
    writer.writeheader()
    timings = ["epoch,seconds"]
    diag_fh = open(out / "diagnostics.jsonl", "w") if cfg.diagnostics_every else None
    val_metrics: dict = {}
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            train_m = train_epoch(model, opt, splits.train, cfg, rng, diag_fh)
            if val_arrays is not None:
                val_metrics = evaluate(model, *val_arrays)
            seconds = time.perf_counter() - t0
            shown = seconds if cfg.record_seconds else None
            writer.writerow(_row(epoch, "train", train_m, shown))
            if val_arrays is not None:
                writer.writerow(_row(epoch, "val", val_metrics, shown))
            timings.append(f"{epoch},{seconds:.3f}")
            (out / "metrics.csv").write_text(metrics_buf.getvalue(), encoding="utf-8")
            log.info("epoch %d train %s val %s", epoch, train_m, val_metrics)
    finally:
        if diag_fh is not None:
            diag_fh.close()
        (out / "timings.csv").write_text("\n".join(timings) + "\n", encoding="utf-8")

    test_metrics = evaluate(model, *to_arrays(splits.test), table=True) if splits.test else {}
    extra = {"val_metrics": val_metrics, "test_metrics": test_metrics}
    save_checkpoint(out / "model.ckpt", model, config=cfg.to_dict(), extra=extra)
    summary = {"model": cfg.model, "iteration": model.iteration, "n_params": model.n_params(), **extra}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return summary

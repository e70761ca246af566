"""Training loop, normalized losses, metrics, early stopping and result tables."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .classical import ClassicalConfig, softmax, solve_variational_classical
from .forward import Problem, batch_problems, forward, forward_t
from .learned import SolverNet, solve
from .nn import AdamState, adam_step, cross_entropy_logits, cross_entropy_probs
from .numerics import NonFiniteError, Rng, derive_seed

MONITORS = ("auto", "test_accuracy", "val_accuracy", "val_loss")
METRIC_COLUMNS = ("task", "model", "setting", "metric", "mean", "std", "seed_count")


class InvalidProblemError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    wd: float = 0.0
    alpha: float = 1.0
    max_patience: int = 10
    val_improvement: float = 0.005
    accuracy_improvement: float = 1.0
    # "auto": val loss for regression, test accuracy for classification.
    monitor: str = "auto"
    seed: int = 0
    eval_batch_size: int = 32
    time_limit: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs and batch sizes must be >= 1")
        if self.val_improvement <= 0 or self.accuracy_improvement <= 0:
            raise ValueError("improvement thresholds must be positive")
        if self.monitor not in MONITORS:
            raise ValueError(f"monitor must be one of {MONITORS}")
        if self.lr < 0 or self.wd < 0 or self.alpha < 0 or self.max_patience < 0:
            raise ValueError("lr, wd, alpha and max_patience must be non-negative")


@dataclass
class RunRecord:
    config: dict
    epochs: list = field(default_factory=list)
    test_metrics: dict = field(default_factory=dict)
    best_epoch: int = -1
    wall_clock: float = 0.0
    num_parameters: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        doc = json.loads(text)
        return cls(**{f.name: doc[f.name] for f in fields(cls)})


# --- losses and metrics ----------------------------------------------------------

def _zero_mse(a: np.ndarray, what: str) -> float:
    z = float(np.mean(a * a))
    if z == 0.0:
        raise InvalidProblemError(f"{what} is identically zero; nMSE is undefined")
    return z


def compute_loss(problem: Problem, xhat, alpha: float = 1.0):
    """(total, recovery term, data-fit term) as tape tensors.

    Classification: CE(x, xhat) + alpha CE(d, F(softmax(xhat))).
    Regression: (nMSE(xhat, x) + alpha nMSE(F(xhat), d)) / 2.
    """
    xhat = ad.as_tensor(xhat)
    if problem.x_true is None:
        raise InvalidProblemError("training needs the ground truth")
    g, spec = problem.graph, problem.spec
    if problem.task_kind == "classification":
        rec = cross_entropy_logits(xhat, problem.x_true)
        fit = cross_entropy_probs(forward_t(g, spec, ad.row_softmax(xhat)), problem.d_obs)
        total = rec + ad.scale(fit, alpha)
    else:
        zx = _zero_mse(problem.x_true, "x_true")
        zd = _zero_mse(problem.d_obs, "d_obs")
        rec = ad.scale(ad.mean(ad.square(xhat - problem.x_true)), 1.0 / zx)
        fit = ad.scale(ad.mean(ad.square(forward_t(g, spec, xhat) - problem.d_obs)), 1.0 / zd)
        total = ad.scale(rec + ad.scale(fit, alpha), 0.5)
    if not np.isfinite(total.value).all():
        raise NonFiniteError("non-finite loss")
    return total, rec, fit


def metric_nmse(xhat, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean((np.asarray(xhat) - x) ** 2)) / _zero_mse(x, "target")


def metric_accuracy(logits, labels) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    return 100.0 * float(np.mean(logits.argmax(axis=1) == labels))


def problem_metrics(problem: Problem, xhat: np.ndarray) -> dict:
    """Recovery and data-fit metrics for one problem."""
    xhat = np.asarray(xhat, dtype=np.float64)
    if problem.task_kind == "classification":
        q = forward(problem.graph, problem.spec, softmax(xhat))
        fit = -float(np.sum(problem.d_obs * np.log(np.maximum(q, 1e-12)))) / q.shape[0]
        return {"accuracy": metric_accuracy(xhat, problem.x_true), "datafit_ce": fit}
    dhat = ad.value_of(forward(problem.graph, problem.spec, xhat))
    return {"nmse": metric_nmse(xhat, problem.x_true), "datafit_nmse": metric_nmse(dhat, problem.d_obs)}


def mean_metrics(rows: list) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]} if rows else {}


# --- batched prediction ----------------------------------------------------------

def split_output(problems: list, offsets: np.ndarray, out: np.ndarray) -> list:
    if problems[0].target == "edge":
        cuts = np.concatenate([[0], np.cumsum([p.graph.m for p in problems])])
    else:
        cuts = offsets
    return [out[cuts[i]:cuts[i + 1]] for i in range(len(problems))]


def predict_learned(net: SolverNet, problems: list, batch_size: int = 32) -> list:
    outs = []
    with ad.no_grad():
        for s in range(0, len(problems), batch_size):
            chunk = problems[s:s + batch_size]
            batched, offsets = batch_problems(chunk)
            outs.extend(split_output(chunk, offsets, solve(batched, net).value))
    return outs


def predict_classical(cfg: ClassicalConfig, problems: list) -> list:
    return [solve_variational_classical(p, cfg)[0] for p in problems]


def evaluate_outputs(problems: list, outputs: list) -> dict:
    return mean_metrics([problem_metrics(p, x) for p, x in zip(problems, outputs)])


def evaluate_learned(net: SolverNet, problems: list, batch_size: int = 32) -> dict:
    return evaluate_outputs(problems, predict_learned(net, problems, batch_size))


def evaluate_classical(cfg: ClassicalConfig, problems: list) -> dict:
    return evaluate_outputs(problems, predict_classical(cfg, problems))


def dataset_loss(net: SolverNet, problems: list, alpha: float, batch_size: int) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for s in range(0, len(problems), batch_size):
            chunk = problems[s:s + batch_size]
            batched, _ = batch_problems(chunk)
            loss, _, _ = compute_loss(batched, solve(batched, net), alpha)
            total += float(loss.value) * len(chunk)
            count += len(chunk)
    return total / max(count, 1)


# --- training ----------------------------------------------------------------------

def _monitor(cfg: TrainConfig, task_kind: str) -> str:
    if cfg.monitor != "auto":
        return cfg.monitor
    return "test_accuracy" if task_kind == "classification" else "val_loss"


def train(net: SolverNet, dataset: dict, cfg: TrainConfig,
          log: Optional[Callable[[str], None]] = None) -> RunRecord:
    """Mini-batch Adam with patience-based early stopping.

    The parameters of the best monitored epoch are restored before the final
    test evaluation.
    """
    t0 = time.perf_counter()
    train_set, val_set, test_set = dataset["train"], dataset.get("val", []), dataset.get("test", [])
    if not train_set:
        raise ValueError("empty training split")
    params = net.parameters()
    state = AdamState(lr=cfg.lr, wd=cfg.wd)
    mode = _monitor(cfg, train_set[0].task_kind)
    higher_better = mode != "val_loss"
    record = RunRecord(config={"train": asdict(cfg), "net": net.manifest(), "monitor": mode},
                       num_parameters=net.num_parameters())
    best, best_values, stale = None, [p.value.copy() for p in params], 0
    for epoch in range(cfg.epochs):
        order = Rng(derive_seed(cfg.seed, 7919 + epoch)).permutation(len(train_set))
        losses = []
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = [train_set[i] for i in order[s:s + cfg.batch_size]]
            batched, _ = batch_problems(chunk)
            for p in params:
                p.zero_grad()
            try:
                loss, _, _ = compute_loss(batched, solve(batched, net), cfg.alpha)
            except NonFiniteError as err:
                raise NonFiniteError(f"epoch {epoch} batch {b}: {err}") from err
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
            try:
                adam_step(params, grads, state)
            except NonFiniteError as err:
                raise NonFiniteError(f"epoch {epoch} batch {b}: {err}") from err
            losses.append(float(loss.value))
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_set:
            entry["val_loss"] = dataset_loss(net, val_set, cfg.alpha, cfg.eval_batch_size)
        if mode == "val_loss":
            score = entry.get("val_loss", entry["train_loss"])
        else:
            split = test_set if mode == "test_accuracy" else val_set
            score = evaluate_learned(net, split, cfg.eval_batch_size)["accuracy"]
            entry[mode] = score
        if best is None:
            improved = True
        elif higher_better:
            improved = score >= best + cfg.accuracy_improvement
        else:
            improved = score <= best * (1.0 - cfg.val_improvement)
        if improved:
            best, stale, record.best_epoch = score, 0, epoch
            best_values = [p.value.copy() for p in params]
        else:
            stale += 1
        entry["stale"] = stale
        record.epochs.append(entry)
        if log:
            log(json.dumps(entry))
        if stale >= cfg.max_patience and stale > 0:
            break
        if cfg.time_limit and time.perf_counter() - t0 > cfg.time_limit:
            break
    for p, v in zip(params, best_values):
        p.value[...] = v
    if test_set:
        record.test_metrics = evaluate_learned(net, test_set, cfg.eval_batch_size)
    record.wall_clock = time.perf_counter() - t0
    return record


# --- tables ----------------------------------------------------------------------------

def aggregate(values) -> tuple:
    """(mean, sample std, count); a single value or identical values give std exactly 0."""
    v = np.asarray(values, dtype=np.float64)
    if np.all(v == v[0]):
        # np.mean of equal floats can round away from the value itself
        return float(v[0]), 0.0, int(len(v))
    return float(np.mean(v)), float(np.std(v, ddof=1)), int(len(v))


def metric_rows(task: str, model: str, setting: str, per_seed: list) -> list:
    """Aggregate a list of per-seed metric dicts into CSV rows."""
    rows = []
    for metric in sorted(per_seed[0]):
        mean, std, count = aggregate([m[metric] for m in per_seed])
        rows.append({"task": task, "model": model, "setting": setting, "metric": metric,
                     "mean": mean, "std": std, "seed_count": count})
    return rows


def metrics_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["task"], r["model"], r["setting"], r["metric"],
                    repr(float(r["mean"])), repr(float(r["std"])), int(r["seed_count"])])
    return buf.getvalue()


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["mean"] = float(r["mean"])
        r["std"] = float(r["std"])
        r["seed_count"] = int(r["seed_count"])
    return rows


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)

"""Experiment driver: gen, solve, train, eval and report subcommands.

Configs are TOML documents with sections [dataset], [solver], [train] and
[output]; ``--override section.key=value`` edits single fields.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli

from .classical import ClassicalConfig, DivergenceError, solve_variational_classical
from .data import DatasetSpec, read_dataset, write_dataset
from .harness import (METRIC_COLUMNS, RunRecord, TrainConfig, evaluate_learned, metric_rows, metrics_csv,
                      problem_metrics, read_metrics_csv, train, write_text_atomic, mean_metrics)
from .learned import UnrolledConfig, net_for_problem
from .nn import load_checkpoint, save_checkpoint
from .numerics import ConvergenceError, NonFiniteError, Rng

LEARNED = ("var", "iss", "prox")
CLASSICAL = ("laplacian", "tikhonov")
EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    dataset: str = ""
    task: str = ""
    setting: str = ""
    model: str = ""


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    solver_name: str
    solver: object
    train: TrainConfig
    seeds: list
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def learned(self) -> bool:
        return self.solver_name in LEARNED

    @property
    def run_dir(self) -> Path:
        return Path(self.output.dir)

    @property
    def dataset_dir(self) -> Path:
        return Path(self.output.dataset) if self.output.dataset else self.run_dir / "dataset"

    @property
    def model_label(self) -> str:
        return self.output.model or self.solver_name

    @property
    def task_label(self) -> str:
        return self.output.task or f"{self.dataset.generator}-{self.dataset.task}"

    def to_dict(self) -> dict:
        solver = {"name": self.solver_name, **asdict(self.solver)}
        solver.pop("solver", None)
        train = asdict(self.train)
        train["seeds"] = list(self.seeds)
        return {"dataset": asdict(self.dataset), "solver": solver, "train": train, "output": asdict(self.output)}


def _field_names(cls) -> set:
    return {f.name for f in fields(cls)}


def _build(cls, doc: dict, section: str, drop=()):
    allowed = _field_names(cls) - set(drop)
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[{section}] {err}") from err


def parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must be section.field")
        doc.setdefault(parts[0], {})[parts[1]] = parse_value(value.strip())
    return doc


def resolve_config(doc: dict) -> ExperimentConfig:
    unknown = set(doc) - {"dataset", "solver", "train", "output"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    dataset = _build(DatasetSpec, dict(doc.get("dataset", {})), "dataset")
    sdoc = dict(doc.get("solver", {}))
    name = sdoc.pop("name", "laplacian")
    if name in LEARNED:
        solver = _build(UnrolledConfig, {**sdoc, "solver": name}, "solver")
    elif name in CLASSICAL:
        solver = _build(ClassicalConfig, {**sdoc, "regularizer": name}, "solver")
    else:
        raise ConfigError(f"[solver] name must be one of {LEARNED + CLASSICAL}")
    tdoc = dict(doc.get("train", {}))
    seeds = tdoc.pop("seeds", [tdoc.get("seed", 0)])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("[train] seeds must be a non-empty list of integers")
    train_cfg = _build(TrainConfig, tdoc, "train")
    output = _build(OutputConfig, dict(doc.get("output", {})), "output")
    return ExperimentConfig(dataset, name, solver, train_cfg, seeds, output)


def load_config(path, overrides=(), seed=None, out=None) -> ExperimentConfig:
    doc = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config {p} not found")
        try:
            doc = tomli.loads(p.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as err:
            raise ConfigError(f"{p}: {err}") from err
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc.setdefault("dataset", {})["seed"] = seed
        doc.setdefault("train", {})["seeds"] = [seed]
    if out is not None:
        doc.setdefault("output", {})["dir"] = out
    return resolve_config(doc)


# --- subcommands -------------------------------------------------------------------

def _echo_config(cfg: ExperimentConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_text_atomic(directory / "config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


def _write_manifest(directory: Path, command: str, started: float, extra=None) -> None:
    doc = {"command": command, "started": started, "elapsed": time.time() - started}
    doc.update(extra or {})
    write_text_atomic(directory / "manifest.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _load_dataset(cfg: ExperimentConfig) -> dict:
    if not (cfg.dataset_dir / "index.json").exists():
        raise FileNotFoundError(f"no dataset at {cfg.dataset_dir}; run `gen` first")
    return read_dataset(cfg.dataset_dir)[1]


def cmd_gen(cfg: ExperimentConfig) -> None:
    cfg.dataset_dir.mkdir(parents=True, exist_ok=True)
    write_dataset(cfg.dataset, cfg.dataset_dir)


def cmd_solve(cfg: ExperimentConfig) -> None:
    if cfg.learned:
        raise ConfigError("`solve` runs classical baselines; use `train` for learned solvers")
    data = _load_dataset(cfg)
    test = data.get("test", [])
    traces = cfg.run_dir / "traces"
    traces.mkdir(parents=True, exist_ok=True)
    per_seed = []
    for _ in cfg.seeds:
        rows = []
        for i, p in enumerate(test):
            x, trace = solve_variational_classical(p, cfg.solver)
            trace.write_csv(traces / f"test_{i:05d}.csv")
            rows.append(problem_metrics(p, x))
        per_seed.append(mean_metrics(rows))
    rows = metric_rows(cfg.task_label, cfg.model_label, cfg.output.setting, per_seed)
    write_text_atomic(cfg.run_dir / "metrics.csv", metrics_csv(rows))


def _seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return cfg.run_dir / f"seed{seed}"


def cmd_train(cfg: ExperimentConfig) -> None:
    if not cfg.learned:
        raise ConfigError("`train` needs a learned solver (var, iss or prox)")
    data = _load_dataset(cfg)
    per_seed = []
    for seed in cfg.seeds:
        tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed})
        net = net_for_problem(cfg.solver, data["train"][0], Rng(seed))
        record = train(net, data, tcfg)
        out = _seed_dir(cfg, seed)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.bin", {k: t.value for k, t in net.named_parameters().items()},
                        net.manifest())
        write_text_atomic(out / "run_record.json", record.to_json())
        if record.test_metrics:
            per_seed.append(record.test_metrics)
    if per_seed:
        rows = metric_rows(cfg.task_label, cfg.model_label, cfg.output.setting, per_seed)
        write_text_atomic(cfg.run_dir / "metrics.csv", metrics_csv(rows))


def cmd_eval(cfg: ExperimentConfig) -> None:
    data = _load_dataset(cfg)
    test = data.get("test", [])
    if not cfg.learned:
        cmd_solve(cfg)
        return
    per_seed = []
    for seed in cfg.seeds:
        ck = _seed_dir(cfg, seed) / "checkpoint.bin"
        if not ck.exists():
            raise FileNotFoundError(f"missing checkpoint {ck}; run `train` first")
        arrays, _ = load_checkpoint(ck)
        net = net_for_problem(cfg.solver, data["train"][0] if data.get("train") else test[0], Rng(seed))
        net.load_arrays(arrays)
        per_seed.append(evaluate_learned(net, test, cfg.train.eval_batch_size))
    rows = metric_rows(cfg.task_label, cfg.model_label, cfg.output.setting, per_seed)
    write_text_atomic(cfg.run_dir / "metrics.csv", metrics_csv(rows))


def report_table(run_dirs) -> str:
    """Wide table: one row per (task, model, setting), one mean/std column pair per metric."""
    rows = []
    for d in run_dirs:
        path = Path(d) / "metrics.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing {path}")
        rows.extend(read_metrics_csv(path))
    metrics = sorted({r["metric"] for r in rows})
    keys = []
    cells = {}
    for r in rows:
        key = (r["task"], r["model"], r["setting"])
        if key not in cells:
            keys.append(key)
            cells[key] = {}
        cells[key][r["metric"]] = (r["mean"], r["std"], r["seed_count"])
    header = ["task", "model", "setting"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")] + ["seed_count"]
    lines = [",".join(header)]
    for key in keys:
        vals = list(key)
        count = 0
        for m in metrics:
            mean, std, c = cells[key].get(m, (float("nan"), float("nan"), 0))
            vals += [repr(mean), repr(std)]
            count = max(count, c)
        vals.append(str(count))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def cmd_report(cfg: ExperimentConfig, runs) -> None:
    table = report_table(runs)
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    write_text_atomic(cfg.run_dir / "report.csv", table)
    sys.stdout.write(table)


COMMANDS = ("gen", "solve", "train", "eval", "report")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gripkit", description="graph inverse problem experiments")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("runs", nargs="*", help="run directories (report only)")
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None)
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--overrides", action="append", default=[], metavar="KEY=VALUE", help=argparse.SUPPRESS)
    return ap


def _fail(code: int, kind: str, err: BaseException) -> int:
    sys.stderr.write("error: " + json.dumps({"code": code, "kind": kind, "message": str(err)}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = load_config(args.config, args.override + args.overrides, args.seed, args.out)
        _echo_config(cfg, cfg.run_dir)
        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "solve":
            cmd_solve(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        else:
            cmd_report(cfg, args.runs)
        _write_manifest(cfg.run_dir, args.command, started)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, "config", err)
    except FileNotFoundError as err:
        return _fail(EXIT_MISSING, "missing-input", err)
    except (NonFiniteError, DivergenceError, ConvergenceError, FloatingPointError) as err:
        return _fail(EXIT_NUMERIC, "numerical", err)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Experiment orchestration: specs, multi-seed sweeps, traces and plots.

An experiment file is YAML::

    name: fig2_like
    master_seed: 2024
    seeds: 10                 # or an explicit list of seed indices
    mc_trials: 1000
    problem:
      operator: fijl          # or dense_roi
      n: 4096
      delta: 0.05
      kappa: 1000
      snr_db: 40
      prior: {kind: bernoulli_gaussian, sparsity: 0.01}
    algorithms:
      - {variant: ws_cg_vamp_b, inner_iters: 10, max_outer: 30}
      - {variant: ws_gd_vamp_b, inner_iters: 1, damping_len: 3}
    outputs: {trace_dir: traces, summary: summary.json}

Every (algorithm, seed) pair is one job. All algorithms see the same problem
for a given seed index; algorithm-internal randomness (Monte Carlo probes,
black-box divergence) gets its own stream per job.
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import yaml

from . import engine, operators, streams
from .denoisers import PriorDescriptor
from .engine import AlgorithmConfig, ConfigError

OPERATOR_KINDS = ("dense_roi", "fijl")


class SpecError(ValueError):
    """Invalid experiment spec; the message starts with the offending field path."""


@dataclass(frozen=True)
class ProblemSpec:
    n: int = 4096
    delta: float = 0.3
    kappa: float = 1000.0
    operator: str = "fijl"
    snr_db: float = 40.0
    prior: PriorDescriptor = field(default_factory=PriorDescriptor)
    operator_seed: Optional[int] = None

    @property
    def m(self) -> int:
        return int(round(self.delta * self.n))


@dataclass
class ExperimentSpec:
    problem: ProblemSpec
    algorithms: List[AlgorithmConfig]
    seeds: List[int]
    master_seed: int = 0
    mc_trials: int = 1000
    trace_dir: str = "traces"
    summary_path: str = "summary.json"
    name: str = "experiment"

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        if not isinstance(doc, dict):
            raise SpecError("<root>: expected a mapping")
        _reject_unknown(doc, {"name", "master_seed", "seeds", "mc_trials", "problem", "algorithms", "outputs"}, "")
        problem = _problem_from(doc.get("problem", {}))
        algs = doc.get("algorithms")
        if not isinstance(algs, list) or not algs:
            raise SpecError("algorithms: need a non-empty list")
        mc_trials = _int(doc.get("mc_trials", 1000), "mc_trials", lo=1)
        configs = []
        for k, a in enumerate(algs):
            if not isinstance(a, dict):
                raise SpecError(f"algorithms[{k}]: expected a mapping")
            a = dict(a)
            a.setdefault("mc_trials", mc_trials)
            try:
                configs.append(AlgorithmConfig.from_dict(a))
            except (ConfigError, TypeError) as exc:
                raise SpecError(f"algorithms[{k}].{exc}") from None
        names = [c.name for c in configs]
        if len(set(names)) != len(names):
            raise SpecError("algorithms: duplicate names; set 'name' to disambiguate")
        seeds = doc.get("seeds", 10)
        if isinstance(seeds, int) and not isinstance(seeds, bool):
            if seeds < 1:
                raise SpecError("seeds: must be >= 1")
            seeds = list(range(seeds))
        elif isinstance(seeds, list) and seeds and all(isinstance(s, int) for s in seeds):
            seeds = list(seeds)
        else:
            raise SpecError("seeds: an integer count or a list of integers")
        outputs = doc.get("outputs", {}) or {}
        _reject_unknown(outputs, {"trace_dir", "summary"}, "outputs.")
        return cls(
            problem=problem, algorithms=configs, seeds=seeds,
            master_seed=_int(doc.get("master_seed", 0), "master_seed", lo=0), mc_trials=mc_trials,
            trace_dir=str(outputs.get("trace_dir", "traces")), summary_path=str(outputs.get("summary", "summary.json")),
            name=str(doc.get("name", "experiment")),
        )

    def to_dict(self) -> dict:
        p = self.problem
        return {
            "name": self.name, "master_seed": self.master_seed, "seeds": self.seeds, "mc_trials": self.mc_trials,
            "problem": {"n": p.n, "delta": p.delta, "kappa": p.kappa, "operator": p.operator, "snr_db": p.snr_db,
                        "prior": p.prior.to_dict(), "operator_seed": p.operator_seed},
            "algorithms": [a.to_dict() for a in self.algorithms],
            "outputs": {"trace_dir": self.trace_dir, "summary": self.summary_path},
        }


def _reject_unknown(d: dict, known: set, prefix: str) -> None:
    extra = sorted(set(d) - known)
    if extra:
        raise SpecError(f"{prefix}{extra[0]}: unknown field")


def _int(v, path, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise SpecError(f"{path}: expected an integer")
    if lo is not None and v < lo:
        raise SpecError(f"{path}: must be >= {lo}")
    return v


def _num(v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SpecError(f"{path}: expected a number")
    return float(v)


def _problem_from(d) -> ProblemSpec:
    if not isinstance(d, dict):
        raise SpecError("problem: expected a mapping")
    _reject_unknown(d, {"n", "delta", "kappa", "operator", "snr_db", "prior", "operator_seed"}, "problem.")
    n = _int(d.get("n", 4096), "problem.n", lo=2)
    delta = _num(d.get("delta", 0.3), "problem.delta")
    if not 0 < delta < 1:
        raise SpecError("problem.delta: must lie in (0, 1)")
    if not 1 <= round(delta * n) < n:
        raise SpecError("problem.delta: gives an empty or full measurement set")
    kappa = _num(d.get("kappa", 1000.0), "problem.kappa")
    if kappa < 1:
        raise SpecError("problem.kappa: must be >= 1")
    op = d.get("operator", "fijl")
    if op not in OPERATOR_KINDS:
        raise SpecError(f"problem.operator: one of {OPERATOR_KINDS}")
    if op == "fijl" and n & (n - 1):
        raise SpecError("problem.n: fijl needs a power of two")
    prior = d.get("prior", {}) or {}
    if not isinstance(prior, dict):
        raise SpecError("problem.prior: expected a mapping")
    _reject_unknown(prior, {"kind", "sparsity", "signal_var", "threshold"}, "problem.prior.")
    try:
        prior = PriorDescriptor.from_dict(prior)
    except (ValueError, TypeError) as exc:
        raise SpecError(f"problem.prior: {exc}") from None
    op_seed = d.get("operator_seed")
    if op_seed is not None:
        op_seed = _int(op_seed, "problem.operator_seed", lo=0)
    return ProblemSpec(n=n, delta=delta, kappa=kappa, operator=op, snr_db=_num(d.get("snr_db", 40.0), "problem.snr_db"),
                       prior=prior, operator_seed=op_seed)


def load_spec(path: Union[str, os.PathLike]) -> ExperimentSpec:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise SpecError(f"<root>: not valid YAML ({exc})") from None
    return ExperimentSpec.from_dict(doc or {})


# --------------------------------------------------------------------------
# running


def problem_seed(spec: ExperimentSpec, seed_index: int) -> int:
    return streams.derive_seed(spec.master_seed, seed_index)


def run_seed(spec: ExperimentSpec, alg_index: int, seed_index: int) -> int:
    return streams.derive_seed(spec.master_seed, alg_index, seed_index)


def build_problem(problem: ProblemSpec, seed: int) -> operators.Problem:
    op_seed = seed if problem.operator_seed is None else problem.operator_seed
    if problem.operator == "fijl":
        model = operators.make_fijl(problem.n, problem.m, problem.kappa, op_seed)
    else:
        model = operators.make_dense_roi(problem.n, problem.m, problem.kappa, op_seed)
    return operators.make_problem(model, problem.prior, problem.snr_db, seed)


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", name).strip("_")


def trace_filename(config: AlgorithmConfig, seed_index: int) -> str:
    return f"{_slug(config.name)}__seed{seed_index:03d}.csv"


def write_trace(path: Union[str, os.PathLike], trace: engine.IterationTrace, diag: bool = False) -> None:
    cols = list(engine.TRACE_COLUMNS) + (list(engine.DIAG_COLUMNS) if diag else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in trace.rows:
            w.writerow({c: row.get(c, "") for c in cols})


def read_trace(path: Union[str, os.PathLike]) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def check_operation_counts(config: AlgorithmConfig, rows: Sequence[dict]) -> None:
    """Every completed outer iteration of an iterative-solver variant costs
    exactly 2 * inner_iters + 2 operator applications (z_t and A^T mu_t
    included); inner early exits are the only allowed shortfall."""
    if config.rule is None:
        return
    expected = 2 * config.inner_iters + 2
    for row in rows:
        if row.get("status") != "ok":
            continue
        apps = int(float(row["op_apps"]))
        if apps != expected and not (apps < expected and float(row["inner_resid"]) <= config.inner_tol):
            raise AssertionError(f"{config.name} t={row['t']}: {apps} operator applications, expected {expected}")


def _job(args):
    spec_dict, alg_index, seed_index, out_dir, diag = args
    spec = ExperimentSpec.from_dict(spec_dict)
    config = spec.algorithms[alg_index]
    problem = build_problem(spec.problem, problem_seed(spec, seed_index))
    trace = engine.run(problem, config, seed=run_seed(spec, alg_index, seed_index))
    check_operation_counts(config, trace.rows)
    path = Path(out_dir) / trace_filename(config, seed_index)
    write_trace(path, trace, diag)
    return config.name, seed_index, str(path), trace.status


def run_experiment(spec: ExperimentSpec, out_dir: Optional[Union[str, os.PathLike]] = None, jobs: int = 1,
                   diag: bool = False) -> dict:
    """Run every (algorithm, seed) job, write traces and the summary.

    Returns the summary, which is computed from the written trace files.
    """
    base = Path(out_dir) if out_dir is not None else Path(".")
    trace_dir = base / spec.trace_dir
    trace_dir.mkdir(parents=True, exist_ok=True)
    spec_dict = spec.to_dict()
    tasks = [(spec_dict, a, s, str(trace_dir), diag) for a in range(len(spec.algorithms)) for s in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_job, tasks))
    else:
        results = [_job(t) for t in tasks]
    files: Dict[str, List[str]] = {}
    for name, _, path, _ in results:
        files.setdefault(name, []).append(path)
    summary = summarize(files)
    summary["experiment"] = spec.name
    summary_path = base / spec.summary_path
    summary_path.parent.mkdir(parents=True, exist_ok=True)
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, allow_nan=True)
    return summary


# --------------------------------------------------------------------------
# aggregation


def _nmse_series(rows: Sequence[dict]) -> np.ndarray:
    """NMSE per t, cut at the first diverged or non-finite row."""
    out = []
    for row in rows:
        v = float(row["nmse"]) if row.get("nmse") not in (None, "") else math.nan
        if row.get("status") == "diverged" or not math.isfinite(v):
            break
        out.append(v)
    return np.array(out)


def aggregate(per_seed: Sequence[np.ndarray]) -> Dict[str, np.ndarray]:
    """Mean and std over the seeds still running at each t."""
    length = max((len(s) for s in per_seed), default=0)
    mean, std, cov = np.full(length, np.nan), np.full(length, np.nan), np.zeros(length, dtype=int)
    for t in range(length):
        vals = np.array([s[t] for s in per_seed if len(s) > t])
        cov[t] = len(vals)
        mean[t] = vals.mean()
        std[t] = vals.std(ddof=1) if len(vals) > 1 else 0.0
    return {"t": np.arange(length), "mean": mean, "std": std, "coverage": cov}


def summarize(files: Dict[str, Sequence[str]]) -> dict:
    algs = {}
    for name, paths in files.items():
        traces = [read_trace(p) for p in sorted(paths)]
        agg = aggregate([_nmse_series(rows) for rows in traces])
        statuses = [_final_status(rows) for rows in traces]
        algs[name] = {
            "mean_nmse": agg["mean"].tolist(),
            "coverage": agg["coverage"].tolist(),
            "status_counts": {s: statuses.count(s) for s in sorted(set(statuses))},
            "traces": sorted(str(p) for p in paths),
        }
    return {"algorithms": algs}


def _final_status(rows):
    if not rows:
        return "empty"
    return "diverged" if any(r.get("status") == "diverged" for r in rows) else "completed"


def _group_trace_files(paths: Iterable[Union[str, os.PathLike]]) -> Dict[str, List[str]]:
    groups: Dict[str, List[str]] = {}
    for p in paths:
        stem = Path(p).stem
        name = stem.rsplit("__seed", 1)[0]
        groups.setdefault(name, []).append(str(p))
    return groups


def emit_plot_data(traces: Union[str, os.PathLike, Dict[str, Sequence[str]]], out_dir: Union[str, os.PathLike, None] = None,
                   title: str = "NMSE vs outer iteration") -> Dict[str, Path]:
    """Write mean/std NMSE series (CSV) and an SVG plot.

    ``traces`` is a trace directory or a mapping algorithm -> trace files.
    """
    if isinstance(traces, (str, os.PathLike)):
        files = _group_trace_files(sorted(Path(traces).glob("*.csv")))
        out_dir = Path(traces) if out_dir is None else Path(out_dir)
    else:
        files = {k: list(v) for k, v in traces.items()}
        out_dir = Path(out_dir if out_dir is not None else ".")
    files = {k: v for k, v in files.items() if v}
    if not files:
        raise ValueError("no traces to plot")
    out_dir.mkdir(parents=True, exist_ok=True)
    series = {name: aggregate([_nmse_series(read_trace(p)) for p in sorted(paths)]) for name, paths in files.items()}

    csv_path = out_dir / "nmse_series.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "t", "mean_nmse", "std_nmse", "mean_nmse_db", "coverage"])
        for name, s in series.items():
            for t, m, sd, c in zip(s["t"], s["mean"], s["std"], s["coverage"]):
                w.writerow([name, int(t), repr(float(m)), repr(float(sd)), repr(10 * math.log10(m)) if m > 0 else "nan", int(c)])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for name, s in series.items():
        if len(s["t"]) == 0:
            continue
        db = 10 * np.log10(np.maximum(s["mean"], 1e-300))
        ax.plot(s["t"], db, marker="o", markersize=2.5, label=name)
        lo = 10 * np.log10(np.maximum(s["mean"] - s["std"], 1e-300))
        hi = 10 * np.log10(np.maximum(s["mean"] + s["std"], 1e-300))
        ax.fill_between(s["t"], np.maximum(lo, db.min() - 10), hi, alpha=0.15)
    ax.set_xlabel("outer iteration t")
    ax.set_ylabel("NMSE [dB]")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    svg_path = out_dir / "nmse.svg"
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    return {"csv": csv_path, "svg": svg_path}

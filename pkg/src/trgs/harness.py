"""Experiment orchestration: build problems from configs, run seed sweeps, write CSVs."""
from __future__ import annotations

import csv
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .algorithms import (BtPolicy, DiagnosticFlags, RunTrace, Schedule, derive_schedule, run_drtr, run_sgd_baseline,
                         run_trust_region, run_trust_region_vr)
from .config import TAG_OF, ExperimentConfig
from .core import SeededRng, SmoothnessProfile
from .diagnostics import certify, per_class_accuracy
from .dro import Conjugate, DroDualObjective
from .errors import ConfigError, TrgsError
from .estimators import robust_ceil
from .problems import (AdditiveNoise, IdentityCurvatureNoise, ModelParams, MultiplicativeNoise, NoNoise, RankOneNoise,
                       logistic_oracle, make_exp_scalar, make_imbalanced_mixture, make_quadratic, make_quartic_saddle,
                       mlp_oracle)

CSV_COLUMNS = ("iter", "samples", "F", "grad_norm", "tr_lambda", "delta", "step_norm", "lambda_min", "wall_ms")
TEST_SEED_OFFSET = 1000


@dataclass
class Problem:
    oracle: object
    x0: np.ndarray
    train: object = None
    test: object = None
    shape: Optional[tuple] = None

    def params(self, x) -> ModelParams:
        """Classifier parameters of a (possibly joint DRO) iterate."""
        x = np.asarray(x, float)
        if isinstance(self.oracle, DroDualObjective):
            x = x[:-1]
        return ModelParams(x, self.shape)


def _noise(kind, scale):
    if kind == "none":
        return NoNoise()
    return {"additive": AdditiveNoise, "multiplicative": MultiplicativeNoise, "identity": IdentityCurvatureNoise,
            "rank_one": RankOneNoise}[kind](scale)


def build_problem(cfg: ExperimentConfig, seed: int) -> Problem:
    """Oracle and starting point for one seed.

    Classification data are drawn from ``data_seed + seed`` (training, with the
    configured class ratios) and ``data_seed + seed + 1000`` (balanced test set).
    """
    p = cfg.problem
    kind = p["kind"]
    if kind == "quartic":
        oracle = make_quartic_saddle(p["dim"], noise=_noise(p["noise"], p["noise_scale"]))
    elif kind == "exp":
        oracle = make_exp_scalar(p["dim"])
    elif kind == "quadratic":
        oracle = make_quadratic(np.diag(p["diag"]), noise=_noise(p["noise"], p["noise_scale"]))
    else:
        K, d = p["n_classes"], p["n_features"]
        ds = p["data_seed"] + seed
        train = make_imbalanced_mixture(d, K, p["base_per_class"], p["ratios"], ds, p["separation"])
        test = make_imbalanced_mixture(d, K, p["test_base_per_class"], [1.0] * K, ds + TEST_SEED_OFFSET,
                                       p["separation"])
        if kind == "logistic":
            base = logistic_oracle(train)
            shape = ("logistic", K, d)
            x0 = np.zeros(base.dim)
        else:
            base = mlp_oracle(train, p["hidden"])
            shape = ("mlp", d, p["hidden"], K)
            x0 = base.init_params(p["init_seed"] + seed)
        if p["x0"] is not None:
            x0 = np.asarray(p["x0"], float)
        oracle = base
        if cfg.dro is not None:
            oracle = DroDualObjective(base, Conjugate(cfg.dro["conjugate"], cfg.dro["alpha"]), cfg.dro["penalty"])
            x0 = np.append(x0, 0.0)
        return Problem(oracle, x0, train, test, shape)
    x0 = np.zeros(oracle.dim) if p["x0"] is None else np.asarray(p["x0"], float)
    return Problem(oracle, x0)


def build_schedule(cfg: ExperimentConfig, dim: int, budget_multiplier: float = 1.0) -> Schedule:
    a = cfg.algorithm
    tag = TAG_OF[a["name"]]
    beta = a["beta"]
    if a["policy"] == "scaled_identity":
        beta = max(beta, a["rho"])
    overrides = {k: a[k] for k in ("delta", "s1", "s2", "s3", "q", "T") if a[k] is not None}
    if a["schedule"] == "manual":
        sched = Schedule(a["epsilon"], beta=beta, theorem_tag=tag, **overrides)
    else:
        profile = SmoothnessProfile(a["L0"], a["L1"], a["G0"], a["G1"], a["M0"], a["M1"], a["K0"], a["K1"],
                                    delta_F=a["delta_F"])
        sched = replace(derive_schedule(tag, a["epsilon"], profile, max(dim, 2), beta), **overrides)
    return sched.scaled(budget_multiplier)


def diagnostic_flags(cfg: ExperimentConfig) -> DiagnosticFlags:
    r = cfg.run
    return DiagnosticFlags(full_batch=r["full_batch"], lambda_min=r["lambda_min"], check_kkt=r["check_kkt"],
                           estimator_error=r["estimator_error"], subspace_gap=r["subspace_gap"],
                           stop_when=r["stop_when"], c1=r["c1"], c2=r["c2"])


def execute(cfg: ExperimentConfig, problem: Problem, seed: int, budget_multiplier: float = 1.0) -> RunTrace:
    a = cfg.algorithm
    rng = SeededRng(seed)
    flags = diagnostic_flags(cfg)
    if a["name"] == "sgd":
        T = math.ceil(a["T"] * budget_multiplier - 1e-9)
        return run_sgd_baseline(problem.oracle, a["lr"], a["momentum"], T, a["batch"], problem.x0, rng, flags)
    sched = build_schedule(cfg, problem.oracle.dim, budget_multiplier)
    if a["name"] == "drtr":
        x_prev = None if a["x_prev"] is None else np.asarray(a["x_prev"], float)
        return run_drtr(problem.oracle, sched, problem.x0, rng, flags, x_prev=x_prev)
    policy = BtPolicy(a["policy"], a["rho"] if a["policy"] == "scaled_identity" else None)
    if a["name"].endswith("-vr"):
        return run_trust_region_vr(problem.oracle, policy, sched, problem.x0, rng, flags)
    return run_trust_region(problem.oracle, policy, sched, problem.x0, rng, flags)


@dataclass
class SeedResult:
    seed: int
    trace: Optional[RunTrace]
    summary: dict = field(default_factory=dict)
    error: Optional[str] = None


def summarize(cfg: ExperimentConfig, problem: Problem, trace: RunTrace) -> dict:
    last = trace.records[-1]
    best = trace.best()
    tb = trace.at_tbar()
    out = {
        "status": trace.status,
        "iterations": trace.iterations,
        "samples": last.samples,
        "grad_samples": last.grad_samples,
        "hess_samples": last.hess_samples,
        "final_F": last.F,
        "final_grad_norm": last.grad_norm,
        "best_iter": best.iter if best else None,
        "best_grad_norm": best.grad_norm if best else None,
        "tbar": trace.tbar,
        "tbar_grad_norm": tb.grad_norm if tb else None,
        "verdict": None,
        "lambda_min": None,
    }
    oracle = problem.oracle
    if oracle.exposes_full:
        cert = certify(oracle, trace.final.x, cfg.epsilon, cfg.run["c1"], cfg.run["c2"],
                       second_order=oracle.has_hessian and oracle.dim <= 500)
        out["verdict"] = cert.verdict
        out["lambda_min"] = cert.lambda_min
    if problem.shape is not None:
        acc = per_class_accuracy(problem.params(trace.final.x), problem.test)
        out["worst_acc"] = acc.worst
        out["overall_acc"] = acc.overall
        for k, v in enumerate(acc.per_class):
            out[f"acc_{k}"] = float(v)
    return out


def run_seed(cfg: ExperimentConfig, seed: int, budget_multiplier: float = 1.0) -> SeedResult:
    problem = build_problem(cfg, seed)
    try:
        trace = execute(cfg, problem, seed, budget_multiplier)
    except (TrgsError, ArithmeticError, AssertionError, ValueError) as exc:
        return SeedResult(seed, getattr(exc, "partial_trace", None), {}, f"{type(exc).__name__}: {exc}")
    return SeedResult(seed, trace, summarize(cfg, problem, trace))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_trace_csv(trace: RunTrace, path, timing: bool = False):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in trace.records:
            row = [getattr(r, c) for c in CSV_COLUMNS]
            if not timing:
                row[-1] = None
            w.writerow([_cell(v) for v in row])


def read_trace_csv(path) -> list:
    """Rows as dicts; empty cells become ``None``, ``iter``/``samples`` ints, the rest floats."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected trace header {header}")
        rows = []
        for raw in rd:
            row = {}
            for k, v in zip(header, raw):
                row[k] = None if v == "" else (int(v) if k in ("iter", "samples") else float(v))
            rows.append(row)
    return rows


def aggregate_rows(traces, smooth: Optional[int] = None) -> list:
    """Per-iteration mean/min/max across seeds; with ``smooth`` also averaged over blocks of that many iterations."""
    cols = CSV_COLUMNS[1:-1]
    length = max(len(t.records) for t in traces)
    rows = []
    for i in range(length):
        row = {"iter": i, "seeds": 0}
        present = [t.records[i] for t in traces if i < len(t.records)]
        row["seeds"] = len(present)
        for c in cols:
            vals = np.array([getattr(r, c) for r in present if getattr(r, c) is not None], float)
            row[f"{c}_mean"] = float(np.mean(vals)) if vals.size else None
            row[f"{c}_min"] = float(np.min(vals)) if vals.size else None
            row[f"{c}_max"] = float(np.max(vals)) if vals.size else None
        rows.append(row)
    if smooth:
        blocks = []
        for start in range(0, len(rows), smooth):
            chunk = rows[start:start + smooth]
            b = {"iter": chunk[-1]["iter"], "seeds": min(r["seeds"] for r in chunk)}
            for k in chunk[0]:
                if k in ("iter", "seeds"):
                    continue
                vals = [r[k] for r in chunk if r[k] is not None]
                b[k] = float(np.mean(vals)) if vals else None
            blocks.append(b)
        rows = blocks
    return rows


def _write_rows(rows, path):
    if not rows:
        return
    keys = list(rows[0].keys())
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([_cell(r.get(k)) for k in keys])


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

def _run_seed_job(args):
    cfg, seed, bm = args
    return run_seed(cfg, seed, bm)


def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int = 1, budget_multiplier: float = 1.0,
                   smooth: Optional[int] = None, echo=None) -> int:
    """Run every seed and write ``trace_seed<s>.csv``, ``aggregate.csv`` and ``summary.csv`` to ``out_dir``.

    Returns 0 when every seed ran to completion and 1 otherwise; traces of
    failed seeds are kept next to a ``.failed`` marker holding the error.
    """
    echo = echo or (lambda s: print(s, file=sys.stdout))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs_args = [(cfg, s, budget_multiplier) for s in cfg.seeds]
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(jobs_args))) as pool:
            results = list(pool.map(_run_seed_job, jobs_args))
    else:
        results = [_run_seed_job(a) for a in jobs_args]

    timing = cfg.run["timing"]
    ok = []
    summaries = []
    for res in results:
        path = out / f"trace_seed{res.seed}.csv"
        marker = Path(str(path) + ".failed")
        if res.trace is not None:
            write_trace_csv(res.trace, path, timing)
        if res.error is not None:
            marker.write_text(res.error + "\n")
            echo(f"seed {res.seed}: FAILED {res.error}")
            summaries.append({"seed": res.seed, "status": f"failed: {res.error}"})
            continue
        if marker.exists():
            os.remove(marker)
        ok.append(res.trace)
        s = res.summary
        summaries.append({"seed": res.seed, **s})
        line = (f"seed {res.seed}: {s['status']}, {s['iterations']} iterations, {s['samples']} samples "
                f"({s['grad_samples']} gradient, {s['hess_samples']} Hessian)")
        if s.get("final_grad_norm") is not None:
            line += f", final |grad F| {s['final_grad_norm']:.3e}, best {s['best_grad_norm']:.3e}"
        if s.get("verdict"):
            line += f", certificate {s['verdict']}"
        if "worst_acc" in s:
            line += f", test accuracy {s['overall_acc']:.3f} (worst class {s['worst_acc']:.3f})"
        echo(line)
    if ok:
        _write_rows(aggregate_rows(ok), out / "aggregate.csv")
        if smooth:
            _write_rows(aggregate_rows(ok, smooth), out / f"aggregate_smooth{smooth}.csv")
    _write_rows(summaries, out / "summary.csv")
    return 0 if len(ok) == len(results) else 1


# ---------------------------------------------------------------------------
# matched-sample comparison
# ---------------------------------------------------------------------------

@dataclass
class BenchResult:
    vr_error: np.ndarray
    plain_error: np.ndarray
    vr_samples: np.ndarray
    plain_samples: np.ndarray
    plain_batch: int
    seeds: int

    @property
    def fraction_below(self) -> float:
        m = min(self.vr_error.size, self.plain_error.size)
        return float(np.mean(self.vr_error[:m] < self.plain_error[:m])) if m else float("nan")


def _mean_columns(traces, name):
    length = min(len(t.records) for t in traces)
    cols = np.array([[getattr(t.records[i], name) for i in range(1, length)] for t in traces], float)
    return cols.mean(axis=0)


def bench_vr_vs_plain(cfg: ExperimentConfig, budget_multiplier: float = 1.0) -> BenchResult:
    """Estimator error of a variance-reduced run against a plain run with the same average batch.

    The plain run draws ``ceil((S1 + (q - 1) S3) / q)`` fresh samples every
    step, so both spend the same number of gradient samples per restart period.
    Errors are averaged over the configured seeds at each recorded iteration.
    """
    a = cfg.algorithm
    if not a["name"].endswith("-vr"):
        raise ConfigError("bench needs a variance-reduced algorithm (fotrgs-vr or sotrgs-vr)")
    cfg = replace(cfg, run=dict(cfg.run, estimator_error=True, stop_when=None))
    vr, plain = [], []
    plain_batch = None
    for seed in cfg.seeds:
        problem = build_problem(cfg, seed)
        sched = build_schedule(cfg, problem.oracle.dim, budget_multiplier)
        plain_batch = robust_ceil((sched.s1 + (sched.q - 1) * (sched.s3 or 0)) / sched.q)
        policy = BtPolicy(a["policy"], a["rho"] if a["policy"] == "scaled_identity" else None)
        flags = diagnostic_flags(cfg)
        rng = SeededRng(seed)
        vr.append(run_trust_region_vr(problem.oracle, policy, sched, problem.x0, rng, flags))
        psched = replace(sched, s1=plain_batch, s3=None, q=None)
        plain.append(run_trust_region(problem.oracle, policy, psched, problem.x0, rng, flags))
    return BenchResult(_mean_columns(vr, "est_error"), _mean_columns(plain, "est_error"),
                       _mean_columns(vr, "samples"), _mean_columns(plain, "samples"), plain_batch, len(cfg.seeds))

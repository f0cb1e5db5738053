"""Run drivers: the trust-region framework, its variance-reduced and subspace variants, and an SGD baseline."""
from __future__ import annotations

import math
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import Iterate, SeededRng, SmoothnessProfile, StochasticOracle, batch_gradient, batch_hessian, draw_batch, hvp
from .errors import DegenerateGradient, DegenerateSubspace, InvalidArgument, InvariantViolation, UnsupportedOperation
from .estimators import SpiderState, hessian_batch_size, robust_ceil, spider_gradient
from .subproblem import Subproblem2D, _metric_factor, kkt_and_decrease, solve_2d_metric, solve_clipped, solve_general, solve_normalized

BATCH_CAP = 10_000_000
MAX_DENSE_EIG = 500
TAGS = ("FOTRGS", "SOTRGS", "FOTRGS-VR", "SOTRGS-VR", "DRTR", "manual")


class ScheduleWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# policies and schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BtPolicy:
    """Choice of the model matrix: ``zero``, ``scaled_identity`` (rho I), ``sampled_hessian`` or ``projected_subspace``."""

    variant: str
    rho: Optional[float] = None

    def __post_init__(self):
        if self.variant not in ("zero", "scaled_identity", "sampled_hessian", "projected_subspace"):
            raise InvalidArgument(f"unknown B_t policy {self.variant!r}")
        if self.variant == "scaled_identity":
            if self.rho is None or not self.rho > 0:
                raise InvalidArgument("scaled_identity policy needs rho > 0")
        elif self.rho is not None:
            raise InvalidArgument(f"rho does not apply to the {self.variant} policy")

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def scaled_identity(cls, rho):
        return cls("scaled_identity", float(rho))

    @classmethod
    def sampled_hessian(cls):
        return cls("sampled_hessian")

    @classmethod
    def projected_subspace(cls):
        return cls("projected_subspace")

    @property
    def beta(self) -> float:
        return self.rho if self.variant == "scaled_identity" else 0.0

    def check(self, oracle: StochasticOracle):
        if self.variant == "sampled_hessian" and not oracle.has_hessian:
            raise UnsupportedOperation(f"sampled_hessian policy needs Hessians; {type(oracle).__name__} has none")
        if self.variant == "projected_subspace" and "hvp" not in oracle.capabilities:
            raise UnsupportedOperation("projected_subspace policy needs Hessian-vector products")


@dataclass(frozen=True)
class Schedule:
    epsilon: float
    delta: float
    s1: int
    T: int
    s2: Optional[int] = None
    s3: Optional[int] = None
    q: Optional[int] = None
    beta: float = 0.0
    theorem_tag: str = "manual"
    threshold: float = math.inf
    threshold_ok: bool = True

    def __post_init__(self):
        if self.theorem_tag not in TAGS:
            raise InvalidArgument(f"unknown theorem tag {self.theorem_tag!r}")
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise InvalidArgument("trust radius must be positive")
        if not self.epsilon > 0:
            raise InvalidArgument("epsilon must be positive")
        if self.T < 0:
            raise InvalidArgument("T must be nonnegative")
        for name in ("s1", "s2", "s3", "q"):
            v = getattr(self, name)
            if v is not None and (int(v) != v or v < 1):
                raise InvalidArgument(f"{name} must be a positive integer, got {v}")

    def scaled(self, budget_multiplier: float) -> "Schedule":
        if not budget_multiplier > 0:
            raise InvalidArgument("budget multiplier must be positive")
        return replace(self, T=robust_ceil(self.T * budget_multiplier))


def _cap(name, v):
    v = max(1, robust_ceil(v))
    if v > BATCH_CAP:
        warnings.warn(f"{name}={v} exceeds the desk-scale cap; using {BATCH_CAP}", ScheduleWarning, stacklevel=3)
        v = BATCH_CAP
    return v


def _inv(x):
    return math.inf if x == 0 else 1.0 / x


def derive_schedule(tag: str, epsilon: float, profile: SmoothnessProfile, n: int, beta: float = 0.0) -> Schedule:
    """Run parameters prescribed by the complexity theorems for ``tag``.

    Iteration budgets written as O(.) are instantiated as ``4 * delta_F * eps^-p``;
    the first-order budget uses its explicit constant ``32 delta_F (L0 + 4 beta)``.
    When the target accuracy is above the theorem's threshold a ``ScheduleWarning``
    is issued and ``threshold_ok`` is False.
    """
    if tag not in TAGS or tag == "manual":
        raise InvalidArgument(f"cannot derive a schedule for tag {tag!r}")
    if not (0 < epsilon < 1):
        raise InvalidArgument(f"epsilon must lie in (0, 1), got {epsilon}")
    if beta < 0:
        raise InvalidArgument("beta must be nonnegative")
    p = profile
    L0, L1, G0, G1 = p.L0, p.L1, p.G0, p.G1
    eps = epsilon
    s2 = s3 = q = None
    if tag == "FOTRGS":
        delta = eps / (4 * L0 + 16 * beta)
        s1 = _cap("s1", 64 * G0**2 / eps**2)
        T = robust_ceil(32 * p.delta_F * (L0 + 4 * beta) / eps**2)
        den = L1 * G0 + 2 * L0 * G1 + 8 * beta * G1
        thr = min((4 * L0 * G0 + 16 * beta * G0) / den if den > 0 else math.inf, (4 * L0 + 16 * beta) * _inv(L1))
    elif tag in ("SOTRGS", "DRTR"):
        if not p.has_second_order:
            raise InvalidArgument(f"{tag} needs the second-order constants M0 and M1")
        K1 = p.K1 or 0.0
        delta = math.sqrt(eps)
        s1 = _cap("s1", eps**-2)
        s2 = _cap("s2", hessian_batch_size(eps, n))
        T = robust_ceil(4 * p.delta_F * eps**-1.5)
        # the subspace variant's extra constant C1 is taken as 0 (exact subspace)
        lin = 5 * p.M1 + 18 * G1 + (12 if tag == "SOTRGS" else 24) * K1
        thr = min(3 * _inv(lin), _inv(L1**2))
    elif tag == "FOTRGS-VR":
        if not G1 > 0:
            raise InvalidArgument("FOTRGS-VR sets q = 1/(8 G1 eps) and needs G1 > 0")
        delta = eps
        s1 = _cap("s1", eps**-2)
        s3 = _cap("s3", 1 / eps)
        q = max(1, robust_ceil(1 / (8 * G1 * eps)))
        T = robust_ceil(4 * p.delta_F * eps**-2)
        thr = min(G1**2 / 2 * _inv(L1**2), _inv(L1))
    else:  # SOTRGS-VR
        if not p.has_second_order:
            raise InvalidArgument("SOTRGS-VR needs the second-order constants M0 and M1")
        delta = math.sqrt(eps)
        s1 = _cap("s1", eps**-2)
        s2 = _cap("s2", hessian_batch_size(eps, n))
        s3 = _cap("s3", eps**-1.5)
        q = max(1, robust_ceil(eps**-0.5))
        T = robust_ceil(4 * p.delta_F * eps**-1.5)
        thr = min(G1**4 / 4 * _inv(L1**4), _inv(36 * G1**2), _inv(L1**2))
    T = max(T, 1)
    ok = eps <= thr
    if not ok:
        warnings.warn(f"{tag}: epsilon={eps} exceeds the theorem threshold {thr:.4g}; guarantees do not apply",
                      ScheduleWarning, stacklevel=2)
    return Schedule(eps, delta, s1, T, s2, s3, q, beta, tag, thr, ok)


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

@dataclass
class TraceRecord:
    iter: int
    samples: int
    grad_samples: int = 0
    hess_samples: int = 0
    F: Optional[float] = None
    grad_norm: Optional[float] = None
    tr_lambda: Optional[float] = None
    delta: Optional[float] = None
    step_norm: Optional[float] = None
    lambda_min: Optional[float] = None
    wall_ms: Optional[float] = None
    est_error: Optional[float] = None
    model_decrease: Optional[float] = None
    extras: dict = field(default_factory=dict)


@dataclass
class DiagnosticFlags:
    """What to measure alongside a run. Diagnostic evaluations never count as samples."""

    full_batch: bool = True
    lambda_min: bool = False
    check_kkt: bool = True
    estimator_error: bool = False
    subspace_gap: bool = False
    stop_when: Optional[str] = None  # None | "fosp" | "sosp"
    c1: float = 1.0
    c2: float = 1.0

    def __post_init__(self):
        if self.stop_when not in (None, "fosp", "sosp"):
            raise InvalidArgument(f"stop_when must be fosp or sosp, got {self.stop_when!r}")
        if self.stop_when is not None:
            self.full_batch = True
        if self.stop_when == "sosp":
            self.lambda_min = True


@dataclass
class RunTrace:
    algorithm: str
    records: list = field(default_factory=list)
    final: Optional[Iterate] = None
    tbar: Optional[int] = None
    status: str = "completed"
    kkt_checks: int = 0
    schedule: Optional[Schedule] = None

    @property
    def iterations(self) -> int:
        return len(self.records) - 1

    def column(self, name):
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records], float)

    def best(self) -> Optional[TraceRecord]:
        recs = [r for r in self.records if r.grad_norm is not None]
        return min(recs, key=lambda r: r.grad_norm) if recs else None

    def at_tbar(self) -> Optional[TraceRecord]:
        if self.tbar is None or self.tbar >= len(self.records):
            return None
        return self.records[self.tbar]

    def first_reaching(self, epsilon, c1=1.0, c2=None) -> Optional[TraceRecord]:
        for r in self.records:
            if r.grad_norm is None or r.grad_norm > c1 * epsilon:
                continue
            if c2 is not None and (r.lambda_min is None or r.lambda_min < -c2 * math.sqrt(epsilon)):
                continue
            return r
        return None


class _Runner:
    """Shared bookkeeping for every driver: diagnostics, sample counts and records."""

    def __init__(self, name, oracle, schedule, x0, rng, flags):
        self.oracle = oracle
        self.flags = flags if flags is not None else DiagnosticFlags()
        self.schedule = schedule
        self.rng = rng
        x0 = np.asarray(x0, float)
        if x0.shape != (oracle.dim,):
            raise InvalidArgument(f"x0 has shape {x0.shape}, oracle dimension is {oracle.dim}")
        Iterate(x0)  # finiteness check
        self.trace = RunTrace(name, schedule=schedule)
        self.grad_samples = 0
        self.hess_samples = 0
        self.t0 = time.perf_counter()
        self.diag_ok = self.flags.full_batch and oracle.exposes_full
        T = schedule.T if schedule is not None else 0
        if T > 0:
            self.trace.tbar = int(rng.child("tbar").generator.integers(0, T))
        self.record(0, x0)

    def point_diagnostics(self, x):
        F = gn = lmin = None
        if self.diag_ok:
            both = getattr(self.oracle, "full_value_and_gradient", None)
            F, grad = both(x) if both else (self.oracle.full_value(x), self.oracle.full_gradient(x))
            F, gn = float(F), float(np.linalg.norm(grad))
            if self.flags.lambda_min and self.oracle.has_hessian and self.oracle.dim <= MAX_DENSE_EIG:
                H = self.oracle.full_hessian(x)
                lmin = float(np.linalg.eigvalsh(0.5 * (H + H.T))[0])
        return F, gn, lmin

    def record(self, t, x, **kw):
        F, gn, lmin = self.point_diagnostics(x)
        rec = TraceRecord(t, self.grad_samples + self.hess_samples, self.grad_samples, self.hess_samples,
                          F, gn, lambda_min=lmin, wall_ms=(time.perf_counter() - self.t0) * 1e3, **kw)
        self.trace.records.append(rec)
        return rec

    def estimator_error(self, x, g):
        if not (self.flags.estimator_error and self.oracle.exposes_full):
            return None
        e = g - self.oracle.full_gradient(x)
        return float(e @ e)

    def check(self, g, B, delta, step):
        if self.flags.check_kkt:
            kkt_and_decrease(g, B, delta, step)
            self.trace.kkt_checks += 1

    def reached(self, rec) -> bool:
        f = self.flags
        if f.stop_when is None or rec.grad_norm is None:
            return False
        eps = self.schedule.epsilon
        if rec.grad_norm > f.c1 * eps:
            return False
        if f.stop_when == "sosp":
            return rec.lambda_min is not None and rec.lambda_min >= -f.c2 * math.sqrt(eps)
        return True

    @contextmanager
    def guard(self):
        """Attach the records gathered so far to any exception escaping the loop."""
        try:
            yield
        except Exception as exc:
            self.trace.status = f"failed: {exc}"
            exc.partial_trace = self.trace
            raise

    def finish(self, x):
        self.trace.final = Iterate(x, self.trace.iterations)
        return self.trace


def _model_matrix(policy, oracle, x, schedule, it, runner):
    n = x.size
    if policy.variant == "zero":
        return np.zeros((n, n))
    if policy.variant == "scaled_identity":
        return policy.rho * np.eye(n)
    if schedule.s2 is None:
        raise InvalidArgument("sampled_hessian policy needs a Hessian batch size s2")
    batch = draw_batch(oracle, schedule.s2, it.child("S2"))
    runner.hess_samples += schedule.s2
    return batch_hessian(oracle, x, batch)


def _solve(policy, g, B, delta):
    if policy.variant == "zero":
        return solve_normalized(g, delta)
    if policy.variant == "scaled_identity":
        return solve_clipped(g, policy.rho, delta)
    return solve_general(g, B, delta)


def _loop(name, oracle, policy, schedule, x0, rng, diagnostics, gradient_fn):
    policy.check(oracle)
    run = _Runner(name, oracle, schedule, x0, rng, diagnostics)
    x = np.asarray(x0, float).copy()
    if run.reached(run.trace.records[0]):
        run.trace.status = "target reached"
        return run.finish(x)
    with run.guard():
        x = _loop_body(run, oracle, policy, schedule, x, rng, gradient_fn)
    return run.finish(x)


def _loop_body(run, oracle, policy, schedule, x, rng, gradient_fn):
    for t in range(schedule.T):
        it = rng.child("iter", t)
        g = gradient_fn(x, it, run)
        B = _model_matrix(policy, oracle, x, schedule, it, run)
        try:
            step = _solve(policy, g, B, schedule.delta)
        except DegenerateGradient:
            run.trace.status = "zero-gradient stall"
            break
        run.check(g, B, schedule.delta, step)
        err = run.estimator_error(x, g)
        x = x + step.d
        Iterate(x, t + 1)
        rec = run.record(t + 1, x, tr_lambda=step.tr_multiplier, delta=schedule.delta, step_norm=step.norm,
                         est_error=err, model_decrease=step.model_decrease)
        if run.reached(rec):
            run.trace.status = "target reached"
            break
    return x


def run_trust_region(oracle: StochasticOracle, policy: BtPolicy, schedule: Schedule, x0, rng: SeededRng,
                     diagnostics: DiagnosticFlags = None) -> RunTrace:
    """Fresh minibatch gradient each step, model matrix per ``policy``, exact subproblem solve."""
    if policy.variant == "projected_subspace":
        return run_drtr(oracle, schedule, x0, rng, diagnostics)

    def grad(x, it, run):
        batch = draw_batch(oracle, schedule.s1, it.child("S1"))
        run.grad_samples += schedule.s1
        return batch_gradient(oracle, x, batch)

    return _loop("trust_region", oracle, policy, schedule, x0, rng, diagnostics, grad)


def run_trust_region_vr(oracle: StochasticOracle, policy: BtPolicy, schedule: Schedule, x0, rng: SeededRng,
                        diagnostics: DiagnosticFlags = None) -> RunTrace:
    """Same loop with the recursive estimator; the Hessian batch (if any) is drawn fresh every step."""
    if policy.variant == "projected_subspace":
        raise InvalidArgument("variance-reduced runs take the zero, scaled_identity or sampled_hessian policy")
    if schedule.q is None or (schedule.q > 1 and schedule.s3 is None):
        raise InvalidArgument("variance-reduced runs need q and s3 in the schedule")
    state = [SpiderState(schedule.q)]

    def grad(x, it, run):
        g, state[0], used = spider_gradient(state[0], oracle, x, schedule.s1, schedule.s3 or 1, it)
        run.grad_samples += used
        return g

    return _loop("trust_region_vr", oracle, policy, schedule, x0, rng, diagnostics, grad)


# ---------------------------------------------------------------------------
# subspace (two-direction) trust region
# ---------------------------------------------------------------------------

def drtr_model(g, d, Hg, Hd, delta) -> Subproblem2D:
    """2-D model for ``x+ = x - a1 g + a2 d`` built from two Hessian-vector products."""
    gd = float(g @ d)
    q12 = -0.5 * (float(d @ Hg) + float(g @ Hd))
    Q = np.array([[float(g @ Hg), q12], [q12, float(d @ Hd)]])
    c = np.array([-float(g @ g), gd])
    G = np.array([[float(g @ g), -gd], [-gd, float(d @ d)]])
    return Subproblem2D(Q, c, G, delta)


def _one_dim_step(g, Hg, delta):
    gn = float(np.linalg.norm(g))
    curv = float(g @ Hg) / gn**2
    step = solve_general(np.array([-gn]), np.array([[curv]]), delta)
    tau = float(step.d[0])
    return np.array([tau / gn, 0.0]), step.tr_multiplier, curv


def run_drtr(oracle: StochasticOracle, schedule: Schedule, x0, rng: SeededRng,
             diagnostics: DiagnosticFlags = None, x_prev=None) -> RunTrace:
    """Trust region restricted to span{g_t, x_t - x_{t-1}} with the metric induced on that span.

    Needs only two Hessian-vector products per step. The first step (no
    momentum unless ``x_prev`` is given) and steps whose two directions are
    numerically parallel solve the one-dimensional model along ``-g``; after
    two such steps in a row the momentum is dropped for one step.
    """
    run = _Runner("drtr", oracle, schedule, x0, rng, diagnostics)
    x = np.asarray(x0, float).copy()
    d = np.zeros_like(x) if x_prev is None else x - np.asarray(x_prev, float)
    with run.guard():
        degenerate_run = 0
        for t in range(schedule.T):
            it = rng.child("iter", t)
            batch = draw_batch(oracle, schedule.s1, it.child("S1"))
            run.grad_samples += schedule.s1
            g = batch_gradient(oracle, x, batch)
            if schedule.s2 is not None:
                hbatch = draw_batch(oracle, schedule.s2, it.child("S2"))
                run.hess_samples += schedule.s2
            else:
                hbatch = batch
            if not np.any(g):
                run.trace.status = "zero-gradient stall"
                break
            s, lam, extras = _drtr_step(oracle, x, g, d, hbatch, schedule.delta)
            degenerate_run = degenerate_run + 1 if extras["degenerate"] else 0
            model = extras["model_value"]
            if run.flags.subspace_gap and oracle.has_hessian:
                full = solve_general(g, batch_hessian(oracle, x, hbatch), schedule.delta)
                extras["full_model_value"] = full.model_decrease
                extras["subspace_gap"] = model - full.model_decrease
            nrm = float(np.linalg.norm(s))
            if run.flags.check_kkt:
                # feasibility in the full space and the guaranteed decrease of the projected model
                if nrm > schedule.delta * (1 + 1e-10) or model > -0.5 * lam * nrm**2 + 1e-8 * (1 + abs(model)):
                    raise InvariantViolation(f"subspace step violates feasibility or model decrease at t={t}")
                run.trace.kkt_checks += 1
            err = run.estimator_error(x, g)
            x_new = x + s
            Iterate(x_new, t + 1)
            d = x_new - x
            if degenerate_run >= 2:
                d = np.zeros_like(x)
                degenerate_run = 0
            x = x_new
            rec = run.record(t + 1, x, tr_lambda=lam, delta=schedule.delta, step_norm=nrm,
                             est_error=err, model_decrease=model, extras=extras)
            if run.reached(rec):
                run.trace.status = "target reached"
                break
    return run.finish(x)


def _drtr_step(oracle, x, g, d, hbatch, delta):
    """One subspace step; returns ``(s, multiplier, extras)``."""
    Hg = hvp(oracle, x, g, hbatch)
    Hd = np.zeros_like(x)
    extras = {"degenerate": True}
    if np.any(d):
        Hd = hvp(oracle, x, d, hbatch)
        p = drtr_model(g, d, Hg, Hd, delta)
        try:
            alpha, lam = solve_2d_metric(p)
            Ri = np.linalg.inv(_metric_factor(p.G))
            W = Ri.T @ p.Q @ Ri
            extras["subspace_lambda_min"] = float(np.linalg.eigvalsh(0.5 * (W + W.T))[0])
            extras["degenerate"] = False
        except DegenerateSubspace:
            pass
    if extras["degenerate"]:
        alpha, lam, extras["subspace_lambda_min"] = _one_dim_step(g, Hg, delta)
    s = -alpha[0] * g + alpha[1] * d
    Hs = -alpha[0] * Hg + alpha[1] * Hd
    extras["model_value"] = float(g @ s + 0.5 * (s @ Hs))
    return s, lam, extras


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def run_sgd_baseline(oracle: StochasticOracle, lr: float, momentum: float, T: int, batch: int, x0, rng: SeededRng,
                     diagnostics: DiagnosticFlags = None) -> RunTrace:
    """Heavy-ball SGD: ``v = momentum * v + g``, ``x = x - lr * v``."""
    if lr < 0 or not (0 <= momentum < 1):
        raise InvalidArgument("need lr >= 0 and momentum in [0, 1)")
    if batch < 1 or T < 0:
        raise InvalidArgument("need batch >= 1 and T >= 0")
    sched = Schedule(epsilon=1.0, delta=1.0, s1=int(batch), T=int(T))
    flags = replace(diagnostics, check_kkt=False) if diagnostics is not None else DiagnosticFlags(check_kkt=False)
    run = _Runner("sgd", oracle, sched, x0, rng, flags)
    x = np.asarray(x0, float).copy()
    v = np.zeros_like(x)
    with run.guard():
        for t in range(T):
            it = rng.child("iter", t)
            b = draw_batch(oracle, batch, it.child("S1"))
            run.grad_samples += batch
            g = batch_gradient(oracle, x, b)
            err = run.estimator_error(x, g)
            v = momentum * v + g
            x = x - lr * v
            Iterate(x, t + 1)
            run.record(t + 1, x, step_norm=float(lr * np.linalg.norm(v)), est_error=err)
    return run.finish(x)

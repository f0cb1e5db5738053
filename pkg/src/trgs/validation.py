"""Invariant suites behind ``trgs validate``; each suite returns a list of named checks."""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .core import SeededRng
from .diagnostics import ball_grid_minimum, fd_validate, hessian_concentration_trial
from .dro import Conjugate, DroDualObjective, psi_stationarity
from .errors import InvalidArgument
from .problems import (AdditiveNoise, logistic_oracle, make_exp_scalar, make_imbalanced_mixture, make_quadratic,
                       make_quartic_saddle, mlp_oracle)
from .subproblem import kkt_and_decrease, solve_clipped, solve_general, solve_normalized

SOFT_BUDGET_S = 300.0
BRUTE_RADII = (0.1, 1.0, 10.0)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


# ---------------------------------------------------------------------------
# random subproblem instances
# ---------------------------------------------------------------------------

def random_instance(gen: np.random.Generator, n: int, radii=None):
    """Standard-normal ``(g, B)`` with a radius from ``radii`` (default uniform on [0.1, 2]).

    A fifth of the draws are exact hard cases and another fifth nearly so.
    """
    g = gen.standard_normal(n)
    A = gen.standard_normal((n, n))
    B = 0.5 * (A + A.T)
    delta = float(gen.choice(radii)) if radii is not None else float(gen.uniform(0.1, 2.0))
    kind = gen.integers(5)
    if kind in (0, 1) and n > 1:
        w, V = np.linalg.eigh(B)
        gamma = V.T @ g
        gamma[0] = 0.0 if kind == 0 else 1e-9 * gamma[0]
        g = V @ gamma
        # push the radius beyond the pseudo-inverse step so the eigenvector term is active
        if kind == 0:
            p = V[:, 1:] @ (gamma[1:] / (w[1:] - w[0]))
            delta = float(np.linalg.norm(p)) + float(gen.uniform(0.1, 1.0))
    elif kind == 2:
        B = A @ A.T / n  # convex; often interior
    return g, B, delta


def suite_subproblem(seed: int = 0, instances: int = 500, kkt_instances: int = 200, max_n: int = 50):
    rng = SeededRng(seed).child("subproblem")
    worst_gap, beaten = 0.0, 0
    t0 = time.perf_counter()
    for k in range(instances):
        gen = rng.child("brute", k).generator
        n = 2 + k % 5
        g, B, delta = random_instance(gen, n, BRUTE_RADII)
        step = solve_general(g, B, delta)
        _, v = ball_grid_minimum(g, B, delta)
        gap = v - step.model_decrease
        worst_gap = max(worst_gap, abs(gap))
        beaten += gap < -1e-9
    elapsed = time.perf_counter() - t0
    out = [Check("brute-force model value within 2e-3", worst_gap <= 2e-3 and beaten == 0,
                 f"{instances} instances, worst gap {worst_gap:.2e}, grid better in {beaten}, {elapsed:.1f} s")]
    worst = 0.0
    for k in range(kkt_instances):
        gen = rng.child("kkt", k).generator
        n = int(gen.integers(1, max_n + 1))
        g, B, delta = random_instance(gen, n)
        step = solve_general(g, B, delta)
        rep = kkt_and_decrease(g, B, delta, step, strict=False)
        scale = rep.tolerance / 1e-8
        worst = max(worst, rep.stationarity / scale, rep.complementarity / scale, -rep.psd_margin / scale)
    out.append(Check("KKT residuals <= 1e-8 (1 + |g| + |B|)", worst <= 1e-8,
                     f"{kkt_instances} instances up to n={max_n}, worst scaled residual {worst:.2e}"))
    return out


def suite_corollaries(seed: int = 0, instances: int = 100):
    rng = SeededRng(seed).child("corollaries")
    worst_zero = worst_id = 0.0
    for k in range(instances):
        gen = rng.child(k).generator
        n = int(gen.integers(1, 9))
        g = gen.standard_normal(n) * 10 ** gen.uniform(-2, 2)
        rho = float(10 ** gen.uniform(-2, 2))
        delta = float(10 ** gen.uniform(-2, 1))
        a, b = solve_general(g, np.zeros((n, n)), delta), solve_normalized(g, delta)
        worst_zero = max(worst_zero, float(np.max(np.abs(a.d - b.d))), abs(a.tr_multiplier - b.tr_multiplier)
                         / max(1.0, b.tr_multiplier))
        a, b = solve_general(g, rho * np.eye(n), delta), solve_clipped(g, rho, delta)
        worst_id = max(worst_id, float(np.max(np.abs(a.d - b.d))), abs(a.tr_multiplier - b.tr_multiplier)
                       / max(1.0, b.tr_multiplier))
    return [Check("B = 0 matches the normalized step", worst_zero <= 1e-10, f"max deviation {worst_zero:.2e}"),
            Check("B = rho I matches the clipped step", worst_id <= 1e-10, f"max deviation {worst_id:.2e}")]


# ---------------------------------------------------------------------------
# finite differences over the oracle zoo
# ---------------------------------------------------------------------------

def small_dataset(seed: int = 0, n_classes: int = 3, n_features: int = 4, base: int = 20):
    return make_imbalanced_mixture(n_features, n_classes, base, [1.0, 0.7, 0.4][:n_classes] + [1.0] * (n_classes - 3),
                                   seed, separation=2.0)


def oracle_zoo(seed: int = 0):
    """``(name, oracle, point, check_hessian)`` for every analytic oracle family."""
    gen = SeededRng(seed).child("zoo").generator
    data = small_dataset(seed)
    A = gen.standard_normal((5, 5))
    zoo = [
        ("quartic", make_quartic_saddle(4, noise=AdditiveNoise(0.1)), gen.standard_normal(4), True),
        ("exp", make_exp_scalar(3), gen.uniform(-1, 1, 3), True),
        ("quadratic", make_quadratic(A + A.T, gen.standard_normal(5)), gen.standard_normal(5), True),
    ]
    log = logistic_oracle(data)
    zoo.append(("logistic", log, 0.3 * gen.standard_normal(log.dim), True))
    mlp = mlp_oracle(data, 5)
    zoo.append(("mlp", mlp, mlp.init_params(seed), False))
    for kind, alpha in (("smoothed_chi2", None), ("kl", None), ("smoothed_cvar", 0.25)):
        obj = DroDualObjective(log, Conjugate(kind, alpha), 0.7)
        z = np.append(0.3 * gen.standard_normal(log.dim), 0.8)
        zoo.append((f"dro-{kind}", obj, z, True))
    return zoo


def suite_fd(seed: int = 0):
    out = []
    for name, oracle, x, second in oracle_zoo(seed):
        rep = fd_validate(oracle, x, "gradient", 1e-5)
        out.append(Check(f"{name} gradient", rep.passed, str(rep)))
        if second:
            rep = fd_validate(oracle, x, "hessian", 1e-3)
            out.append(Check(f"{name} Hessian", rep.passed, str(rep)))
    return out


# ---------------------------------------------------------------------------
# concentration
# ---------------------------------------------------------------------------

def suite_concentration(seed: int = 0, trials: int = 1000, sigma: float = 1.0, kind: str = "rank_one"):
    rng = SeededRng(seed).child("concentration")
    out = []
    for n in (2, 10, 50):
        for m in (10, 100, 1000):
            r = hessian_concentration_trial(n, sigma, m, trials, rng.child(n, m), kind)
            out.append(Check(f"n={n} m={m}", r.within_bound,
                             f"empirical {r.mean_sq_deviation:.3e} vs bound {r.bound:.3e}"))
    return out


# ---------------------------------------------------------------------------
# DRO derivatives and the Psi transfer
# ---------------------------------------------------------------------------

DRO_KINDS = (("smoothed_cvar", 0.25), ("smoothed_cvar", 0.5), ("smoothed_chi2", None))


def dro_points(obj: DroDualObjective, gen: np.random.Generator):
    x = 0.5 * gen.standard_normal(obj.base.dim)
    loss = obj.base.values(x, obj.all_samples())
    eta = float(np.quantile(loss, gen.uniform(0.2, 0.8)))
    return np.append(x, eta)


def suite_dro(seed: int = 0, points: int = 50, psi_points: int = 20, penalty: float = 0.5):
    rng = SeededRng(seed).child("dro")
    base = logistic_oracle(small_dataset(seed))
    out = []
    for kind, alpha in DRO_KINDS:
        obj = DroDualObjective(base, Conjugate(kind, alpha), penalty)
        wg = wh = 0.0
        for k in range(points):
            z = dro_points(obj, rng.child(kind, alpha or 0, k).generator)
            wg = max(wg, fd_validate(obj, z, "gradient", 1e-5).max_rel_error)
            wh = max(wh, fd_validate(obj, z, "hessian", 1e-3).max_rel_error)
        label = kind if alpha is None else f"{kind}({alpha})"
        out.append(Check(f"{label} gradient vs FD", wg <= 1e-5, f"{points} points, worst rel {wg:.2e}"))
        out.append(Check(f"{label} Hessian blocks vs FD", wh <= 1e-3, f"{points} points, worst rel {wh:.2e}"))

    obj = DroDualObjective(base, Conjugate("smoothed_chi2"), penalty)
    batch = obj.all_samples()
    wg, wl = 0.0, -math.inf
    for k in range(psi_points):
        x = 0.5 * rng.child("psi", k).generator.standard_normal(base.dim)
        st = psi_stationarity(obj, x, batch)
        h = np.cbrt(np.finfo(float).eps) * (1 + np.abs(x))
        fd = np.empty_like(x)
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = h[i]
            fd[i] = (psi_stationarity(obj, x + e, batch).psi_value - psi_stationarity(obj, x - e, batch).psi_value) \
                / (2 * h[i])
        wg = max(wg, float(np.linalg.norm(st.psi_grad - fd) / max(np.linalg.norm(fd), 1e-12)))
        lmin_psi = float(np.linalg.eigvalsh(st.psi_hessian)[0])
        lmin_a1 = float(np.linalg.eigvalsh(st.blocks.A1)[0])
        wl = max(wl, lmin_a1 - lmin_psi)
    out.append(Check("grad Psi via eta* vs FD of Psi", wg <= 1e-4, f"{psi_points} points, worst rel {wg:.2e}"))
    out.append(Check("lambda_min(hess Psi) >= lambda_min(A1) - 1e-8", wl <= 1e-8,
                     f"largest drop {wl:.2e}"))
    return out


SUITES = {
    "subproblem": suite_subproblem,
    "corollaries": suite_corollaries,
    "fd": suite_fd,
    "concentration": suite_concentration,
    "dro": suite_dro,
}


def resolve_selector(selector) -> list:
    if selector is None:
        raise InvalidArgument("empty suite selector")
    names = [s.strip() for s in str(selector).split(",") if s.strip()]
    if not names:
        raise InvalidArgument("empty suite selector")
    if names == ["all"]:
        return list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise InvalidArgument(f"unknown suite(s) {', '.join(unknown)}; choose from {', '.join(SUITES)} or all")
    return names


def run_validation_suite(selector="all", echo=print) -> int:
    """Run the selected suites, print a pass/fail table and return 0 (all passed) or 3."""
    names = resolve_selector(selector)
    t0 = time.perf_counter()
    failed = 0
    for name in names:
        for c in SUITES[name]():
            failed += not c.passed
            echo(f"{'PASS' if c.passed else 'FAIL'}  {name:<13} {c.name:<48} {c.detail}")
    elapsed = time.perf_counter() - t0
    if elapsed > SOFT_BUDGET_S:
        warnings.warn(f"validation took {elapsed:.0f} s, above the {SOFT_BUDGET_S:.0f} s budget")
    echo(f"{failed} failed check(s), {elapsed:.1f} s")
    return 0 if failed == 0 else 3

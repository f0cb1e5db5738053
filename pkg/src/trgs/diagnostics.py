"""Stationarity certificates, finite-difference checks, Hessian concentration trials and fairness metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .core import SeededRng, StochasticOracle
from .errors import InvalidArgument, UnsupportedOperation
from .problems import ImbalancedDataset, ModelParams

MAX_DENSE_EIG = 500
_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class StationarityCertificate:
    grad_norm: float
    lambda_min: Optional[float]
    epsilon: float
    c1: float = 1.0
    c2: float = 1.0

    @property
    def is_fosp(self) -> bool:
        return self.grad_norm <= self.c1 * self.epsilon

    @property
    def is_sosp(self) -> bool:
        return self.is_fosp and self.lambda_min is not None and self.lambda_min >= -self.c2 * math.sqrt(self.epsilon)

    @property
    def verdict(self) -> str:
        if self.is_sosp:
            return "SOSP"
        return "FOSP" if self.is_fosp else "neither"


def certify(oracle: StochasticOracle, x, epsilon: float, c1: float = 1.0, c2: float = 1.0,
            second_order: bool = True) -> StationarityCertificate:
    """Full-batch gradient norm and (if available) smallest Hessian eigenvalue at ``x``."""
    if not epsilon > 0 or not c1 > 0 or not c2 > 0:
        raise InvalidArgument("epsilon, c1 and c2 must be positive")
    if not oracle.exposes_full:
        raise UnsupportedOperation("certificates need full-batch quantities")
    x = np.asarray(x, float)
    gn = float(np.linalg.norm(oracle.full_gradient(x)))
    lmin = None
    if second_order and oracle.has_hessian:
        if x.size > MAX_DENSE_EIG:
            raise UnsupportedOperation(f"dense eigensolve refused for n={x.size} > {MAX_DENSE_EIG}")
        H = oracle.full_hessian(x)
        lmin = float(np.linalg.eigvalsh(0.5 * (H + H.T))[0])
    return StationarityCertificate(gn, lmin, float(epsilon), float(c1), float(c2))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FdReport:
    order: str
    max_rel_error: float
    worst_component: tuple
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self):
        state = "pass" if self.passed else f"FAIL at component {self.worst_component}"
        return f"fd {self.order}: max rel error {self.max_rel_error:.3e} (tol {self.tol:g}) {state}"


def _rel_errors(a, f):
    scale = float(np.max(np.abs(f))) if f.size else 0.0
    den = np.maximum(np.abs(f), max(1e-3 * scale, 1e-8))
    return np.abs(a - f) / den


def fd_validate(oracle: StochasticOracle, x, order: str = "gradient", tol: float = 1e-5, batch=None) -> FdReport:
    """Compare analytic derivatives with central differences.

    Uses the full objective when the oracle exposes it, otherwise the fixed
    ``batch``. The gradient is checked against differences of values, the
    Hessian against differences of gradients.
    """
    x = np.asarray(x, float)
    n = x.size
    if batch is None and not oracle.exposes_full:
        raise InvalidArgument("pass a fixed batch for oracles without full-batch access")
    if batch is None:
        val, grad = oracle.full_value, oracle.full_gradient
        hess = oracle.full_hessian if oracle.has_hessian else None
    else:
        val = lambda z: float(np.mean(oracle.values(z, batch)))
        grad = lambda z: np.mean(oracle.grads(z, batch), axis=0)
        hess = (lambda z: oracle.hessian_mean(z, batch)) if oracle.has_hessian else None
    h = np.cbrt(_EPS) * (1.0 + np.abs(x))
    if order == "gradient":
        a = np.asarray(grad(x), float)
        f = np.empty(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = h[i]
            f[i] = (val(x + e) - val(x - e)) / (2 * h[i])
    elif order == "hessian":
        if hess is None:
            raise UnsupportedOperation("oracle offers no Hessians")
        a = np.asarray(hess(x), float)
        f = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = h[i]
            f[:, i] = (grad(x + e) - grad(x - e)) / (2 * h[i])
        f = 0.5 * (f + f.T)
    else:
        raise InvalidArgument(f"order must be gradient or hessian, got {order!r}")
    rel = _rel_errors(a, f)
    k = int(np.argmax(rel))
    comp = tuple(int(i) for i in np.unravel_index(k, rel.shape))
    return FdReport(order, float(rel.flat[k]), comp, float(tol))


# ---------------------------------------------------------------------------
# matrix concentration
# ---------------------------------------------------------------------------

def concentration_bound(n: int, sigma: float, m: int) -> float:
    return 22.0 * sigma**2 * math.log(n) / m


def _rank_one_mean(gen, n, sigma, m):
    U = gen.standard_normal((m, n))
    U /= np.linalg.norm(U, axis=1)[:, None]
    s = gen.choice([-1.0, 1.0], size=m)
    return (sigma / m) * (U.T * s) @ U


def _goe_mean(gen, n, sigma, m):
    A = gen.standard_normal((m, n, n))
    A = A + np.swapaxes(A, 1, 2)
    A *= (sigma / np.linalg.norm(A, axis=(1, 2)))[:, None, None]
    return A.mean(axis=0)


@dataclass(frozen=True)
class ConcentrationResult:
    n: int
    sigma: float
    m: int
    trials: int
    mean_sq_deviation: float
    bound: float

    @property
    def within_bound(self) -> bool:
        return self.mean_sq_deviation <= self.bound


def hessian_concentration_trial(n: int, sigma: float, m: int, trials: int, rng: SeededRng,
                                kind: str = "rank_one") -> ConcentrationResult:
    """Monte Carlo estimate of ``E||(1/m) sum A_i - B||^2`` with ``B = 0``.

    ``rank_one``: ``A_i = sigma * s_i u_i u_i^T`` with a random sign and a
    uniform unit vector, so ``||A_i|| = sigma`` exactly. ``goe``: symmetric
    Gaussian matrices scaled to Frobenius norm ``sigma`` (hence spectral norm
    at most ``sigma``). Both are symmetric in distribution, so the mean is 0.
    """
    if n < 2 or m < 1 or trials < 1:
        raise InvalidArgument("need n >= 2, m >= 1, trials >= 1")
    if kind not in ("rank_one", "goe"):
        raise InvalidArgument(f"unknown ensemble {kind!r}")
    draw = _rank_one_mean if kind == "rank_one" else _goe_mean
    dev = np.empty(trials)
    for k in range(trials):
        M = draw(rng.child("trial", k).generator, n, sigma, m)
        dev[k] = np.max(np.abs(np.linalg.eigvalsh(M))) ** 2
    return ConcentrationResult(n, float(sigma), m, trials, float(_kernels.kahan_mean(dev)),
                               concentration_bound(n, sigma, m))


# ---------------------------------------------------------------------------
# brute-force ball minimum (independent check of the subproblem solver)
# ---------------------------------------------------------------------------

COARSE_STEPS = {1: 4001, 2: 705, 3: 79, 4: 25, 5: 13, 6: 9}


def ball_grid_minimum(g, B, delta, keep: int = 4, resolution: Optional[float] = None):
    """Minimum of ``g.d + d.B.d/2`` over ``||d|| <= delta`` by grid search.

    A coarse grid over the bounding box (points outside the ball are pulled
    back radially onto the sphere) is followed by repeated 5-point-per-axis
    refinement around the ``keep`` best points until the cell width is below
    ``resolution`` (default ``1e-3 * min(1, delta)``). Returns ``(d, value)``.
    """
    g = np.asarray(g, float)
    B = np.asarray(B, float)
    n = g.size
    if n not in COARSE_STEPS:
        raise InvalidArgument(f"grid search supports n <= {max(COARSE_STEPS)}")
    if resolution is None:
        resolution = 1e-3 * min(1.0, delta)
    steps = COARSE_STEPS[n]
    pts, vals = _kernels.grid_ball_topk(g, B, delta, np.zeros(n), delta, steps, keep)
    hw = 2.0 * delta / (steps - 1)
    best_d, best_v = pts[0].copy(), float(vals[0])
    seeds = [p.copy() for p, v in zip(pts, vals) if np.isfinite(v)]
    for c in seeds:
        h = hw
        while h > resolution:
            p, v = _kernels.grid_ball_topk(g, B, delta, c, h, 5, 1)
            c = p[0].copy()
            if v[0] < best_v:
                best_v, best_d = float(v[0]), c.copy()
            h *= 0.5
    return best_d, best_v


# ---------------------------------------------------------------------------
# fairness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassAccuracy:
    per_class: np.ndarray
    worst: float
    overall: float

    def __iter__(self):
        return iter((self.per_class, self.worst, self.overall))


def per_class_accuracy(params: ModelParams, data: ImbalancedDataset) -> ClassAccuracy:
    """Accuracy on each class present in ``data``; classes with no samples get NaN and are skipped by ``worst``."""
    K = data.n_classes
    if params.shape[-1 if params.shape[0] == "mlp" else 1] != K:
        raise InvalidArgument("classifier and dataset disagree on the number of classes")
    pred = params.predict(data.features)
    y = data.labels
    counts = np.bincount(y, minlength=K)
    hits = np.bincount(y[pred == y], minlength=K)
    acc = np.full(K, np.nan)
    present = counts > 0
    acc[present] = hits[present] / counts[present]
    worst = float(np.min(acc[present])) if present.any() else float("nan")
    overall = float(hits.sum() / counts.sum()) if counts.sum() else float("nan")
    return ClassAccuracy(acc, worst, overall)

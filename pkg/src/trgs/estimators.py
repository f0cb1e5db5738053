"""Gradient/Hessian estimators, batch sizing and empirical fits of the smoothness and variance constants."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import SeededRng, StochasticOracle, batch_gradient, draw_batch
from .errors import InvalidArgument, UnsupportedOperation

MISFIT_THRESHOLD = 0.25


def robust_ceil(v: float) -> int:
    """Ceiling that ignores floating-point fuzz, so 1/0.01**2 gives 10000 rather than 10001."""
    r = round(v)
    if abs(v - r) <= 1e-9 * max(1.0, abs(v)):
        return int(r)
    return int(math.ceil(v))


# ---------------------------------------------------------------------------
# recursive (SPIDER) gradient estimator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpiderState:
    q: int
    counter: int = 0
    g_prev: Optional[np.ndarray] = None
    x_prev: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.q < 1:
            raise InvalidArgument("restart period q must be >= 1")
        if not 0 <= self.counter < self.q:
            raise InvalidArgument(f"counter {self.counter} outside [0, {self.q})")
        if self.counter > 0 and (self.g_prev is None or self.x_prev is None):
            raise InvalidArgument("a correction step needs the previous gradient estimate and iterate")
        for v in (self.g_prev, self.x_prev):
            if v is not None and not np.all(np.isfinite(v)):
                raise InvalidArgument("non-finite estimator state")
        if self.g_prev is not None and self.x_prev is not None and self.g_prev.shape != self.x_prev.shape:
            raise InvalidArgument("g_prev and x_prev have different shapes")


def spider_gradient(state: SpiderState, oracle: StochasticOracle, x_t, s1: int, s3: int, rng: SeededRng):
    """One estimator update; returns ``(g_t, new_state, samples_used)``.

    On a restart (``counter == 0``) the estimate is a fresh ``s1`` minibatch
    gradient; otherwise the previous estimate is corrected by the difference
    of minibatch gradients at ``x_t`` and ``x_prev`` on one shared ``s3`` batch.
    """
    x_t = np.asarray(x_t, float)
    if state.counter == 0:
        batch = draw_batch(oracle, s1, rng.child("S1"))
        g = batch_gradient(oracle, x_t, batch)
        used = s1
    else:
        if state.x_prev.shape != x_t.shape:
            raise InvalidArgument("iterate dimension changed between estimator calls")
        batch = draw_batch(oracle, s3, rng.child("S3"))
        g = state.g_prev + batch_gradient(oracle, x_t, batch) - batch_gradient(oracle, state.x_prev, batch)
        used = s3
    new = replace(state, counter=(state.counter + 1) % state.q, g_prev=g, x_prev=x_t.copy())
    return g, new, used


def hessian_batch_size(epsilon: float, n: int) -> int:
    """``ceil(22 ln(n) / epsilon)``, floored at 1."""
    if not (0 < epsilon <= 1):
        raise InvalidArgument(f"epsilon must lie in (0, 1], got {epsilon}")
    if n < 2:
        raise InvalidArgument("dimension must be >= 2")
    return max(1, robust_ceil(22.0 * math.log(n) / epsilon))


# ---------------------------------------------------------------------------
# empirical constants
# ---------------------------------------------------------------------------

class ConstantFit(tuple):
    """``(c0, c1)`` fitted constants; ``residual`` is the relative RMS misfit of the linear model."""

    def __new__(cls, c0, c1, residual=0.0):
        obj = super().__new__(cls, (float(c0), float(c1)))
        obj.residual = float(residual)
        return obj

    @property
    def misfit(self) -> bool:
        return self.residual > MISFIT_THRESHOLD

    def __repr__(self):
        return f"ConstantFit({self[0]:.6g}, {self[1]:.6g}, residual={self.residual:.3g})"


def _nonneg_lstsq(s, v):
    """Least squares ``v ~ a + b s`` with ``a, b >= 0`` via clamp-and-refit."""
    s = np.asarray(s, float)
    v = np.asarray(v, float)
    if np.ptp(s) > 0:
        b, a = np.polyfit(s, v, 1)
    else:
        a, b = float(np.mean(v)), 0.0
    if a < 0:
        a = 0.0
        ss = float(s @ s)
        b = float(s @ v) / ss if ss > 0 else 0.0
    if b < 0:
        a, b = float(np.mean(v)), 0.0
    a, b = max(a, 0.0), max(b, 0.0)
    scale = float(np.mean(np.abs(v)))
    res = float(np.sqrt(np.mean((a + b * s - v) ** 2))) / scale if scale > 0 else 0.0
    return a, b, res


def _need_full(oracle):
    if not oracle.exposes_full:
        raise UnsupportedOperation("variance estimates need exact full-batch reference quantities")


def estimate_gradient_variance(oracle: StochasticOracle, probe_points, trials: int, rng: SeededRng) -> ConstantFit:
    """Fit ``E||grad f - grad F||^2 ~ G0^2 + G1^2 ||grad F||^2`` over probe points; returns ``(G0, G1)``."""
    probe_points = [np.asarray(p, float) for p in probe_points]
    if len(probe_points) < 2:
        raise InvalidArgument("need at least two probe points")
    _need_full(oracle)
    s, v = [], []
    for i, x in enumerate(probe_points):
        batch = draw_batch(oracle, trials, rng.child("grad-variance", i))
        gF = oracle.full_gradient(x)
        dev = oracle.grads(x, batch) - gF[None, :]
        s.append(float(gF @ gF))
        v.append(float(np.mean(np.sum(dev * dev, axis=1))))
    a, b, res = _nonneg_lstsq(s, v)
    return ConstantFit(math.sqrt(a), math.sqrt(b), res)


def estimate_hessian_variance(oracle: StochasticOracle, probe_points, trials: int, rng: SeededRng) -> ConstantFit:
    """Spectral-norm analog: ``E||hess f - hess F||^2 ~ K0^2 + K1^2 ||grad F||^2``; returns ``(K0, K1)``."""
    probe_points = [np.asarray(p, float) for p in probe_points]
    if len(probe_points) < 2:
        raise InvalidArgument("need at least two probe points")
    _need_full(oracle)
    if not oracle.has_hessian:
        raise UnsupportedOperation("oracle offers no Hessians")
    s, v = [], []
    for i, x in enumerate(probe_points):
        batch = draw_batch(oracle, trials, rng.child("hess-variance", i))
        gF = oracle.full_gradient(x)
        dev = oracle.hessians(x, batch) - oracle.full_hessian(x)[None]
        s.append(float(gF @ gF))
        v.append(float(np.mean(np.linalg.norm(dev, ord=2, axis=(1, 2)) ** 2)))
    a, b, res = _nonneg_lstsq(s, v)
    return ConstantFit(math.sqrt(a), math.sqrt(b), res)


@dataclass(frozen=True)
class SmoothnessFit:
    L0: float
    L1: float
    M0: Optional[float]
    M1: Optional[float]
    pairs: int
    residual_first: float
    residual_second: Optional[float]

    def __iter__(self):
        return iter((self.L0, self.L1, self.M0, self.M1))


def estimate_smoothness(oracle: StochasticOracle, trajectory, radius: Optional[float] = None) -> SmoothnessFit:
    """Fit ``||grad F(x) - grad F(x')|| / ||x - x'|| ~ L0 + L1 ||grad F(x)||`` (and the Hessian analog).

    Every unordered pair of points closer than ``radius`` contributes in both
    orientations, so the result does not depend on the order of the points.
    The default radius is three times the median nearest-neighbour distance.
    """
    P = np.array([np.asarray(p, float) for p in trajectory])
    if P.ndim != 2 or P.shape[0] < 3:
        raise InvalidArgument("trajectory needs at least 3 points")
    _need_full(oracle)
    P = P[np.lexsort(P.T[::-1])]  # canonical order makes the fit bitwise order-independent
    D = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=2)
    if radius is None:
        Dn = D + np.diag(np.full(len(P), np.inf))
        nn = Dn.min(axis=1)
        nn = nn[nn >= 1e-12]
        if nn.size == 0:
            raise InvalidArgument("all trajectory points coincide")
        radius = 3.0 * float(np.median(nn))
    iu, ju = np.nonzero(np.triu((D >= 1e-12) & (D <= radius), 1))
    if iu.size == 0:
        raise InvalidArgument("no usable pairs within the radius")
    grads = np.array([oracle.full_gradient(p) for p in P])
    gnorm = np.linalg.norm(grads, axis=1)
    second = oracle.has_hessian
    if second:
        hess = np.array([oracle.full_hessian(p) for p in P])
    s1, r1, r2 = [], [], []
    for i, j in zip(iu, ju):
        dist = D[i, j]
        rg = np.linalg.norm(grads[i] - grads[j]) / dist
        rh = np.linalg.norm(hess[i] - hess[j], 2) / dist if second else 0.0
        for a in (i, j):
            s1.append(gnorm[a])
            r1.append(rg)
            r2.append(rh)
    a1, b1, res1 = _nonneg_lstsq(s1, r1)
    if second:
        a2, b2, res2 = _nonneg_lstsq(s1, r2)
        return SmoothnessFit(a1, b1, a2, b2, int(iu.size), res1, res2)
    return SmoothnessFit(a1, b1, None, None, int(iu.size), res1, None)

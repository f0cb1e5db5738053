"""Exact trust-region subproblem solvers.

Every solver returns the global minimizer of ``g'd + d'Bd/2`` over
``||d|| <= delta`` together with its multiplier and the residuals of the
optimality system ``(B + lam I) d + g = 0``, ``lam (delta - ||d||) = 0``,
``B + lam I >= 0``, ``lam >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateGradient, DegenerateSubspace, InvalidArgument, InvariantViolation, NumericFailure

_EPS = np.finfo(float).eps
HARD_CASE_TOL = 1e-10
SUBSPACE_SINE_TOL = 1e-8
MAX_SECULAR_ITERS = 200


@dataclass(frozen=True)
class TrustRegionStep:
    d: np.ndarray
    tr_multiplier: float
    model_decrease: float
    kkt_stationarity: float
    kkt_complementarity: float
    psd_margin: float
    kind: str = "boundary"  # interior | boundary | hard
    iterations: int = 0

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.d))


def _model(g, B, d):
    return float(g @ d + 0.5 * d @ (B @ d))


def _finish(g, B, delta, d, lam, sig_min, kind, iters=0):
    r = (B @ d + lam * d) + g
    return TrustRegionStep(
        d=d,
        tr_multiplier=float(lam),
        model_decrease=_model(g, B, d),
        kkt_stationarity=float(np.linalg.norm(r)),
        kkt_complementarity=float(abs(lam * (delta - np.linalg.norm(d)))),
        psd_margin=float(sig_min + lam),
        kind=kind,
        iterations=iters,
    )


def _check_vec(g, delta):
    g = np.asarray(g, dtype=float)
    if g.ndim != 1:
        raise InvalidArgument("gradient must be a vector")
    if not np.all(np.isfinite(g)):
        raise NumericFailure("non-finite gradient")
    if not np.isfinite(np.linalg.norm(g)):
        raise NumericFailure("gradient norm overflows")
    if not (np.isfinite(delta) and delta > 0):
        raise InvalidArgument(f"radius must be positive and finite, got {delta}")
    return g


def solve_normalized(g, delta) -> TrustRegionStep:
    """``B = 0``: step of length ``delta`` straight down the gradient."""
    g = _check_vec(g, delta)
    gn = float(np.linalg.norm(g))
    if gn == 0.0:
        raise DegenerateGradient("normalized step is undefined at a zero gradient")
    d = -(delta / gn) * g
    lam = gn / delta
    return _finish(g, np.zeros((g.size, g.size)), delta, d, lam, 0.0, "boundary")


def solve_clipped(g, rho, delta) -> TrustRegionStep:
    """``B = rho I``: gradient step of size ``min(delta/||g||, 1/rho)``."""
    g = _check_vec(g, delta)
    if not (np.isfinite(rho) and rho > 0):
        raise InvalidArgument(f"rho must be positive, got {rho}")
    gn = float(np.linalg.norm(g))
    if gn == 0.0:
        return _finish(g, rho * np.eye(g.size), delta, np.zeros_like(g), 0.0, rho, "interior")
    if gn / delta > rho:
        d = -(delta / gn) * g
        lam, kind = gn / delta - rho, "boundary"
    else:
        d = -g / rho
        lam, kind = 0.0, "interior"
    return _finish(g, rho * np.eye(g.size), delta, d, lam, rho, kind)


def _check_matrix(g, B):
    B = np.asarray(B, dtype=float)
    if B.shape != (g.size, g.size):
        raise InvalidArgument(f"B has shape {B.shape}, expected {(g.size, g.size)}")
    if not np.all(np.isfinite(B)):
        raise NumericFailure("non-finite model Hessian")
    scale = np.linalg.norm(B, 2) if B.size else 0.0
    if np.max(np.abs(B - B.T), initial=0.0) > 1e-10 * scale:
        raise InvalidArgument("B is not symmetric")
    return 0.5 * (B + B.T)


def solve_general(g, B, delta) -> TrustRegionStep:
    """Global minimizer for any symmetric ``B`` via eigendecomposition and the secular equation."""
    g = _check_vec(g, delta)
    B = _check_matrix(g, B)
    sig, V = np.linalg.eigh(B)
    gam = V.T @ g
    gn = float(np.linalg.norm(g))
    bn = float(np.max(np.abs(sig))) if sig.size else 0.0
    sig_min = float(sig[0])
    # relative to the problem's own scale: (c g, c B) must give the same step as (g, B)
    zero_tol = 64 * _EPS * max(bn, gn / delta)

    def d_of(lam, mask=None):
        den = sig + lam
        coef = np.zeros_like(gam)
        keep = np.ones(sig.size, bool) if mask is None else mask
        coef[keep] = -gam[keep] / den[keep]
        return V @ coef

    # interior Newton step (minimum-norm when B is singular)
    if sig_min >= -zero_tol:
        null = sig <= zero_tol
        if np.linalg.norm(gam[null]) <= HARD_CASE_TOL * gn or gn == 0.0:
            coef = np.zeros_like(gam)
            coef[~null] = -gam[~null] / sig[~null]
            d = V @ coef
            if np.linalg.norm(d) <= delta:
                return _finish(g, B, delta, d, 0.0, sig_min, "interior")

    lo = max(0.0, -sig_min)
    J = sig <= sig_min + zero_tol
    v_min = V[:, 0]

    # hard case: g has (numerically) no weight on the bottom eigenspace
    if np.linalg.norm(gam[J]) <= HARD_CASE_TOL * gn or not np.isfinite(delta / gn):
        d_rest = d_of(lo, ~J)
        nr = float(np.linalg.norm(d_rest))
        if nr <= delta:
            tau = np.sqrt(max(delta**2 - nr**2, 0.0))
            d = _best_of(g, B, d_rest + tau * v_min, d_rest - tau * v_min)
            d = _onto_sphere(d, delta)
            return _finish(g, B, delta, d, lo, sig_min, "hard")

    hi = gn / delta + bn
    if hi <= lo:
        hi = lo + max(1.0, lo) * 1e-8
    # solve in units of ||g|| so that tiny or huge gradients neither underflow nor overflow
    unit = gam / gn
    lam, iters, ok = _kernels.secular_newton(sig, unit * unit, delta / gn, lo, hi, hi,
                                             rtol=1e-14, maxit=MAX_SECULAR_ITERS)
    if not ok:
        raise NumericFailure(f"secular equation did not converge in {MAX_SECULAR_ITERS} iterations")
    # components without gradient weight contribute nothing, even where sig + lam vanishes
    coef = -np.divide(unit, sig + lam, out=np.zeros_like(unit), where=unit != 0) * gn
    nd = float(np.linalg.norm(coef))
    d = V @ coef
    if abs(nd - delta) > 1e-12 * delta:
        # Near the hard case the secular equation is so steep that the
        # representable lam closest to the root misses ||d|| = delta. Either
        # rescale d or fix its v_min coordinate, whichever keeps the
        # stationarity residual smaller.
        cands = [d * (delta / nd)]
        rest = float(coef[1:] @ coef[1:])
        if rest <= delta**2:
            c2 = coef.copy()
            c2[0] = np.copysign(np.sqrt(delta**2 - rest), coef[0] if coef[0] != 0 else 1.0)
            cands.append(V @ c2)
        d = min(cands, key=lambda v: np.linalg.norm(B @ v + lam * v + g))
    d = _onto_sphere(d, delta)
    return _finish(g, B, delta, d, lam, sig_min, "boundary", iters)


def _best_of(g, B, a, b):
    return a if _model(g, B, a) <= _model(g, B, b) else b


def _onto_sphere(d, delta):
    n = np.linalg.norm(d)
    return d * (delta / n) if n > delta else d


# ---------------------------------------------------------------------------
# 2-D metric-constrained model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Subproblem2D:
    """``min c'a + a'Qa/2`` subject to ``sqrt(a'Ga) <= delta``."""

    Q: np.ndarray
    c: np.ndarray
    G: np.ndarray
    delta: float

    def __post_init__(self):
        Q = np.asarray(self.Q, float)
        G = np.asarray(self.G, float)
        c = np.asarray(self.c, float)
        if Q.shape != (2, 2) or G.shape != (2, 2) or c.shape != (2,):
            raise InvalidArgument("Subproblem2D expects 2x2 Q, G and a 2-vector c")
        if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(G)) and np.all(np.isfinite(c))):
            raise NumericFailure("non-finite 2-D model data")
        if abs(Q[0, 1] - Q[1, 0]) > 1e-10 * max(np.abs(Q).max(), 1e-300):
            raise InvalidArgument("Q must be symmetric")
        if abs(G[0, 1] - G[1, 0]) > 1e-10 * max(np.abs(G).max(), 1e-300):
            raise InvalidArgument("G must be symmetric")
        if not (self.delta > 0 and np.isfinite(self.delta)):
            raise InvalidArgument("delta must be positive")
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "G", 0.5 * (G + G.T))
        object.__setattr__(self, "c", c)

    @property
    def sine(self) -> float:
        """Sine of the angle between the two directions that generate ``G``."""
        G = self.G
        if G[0, 0] <= 0 or G[1, 1] <= 0:
            return 0.0
        s2 = (G[0, 0] * G[1, 1] - G[0, 1] ** 2) / (G[0, 0] * G[1, 1])
        return float(np.sqrt(max(s2, 0.0)))

    def value(self, alpha) -> float:
        alpha = np.asarray(alpha, float)
        return float(self.c @ alpha + 0.5 * alpha @ self.Q @ alpha)


def _metric_factor(G):
    """Upper-triangular R with G = R'R, computed after diagonal equilibration."""
    s = 1.0 / np.sqrt(np.diag(G))
    try:
        L = np.linalg.cholesky(G * np.outer(s, s))
    except np.linalg.LinAlgError as exc:
        raise DegenerateSubspace("metric is not positive definite") from exc
    return L.T / s[None, :]


def solve_2d_metric(p: Subproblem2D):
    """Returns ``(alpha, tr_multiplier)`` for the metric-constrained 2-D model."""
    if p.sine <= SUBSPACE_SINE_TOL:
        raise DegenerateSubspace(f"subspace metric is singular (sine {p.sine:.3g})")
    R = _metric_factor(p.G)
    Rinv = np.linalg.inv(R)
    gw = Rinv.T @ p.c
    Bw = Rinv.T @ p.Q @ Rinv
    step = solve_general(gw, 0.5 * (Bw + Bw.T), p.delta)
    alpha = Rinv @ step.d
    return alpha, step.tr_multiplier


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KktReport:
    stationarity: float
    complementarity: float
    psd_margin: float
    radius_excess: float
    decrease: float
    decrease_bound: float
    tolerance: float

    @property
    def ok(self) -> bool:
        t = self.tolerance
        return (self.stationarity <= t and self.complementarity <= t and self.psd_margin >= -t
                and self.radius_excess <= 1e-10 and self.decrease <= self.decrease_bound)


def kkt_and_decrease(g, B, delta, step: TrustRegionStep, strict: bool = True, m0: float = 0.0) -> KktReport:
    """Recompute optimality residuals and the guaranteed model decrease ``m(d) - m(0) <= -lam ||d||^2 / 2``.

    ``m0`` is the model value at ``d = 0`` (the objective value when the
    model is anchored at F). The decrease slack is ``1e-8`` times
    ``1 + |m0|`` plus the magnitude of the model terms, so that the check
    stays meaningful when the model values are far from unit scale.
    """
    g = np.asarray(g, float)
    B = np.asarray(B, float)
    d = np.asarray(step.d, float)
    lam = step.tr_multiplier
    sig = np.linalg.eigvalsh(0.5 * (B + B.T))
    bn = float(np.max(np.abs(sig)))
    tol = 1e-8 * (1 + np.linalg.norm(g) + bn)
    nd = float(np.linalg.norm(d))
    dec = _model(g, B, d)
    rep = KktReport(
        stationarity=float(np.linalg.norm(B @ d + lam * d + g)),
        complementarity=float(abs(lam * (delta - nd))),
        psd_margin=float(sig[0] + lam),
        radius_excess=max(nd / delta - 1.0, 0.0),
        decrease=dec,
        decrease_bound=-0.5 * lam * nd**2 + 1e-8 * (1 + abs(m0) + abs(g @ d) + 0.5 * abs(d @ B @ d)),
        tolerance=float(tol),
    )
    if lam < 0:
        raise InvariantViolation(f"negative multiplier {lam}")
    if strict and not rep.ok:
        raise InvariantViolation(f"trust-region step fails optimality checks: {rep}")
    return rep

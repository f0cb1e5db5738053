"""Penalized distributionally robust objective ``L(x, eta) = penalty * E psi*((l - eta)/penalty) + eta``.

The trust-region multiplier and the DRO penalty weight are different
quantities; here the latter is always called ``penalty``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .core import Batch, StochasticOracle
from .errors import InvalidArgument, NumericFailure, UnsupportedOperation

KINDS = ("chi2", "smoothed_chi2", "kl", "cvar", "smoothed_cvar")
SMOOTH_KINDS = ("smoothed_chi2", "kl", "smoothed_cvar")
_STABLE_SWITCH = 30.0


@dataclass(frozen=True)
class Conjugate:
    kind: str
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown conjugate kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("cvar", "smoothed_cvar"):
            if self.alpha is None or not (0 < self.alpha < 1):
                raise InvalidArgument("CVaR conjugates need alpha in (0, 1)")
        elif self.alpha is not None:
            raise InvalidArgument(f"alpha does not apply to {self.kind}")

    @property
    def twice_differentiable(self) -> bool:
        return self.kind in SMOOTH_KINDS


class ConjugateEval(tuple):
    """``(value, first, second)``; ``second`` is NaN where ``second_defined`` is False."""

    def __new__(cls, value, first, second, second_defined):
        obj = super().__new__(cls, (value, first, second))
        obj.second_defined = second_defined
        return obj

    value = property(lambda self: self[0])
    first = property(lambda self: self[1])
    second = property(lambda self: self[2])


def conjugate_eval(conj: Conjugate, t) -> ConjugateEval:
    """Value and derivatives of the conjugate at ``t`` (scalar or array)."""
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if not np.all(np.isfinite(t)):
        raise NumericFailure("non-finite conjugate argument")
    defined = np.ones(t.shape, bool)
    k = conj.kind
    with np.errstate(over="ignore"):
        if k == "chi2":
            tp = np.maximum(t + 2.0, 0.0)
            val = -1.0 + 0.25 * tp**2
            d1 = 0.5 * tp
            d2 = np.where(t > -2.0, 0.5, 0.0)
            defined = t != -2.0
        elif k == "smoothed_chi2":
            pos = t >= 0
            e = np.exp(0.5 * np.minimum(t, 0.0))
            val = np.where(pos, -1.0 + 0.25 * (t + 2.0) ** 2, 2.0 * (e - 1.0))
            d1 = np.where(pos, 0.5 * (t + 2.0), e)
            d2 = np.where(pos, 0.5, 0.5 * e)
        elif k == "kl":
            e = np.exp(t)
            val, d1, d2 = e - 1.0, e, e
        elif k == "cvar":
            a = conj.alpha
            val = np.maximum(t, 0.0) / a
            d1 = np.where(t > 0, 1.0 / a, 0.0)
            d2 = np.zeros_like(t)
            defined = t != 0.0
        else:  # smoothed_cvar
            a = conj.alpha
            big = t > _STABLE_SWITCH
            tl = np.minimum(t, _STABLE_SWITCH)
            th = np.maximum(t, _STABLE_SWITCH)
            low = np.log1p(a * np.expm1(tl)) / a
            high = (th + np.log(a + (1.0 - a) * np.exp(-th))) / a
            val = np.where(big, high, low)
            # first = 1 / (a + (1-a) e^{-t}) written without overflow on either side
            neg = t <= 0
            p = np.exp(np.minimum(t, 0.0))
            q = np.exp(-np.maximum(t, 0.0))
            d1 = np.where(neg, p / (1.0 - a + a * p), 1.0 / (a + (1.0 - a) * q))
            d2 = np.where(neg, (1.0 - a) * p / (1.0 - a + a * p) ** 2,
                          (1.0 - a) * q / (a + (1.0 - a) * q) ** 2)
    d2 = np.where(defined, d2, np.nan)
    if scalar:
        return ConjugateEval(float(val[0]), float(d1[0]), float(d2[0]), bool(defined[0]))
    return ConjugateEval(val, d1, d2, defined)


def _loss_and_grads(base, x, batch):
    if hasattr(base, "value_and_grads"):
        return base.value_and_grads(x, batch)
    return base.values(x, batch), base.grads(x, batch)


class DroDualObjective(StochasticOracle):
    """Joint oracle over ``z = (x, eta)`` of dimension ``n + 1``."""

    def __init__(self, base_loss: StochasticOracle, conjugate: Conjugate, penalty: float):
        if not (np.isfinite(penalty) and penalty > 0):
            raise InvalidArgument("DRO penalty must be positive")
        self.base = base_loss
        self.conjugate = conjugate
        self.penalty = float(penalty)
        self.dim = base_loss.dim + 1
        self.sample_count = base_loss.sample_count
        self.has_hessian = base_loss.has_hessian and conjugate.twice_differentiable
        self.has_analytic_hvp = self.has_hessian
        self.has_full = getattr(base_loss, "has_full", False)
        self.annotations = {}

    # delegate sampling to the base loss
    def sample(self, gen, m):
        return self.base.sample(gen, m)

    def all_samples(self):
        return self.base.all_samples()

    def split(self, z):
        z = np.asarray(z, float)
        if z.shape != (self.dim,):
            raise InvalidArgument(f"expected a joint point of dimension {self.dim}, got {z.shape}")
        return z[:-1], float(z[-1])

    def _terms(self, x, eta, batch, need_second=False, need_grad=True):
        if need_grad:
            loss, G = _loss_and_grads(self.base, x, batch)
        else:
            loss, G = np.asarray(self.base.values(x, batch), float), None
        u = (loss - eta) / self.penalty
        if not np.all(np.isfinite(u)):
            bad = int(np.argmax(~np.isfinite(u)))
            raise NumericFailure(f"non-finite conjugate argument for sample {batch.data[bad]!r}")
        ce = conjugate_eval(self.conjugate, u)
        if not np.all(np.isfinite(ce.value)) or not np.all(np.isfinite(ce.first)):
            bad = int(np.argmax(~(np.isfinite(ce.value) & np.isfinite(ce.first))))
            raise NumericFailure(f"conjugate overflow at argument {u[bad]:.6g} for sample {batch.data[bad]!r}")
        if need_second and not np.all(ce.second_defined):
            raise UnsupportedOperation(f"second derivative of {self.conjugate.kind} is undefined on this batch")
        return loss, G, u, ce

    # per-sample joint quantities ------------------------------------------------
    def values(self, z, batch):
        x, eta = self.split(z)
        _, _, _, ce = self._terms(x, eta, batch, need_grad=False)
        return self.penalty * ce.value + eta

    def grads(self, z, batch):
        x, eta = self.split(z)
        _, G, _, ce = self._terms(x, eta, batch)
        return np.column_stack([ce.first[:, None] * G, 1.0 - ce.first])

    def hessians(self, z, batch):
        if not self.has_hessian:
            raise UnsupportedOperation("joint Hessian needs base Hessians and a twice-differentiable conjugate")
        x, eta = self.split(z)
        _, G, _, ce = self._terms(x, eta, batch, need_second=True)
        w = ce.second / self.penalty
        Hb = self.base.hessians(x, batch)
        m, n = G.shape
        H = np.empty((m, n + 1, n + 1))
        H[:, :n, :n] = w[:, None, None] * np.einsum("mi,mj->mij", G, G) + ce.first[:, None, None] * Hb
        H[:, :n, n] = -w[:, None] * G
        H[:, n, :n] = H[:, :n, n]
        H[:, n, n] = w
        return H

    def hessian_mean(self, z, batch, weights=None):
        if weights is not None:
            return super().hessian_mean(z, batch, weights)
        return dro_hessian(self, *self.split(z), batch)

    def full_value(self, z):
        return float(_kernels.kahan_mean(self.values(z, self.all_samples())))

    def full_value_and_gradient(self, z):
        value, grad = dro_value_grad(self, *self.split(z), self.all_samples())
        return value, grad


def dro_value_grad(obj: DroDualObjective, x, eta: float, batch: Batch):
    """Batch value and joint gradient ``(grad_x, grad_eta)`` as one ``n + 1`` vector."""
    x = np.asarray(x, float)
    _, G, _, ce = obj._terms(x, float(eta), batch)
    value = float(_kernels.kahan_mean(obj.penalty * ce.value + eta))
    gx = _kernels.kahan_mean(ce.first[:, None] * G)
    geta = float(_kernels.kahan_mean(1.0 - ce.first))
    return value, np.append(gx, geta)


@dataclass(frozen=True)
class HessianBlocks:
    A1: np.ndarray
    A2: np.ndarray
    A4: float

    def assemble(self):
        n = self.A2.size
        H = np.empty((n + 1, n + 1))
        H[:n, :n] = self.A1
        H[:n, n] = self.A2
        H[n, :n] = self.A2
        H[n, n] = self.A4
        return H


def dro_blocks(obj: DroDualObjective, x, eta: float, batch: Batch) -> HessianBlocks:
    if not obj.has_hessian:
        raise UnsupportedOperation("joint Hessian needs base Hessians and a twice-differentiable conjugate")
    x = np.asarray(x, float)
    _, G, _, ce = obj._terms(x, float(eta), batch, need_second=True)
    m = G.shape[0]
    w = ce.second / obj.penalty
    A1 = (G.T * w) @ G / m + obj.base.hessian_mean(x, batch, weights=ce.first)
    A1 = 0.5 * (A1 + A1.T)
    A2 = -(w @ G) / m
    A4 = float(np.mean(w))
    return HessianBlocks(A1, A2, A4)


def dro_hessian(obj: DroDualObjective, x, eta: float, batch: Batch) -> np.ndarray:
    """``[[A1, A2], [A2', A4]]`` with ``u = (l - eta)/penalty`` and per-sample conjugate derivatives."""
    return dro_blocks(obj, x, eta, batch).assemble()


def minimize_eta(obj: DroDualObjective, x, batch: Batch, tol: float = 1e-10, max_iter: int = 200):
    """Unique minimizer of ``L(x, .)`` by safeguarded Newton on ``d L / d eta``.

    Every supported smooth conjugate has ``psi*'(0) = 1``, so the root lies
    between the smallest and largest loss on the batch; Newton starts from the
    median loss and falls back to bisection whenever it leaves the bracket.
    """
    if obj.conjugate.kind not in SMOOTH_KINDS:
        raise UnsupportedOperation(f"eta minimization needs a strictly convex conjugate, got {obj.conjugate.kind}")
    x = np.asarray(x, float)
    loss = np.asarray(obj.base.values(x, batch), float)
    lam = obj.penalty

    def dgrad(eta):
        ce = conjugate_eval(obj.conjugate, (loss - eta) / lam)
        return 1.0 - float(np.mean(ce.first)), float(np.mean(ce.second)) / lam

    lo, hi = float(loss.min()), float(loss.max())
    if lo == hi:
        return lo
    g_lo, _ = dgrad(lo)
    g_hi, _ = dgrad(hi)
    width = hi - lo
    while g_lo > 0:  # rounding at the ends can push the root just outside; widen geometrically
        lo -= width
        width *= 2
        g_lo, _ = dgrad(lo)
    width = hi - lo
    while g_hi < 0:
        hi += width
        width *= 2
        g_hi, _ = dgrad(hi)
    eta = float(np.median(loss))
    for _ in range(max_iter):
        g, h = dgrad(eta)
        if abs(g) <= tol:
            return eta
        if g < 0:
            lo = eta
        else:
            hi = eta
        nxt = eta - g / h if h > 0 else 0.5 * (lo + hi)
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        if nxt == eta:
            return eta
        eta = nxt
    raise NumericFailure(f"eta minimization did not reach tolerance {tol} in {max_iter} iterations")


@dataclass(frozen=True)
class PsiStationarity:
    psi_value: float
    psi_grad: np.ndarray
    psi_hessian: Optional[np.ndarray]
    eta: float
    blocks: Optional[HessianBlocks]

    def __iter__(self):
        return iter((self.psi_value, self.psi_grad, self.psi_hessian))


def psi_stationarity(obj: DroDualObjective, x, batch: Batch, tol: float = 1e-12) -> PsiStationarity:
    """Value, gradient and Hessian of ``Psi(x) = min_eta L(x, eta)``.

    The Hessian is the Schur complement ``A1 - A2 A2' / A4`` of the joint
    Hessian at ``(x, eta*)``: differentiating the optimality condition
    ``dL/deta = 0`` gives ``d eta*/dx = -A2 / A4``.
    """
    x = np.asarray(x, float)
    eta = minimize_eta(obj, x, batch, tol)
    value, grad = dro_value_grad(obj, x, eta, batch)
    H, blocks = None, None
    if obj.has_hessian:
        blocks = dro_blocks(obj, x, eta, batch)
        H = blocks.A1 - np.outer(blocks.A2, blocks.A2) / blocks.A4
    return PsiStationarity(value, grad[:-1], H, eta, blocks)

"""Shared domain types: stochastic oracles, seeded streams, batches and batch estimators."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .errors import InvalidArgument, NumericFailure, UnsupportedOperation

_EPS = np.finfo(float).eps


class SeededRng:
    """Counter-based (Philox) generator addressed by ``(seed, stream)``.

    ``child(*keys)`` derives an independent stream, so draws for a given
    ``(run, iteration, purpose)`` never depend on how many draws other
    purposes made before it.
    """

    def __init__(self, seed: int, stream: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys) -> "SeededRng":
        return SeededRng(self.seed, self.stream + tuple(_stream_key(k) for k in keys))

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


def _stream_key(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    return zlib.crc32(str(key).encode())


@dataclass(frozen=True)
class Batch:
    """``data`` holds sample indices (finite-sum) or drawn samples (generative), one row each."""

    data: np.ndarray

    @property
    def size(self) -> int:
        return int(len(self.data))

    def __len__(self):
        return self.size


@dataclass
class Iterate:
    x: np.ndarray
    t: int = 0
    eta: Optional[float] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if not np.all(np.isfinite(self.x)) or (self.eta is not None and not math.isfinite(self.eta)):
            raise NumericFailure(f"non-finite iterate at t={self.t}")


@dataclass(frozen=True)
class SmoothnessProfile:
    """Constants of the generalized smoothness and variance assumptions.

    Second-order constants default to ``None`` (unknown); schedules that need
    them refuse to run without them.
    """

    L0: float
    L1: float = 0.0
    G0: float = 0.0
    G1: float = 0.0
    M0: Optional[float] = None
    M1: Optional[float] = None
    K0: Optional[float] = None
    K1: Optional[float] = None
    delta_radius: float = 1.0
    delta_F: float = 1.0

    def __post_init__(self):
        if not self.L0 > 0:
            raise InvalidArgument("L0 must be positive")
        if self.M0 is not None and not self.M0 > 0:
            raise InvalidArgument("M0 must be positive when given")
        for name in ("L0", "L1", "G0", "G1", "M0", "M1", "K0", "K1", "delta_radius", "delta_F"):
            v = getattr(self, name)
            if v is None:
                continue
            if not math.isfinite(v) or v < 0:
                raise InvalidArgument(f"{name} must be finite and nonnegative, got {v}")
        if not self.delta_radius > 0:
            raise InvalidArgument("delta_radius must be positive")

    @property
    def has_second_order(self) -> bool:
        return self.M0 is not None and self.M1 is not None


class StochasticOracle:
    """Objective ``F(x) = E f(x; xi)`` with per-sample derivatives.

    Subclasses implement ``sample``/``values``/``grads`` and optionally
    ``hessians`` (per-sample) or ``hessian_mean`` (weighted batch mean) and
    ``hvp_mean``. ``sample_count`` is an int for finite sums and ``None``
    for generative oracles; the latter may still expose exact full-batch
    quantities through ``full_*`` when ``F`` is known in closed form.
    """

    dim: int
    sample_count: Optional[int] = None
    has_hessian: bool = False
    has_analytic_hvp: bool = False
    has_full: bool = False

    @property
    def capabilities(self) -> frozenset:
        caps = {"value", "gradient", "hvp"}
        if self.has_hessian:
            caps.add("hessian")
        return frozenset(caps)

    @property
    def is_finite_sum(self) -> bool:
        return self.sample_count is not None

    # --- sampling -----------------------------------------------------------
    def sample(self, gen: np.random.Generator, m: int) -> np.ndarray:
        if self.sample_count is None:
            raise NotImplementedError
        return gen.integers(0, self.sample_count, size=m)

    def all_samples(self) -> Batch:
        if self.sample_count is None:
            raise UnsupportedOperation("generative oracle has no enumerable sample set")
        return Batch(np.arange(self.sample_count))

    # --- per-sample ---------------------------------------------------------
    def values(self, x, batch: Batch) -> np.ndarray:
        raise NotImplementedError

    def grads(self, x, batch: Batch) -> np.ndarray:
        raise NotImplementedError

    def hessians(self, x, batch: Batch) -> np.ndarray:
        raise UnsupportedOperation(f"{type(self).__name__} offers no Hessians")

    def hessian_mean(self, x, batch: Batch, weights=None) -> np.ndarray:
        H = self.hessians(x, batch)
        if weights is not None:
            H = H * np.asarray(weights)[:, None, None]
        return _kernels.kahan_mean(H)

    def hvp_mean(self, x, v, batch: Batch) -> np.ndarray:
        return self.hessian_mean(x, batch) @ v

    # --- full-batch (diagnostic) -----------------------------------------------
    def full_value(self, x) -> float:
        return float(_kernels.kahan_mean(self.values(x, self.all_samples())))

    def full_gradient(self, x) -> np.ndarray:
        return batch_gradient(self, x, self.all_samples())

    def full_hessian(self, x) -> np.ndarray:
        return batch_hessian(self, x, self.all_samples())

    def full_value_and_gradient(self, x):
        """Both full-batch quantities; oracles that share work between them override this."""
        return self.full_value(x), self.full_gradient(x)

    @property
    def exposes_full(self) -> bool:
        return self.is_finite_sum or self.has_full


def draw_batch(oracle: StochasticOracle, m: int, rng: SeededRng) -> Batch:
    """``m`` i.i.d. draws with replacement."""
    if int(m) != m or m < 1:
        raise InvalidArgument(f"batch size must be a positive integer, got {m}")
    return Batch(oracle.sample(rng.generator, int(m)))


def batch_gradient(oracle: StochasticOracle, x, batch: Batch) -> np.ndarray:
    G = oracle.grads(np.asarray(x, dtype=float), batch)
    if not np.all(np.isfinite(G)):
        bad = int(np.argwhere(~np.all(np.isfinite(G), axis=1))[0, 0])
        raise NumericFailure(f"non-finite per-sample gradient for sample {batch.data[bad]!r}")
    return _kernels.kahan_mean(G)


def batch_hessian(oracle: StochasticOracle, x, batch: Batch) -> np.ndarray:
    if not oracle.has_hessian:
        raise UnsupportedOperation(f"{type(oracle).__name__} offers no Hessians")
    H = oracle.hessian_mean(np.asarray(x, dtype=float), batch)
    if not np.all(np.isfinite(H)):
        raise NumericFailure("non-finite batch Hessian")
    return 0.5 * (H + H.T)


def fd_step(x, v) -> float:
    return _EPS ** (1.0 / 3.0) * (1.0 + np.linalg.norm(x)) / max(np.linalg.norm(v), 1.0)


def hvp(oracle: StochasticOracle, x, v, batch: Batch) -> np.ndarray:
    """Hessian-vector product on a batch; central differences of the batch gradient when no analytic path exists."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NumericFailure("non-finite direction")
    if not np.any(v):
        return np.zeros_like(x)
    if oracle.has_analytic_hvp or oracle.has_hessian:
        out = oracle.hvp_mean(x, v, batch)
    else:
        h = fd_step(x, v)
        out = (batch_gradient(oracle, x + h * v, batch) - batch_gradient(oracle, x - h * v, batch)) / (2 * h)
    if not np.all(np.isfinite(out)):
        raise NumericFailure("non-finite Hessian-vector product")
    return out


@dataclass
class SampleCounter:
    """Algorithmic oracle calls, kept apart from diagnostic evaluations."""

    grad: int = 0
    hess: int = 0
    history: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.grad + self.hess

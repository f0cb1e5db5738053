"""Test oracles with analytic derivatives and a synthetic imbalanced classification generator."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Batch, StochasticOracle
from .errors import InvalidArgument, NumericFailure

# Per-class keep fractions of the reference imbalanced image benchmarks.
REFERENCE_RATIOS = (0.738, 0.986, 0.446, 0.254, 0.768, 0.593, 0.918, 0.731, 0.929, 0.284)

MAX_MLP_PARAMS = 10_000


# ---------------------------------------------------------------------------
# noise models for generative oracles
# ---------------------------------------------------------------------------

class NoiseModel:
    """Zero-mean perturbation ``f(x; xi) = F(x) + noise(x; xi)`` (or a scaling of F)."""

    def draw(self, gen, m, n):
        return np.zeros((m, 1))

    def apply(self, x, xi, F, g, H):
        """Per-sample (values, grads, hessians or None) given exact F, g, H at x."""
        m = xi.shape[0]
        vals = np.full(m, F)
        grads = np.broadcast_to(g, (m, g.size)).copy()
        hess = None if H is None else np.broadcast_to(H, (m,) + H.shape)
        return vals, grads, hess


class NoNoise(NoiseModel):
    pass


class AdditiveNoise(NoiseModel):
    """``f = F + xi'x`` with ``xi ~ N(0, sigma^2 I)``: gradient noise independent of x."""

    def __init__(self, sigma):
        self.sigma = float(sigma)

    def draw(self, gen, m, n):
        return self.sigma * gen.standard_normal((m, n))

    def apply(self, x, xi, F, g, H):
        vals = F + xi @ x
        grads = g[None, :] + xi
        hess = None if H is None else np.broadcast_to(H, (xi.shape[0],) + H.shape)
        return vals, grads, hess


class MultiplicativeNoise(NoiseModel):
    """``f = (1 + xi) F`` with scalar ``xi ~ N(0, std^2)``."""

    def __init__(self, std):
        self.std = float(std)

    def draw(self, gen, m, n):
        return self.std * gen.standard_normal((m, 1))

    def apply(self, x, xi, F, g, H):
        s = 1.0 + xi[:, 0]
        hess = None if H is None else s[:, None, None] * H[None]
        return s * F, s[:, None] * g[None, :], hess


class IdentityCurvatureNoise(NoiseModel):
    """``f = F + xi ||x||^2 / 2`` so the per-sample Hessian is ``Hess F + xi I``."""

    def __init__(self, std):
        self.std = float(std)

    def draw(self, gen, m, n):
        return self.std * gen.standard_normal((m, 1))

    def apply(self, x, xi, F, g, H):
        s = xi[:, 0]
        vals = F + 0.5 * s * (x @ x)
        grads = g[None, :] + s[:, None] * x[None, :]
        hess = None if H is None else H[None] + s[:, None, None] * np.eye(x.size)[None]
        return vals, grads, hess


class RankOneNoise(NoiseModel):
    """``f = F + scale * s (u'x)^2 / 2`` with a random sign s and u uniform on the sphere.

    Each per-sample Hessian perturbation has spectral norm exactly ``scale``.
    """

    def __init__(self, scale):
        self.scale = float(scale)

    def draw(self, gen, m, n):
        s = gen.choice(np.array([-1.0, 1.0]), size=m)
        u = gen.standard_normal((m, n))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return np.column_stack([s, u])

    def apply(self, x, xi, F, g, H):
        s, u = xi[:, 0], xi[:, 1:]
        ux = u @ x
        c = self.scale * s
        vals = F + 0.5 * c * ux**2
        grads = g[None, :] + (c * ux)[:, None] * u
        hess = None if H is None else H[None] + c[:, None, None] * np.einsum("mi,mj->mij", u, u)
        return vals, grads, hess


class SyntheticOracle(StochasticOracle):
    """Generative oracle: analytic ``F`` plus a noise model.

    Full-batch quantities are exact (the noise has mean zero), so diagnostics
    are available even though the sample space is infinite.
    """

    sample_count = None
    has_full = True

    def __init__(self, dim, fun: Callable, grad: Callable, hess: Optional[Callable],
                 noise: NoiseModel = None, name="synthetic", guard: Optional[Callable] = None):
        self.dim = int(dim)
        self._f, self._g, self._h = fun, grad, hess
        self.noise = noise if noise is not None else NoNoise()
        self.has_hessian = hess is not None
        self.name = name
        self._guard = guard

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise InvalidArgument(f"expected a point of dimension {self.dim}, got shape {x.shape}")
        if self._guard is not None:
            self._guard(x)
        return x

    def sample(self, gen, m):
        return self.noise.draw(gen, m, self.dim)

    def _eval(self, x, batch, need_h):
        x = self._check(x)
        H = self._h(x) if (need_h and self._h is not None) else None
        return self.noise.apply(x, np.asarray(batch.data, float), self._f(x), self._g(x), H)

    def values(self, x, batch):
        return self._eval(x, batch, False)[0]

    def grads(self, x, batch):
        return self._eval(x, batch, False)[1]

    def hessians(self, x, batch):
        if not self.has_hessian:
            return super().hessians(x, batch)
        return np.asarray(self._eval(x, batch, True)[2])

    def full_value(self, x):
        return float(self._f(self._check(x)))

    def full_gradient(self, x):
        return np.asarray(self._g(self._check(x)), float)

    def full_hessian(self, x):
        if not self.has_hessian:
            return super().hessians(x, None)
        return np.asarray(self._h(self._check(x)), float)

    def __repr__(self):
        return f"SyntheticOracle({self.name}, dim={self.dim}, noise={type(self.noise).__name__})"


def make_quartic_saddle(n: int, noise_sigma: float = 0.0, noise: NoiseModel = None) -> SyntheticOracle:
    """``F(x) = sum x_i^4 / 4 - x_1^2 / 2``: strict saddle at 0, minima at ``(+-1, 0, ..., 0)``."""
    if n < 2:
        raise InvalidArgument("quartic saddle needs n >= 2")
    if noise_sigma < 0:
        raise InvalidArgument("noise_sigma must be nonnegative")

    def fun(x):
        return 0.25 * float(np.sum(x**4)) - 0.5 * x[0] ** 2

    def grad(x):
        g = x**3
        g[0] -= x[0]
        return g

    def hess(x):
        h = 3.0 * x**2
        h[0] -= 1.0
        return np.diag(h)

    if noise is None:
        noise = AdditiveNoise(noise_sigma) if noise_sigma > 0 else NoNoise()
    return SyntheticOracle(n, fun, grad, hess, noise, name="quartic")


def _exp_guard(x):
    if np.any(x > 700):
        raise NumericFailure("exp overflow: entries above 700")


def make_exp_scalar(n: int) -> SyntheticOracle:
    """``F(x) = sum(exp(x_i) - x_i)``: smooth in the generalized sense only."""
    if n < 1:
        raise InvalidArgument("n must be positive")
    return SyntheticOracle(
        n,
        lambda x: float(np.sum(np.exp(x) - x)),
        lambda x: np.exp(x) - 1.0,
        lambda x: np.diag(np.exp(x)),
        NoNoise(),
        name="exp",
        guard=_exp_guard,
    )


def make_quadratic(A, b=None, noise: NoiseModel = None) -> SyntheticOracle:
    """``F(x) = x'Ax/2 + b'x`` with a symmetric ``A``."""
    A = np.asarray(A, float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidArgument("A must be square")
    A = 0.5 * (A + A.T)
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, float)
    return SyntheticOracle(
        A.shape[0],
        lambda x: float(0.5 * x @ A @ x + b @ x),
        lambda x: A @ x + b,
        lambda x: A.copy(),
        noise,
        name="quadratic",
    )


# ---------------------------------------------------------------------------
# imbalanced classification data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImbalancedDataset:
    features: np.ndarray
    labels: np.ndarray
    class_ratios: tuple
    n_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise InvalidArgument("features/labels shape mismatch")
        if not np.all(np.isfinite(self.features)):
            raise NumericFailure("non-finite features")

    @property
    def n_samples(self):
        return int(self.labels.shape[0])

    @property
    def n_features(self):
        return int(self.features.shape[1])

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


def simplex_means(n_classes, n_features, separation=3.0):
    """Vertices of a regular simplex with pairwise distance ``separation``."""
    if n_features < n_classes - 1:
        raise InvalidArgument(f"{n_classes} equidistant means need at least {n_classes - 1} features")
    E = np.eye(n_classes) - 1.0 / n_classes
    # orthonormal coordinates of the centered vertices inside their (K-1)-dim span
    U, s, _ = np.linalg.svd(E)
    coords = E @ U[:, : n_classes - 1]
    out = np.zeros((n_classes, n_features))
    out[:, : n_classes - 1] = coords
    return out * (separation / np.sqrt(2.0))


def class_counts_for(ratios, base_per_class):
    counts = [int(np.round(r * base_per_class)) for r in ratios]  # numpy rounds half to even
    return counts


def make_imbalanced_mixture(n_features: int, n_classes: int, base_per_class: int, ratios: Sequence[float],
                            seed: int, separation: float = 3.0) -> ImbalancedDataset:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != n_classes:
        raise InvalidArgument(f"got {len(ratios)} ratios for {n_classes} classes")
    if any(not (0 < r <= 1) for r in ratios):
        raise InvalidArgument("ratios must lie in (0, 1]")
    if base_per_class < 1:
        raise InvalidArgument("base_per_class must be positive")
    counts = class_counts_for(ratios, base_per_class)
    empty = [k for k, c in enumerate(counts) if c == 0]
    if empty:
        raise InvalidArgument(f"classes {empty} would have no samples at base {base_per_class}")
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    means = simplex_means(n_classes, n_features, separation)
    X = np.concatenate([means[k] + gen.standard_normal((c, n_features)) for k, c in enumerate(counts)])
    y = np.concatenate([np.full(c, k, dtype=np.int64) for k, c in enumerate(counts)])
    perm = gen.permutation(y.size)
    return ImbalancedDataset(X[perm], y[perm], ratios, n_classes)


def save_dataset_csv(data: ImbalancedDataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(data.n_features)])
        for lab, row in zip(data.labels, data.features):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])


def load_dataset_csv(path, n_classes=None, class_ratios=None) -> ImbalancedDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "label" or header[1:] != [f"f{j}" for j in range(len(header) - 1)]:
        raise InvalidArgument("dataset CSV header must be label,f0,f1,...")
    y = np.array([int(r[0]) for r in body], dtype=np.int64)
    X = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(header) - 1)
    K = int(n_classes if n_classes is not None else y.max() + 1)
    ratios = tuple(class_ratios) if class_ratios is not None else tuple([1.0] * K)
    return ImbalancedDataset(X, y, ratios, K)


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector plus the layout needed to interpret it.

    ``shape`` is ``("logistic", K, d)`` or ``("mlp", d, hidden, K)``.
    """

    flat: np.ndarray
    shape: tuple

    def __post_init__(self):
        flat = np.asarray(self.flat, float)
        if flat.ndim != 1 or flat.size != param_count(self.shape):
            raise InvalidArgument(f"parameter vector of length {flat.size} does not match {self.shape}")
        object.__setattr__(self, "flat", flat)

    def logits(self, X):
        X = np.asarray(X, float)
        if self.shape[0] == "logistic":
            W, b = _unpack_logistic(self.flat, self.shape[1], self.shape[2])
            return X @ W.T + b
        W1, b1, W2, b2 = _unpack_mlp(self.flat, *self.shape[1:])
        return np.tanh(X @ W1.T + b1) @ W2.T + b2

    def predict(self, X):
        return np.argmax(self.logits(X), axis=1)


def param_count(shape):
    if shape[0] == "logistic":
        _, K, d = shape
        return K * (d + 1)
    if shape[0] == "mlp":
        _, d, h, K = shape
        return h * (d + 1) + K * (h + 1)
    raise InvalidArgument(f"unknown model kind {shape[0]!r}")


def _unpack_logistic(theta, K, d):
    M = theta.reshape(K, d + 1)
    return M[:, :d], M[:, d]


def _unpack_mlp(theta, d, h, K):
    i = 0
    W1 = theta[i:i + h * d].reshape(h, d); i += h * d
    b1 = theta[i:i + h]; i += h
    W2 = theta[i:i + K * h].reshape(K, h); i += K * h
    b2 = theta[i:i + K]
    return W1, b1, W2, b2


def _softmax_ce(Z, y):
    Z = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(Z), axis=1))
    P = np.exp(Z - lse[:, None])
    loss = lse - Z[np.arange(y.size), y]
    return loss, P


class _DatasetOracle(StochasticOracle):
    def __init__(self, data: ImbalancedDataset):
        self.data = data
        self.sample_count = data.n_samples
        self.K = data.n_classes
        self.d = data.n_features

    def _rows(self, batch: Batch):
        idx = np.asarray(batch.data, dtype=np.int64)
        return self.data.features[idx], self.data.labels[idx]

    def params(self, x) -> ModelParams:
        return ModelParams(np.asarray(x, float), self.shape)

    def _check(self, x):
        x = np.asarray(x, float)
        if x.shape != (self.dim,):
            raise InvalidArgument(f"expected {self.dim} parameters, got shape {x.shape}")
        return x


class LogisticOracle(_DatasetOracle):
    """Per-sample softmax cross-entropy of a linear classifier; parameters laid out as K x (d+1)."""

    has_hessian = True
    has_analytic_hvp = True

    def __init__(self, data: ImbalancedDataset):
        super().__init__(data)
        self.shape = ("logistic", self.K, self.d)
        self.dim = self.K * (self.d + 1)

    def _forward(self, x, batch):
        x = self._check(x)
        X, y = self._rows(batch)
        W, b = _unpack_logistic(x, self.K, self.d)
        A = np.column_stack([X, np.ones(len(y))])
        loss, P = _softmax_ce(X @ W.T + b, y)
        return A, y, loss, P

    def values(self, x, batch):
        return self._forward(x, batch)[2]

    def grads(self, x, batch):
        A, y, _, P = self._forward(x, batch)
        R = P.copy()
        R[np.arange(y.size), y] -= 1.0
        return np.einsum("mk,ma->mka", R, A).reshape(y.size, -1)

    def value_and_grads(self, x, batch):
        A, y, loss, P = self._forward(x, batch)
        R = P.copy()
        R[np.arange(y.size), y] -= 1.0
        return loss, np.einsum("mk,ma->mka", R, A).reshape(y.size, -1)

    def _curv(self, P):
        return np.einsum("mk,kl->mkl", P, np.eye(self.K)) - np.einsum("mk,ml->mkl", P, P)

    def hessians(self, x, batch):
        A, y, _, P = self._forward(x, batch)
        S = self._curv(P)
        H = np.einsum("mkl,ma,mb->mkalb", S, A, A)
        return H.reshape(y.size, self.dim, self.dim)

    def hessian_mean(self, x, batch, weights=None):
        A, y, _, P = self._forward(x, batch)
        w = np.full(y.size, 1.0 / y.size) if weights is None else np.asarray(weights, float) / y.size
        S = self._curv(P)
        H = np.einsum("m,mkl,ma,mb->kalb", w, S, A, A, optimize=True)
        return H.reshape(self.dim, self.dim)

    def hvp_mean(self, x, v, batch):
        A, y, _, P = self._forward(x, batch)
        V = np.asarray(v, float).reshape(self.K, self.d + 1)
        Z = A @ V.T  # (m, K) directional logit change
        SZ = P * Z - P * np.sum(P * Z, axis=1, keepdims=True)
        return (SZ.T @ A / y.size).reshape(-1)


class MlpOracle(_DatasetOracle):
    """One hidden tanh layer and a softmax head; gradients by backpropagation, no Hessians."""

    has_hessian = False

    def __init__(self, data: ImbalancedDataset, hidden: int):
        super().__init__(data)
        if hidden < 1:
            raise InvalidArgument("hidden must be >= 1")
        self.hidden = int(hidden)
        self.shape = ("mlp", self.d, self.hidden, self.K)
        self.dim = param_count(self.shape)
        if self.dim > MAX_MLP_PARAMS:
            raise InvalidArgument(f"MLP has {self.dim} parameters; the limit is {MAX_MLP_PARAMS}")

    def init_params(self, seed=0):
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        d, h, K = self.d, self.hidden, self.K
        W1 = gen.standard_normal((h, d)) / np.sqrt(d)
        W2 = gen.standard_normal((K, h)) / np.sqrt(h)
        return np.concatenate([W1.ravel(), np.zeros(h), W2.ravel(), np.zeros(K)])

    def _forward(self, x, batch):
        x = self._check(x)
        X, y = self._rows(batch)
        W1, b1, W2, b2 = _unpack_mlp(x, self.d, self.hidden, self.K)
        Hd = np.tanh(X @ W1.T + b1)
        loss, P = _softmax_ce(Hd @ W2.T + b2, y)
        return X, y, W2, Hd, loss, P

    def values(self, x, batch):
        return self._forward(x, batch)[4]

    def value_and_grads(self, x, batch):
        X, y, W2, Hd, loss, P = self._forward(x, batch)
        m = y.size
        R = P.copy()
        R[np.arange(m), y] -= 1.0  # dL/dlogits
        gW2 = np.einsum("mk,mh->mkh", R, Hd)
        gb2 = R
        dH = (R @ W2) * (1.0 - Hd**2)
        gW1 = np.einsum("mh,md->mhd", dH, X)
        gb1 = dH
        G = np.concatenate([gW1.reshape(m, -1), gb1, gW2.reshape(m, -1), gb2], axis=1)
        return loss, G

    def grads(self, x, batch):
        return self.value_and_grads(x, batch)[1]


def logistic_oracle(data: ImbalancedDataset) -> LogisticOracle:
    return LogisticOracle(data)


def mlp_oracle(data: ImbalancedDataset, hidden: int) -> MlpOracle:
    return MlpOracle(data, hidden)

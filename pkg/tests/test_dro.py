import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from trgs.core import Batch
from trgs.diagnostics import fd_validate
from trgs.dro import (Conjugate, DroDualObjective, conjugate_eval, dro_blocks, dro_hessian, dro_value_grad,
                      minimize_eta, psi_stationarity)
from trgs.errors import InvalidArgument, NumericFailure, UnsupportedOperation

SMOOTH = [Conjugate("smoothed_chi2"), Conjugate("kl"), Conjugate("smoothed_cvar", 0.25),
          Conjugate("smoothed_cvar", 0.5)]


class ConstantLoss:
    """Finite-sum base loss with fixed per-sample values and zero derivatives."""

    has_hessian = True

    def __init__(self, losses, dim=2):
        self.losses = np.asarray(losses, float)
        self.sample_count = self.losses.size
        self.dim = dim

    def all_samples(self):
        return Batch(np.arange(self.sample_count))

    def values(self, x, batch):
        return self.losses[batch.data]

    def grads(self, x, batch):
        return np.zeros((batch.size, self.dim))

    def hessians(self, x, batch):
        return np.zeros((batch.size, self.dim, self.dim))

    def hessian_mean(self, x, batch, weights=None):
        return np.zeros((self.dim, self.dim))


class LinearLoss(ConstantLoss):
    """Per-sample loss a_i . x + b_i."""

    def __init__(self, A, b):
        super().__init__(b, A.shape[1])
        self.A = A

    def values(self, x, batch):
        return self.A[batch.data] @ x + self.losses[batch.data]

    def grads(self, x, batch):
        return self.A[batch.data].copy()


def test_conjugate_examples():
    assert conjugate_eval(Conjugate("chi2"), 0.0).value == 0.0
    assert conjugate_eval(Conjugate("kl"), 1.0).value == pytest.approx(math.e - 1, rel=1e-15)
    assert conjugate_eval(Conjugate("smoothed_cvar", 0.5), 0.0).value == pytest.approx(0.0, abs=1e-16)


@pytest.mark.parametrize("conj", SMOOTH, ids=lambda c: f"{c.kind}-{c.alpha}")
def test_normalization_at_zero(conj):
    v, d1, _ = conjugate_eval(conj, 0.0)
    assert v == pytest.approx(0.0, abs=1e-15)
    assert d1 == pytest.approx(1.0, rel=1e-15)


def test_smoothed_chi2_continuous_at_breakpoint():
    c = Conjugate("smoothed_chi2")
    lo, hi = conjugate_eval(c, -1e-12), conjugate_eval(c, 0.0)
    for a, b in zip(lo, hi):
        assert a == pytest.approx(b, abs=1e-11)


def test_nonsmooth_second_derivative_flagged():
    e = conjugate_eval(Conjugate("cvar", 0.3), 0.0)
    assert not e.second_defined and math.isnan(e.second)
    assert not conjugate_eval(Conjugate("chi2"), -2.0).second_defined


@pytest.mark.parametrize("conj", SMOOTH, ids=lambda c: f"{c.kind}-{c.alpha}")
def test_conjugate_fd_consistency(conj):
    t = np.linspace(-20, 20, 1000)
    h = 1e-5
    v, d1, d2 = conjugate_eval(conj, t)
    vp, d1p, _ = conjugate_eval(conj, t + h)
    vm, d1m, _ = conjugate_eval(conj, t - h)
    fd1 = (vp - vm) / (2 * h)
    fd2 = (d1p - d1m) / (2 * h)
    away = np.abs(t) > 2 * h  # the smoothed chi-square has a curvature jump at 0
    # same relative-error convention as fd_validate: tiny entries are judged against the largest one
    rel1 = np.abs(fd1 - d1) / np.maximum(np.abs(d1), max(1e-3 * np.abs(d1).max(), 1e-8))
    rel2 = np.abs(fd2 - d2) / np.maximum(np.abs(d2), max(1e-3 * np.abs(d2).max(), 1e-8))
    assert rel1[away].max() <= 1e-6
    assert rel2[away].max() <= 1e-4
    assert d2.min() >= -1e-12


@pytest.mark.parametrize("alpha", [0.1, 0.25, 0.5, 0.9])
def test_smoothed_cvar_large_argument_is_finite(alpha):
    e = conjugate_eval(Conjugate("smoothed_cvar", alpha), 700.0)
    assert all(np.isfinite(v) for v in e)
    assert e.value == pytest.approx((700 + math.log(alpha)) / alpha, rel=1e-14)
    assert e.first == pytest.approx(1 / alpha, rel=1e-12)


def test_conjugate_rejects_non_finite():
    with pytest.raises(NumericFailure):
        conjugate_eval(Conjugate("kl"), np.inf)


def test_conjugate_parameter_checks():
    with pytest.raises(InvalidArgument):
        Conjugate("smoothed_cvar")
    with pytest.raises(InvalidArgument):
        Conjugate("kl", 0.5)
    with pytest.raises(InvalidArgument):
        Conjugate("tv")


def test_grad_eta_vanishes_for_equal_losses():
    base = ConstantLoss([2.5] * 6)
    obj = DroDualObjective(base, Conjugate("smoothed_cvar", 0.3), 0.7)
    _, grad = dro_value_grad(obj, np.zeros(2), 2.5, base.all_samples())
    assert grad[-1] == pytest.approx(0.0, abs=1e-15)


def test_kl_overflow_names_sample():
    base = ConstantLoss([0.0, 1000.0])
    obj = DroDualObjective(base, Conjugate("kl"), 1.0)
    with pytest.raises(NumericFailure, match="sample"):
        dro_value_grad(obj, np.zeros(2), 0.0, base.all_samples())


@pytest.mark.parametrize("conj", SMOOTH, ids=lambda c: f"{c.kind}-{c.alpha}")
def test_grad_eta_increasing(conj, small_logistic, gen):
    obj = DroDualObjective(small_logistic, conj, 0.5)
    x = 0.3 * gen.standard_normal(small_logistic.dim)
    b = small_logistic.all_samples()
    etas = np.linspace(-1.0, 4.0, 100)
    ge = [dro_value_grad(obj, x, e, b)[1][-1] for e in etas]
    assert np.all(np.diff(ge) > 0)


def test_large_penalty_tends_to_mean_loss(small_logistic, gen):
    x = 0.3 * gen.standard_normal(small_logistic.dim)
    b = small_logistic.all_samples()
    mean = small_logistic.values(x, b).mean()
    gaps = []
    for lam in (1.0, 10.0, 100.0, 1000.0):
        obj = DroDualObjective(small_logistic, Conjugate("smoothed_chi2"), lam)
        gaps.append(abs(dro_value_grad(obj, x, 0.3, b)[0] - mean))
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3


@pytest.mark.parametrize("conj", SMOOTH, ids=lambda c: f"{c.kind}-{c.alpha}")
def test_joint_derivatives_vs_fd(conj, small_logistic, gen):
    obj = DroDualObjective(small_logistic, conj, 0.7)
    for _ in range(3):
        z = np.append(0.3 * gen.standard_normal(small_logistic.dim), gen.uniform(0.5, 1.5))
        assert fd_validate(obj, z, "gradient", 1e-5).passed
        assert fd_validate(obj, z, "hessian", 1e-3).passed


def test_joint_hessian_psd_for_convex_base(small_logistic, gen):
    obj = DroDualObjective(small_logistic, Conjugate("smoothed_chi2"), 0.4)
    for _ in range(5):
        z = np.append(0.5 * gen.standard_normal(small_logistic.dim), gen.uniform(0, 2))
        H = obj.full_hessian(z)
        assert np.linalg.eigvalsh(H)[0] >= -1e-10 * max(1.0, np.abs(H).max())


def test_per_sample_and_mean_hessian_agree(small_logistic, gen):
    obj = DroDualObjective(small_logistic, Conjugate("kl"), 0.9)
    z = np.append(0.3 * gen.standard_normal(small_logistic.dim), 1.0)
    b = Batch(np.array([0, 3, 3, 7]))
    np.testing.assert_allclose(obj.hessians(z, b).mean(axis=0), obj.hessian_mean(z, b), rtol=1e-10, atol=1e-13)


def test_linear_base_gives_psd_A1(gen):
    A = gen.standard_normal((30, 4))
    base = LinearLoss(A, gen.standard_normal(30))
    obj = DroDualObjective(base, Conjugate("smoothed_cvar", 0.25), 0.5)
    bl = dro_blocks(obj, gen.standard_normal(4), 0.2, base.all_samples())
    assert np.linalg.eigvalsh(bl.A1)[0] >= -1e-12
    assert bl.A4 > 0


def test_nonsmooth_conjugate_has_no_hessian(small_logistic):
    obj = DroDualObjective(small_logistic, Conjugate("cvar", 0.3), 1.0)
    assert not obj.has_hessian
    with pytest.raises(UnsupportedOperation):
        dro_hessian(obj, np.zeros(small_logistic.dim), 0.0, small_logistic.all_samples())
    with pytest.raises(UnsupportedOperation):
        minimize_eta(obj, np.zeros(small_logistic.dim), small_logistic.all_samples())


@pytest.mark.parametrize("conj", SMOOTH, ids=lambda c: f"{c.kind}-{c.alpha}")
def test_eta_star_for_equal_losses(conj):
    base = ConstantLoss([1.7] * 5)
    obj = DroDualObjective(base, conj, 0.3)
    assert minimize_eta(obj, np.zeros(2), base.all_samples()) == 1.7


@given(st.floats(-50, 50))
def test_eta_star_translation_equivariant(shift):
    losses = np.array([0.1, 0.5, 0.9, 2.0, 3.3])
    obj = DroDualObjective(ConstantLoss(losses), Conjugate("smoothed_cvar", 0.25), 0.4)
    obj2 = DroDualObjective(ConstantLoss(losses + shift), Conjugate("smoothed_cvar", 0.25), 0.4)
    b = obj.all_samples()
    e1, e2 = minimize_eta(obj, np.zeros(2), b), minimize_eta(obj2, np.zeros(2), b)
    assert e2 - e1 == pytest.approx(shift, abs=1e-8 * (1 + abs(shift)))


@pytest.mark.parametrize("conj", SMOOTH, ids=lambda c: f"{c.kind}-{c.alpha}")
def test_eta_star_reaches_tolerance_quickly(conj, small_logistic, gen):
    obj = DroDualObjective(small_logistic, conj, 0.5)
    for k in range(10):
        x = gen.standard_normal(small_logistic.dim)
        b = Batch(gen.integers(0, small_logistic.sample_count, 32))
        eta = minimize_eta(obj, x, b, tol=1e-10, max_iter=80)
        assert abs(dro_value_grad(obj, x, eta, b)[1][-1]) <= 1e-10


def test_psi_hessian_matches_fd_of_psi_gradient(small_logistic, gen):
    # independent oracle for the transfer rule: differentiate grad Psi numerically
    obj = DroDualObjective(small_logistic, Conjugate("smoothed_cvar", 0.25), 0.5)
    b = small_logistic.all_samples()
    x = 0.4 * gen.standard_normal(small_logistic.dim)
    st0 = psi_stationarity(obj, x, b)
    n = x.size
    h = 1e-5
    fd = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        fd[:, i] = (psi_stationarity(obj, x + e, b).psi_grad - psi_stationarity(obj, x - e, b).psi_grad) / (2 * h)
    fd = 0.5 * (fd + fd.T)
    scale = np.abs(fd).max()
    assert np.abs(st0.psi_hessian - fd).max() <= 1e-4 * scale
    bl = st0.blocks
    plus = bl.A1 + np.outer(bl.A2, bl.A2) / bl.A4
    assert np.abs(plus - fd).max() > 1e-2 * scale


def test_stationarity_transfer_bound(small_logistic, gen):
    obj = DroDualObjective(small_logistic, Conjugate("smoothed_chi2"), 0.5)
    b = small_logistic.all_samples()
    for _ in range(10):
        x = 0.3 * gen.standard_normal(small_logistic.dim)
        eta = minimize_eta(obj, x, b) + gen.normal(0, 0.05)
        _, joint = dro_value_grad(obj, x, eta, b)
        eps = float(np.linalg.norm(joint))
        lmin = np.linalg.eigvalsh(dro_hessian(obj, x, eta, b))[0]
        if lmin < -math.sqrt(eps):
            continue
        G = np.linalg.norm(small_logistic.grads(x, b), axis=1).max()
        psi = psi_stationarity(obj, x, b)
        assert np.linalg.norm(psi.psi_grad) <= math.sqrt(G**2 + 1) * eps

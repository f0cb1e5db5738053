import math
from pathlib import Path

import numpy as np
import pytest

from trgs.core import Batch, SeededRng, batch_hessian
from trgs.diagnostics import fd_validate
from trgs.errors import InvalidArgument, NumericFailure, UnsupportedOperation
from trgs.estimators import estimate_gradient_variance
from trgs.problems import (REFERENCE_RATIOS, AdditiveNoise, RankOneNoise, class_counts_for, load_dataset_csv,
                           logistic_oracle, make_exp_scalar, make_imbalanced_mixture, make_quadratic,
                           make_quartic_saddle, mlp_oracle, save_dataset_csv, simplex_means)


def test_quartic_saddle_and_minimum():
    o = make_quartic_saddle(4)
    assert np.array_equal(o.full_gradient(np.zeros(4)), np.zeros(4))
    np.testing.assert_array_equal(o.full_hessian(np.zeros(4)), np.diag([-1.0, 0, 0, 0]))
    xs = np.array([1.0, 0, 0, 0])
    assert np.array_equal(o.full_gradient(xs), np.zeros(4))
    np.testing.assert_array_equal(o.full_hessian(xs), np.diag([2.0, 0, 0, 0]))


def test_quartic_needs_two_dims():
    with pytest.raises(InvalidArgument):
        make_quartic_saddle(1)


def test_exp_minimum_and_certificate(gen):
    o = make_exp_scalar(3)
    assert o.full_value(np.zeros(3)) == 3.0
    assert np.array_equal(o.full_gradient(np.zeros(3)), np.zeros(3))
    for x in gen.uniform(0, 3, (20, 3)):
        assert np.linalg.norm(o.full_hessian(x), 2) <= 1 + np.linalg.norm(o.full_gradient(x)) + 1e-12


def test_exp_overflow_guard():
    with pytest.raises(NumericFailure):
        make_exp_scalar(2).full_value(np.array([701.0, 0.0]))


@pytest.mark.parametrize("name,oracle", [
    ("quartic", make_quartic_saddle(3, 0.2)),
    ("exp", make_exp_scalar(3)),
    ("quadratic", make_quadratic(np.array([[2.0, 1.0], [1.0, -3.0]]), np.array([1.0, -1.0]))),
])
def test_synthetic_derivatives_vs_fd(name, oracle):
    gen = np.random.default_rng(1)
    for _ in range(20):
        x = gen.uniform(-1.5, 1.5, oracle.dim)
        assert fd_validate(oracle, x, "gradient", 1e-5).passed
        assert fd_validate(oracle, x, "hessian", 1e-3).passed


def test_noisy_per_sample_derivatives_vs_fd():
    o = make_quadratic(np.diag([1.0, 2.0]), noise=RankOneNoise(0.5))
    batch = Batch(o.sample(np.random.default_rng(0), 7))
    x = np.array([0.3, -1.2])
    assert fd_validate(o, x, "gradient", 1e-5, batch=batch).passed
    assert fd_validate(o, x, "hessian", 1e-3, batch=batch).passed


def test_additive_noise_has_no_relative_variance():
    o = make_quartic_saddle(3, noise=AdditiveNoise(0.2))
    pts = [np.zeros(3), np.full(3, 2.0), np.full(3, -1.5)]
    G0, G1 = estimate_gradient_variance(o, pts, 10_000, SeededRng(3))
    assert G1 <= 0.05 * G0


def test_rank_one_noise_norm():
    noise = RankOneNoise(0.7)
    xi = noise.draw(np.random.default_rng(0), 5, 4)
    _, _, H = noise.apply(np.zeros(4), xi, 0.0, np.zeros(4), np.zeros((4, 4)))
    np.testing.assert_allclose(np.linalg.norm(H, 2, axis=(1, 2)), 0.7, rtol=1e-12)


def test_simplex_means_equidistant():
    M = simplex_means(5, 6, separation=3.0)
    D = np.linalg.norm(M[:, None] - M[None], axis=2)
    off = D[~np.eye(5, dtype=bool)]
    np.testing.assert_allclose(off, 3.0, rtol=1e-12)


def test_balanced_dataset():
    d = make_imbalanced_mixture(3, 4, 25, [1.0] * 4, seed=1)
    assert d.n_samples == 100
    assert list(d.class_counts()) == [25] * 4


def test_reference_ratio_counts():
    counts = class_counts_for(REFERENCE_RATIOS, 100)
    assert counts == [74, 99, 45, 25, 77, 59, 92, 73, 93, 28]
    assert min(counts) == 25
    d = make_imbalanced_mixture(10, 10, 100, REFERENCE_RATIOS, seed=0)
    assert list(d.class_counts()) == counts
    assert d.n_samples == sum(counts) == 665


def test_empty_class_rejected():
    with pytest.raises(InvalidArgument):
        make_imbalanced_mixture(3, 2, 1, [1.0, 0.2], seed=0)


def test_dataset_seed_determinism():
    a = make_imbalanced_mixture(4, 3, 10, [1.0, 0.5, 0.8], seed=9)
    b = make_imbalanced_mixture(4, 3, 10, [1.0, 0.5, 0.8], seed=9)
    c = make_imbalanced_mixture(4, 3, 10, [1.0, 0.5, 0.8], seed=10)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.features, c.features)


def test_dataset_csv_round_trip(tmp_path, small_data):
    p = tmp_path / "d.csv"
    save_dataset_csv(small_data, p)
    back = load_dataset_csv(p, n_classes=3, class_ratios=small_data.class_ratios)
    assert np.array_equal(back.features, small_data.features)
    assert np.array_equal(back.labels, small_data.labels)


def test_logistic_zero_parameters_give_log_k(small_logistic):
    v = small_logistic.values(np.zeros(small_logistic.dim), small_logistic.all_samples())
    np.testing.assert_allclose(v, math.log(3), rtol=1e-15)


def test_logistic_fd_and_psd(small_logistic):
    gen = np.random.default_rng(2)
    for _ in range(20):
        x = gen.standard_normal(small_logistic.dim)
        rep = fd_validate(small_logistic, x, "gradient", 1e-6)
        assert rep.passed, str(rep)
    x = gen.standard_normal(small_logistic.dim)
    H = small_logistic.hessians(x, Batch(np.arange(10)))
    assert min(np.linalg.eigvalsh(h)[0] for h in H) >= -1e-10


def test_logistic_hvp_matches_hessian(small_logistic, gen):
    x = gen.standard_normal(small_logistic.dim)
    v = gen.standard_normal(small_logistic.dim)
    b = small_logistic.all_samples()
    np.testing.assert_allclose(small_logistic.hvp_mean(x, v, b), small_logistic.full_hessian(x) @ v,
                               rtol=1e-10, atol=1e-12)


def test_mlp_fd(small_data):
    o = mlp_oracle(small_data, 4)
    gen = np.random.default_rng(3)
    for _ in range(20):
        x = o.init_params(0) + 0.3 * gen.standard_normal(o.dim)
        assert fd_validate(o, x, "gradient", 1e-5).passed


def test_mlp_hidden_permutation_invariance(small_data):
    o = mlp_oracle(small_data, 5)
    d, h, K = small_data.n_features, 5, small_data.n_classes
    x = o.init_params(1) + 0.1
    W1 = x[: h * d].reshape(h, d)
    b1 = x[h * d: h * d + h]
    W2 = x[h * d + h: h * d + h + K * h].reshape(K, h)
    b2 = x[h * d + h + K * h:]
    p = np.array([3, 0, 4, 1, 2])
    y = np.concatenate([W1[p].ravel(), b1[p], W2[:, p].ravel(), b2])
    b = o.all_samples()
    np.testing.assert_allclose(o.values(y, b), o.values(x, b), rtol=1e-13)


def test_mlp_hessian_gate_and_size_guard(small_data):
    o = mlp_oracle(small_data, 2)
    with pytest.raises(UnsupportedOperation):
        batch_hessian(o, o.init_params(0), o.all_samples())
    with pytest.raises(InvalidArgument):
        mlp_oracle(small_data, 5000)

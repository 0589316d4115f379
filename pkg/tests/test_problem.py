import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsaddle.errors import ConfigError
from fedsaddle.model import ModelPoint
from fedsaddle.numdiff import fd_gradient, fd_hessian_from_loss, min_eigenvalue
from fedsaddle.problem import (
    AgentDataset,
    LogisticProblem,
    ProblemConfig,
    QuadraticProblem,
    Sample,
    dump_datasets_csv,
    estimate_smoothness,
    generate_datasets,
    grad_q,
    load_datasets_csv,
    loss_q,
    probe_points,
    uniform_weights,
)

RNG = np.random.default_rng(20240811)


def random_point(d1=2, d2=2, scale=1.0):
    return ModelPoint(scale * RNG.standard_normal(d1), scale * RNG.standard_normal((d1, d2)))


def random_sample(d2=2, scale=1.0):
    return Sample(int(RNG.choice([-1, 1])), scale * RNG.standard_normal(d2))


# ---------------------------------------------------------------------------
# per-sample loss and gradient
# ---------------------------------------------------------------------------


def test_loss_at_origin_is_log2():
    w = ModelPoint.zeros(2, 2)
    for _ in range(5):
        assert loss_q(w, random_sample(), rho=0.0) == pytest.approx(math.log(2.0), abs=1e-15)


def test_loss_unit_case():
    w = ModelPoint(np.array([1.0, 0.0]), np.eye(2))
    s = Sample(1, np.array([1.0, 0.0]))
    assert loss_q(w, s) == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-15)


def test_loss_label_flip_identity():
    # log(1+e^-a) + a = log(1+e^a), by direct scalar evaluation
    w = ModelPoint(np.array([0.7, -0.3]), np.array([[0.2, 1.1], [-0.5, 0.4]]))
    h = np.array([0.9, -1.3])
    a = float(w.w1 @ (w.W2 @ h))
    lp = loss_q(w, Sample(1, h))
    lm = loss_q(w, Sample(-1, h))
    assert lp + a == pytest.approx(lm, rel=1e-13)


def test_loss_large_margin_stable():
    w = ModelPoint(np.array([40.0]), np.array([[40.0]]))
    s = Sample(1, np.array([1.0]))
    v = loss_q(w, s)
    assert np.isfinite(v) and 0.0 < v < 1e-300 or v == 0.0
    v2 = loss_q(w, Sample(-1, np.array([1.0])))
    assert v2 == pytest.approx(1600.0, rel=1e-12)


def test_grad_zero_at_origin():
    g = grad_q(ModelPoint.zeros(3, 2), random_sample(2), rho=0.3)
    assert np.all(g.w1 == 0.0) and np.all(g.W2 == 0.0)


def test_grad_matches_central_differences():
    for _ in range(100):
        w = random_point()
        s = random_sample()
        rho = float(RNG.uniform(0, 0.5))
        g = grad_q(w, s, rho).flatten()
        fd = fd_gradient(
            lambda x: loss_q(ModelPoint.unflatten(x, 2, 2), s, rho), w.flatten(), step=1e-5
        )
        assert np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-8) <= 1e-6


def test_grad_vanishes_for_large_positive_margin():
    w = ModelPoint(np.array([30.0, 0.0]), 30.0 * np.eye(2))
    s = Sample(1, np.array([1.0, 0.0]))
    assert grad_q(w, s, rho=0.0).norm() <= 1e-8


def test_dimension_mismatch_rejected():
    with pytest.raises(ConfigError):
        loss_q(ModelPoint.zeros(2, 2), Sample(1, np.zeros(3)))
    with pytest.raises(ConfigError):
        grad_q(ModelPoint.zeros(2, 2), Sample(1, np.zeros(3)))


# ---------------------------------------------------------------------------
# exact per-agent and aggregate gradients
# ---------------------------------------------------------------------------


def one_sample_problem(gamma=1.0, h=(1.0,), d1=1, rho=0.0):
    d2 = len(h)
    cfg = ProblemConfig(d1=d1, d2=d2, rho=rho, K=1, samples_per_agent=1)
    ds = AgentDataset(0, np.array([gamma]), np.array([list(h)]), np.zeros(d2))
    return LogisticProblem(cfg, [ds])


def test_exact_grad_zero_at_origin():
    prob = LogisticProblem(ProblemConfig(K=3, seed=5))
    w = ModelPoint.zeros(2, 2)
    for k in range(3):
        assert prob.exact_grad_jk(k, w).norm() == 0.0
    assert prob.aggregate_grad_j(w, uniform_weights(3)).norm() == 0.0


def test_single_sample_agent_equals_grad_q():
    prob = one_sample_problem(gamma=-1.0, h=(0.4, -0.9), d1=2, rho=0.05)
    w = random_point(2, 2)
    g1 = prob.exact_grad_jk(0, w).flatten()
    g2 = grad_q(w, Sample(-1, np.array([0.4, -0.9])), rho=0.05).flatten()
    assert np.allclose(g1, g2, atol=0, rtol=1e-14)


def test_identical_datasets_agree():
    cfg = ProblemConfig(K=2, seed=9, heterogeneity_scale=0.0)
    base = generate_datasets(ProblemConfig(K=1, seed=9, heterogeneity_scale=0.0))[0]
    ds = [
        AgentDataset(0, base.gammas, base.H, base.mean_offset),
        AgentDataset(1, base.gammas, base.H, base.mean_offset),
    ]
    prob = LogisticProblem(cfg, ds)
    for _ in range(5):
        w = random_point()
        g0 = prob.exact_grad_jk(0, w).flatten()
        g1 = prob.exact_grad_jk(1, w).flatten()
        assert np.array_equal(g0, g1)


def test_aggregate_weighted_sum_oracle():
    prob = LogisticProblem(ProblemConfig(K=3, seed=3))
    w = random_point()
    p = np.array([0.2, 0.5, 0.3])
    got = prob.aggregate_grad_j(w, p).flatten()
    brute = sum(p[k] * prob.exact_grad_jk(k, w).flatten() for k in range(3))
    assert np.allclose(got, brute, rtol=1e-13)


def test_aggregate_mass_on_one_agent():
    prob = LogisticProblem(ProblemConfig(K=3, seed=3))
    w = random_point()
    p = np.array([0.0, 1.0, 0.0])
    assert np.allclose(
        prob.aggregate_grad_j(w, p).flatten(),
        prob.exact_grad_jk(1, w).flatten(),
        rtol=1e-14,
    )


def test_bad_weights_rejected():
    prob = LogisticProblem(ProblemConfig(K=2, seed=1))
    w = ModelPoint.zeros(2, 2)
    with pytest.raises(ConfigError):
        prob.aggregate_grad_j(w, np.array([0.5, 0.6]))
    with pytest.raises(ConfigError):
        prob.aggregate_grad_j(w, np.array([1.5, -0.5]))


# ---------------------------------------------------------------------------
# Hessian
# ---------------------------------------------------------------------------


def test_scalar_saddle_hessian():
    # Hand calculus for J(w1, W2) = log(1 + exp(-w1 W2)): at the origin the
    # diagonal blocks vanish and the cross second derivative is
    # d/dW2 [f'(a) W2] = f'(0) = -sigma(0) = -1/2.
    prob = one_sample_problem()
    H = prob.hessian_j(ModelPoint.zeros(1, 1), np.array([1.0]))
    assert np.allclose(H, np.array([[0.0, -0.5], [-0.5, 0.0]]), atol=1e-9)
    assert min_eigenvalue(H) == pytest.approx(-0.5, abs=1e-9)
    # cross-check against second differences of the loss itself
    H2 = fd_hessian_from_loss(
        lambda x: prob.loss_k_flat(0, x), np.zeros(2), step=1e-4
    )
    assert np.allclose(H, H2, atol=1e-6)


def test_scalar_saddle_with_regularizer():
    prob = one_sample_problem(rho=0.1)
    H = prob.hessian_j(ModelPoint.zeros(1, 1), np.array([1.0]))
    evals = np.linalg.eigvalsh(H)
    assert evals[0] == pytest.approx(0.1 - 0.5, abs=1e-9)
    assert evals[-1] == pytest.approx(0.1 + 0.5, abs=1e-9)


def test_hessian_exact_on_quadratic():
    prob = QuadraticProblem(2, 2, K=2, curvature=0.7)
    H = prob.hessian_j(random_point(), uniform_weights(2))
    assert np.allclose(H, 0.7 * np.eye(6), atol=1e-5)


def test_hessian_symmetric_and_rayleigh():
    prob = LogisticProblem(ProblemConfig(K=4, seed=2))
    w = random_point()
    H = prob.hessian_j(w, uniform_weights(4))
    assert np.max(np.abs(H - H.T)) <= 1e-10
    lam = min_eigenvalue(H)
    for _ in range(100):
        v = RNG.standard_normal(H.shape[0])
        assert lam <= (v @ H @ v) / (v @ v) + 1e-12


def test_strict_saddle_at_origin_small_rho():
    prob = LogisticProblem(ProblemConfig(K=5, rho=0.01, seed=6))
    p = uniform_weights(5)
    H = prob.hessian_j(ModelPoint.zeros(2, 2), p)
    lam = min_eigenvalue(H)
    assert lam < 0
    assert lam == pytest.approx(prob.saddle_min_eigenvalue(p), abs=1e-7)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def test_dataset_determinism_and_seed_sensitivity():
    cfg = ProblemConfig(K=4, seed=11)
    a = generate_datasets(cfg)
    b = generate_datasets(cfg)
    for x, y in zip(a, b):
        assert np.array_equal(x.H, y.H) and np.array_equal(x.gammas, y.gammas)
    c = generate_datasets(ProblemConfig(K=4, seed=12))
    assert any(not np.array_equal(x.H, y.H) for x, y in zip(a, c))


def test_homogeneous_data_small_disagreement():
    cfg = ProblemConfig(K=3, seed=21, heterogeneity_scale=0.0, samples_per_agent=4000)
    prob = LogisticProblem(cfg)
    probes = probe_points(prob.dim, 4, seed=55)
    sm = estimate_smoothness(prob, probes)
    assert sm.G < 0.08  # sampling noise only, ~1/sqrt(4000)


def test_csv_round_trip(tmp_path):
    cfg = ProblemConfig(K=3, seed=13, samples_per_agent=7)
    datasets = generate_datasets(cfg)
    path = tmp_path / "data.csv"
    dump_datasets_csv(datasets, path)
    loaded = load_datasets_csv(path)
    assert len(loaded) == 3
    for a, b in zip(datasets, loaded):
        assert np.array_equal(a.gammas, b.gammas)
        assert np.array_equal(a.H, b.H)


# ---------------------------------------------------------------------------
# smoothness estimation
# ---------------------------------------------------------------------------


def test_identical_agents_zero_disagreement():
    base = generate_datasets(ProblemConfig(K=1, seed=9))[0]
    cfg = ProblemConfig(K=2, seed=9)
    prob = LogisticProblem(
        cfg,
        [
            AgentDataset(0, base.gammas, base.H, base.mean_offset),
            AgentDataset(1, base.gammas, base.H, base.mean_offset),
        ],
    )
    sm = estimate_smoothness(prob, probe_points(prob.dim, 6, seed=1))
    assert sm.G <= 1e-12


def test_quadratic_delta_exact():
    prob = QuadraticProblem(2, 2, K=2, curvature=0.37)
    sm = estimate_smoothness(prob, probe_points(prob.dim, 6, seed=2))
    assert sm.delta == pytest.approx(0.37, rel=1e-12)
    assert sm.rho_hess == 0.0


def test_delta_against_dense_grid_oracle():
    prob = LogisticProblem(ProblemConfig(d1=1, d2=1, K=2, seed=8, samples_per_agent=10))
    probes = probe_points(prob.dim, 400, seed=44)
    sm = estimate_smoothness(prob, probes, pair_subsample=400)
    # independent oracle: local Lipschitz constant equals the Hessian spectral
    # norm; take its max over a dense independent cloud in the same ball
    dense = probe_points(prob.dim, 1500, seed=91)
    oracle = max(
        np.linalg.norm(prob.hessian_k(k, x), 2) for k in range(2) for x in dense
    )
    assert abs(sm.delta - oracle) / oracle < 0.01


def test_degenerate_probes_rejected():
    prob = QuadraticProblem(1, 1, K=1, curvature=1.0)
    with pytest.raises(ConfigError):
        estimate_smoothness(prob, [np.zeros(2), np.zeros(2)])


def test_j_floor_is_lower_bound():
    prob = LogisticProblem(ProblemConfig(K=2, seed=3))
    sm = estimate_smoothness(prob, probe_points(prob.dim, 4, seed=4))
    assert sm.J_floor == 0.0
    w = random_point()
    assert prob.aggregate_loss(w, uniform_weights(2)) >= sm.J_floor


# ---------------------------------------------------------------------------
# model point properties
# ---------------------------------------------------------------------------


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10**6))
@settings(max_examples=50, deadline=None)
def test_flatten_round_trip(d1, d2, seed):
    r = np.random.default_rng(seed)
    w = ModelPoint(r.standard_normal(d1), r.standard_normal((d1, d2)))
    v = w.flatten()
    assert v.shape == (d1 + d1 * d2,)
    w2 = ModelPoint.unflatten(v, d1, d2)
    assert np.array_equal(w.w1, w2.w1) and np.array_equal(w.W2, w2.W2)

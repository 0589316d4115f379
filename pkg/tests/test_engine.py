from itertools import combinations

import numpy as np
import pytest

from fedsaddle.engine import (
    FederationConfig,
    aggregate_models,
    run_local_epoch,
    run_round,
    run_trajectory,
    sample_participants,
)
from fedsaddle.errors import ConfigError
from fedsaddle.oracles import (
    ExactPlusPerturbation,
    MiniBatch,
    OracleRealization,
    Perturbed,
    Straggler,
)
from fedsaddle.problem import LogisticProblem, ProblemConfig, QuadraticProblem, uniform_weights
from fedsaddle.rng import Streams

PROB = LogisticProblem(ProblemConfig(K=6, seed=41, samples_per_agent=8))
RNG = np.random.default_rng(99)


def full_batch(problem):
    return MiniBatch(max(problem.n_samples(k) for k in range(problem.K)))


class ScriptedRealization:
    """Stub realization returning a fixed vector at any point."""

    def __init__(self, g):
        self.g = np.asarray(g, dtype=np.float64)

    def evaluate_flat(self, problem, x):
        return self.g.copy()


# ---------------------------------------------------------------------------
# participant sampling
# ---------------------------------------------------------------------------


def test_full_participation_is_identity():
    streams = Streams(1)
    for rnd in range(20):
        assert np.array_equal(
            sample_participants(streams, rnd, 5, 5), np.arange(5)
        )


def test_subset_frequencies_k4_l2():
    # exhaustive enumeration oracle: 6 equally likely 2-subsets of {0..3}
    from fedsaddle._kernels_py import _participants

    streams = Streams(2)
    n = 600_000
    parts = _participants(streams, np.arange(n, dtype=np.uint32), 4, 2)
    keys = parts[:, 0] * 4 + parts[:, 1]
    counts = {c: 0 for c in combinations(range(4), 2)}
    for a, b in counts:
        counts[(a, b)] = int(np.sum(keys == a * 4 + b))
    assert sum(counts.values()) == n
    for c, cnt in counts.items():
        assert abs(cnt / n - 1.0 / 6) < 0.005, (c, cnt / n)
    # the scalar path draws identically
    for rnd in range(50):
        assert np.array_equal(sample_participants(streams, rnd, 4, 2), parts[rnd])


def test_inclusion_and_pairwise_marginals():
    streams = Streams(3)
    K, L, n = 10, 3, 30_000
    inc = np.zeros(K)
    pair01 = 0
    k_in = 0
    for rnd in range(n):
        s = set(sample_participants(streams, rnd, K, L))
        for k in s:
            inc[k] += 1
        if 0 in s:
            k_in += 1
            if 1 in s:
                pair01 += 1
    assert np.all(np.abs(inc / n - L / K) < 0.02)
    assert abs(pair01 / k_in - (L - 1) / (K - 1)) < 0.03


def test_bad_subset_size_rejected():
    with pytest.raises(ConfigError):
        sample_participants(Streams(1), 0, 3, 4)


# ---------------------------------------------------------------------------
# local epochs
# ---------------------------------------------------------------------------


def test_single_epoch_full_batch_is_plain_step():
    w0 = RNG.standard_normal(PROB.dim)
    streams = Streams(9)
    from fedsaddle.oracles import draw_realization

    r = draw_realization(full_batch(PROB), streams, 1, 2, 1, PROB)
    iterates, _ = run_local_epoch(PROB, 2, w0, [r], mu=0.1, K=PROB.K, p_k=1.0 / PROB.K, E_k=1)
    want = w0 - 0.1 * PROB.grad_k_flat(2, w0)
    assert np.allclose(iterates[-1], want, rtol=1e-14)


def test_all_straggle_trajectory_constant():
    w0 = RNG.standard_normal(PROB.dim)
    kind = Straggler(0.5, MiniBatch(1))
    rs = [
        OracleRealization(kind, agent=0, rnd=0, epoch=e, coin=False) for e in range(1, 4)
    ]
    iterates, _ = run_local_epoch(PROB, 0, w0, rs, mu=0.3, K=PROB.K, p_k=0.2, E_k=3)
    for it in iterates:
        assert np.array_equal(it, w0)


def test_scripted_epoch_telescopes():
    gs = [RNG.standard_normal(PROB.dim) for _ in range(3)]
    w0 = RNG.standard_normal(PROB.dim)
    mu, p_k = 0.05, 0.3
    iterates, _ = run_local_epoch(
        PROB, 0, w0, [ScriptedRealization(g) for g in gs], mu=mu, K=PROB.K, p_k=p_k, E_k=3
    )
    want = w0 - mu * PROB.K * (p_k / 3) * (gs[0] + gs[1] + gs[2])
    assert np.allclose(iterates[-1], want, rtol=1e-12)


def test_epoch_scaling_constant_gradients():
    # doubling E with a constant oracle leaves the total displacement fixed
    g = RNG.standard_normal(PROB.dim)
    w0 = RNG.standard_normal(PROB.dim)
    outs = []
    for E in (2, 4, 8):
        iterates, _ = run_local_epoch(
            PROB, 0, w0, [ScriptedRealization(g)] * E, mu=0.1, K=PROB.K, p_k=0.25, E_k=E
        )
        outs.append(iterates[-1])
    assert np.allclose(outs[0], outs[1], rtol=1e-12)
    assert np.allclose(outs[0], outs[2], rtol=1e-12)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def test_aggregate_identical_and_pair():
    a = RNG.standard_normal(4)
    assert np.allclose(aggregate_models([a, a, a], 3), a, rtol=1e-15)
    b = RNG.standard_normal(4)
    assert np.allclose(aggregate_models([a, b], 2), (a + b) / 2, rtol=1e-15)
    with pytest.raises(ConfigError):
        aggregate_models([a, b], 3)


# ---------------------------------------------------------------------------
# rounds and the decomposition identity
# ---------------------------------------------------------------------------


def fc_for(problem, kind, L=None, E=1, mu=0.1, seed=0):
    K = problem.K
    return FederationConfig.uniform(K, L if L is not None else K, mu, E, kind, seed=seed)


def test_single_epoch_round_has_zero_drift():
    fc = fc_for(PROB, Straggler(0.5, MiniBatch(2)), L=3, E=1, seed=5)
    w = RNG.standard_normal(PROB.dim)
    rec = run_round(PROB, w, fc, 1)
    assert np.all(rec.d_flat == 0.0)


def test_full_participation_full_batch_round():
    w = RNG.standard_normal(PROB.dim)
    # E = 1: the noise accumulation replays the aggregate-gradient sum exactly
    rec1 = run_round(PROB, w, fc_for(PROB, full_batch(PROB), E=1, seed=6), 1)
    assert np.all(rec1.s_flat == 0.0)
    assert np.all(rec1.d_flat == 0.0)
    # E = 4: deterministic oracle still has zero noise up to reassociation
    rec = run_round(PROB, w, fc_for(PROB, full_batch(PROB), E=4, seed=6), 1)
    assert np.linalg.norm(rec.s_flat) <= 1e-14
    assert np.linalg.norm(rec.d_flat) > 0  # multi-epoch drift is real
    assert rec.residual <= 1e-10 * (1.0 + np.linalg.norm(rec.w_flat))


@pytest.mark.parametrize("seed", range(6))
def test_decomposition_identity_random_configs(seed):
    r = np.random.default_rng(seed)
    K = int(r.integers(2, 8))
    prob = LogisticProblem(ProblemConfig(K=K, seed=seed, samples_per_agent=6))
    kinds = []
    for k in range(K):
        choice = r.integers(0, 5)
        kinds.append(
            [
                MiniBatch(int(r.integers(1, 7))),
                Perturbed(0.5),
                Perturbed(0.4, "laplacian"),
                ExactPlusPerturbation(0.3),
                Straggler(float(r.uniform(0.2, 1.0)), MiniBatch(1)),
            ][choice]
        )
    p = r.dirichlet(np.ones(K))
    fc = FederationConfig(
        K=K,
        L=int(r.integers(1, K + 1)),
        mu=float(r.uniform(0.01, 0.3)),
        p=p,
        E=r.integers(1, 9, size=K),
        kinds=tuple(kinds),
        seed=seed,
    )
    w = 0.5 * r.standard_normal(prob.dim)
    for rnd in range(1, 11):
        rec = run_round(prob, w, fc, rnd, streams=Streams(seed))
        assert rec.residual <= 1e-10 * (1.0 + np.linalg.norm(rec.w_flat))
        w = rec.w_flat


def test_degenerates_to_centralized_gd():
    fc = fc_for(PROB, full_batch(PROB), E=1, mu=0.2, seed=7)
    w = RNG.standard_normal(PROB.dim)
    traj = run_trajectory(PROB, w, 20, fc, backend_mode="reference")
    x = w.copy()
    p = uniform_weights(PROB.K)
    for i in range(1, 21):
        x = x - 0.2 * PROB.aggregate_grad_flat(x, p)
        assert np.linalg.norm(traj.w_hist[i] - x) <= 1e-12 * (1 + np.linalg.norm(x))


def test_zero_step_size_constant():
    fc = fc_for(PROB, MiniBatch(1), L=2, E=3, mu=0.0, seed=8)
    w = RNG.standard_normal(PROB.dim)
    traj = run_trajectory(PROB, w, 5, fc, backend_mode="reference")
    for i in range(traj.rounds_run + 1):
        assert np.array_equal(traj.w_hist[i], w)


def test_quadratic_contraction_closed_form():
    prob = QuadraticProblem(2, 2, K=3, curvature=0.8)
    fc = FederationConfig.uniform(3, 3, 0.5, 1, MiniBatch(1), seed=9)
    w0 = RNG.standard_normal(prob.dim)
    traj = run_trajectory(prob, w0, 15, fc, backend_mode="reference")
    for i in range(16):
        want = (1.0 - 0.5 * 0.8) ** i * w0
        assert np.allclose(traj.w_hist[i], want, rtol=1e-10, atol=1e-12)


def test_trajectory_deterministic_per_seed():
    fc = fc_for(PROB, Straggler(0.5, MiniBatch(1)), L=3, E=4, mu=0.1, seed=10)
    a = run_trajectory(PROB, np.ones(PROB.dim) * 0.1, 8, fc, backend_mode="reference")
    b = run_trajectory(PROB, np.ones(PROB.dim) * 0.1, 8, fc, backend_mode="reference")
    assert np.array_equal(a.w_hist, b.w_hist)
    assert [tuple(r.items()) for r in a.csv_rows()] == [tuple(r.items()) for r in b.csv_rows()]


def test_divergence_flagged():
    prob = QuadraticProblem(1, 1, K=1, curvature=1.0)
    fc = FederationConfig.uniform(1, 1, 5.0, 1, MiniBatch(1), seed=11)  # mu*curv > 2
    traj = run_trajectory(prob, np.array([1.0, 1.0]), 200, fc, backend_mode="reference")
    assert traj.diverged
    assert traj.rounds_run < 200


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        FederationConfig.uniform(4, 5, 0.1, 1, MiniBatch(1))
    with pytest.raises(ConfigError):
        FederationConfig(
            K=2, L=1, mu=0.1, p=np.array([0.7, 0.7]), E=np.ones(2, dtype=int),
            kinds=(MiniBatch(1), MiniBatch(1)),
        )
    with pytest.raises(ConfigError):
        FederationConfig(
            K=2, L=1, mu=0.1, p=np.array([0.5, 0.5]), E=np.zeros(2, dtype=int),
            kinds=(MiniBatch(1), MiniBatch(1)),
        )

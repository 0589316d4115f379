"""Benchmark objective: bilinear logistic loss over synthetic per-agent data.

The cost of classifying a sample ``(gamma, h)`` with parameters ``(w1, W2)``
is ``log(1 + exp(-gamma * w1^T W2 h))``; the aggregate risk adds an l2 term
``rho/2 (|w1|^2 + |W2|_F^2)``.  The origin is a stationary point, and for
small ``rho`` a strict saddle.

Per-agent risks are empirical averages over fixed finite datasets, so exact
gradients are computable and the noise-moment checks can condition on them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .model import ModelPoint
from .numdiff import fd_hessian_from_grad, min_eigenvalue
from .rng import P_DATA_DIRECTION, P_DATA_FEATURE, P_DATA_LABEL, P_PROBE, Streams


@dataclass(frozen=True)
class Sample:
    gamma: int
    h: np.ndarray

    def __post_init__(self):
        if self.gamma not in (-1, 1):
            raise ConfigError(f"label must be -1 or +1, got {self.gamma}")


@dataclass
class AgentDataset:
    """One agent's samples, stored columnar for vectorized passes."""

    agent: int
    gammas: np.ndarray  # (N,), values in {-1, +1}
    H: np.ndarray  # (N, d2)
    mean_offset: np.ndarray  # (d2,)

    def __post_init__(self):
        self.gammas = np.asarray(self.gammas, dtype=np.float64)
        self.H = np.asarray(self.H, dtype=np.float64)
        self.mean_offset = np.asarray(self.mean_offset, dtype=np.float64)
        if self.H.ndim != 2 or self.H.shape[0] == 0:
            raise ConfigError("agent dataset must be non-empty")
        if self.gammas.shape[0] != self.H.shape[0]:
            raise ConfigError("labels and features disagree in length")
        if not np.all(np.abs(self.gammas) == 1.0):
            raise ConfigError("labels must be -1 or +1")

    @property
    def n_samples(self) -> int:
        return self.H.shape[0]

    @property
    def samples(self) -> list[Sample]:
        return [Sample(int(g), h.copy()) for g, h in zip(self.gammas, self.H)]


@dataclass(frozen=True)
class ProblemConfig:
    d1: int = 2
    d2: int = 2
    rho: float = 0.01
    K: int = 10
    samples_per_agent: int = 20
    heterogeneity_scale: float = 0.5
    class_mean_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.d1 < 1 or self.d2 < 1:
            raise ConfigError("d1 and d2 must be at least 1")
        if self.rho < 0:
            raise ConfigError("rho must be non-negative")
        if self.K < 1:
            raise ConfigError("K must be positive")
        if self.samples_per_agent < 1:
            raise ConfigError("samples_per_agent must be positive")
        if self.heterogeneity_scale < 0:
            raise ConfigError("heterogeneity_scale must be non-negative")


@dataclass
class SmoothnessEstimates:
    """Empirical lower estimates of the smoothness constants.

    All values are measured on probe sets, not proved; downstream bound
    checks inherit that caveat.
    """

    delta: float
    rho_hess: float
    G: float
    U: float
    delta_hat: float
    J_floor: float

    def __post_init__(self):
        for name in ("delta", "rho_hess", "G", "U", "delta_hat"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


def _softplus(x):
    """log(1 + exp(x)), stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(-np.abs(x))))


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def loss_q(w: ModelPoint, s: Sample, rho: float = 0.0) -> float:
    """Per-sample cost, with this sample's share of the l2 term."""
    if s.h.shape != (w.d2,):
        raise ConfigError(f"feature length {s.h.shape} incompatible with d2={w.d2}")
    a = float(w.w1 @ (w.W2 @ s.h))
    reg = 0.5 * rho * (w.w1 @ w.w1 + np.sum(w.W2 * w.W2))
    return float(_softplus(-s.gamma * a)) + float(reg)


def grad_q(w: ModelPoint, s: Sample, rho: float = 0.0) -> ModelPoint:
    """Analytic per-sample gradient: -gamma sig(-gamma a) d(a) + rho w."""
    if s.h.shape != (w.d2,):
        raise ConfigError(f"feature length {s.h.shape} incompatible with d2={w.d2}")
    u = w.W2 @ s.h
    a = float(w.w1 @ u)
    c = -s.gamma * float(_sigmoid(-s.gamma * a))
    gw1 = c * u + rho * w.w1
    gW2 = c * np.outer(w.w1, s.h) + rho * w.W2
    return ModelPoint(gw1, gW2)


def generate_datasets(cfg: ProblemConfig) -> list[AgentDataset]:
    """Two-class Gaussian features with per-agent mean offsets.

    Agent ``k`` draws ``gamma`` uniform in {-1, +1} and
    ``h ~ Normal(gamma * m + o_k, I)`` with ``m = class_mean_scale * e1`` and
    ``o_k = heterogeneity_scale * u_k`` for a fixed per-agent unit vector
    ``u_k``.  Bit-deterministic in ``cfg.seed``.
    """
    streams = Streams(cfg.seed)
    m = np.zeros(cfg.d2)
    m[0] = cfg.class_mean_scale
    n = cfg.samples_per_agent
    datasets = []
    for k in range(cfg.K):
        bits = streams.u64(P_DATA_LABEL, 0, k, 0, n) & np.uint64(1)
        gammas = np.where(bits == 1, 1.0, -1.0)
        if cfg.heterogeneity_scale > 0:
            u = streams.normals(P_DATA_DIRECTION, 0, k, 0, cfg.d2)
            nrm = np.linalg.norm(u)
            if nrm == 0.0:
                u = m / max(np.linalg.norm(m), 1.0)
            else:
                u = u / nrm
            offset = cfg.heterogeneity_scale * u
        else:
            offset = np.zeros(cfg.d2)
        z = streams.normals_grid(
            P_DATA_FEATURE, np.arange(n), k, 0, cfg.d2
        )
        H = gammas[:, None] * m[None, :] + offset[None, :] + z
        datasets.append(AgentDataset(k, gammas, H, offset))
    return datasets


def dump_datasets_csv(datasets: Sequence[AgentDataset], path) -> None:
    d2 = datasets[0].H.shape[1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["agent_id", "gamma"] + [f"h{j}" for j in range(d2)])
        for ds in datasets:
            for g, h in zip(ds.gammas, ds.H):
                writer.writerow([ds.agent, int(g)] + [repr(float(v)) for v in h])


def load_datasets_csv(path) -> list[AgentDataset]:
    rows: dict[int, list[tuple[float, np.ndarray]]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:2] != ["agent_id", "gamma"]:
            raise ConfigError(f"unexpected dataset CSV header: {header}")
        for row in reader:
            k = int(row[0])
            rows.setdefault(k, []).append(
                (float(row[1]), np.array([float(v) for v in row[2:]]))
            )
    datasets = []
    for k in sorted(rows):
        gammas = np.array([g for g, _ in rows[k]])
        H = np.vstack([h for _, h in rows[k]])
        datasets.append(AgentDataset(k, gammas, H, np.zeros(H.shape[1])))
    return datasets


class LogisticProblem:
    """The federated objective over generated (or loaded) datasets."""

    def __init__(self, cfg: ProblemConfig, datasets: Sequence[AgentDataset] | None = None):
        self.cfg = cfg
        self.datasets = list(datasets) if datasets is not None else generate_datasets(cfg)
        if len(self.datasets) != cfg.K:
            raise ConfigError(f"expected {cfg.K} datasets, got {len(self.datasets)}")
        for ds in self.datasets:
            if ds.H.shape[1] != cfg.d2:
                raise ConfigError("dataset dimension disagrees with config")
        # Stacked arrays for vectorized passes; requires equal sample counts.
        counts = {ds.n_samples for ds in self.datasets}
        self.uniform_samples = len(counts) == 1
        if self.uniform_samples:
            self.H_all = np.stack([ds.H for ds in self.datasets])  # (K, N, d2)
            self.gam_all = np.stack([ds.gammas for ds in self.datasets])  # (K, N)
        else:
            self.H_all = None
            self.gam_all = None

    # -- basic facts ---------------------------------------------------------

    @property
    def d1(self) -> int:
        return self.cfg.d1

    @property
    def d2(self) -> int:
        return self.cfg.d2

    @property
    def dim(self) -> int:
        return self.cfg.d1 + self.cfg.d1 * self.cfg.d2

    @property
    def K(self) -> int:
        return self.cfg.K

    @property
    def rho(self) -> float:
        return self.cfg.rho

    def n_samples(self, k: int) -> int:
        return self.datasets[k].n_samples

    def lower_bound(self) -> float:
        """A true lower bound on J: both cost terms are non-negative."""
        return 0.0

    # -- flat-vector internals ------------------------------------------------

    def _split(self, x):
        d1, d2 = self.cfg.d1, self.cfg.d2
        return x[:d1], x[d1:].reshape(d1, d2)

    def _reg_grad(self, w1, W2):
        rho = self.cfg.rho
        return rho * w1, rho * W2

    def loss_k_flat(self, k: int, x: np.ndarray) -> float:
        w1, W2 = self._split(np.asarray(x, dtype=np.float64))
        ds = self.datasets[k]
        a = ds.H @ (W2.T @ w1)
        vals = _softplus(-ds.gammas * a)
        reg = 0.5 * self.cfg.rho * (w1 @ w1 + np.sum(W2 * W2))
        return float(vals.mean() + reg)

    def grad_k_flat(self, k: int, x: np.ndarray) -> np.ndarray:
        w1, W2 = self._split(np.asarray(x, dtype=np.float64))
        ds = self.datasets[k]
        u = W2.T @ w1  # (d2,)
        a = ds.H @ u  # (N,)
        c = -ds.gammas * _sigmoid(-ds.gammas * a)  # (N,)
        gw1 = (c[:, None] * (ds.H @ W2.T)).mean(axis=0) + self.cfg.rho * w1
        gW2 = np.outer(w1, (c[:, None] * ds.H).mean(axis=0)) + self.cfg.rho * W2
        return np.concatenate([gw1, gW2.ravel()])

    def sample_grad_flat(self, k: int, idx: int, x: np.ndarray) -> np.ndarray:
        w1, W2 = self._split(np.asarray(x, dtype=np.float64))
        ds = self.datasets[k]
        h = ds.H[idx]
        g = ds.gammas[idx]
        u = W2 @ h
        a = float(w1 @ u)
        c = -g * float(_sigmoid(-g * a))
        gw1 = c * u + self.cfg.rho * w1
        gW2 = c * np.outer(w1, h) + self.cfg.rho * W2
        return np.concatenate([gw1, gW2.ravel()])

    def aggregate_loss_flat(self, x: np.ndarray, p: np.ndarray) -> float:
        return float(sum(p[k] * self.loss_k_flat(k, x) for k in range(self.K)))

    def aggregate_grad_flat(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        p = _check_weights(p, self.K)
        g = np.zeros(self.dim)
        for k in range(self.K):
            g += p[k] * self.grad_k_flat(k, x)
        return g

    # -- ModelPoint API --------------------------------------------------------

    def exact_grad_jk(self, k: int, w: ModelPoint) -> ModelPoint:
        return ModelPoint.unflatten(
            self.grad_k_flat(k, w.flatten()), self.cfg.d1, self.cfg.d2
        )

    def loss_jk(self, k: int, w: ModelPoint) -> float:
        return self.loss_k_flat(k, w.flatten())

    def aggregate_grad_j(self, w: ModelPoint, p: np.ndarray) -> ModelPoint:
        return ModelPoint.unflatten(
            self.aggregate_grad_flat(w.flatten(), p), self.cfg.d1, self.cfg.d2
        )

    def aggregate_loss(self, w: ModelPoint, p: np.ndarray) -> float:
        return self.aggregate_loss_flat(w.flatten(), _check_weights(p, self.K))

    def hessian_j(self, w: ModelPoint, p: np.ndarray, step: float = 1e-5) -> np.ndarray:
        """Central-difference Hessian of the aggregate cost, symmetrized."""
        p = _check_weights(p, self.K)
        return fd_hessian_from_grad(
            lambda x: self.aggregate_grad_flat(x, p), w.flatten(), step=step
        )

    def hessian_k(self, k: int, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
        return fd_hessian_from_grad(lambda y: self.grad_k_flat(k, y), x, step=step)

    def saddle_min_eigenvalue(self, p: np.ndarray) -> float:
        """Closed-form smallest Hessian eigenvalue at the origin.

        At w = 0 the Hessian couples w1 row-wise to W2 through the weighted
        class-mean vector mbar = sum_k p_k mean_n(gamma h); its spectrum is
        rho plus/minus |mbar|/2 (and rho on the orthogonal complement).
        """
        p = _check_weights(p, self.K)
        mbar = np.zeros(self.cfg.d2)
        for k, ds in enumerate(self.datasets):
            mbar += p[k] * (ds.gammas[:, None] * ds.H).mean(axis=0)
        return self.cfg.rho - 0.5 * float(np.linalg.norm(mbar))


class QuadraticProblem:
    """Substitute cost 0.5 * curv * |w - c_k|^2 for closed-form checks."""

    def __init__(self, d1: int, d2: int, K: int, curvature: float, centers=None):
        self.cfg = ProblemConfig(d1=d1, d2=d2, rho=0.0, K=K)
        self.curvature = float(curvature)
        dim = d1 + d1 * d2
        if centers is None:
            centers = np.zeros((K, dim))
        self.centers = np.asarray(centers, dtype=np.float64).reshape(K, dim)

    @property
    def d1(self):
        return self.cfg.d1

    @property
    def d2(self):
        return self.cfg.d2

    @property
    def dim(self):
        return self.cfg.d1 + self.cfg.d1 * self.cfg.d2

    @property
    def K(self):
        return self.cfg.K

    def n_samples(self, k: int) -> int:
        return 1

    def lower_bound(self) -> float:
        return 0.0

    def loss_k_flat(self, k, x):
        d = np.asarray(x) - self.centers[k]
        return 0.5 * self.curvature * float(d @ d)

    def grad_k_flat(self, k, x):
        return self.curvature * (np.asarray(x, dtype=np.float64) - self.centers[k])

    def sample_grad_flat(self, k, idx, x):
        return self.grad_k_flat(k, x)

    def aggregate_loss_flat(self, x, p):
        return float(sum(p[k] * self.loss_k_flat(k, x) for k in range(self.K)))

    def aggregate_grad_flat(self, x, p):
        p = _check_weights(p, self.K)
        g = np.zeros(self.dim)
        for k in range(self.K):
            g += p[k] * self.grad_k_flat(k, x)
        return g

    def exact_grad_jk(self, k, w: ModelPoint) -> ModelPoint:
        return ModelPoint.unflatten(self.grad_k_flat(k, w.flatten()), self.d1, self.d2)

    def aggregate_grad_j(self, w: ModelPoint, p) -> ModelPoint:
        return ModelPoint.unflatten(self.aggregate_grad_flat(w.flatten(), p), self.d1, self.d2)

    def aggregate_loss(self, w: ModelPoint, p) -> float:
        return self.aggregate_loss_flat(w.flatten(), _check_weights(p, self.K))

    def hessian_j(self, w: ModelPoint, p, step: float = 1e-5) -> np.ndarray:
        p = _check_weights(p, self.K)
        return fd_hessian_from_grad(
            lambda x: self.aggregate_grad_flat(x, p), w.flatten(), step=step
        )


def _check_weights(p, K: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (K,):
        raise ConfigError(f"weight vector must have length {K}")
    if np.any(p < 0):
        raise ConfigError("weights must be non-negative")
    if abs(float(p.sum()) - 1.0) > 1e-12:
        raise ConfigError(f"weights must sum to 1 (got {p.sum()!r})")
    return p


def uniform_weights(K: int) -> np.ndarray:
    return np.full(K, 1.0 / K)


def probe_points(dim: int, count: int, seed: int, radius: float = 1.0) -> list[np.ndarray]:
    """Deterministic probe cloud in a ball of the given radius."""
    streams = Streams(seed)
    pts = []
    for j in range(count):
        z = streams.normals(P_PROBE, j, 0, 0, dim)
        u = streams.uniforms(P_PROBE, j, 1, 0, 1)[0]
        nrm = np.linalg.norm(z)
        if nrm == 0:
            pts.append(np.zeros(dim))
        else:
            pts.append(radius * (u ** (1.0 / dim)) * z / nrm)
    return pts


def estimate_smoothness(
    problem,
    probes: Sequence[np.ndarray],
    pair_subsample: int | None = None,
) -> SmoothnessEstimates:
    """Probe-based estimates of the smoothness constants.

    delta combines pairwise gradient-difference ratios with local Hessian
    spectral norms at the probes (the local norm is the limit of the ratio
    for vanishing separations); rho_hess uses pairwise Hessian differences;
    G and U are maxima over probes.  All are lower estimates of the true
    suprema and labelled as such downstream.
    """
    probes = [np.asarray(x, dtype=np.float64) for x in probes]
    if len(probes) < 2:
        raise ConfigError("need at least two probe points")
    if len({tuple(x) for x in probes}) < 2:
        raise ConfigError("probe points are degenerate (all identical)")
    K = problem.K
    grads = np.array([[problem.grad_k_flat(k, x) for x in probes] for k in range(K)])

    delta = 0.0
    rho_hess = 0.0
    npair = len(probes) * (len(probes) - 1) // 2
    pairs = [(i, j) for i in range(len(probes)) for j in range(i + 1, len(probes))]
    if pair_subsample is not None and npair > pair_subsample:
        stride = max(1, npair // pair_subsample)
        pairs = pairs[::stride]
    for k in range(K):
        for i, j in pairs:
            dx = np.linalg.norm(probes[i] - probes[j])
            if dx == 0:
                continue
            delta = max(delta, np.linalg.norm(grads[k, i] - grads[k, j]) / dx)

    hessians = {}
    if hasattr(problem, "hessian_k"):
        for k in range(K):
            hessians[k] = [problem.hessian_k(k, x) for x in probes]
        for k in range(K):
            for H in hessians[k]:
                delta = max(delta, float(np.linalg.norm(H, 2)))
            for i, j in pairs:
                dx = np.linalg.norm(probes[i] - probes[j])
                if dx == 0:
                    continue
                dH = np.linalg.norm(hessians[k][i] - hessians[k][j], 2)
                rho_hess = max(rho_hess, dH / dx)
    else:
        # quadratic-style substitute: gradient is linear, Hessian constant
        rho_hess = 0.0

    G = 0.0
    for i in range(len(probes)):
        for k in range(K):
            for l in range(k + 1, K):
                G = max(G, float(np.linalg.norm(grads[k, i] - grads[l, i])))
    U = float(max(np.linalg.norm(grads[k, i]) for k in range(K) for i in range(len(probes))))

    # Single-draw mean-fourth Lipschitz ratio of the per-sample gradient;
    # oracle wrappers rescale it (see bounds.bound_constants).
    d4 = 0.0
    for i, j in pairs:
        dx4 = float(np.linalg.norm(probes[i] - probes[j]) ** 4)
        if dx4 == 0:
            continue
        for k in range(K):
            n = problem.n_samples(k)
            diffs = [
                problem.sample_grad_flat(k, s, probes[i])
                - problem.sample_grad_flat(k, s, probes[j])
                for s in range(n)
            ]
            m4 = float(np.mean([np.linalg.norm(d) ** 4 for d in diffs]))
            d4 = max(d4, m4 / dx4)
    delta_hat = d4**0.25

    J_floor = problem.lower_bound() if hasattr(problem, "lower_bound") else min(
        problem.aggregate_loss_flat(x, uniform_weights(K)) for x in probes
    )
    return SmoothnessEstimates(
        delta=float(delta),
        rho_hess=float(rho_hess),
        G=G,
        U=U,
        delta_hat=float(delta_hat),
        J_floor=float(J_floor),
    )


__all__ = [
    "Sample",
    "AgentDataset",
    "ProblemConfig",
    "SmoothnessEstimates",
    "LogisticProblem",
    "QuadraticProblem",
    "loss_q",
    "grad_q",
    "generate_datasets",
    "dump_datasets_csv",
    "load_datasets_csv",
    "estimate_smoothness",
    "uniform_weights",
    "probe_points",
    "min_eigenvalue",
]

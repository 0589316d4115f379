"""Round execution: sampling, scaled local epochs, aggregation.

Every round also materializes the perturbed-recursion split of the update
into the exact descent direction, the zero-mean aggregate noise ``s_i`` and
the local-drift term ``d_i``, and checks the reconstruction identity

    w_i = w_{i-1} - mu grad J(w_{i-1}) - mu s_i - mu d_i

to floating tolerance.  The identity is exact algebra once the participant
count is fixed, so its residual doubles as a self-test of the engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .model import ModelPoint
from .oracles import OracleKind, OracleRealization, draw_realization
from .problem import _check_weights
from .rng import P_PARTICIPANTS, Streams

DIVERGENCE_NORM = 1e6


@dataclass(frozen=True)
class FederationConfig:
    K: int
    L: int
    mu: float
    p: np.ndarray
    E: np.ndarray
    kinds: tuple
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.L <= self.K):
            raise ConfigError(f"need 1 <= L <= K, got L={self.L}, K={self.K}")
        if self.mu < 0:
            raise ConfigError("step size must be non-negative")
        object.__setattr__(self, "p", _check_weights(self.p, self.K))
        E = np.asarray(self.E, dtype=np.int64)
        if E.shape != (self.K,) or np.any(E < 1):
            raise ConfigError("E must give every agent at least one epoch")
        object.__setattr__(self, "E", E)
        if len(self.kinds) != self.K:
            raise ConfigError("need one oracle kind per agent")
        for kind in self.kinds:
            kind.validate()

    @classmethod
    def uniform(cls, K, L, mu, epochs, kind: OracleKind, seed=0):
        return cls(
            K=K,
            L=L,
            mu=mu,
            p=np.full(K, 1.0 / K),
            E=np.full(K, epochs, dtype=np.int64),
            kinds=tuple([kind] * K),
            seed=seed,
        )


@dataclass
class RoundRecord:
    rnd: int
    participants: np.ndarray
    local_iterates: dict  # agent -> list of flat arrays, one per epoch step
    w_flat: np.ndarray
    s_flat: Optional[np.ndarray]
    d_flat: Optional[np.ndarray]
    residual: Optional[float]
    d1: int
    d2: int

    @property
    def w(self) -> ModelPoint:
        return ModelPoint.unflatten(self.w_flat, self.d1, self.d2)

    @property
    def s(self) -> Optional[ModelPoint]:
        return None if self.s_flat is None else ModelPoint.unflatten(self.s_flat, self.d1, self.d2)

    @property
    def d(self) -> Optional[ModelPoint]:
        return None if self.d_flat is None else ModelPoint.unflatten(self.d_flat, self.d1, self.d2)


def sample_participants(streams: Streams, rnd: int, K: int, L: int) -> np.ndarray:
    """Uniform L-subset of {0..K-1} by partial Fisher-Yates; sorted ascending."""
    if not (1 <= L <= K):
        raise ConfigError(f"need 1 <= L <= K, got L={L}, K={K}")
    words = streams.u64(P_PARTICIPANTS, rnd, 0, 0, L)
    perm = np.arange(K, dtype=np.int64)
    for i in range(L):
        j = i + int(words[i] % np.uint64(K - i))
        perm[i], perm[j] = perm[j], perm[i]
    return np.sort(perm[:L])


def run_local_epoch(
    problem,
    k: int,
    w_start: np.ndarray,
    realizations: Sequence[OracleRealization],
    mu: float,
    K: int,
    p_k: float,
    E_k: int,
    indicator: int = 1,
):
    """Scaled local recursion; returns (iterates, gradients), both length E_k (+1)."""
    if len(realizations) != E_k:
        raise ConfigError("need one realization per epoch")
    scale = mu * K * indicator * p_k / E_k
    iterates = [np.asarray(w_start, dtype=np.float64).copy()]
    grads = []
    w = iterates[0].copy()
    for r in realizations:
        g = r.evaluate_flat(problem, w)
        grads.append(g)
        w = w - scale * g
        iterates.append(w.copy())
    return iterates, grads


def aggregate_models(finals: Sequence[np.ndarray], L: int) -> np.ndarray:
    """Plain average of the participant finals, in fixed index order."""
    if len(finals) != L:
        raise ConfigError(f"expected {L} participant models, got {len(finals)}")
    acc = np.zeros_like(finals[0])
    for f in finals:
        acc += f
    return acc / L


def run_round(
    problem,
    w_prev: np.ndarray,
    fc: FederationConfig,
    rnd: int,
    streams: Optional[Streams] = None,
    compute_decomposition: bool = True,
    keep_trajectories: bool = True,
) -> RoundRecord:
    if streams is None:
        streams = Streams(fc.seed)
    w_prev = np.asarray(w_prev, dtype=np.float64)
    participants = sample_participants(streams, rnd, fc.K, fc.L)

    finals = []
    local = {}
    realizations = {}
    for k in participants:
        k = int(k)
        E_k = int(fc.E[k])
        rs = [
            draw_realization(fc.kinds[k], streams, rnd, k, e, problem)
            for e in range(1, E_k + 1)
        ]
        realizations[k] = rs
        iterates, grads = run_local_epoch(
            problem, k, w_prev, rs, fc.mu, fc.K, float(fc.p[k]), E_k
        )
        finals.append(iterates[-1])
        if keep_trajectories:
            local[k] = iterates
        else:
            local[k] = []
        realizations[k] = (rs, grads)
    w_i = aggregate_models(finals, fc.L)

    s_flat = d_flat = None
    residual = None
    if compute_decomposition:
        grad_prev = problem.aggregate_grad_flat(w_prev, fc.p)
        s_acc = np.zeros_like(w_prev)
        d_acc = np.zeros_like(w_prev)
        for k in participants:
            k = int(k)
            rs, grads_local = realizations[k]
            E_k = int(fc.E[k])
            coeff = fc.p[k] / E_k
            for e, r in enumerate(rs):
                g_frozen = r.evaluate_flat(problem, w_prev)
                s_acc += coeff * g_frozen
                d_acc += coeff * (grads_local[e] - g_frozen)
        ratio = fc.K / fc.L
        s_flat = ratio * s_acc - grad_prev
        d_flat = ratio * d_acc
        recon = w_prev - fc.mu * (grad_prev + s_flat + d_flat)
        residual = float(np.linalg.norm(w_i - recon))

    return RoundRecord(
        rnd=rnd,
        participants=participants,
        local_iterates=local,
        w_flat=w_i,
        s_flat=s_flat,
        d_flat=d_flat,
        residual=residual,
        d1=problem.d1,
        d2=problem.d2,
    )


@dataclass
class TrajectoryResult:
    """Per-round scalars plus the iterate history (round 0 = initial point)."""

    w_hist: np.ndarray  # (rounds_run + 1, dim)
    J: np.ndarray  # (rounds_run + 1,)
    grad_norm: np.ndarray  # (rounds_run + 1,)
    s_norm: Optional[np.ndarray]  # (rounds_run,) or None
    d_norm: Optional[np.ndarray]
    residual: Optional[np.ndarray]
    rounds_run: int
    diverged: bool
    records: list = field(default_factory=list)

    def csv_rows(self):
        """Rows for the trajectory CSV (decomposition columns blank at round 0)."""
        rows = []
        for i in range(self.rounds_run + 1):
            row = {
                "round": i,
                "J": self.J[i],
                "grad_norm": self.grad_norm[i],
            }
            for j, v in enumerate(self.w_hist[i]):
                row[f"w{j}"] = v
            if self.s_norm is not None and i >= 1:
                row["s_norm"] = self.s_norm[i - 1]
                row["d_norm"] = self.d_norm[i - 1]
                row["residual"] = self.residual[i - 1]
            else:
                row["s_norm"] = ""
                row["d_norm"] = ""
                row["residual"] = ""
            rows.append(row)
        return rows


def run_trajectory(
    problem,
    w0: np.ndarray,
    rounds: int,
    fc: FederationConfig,
    compute_decomposition: bool = True,
    keep_records: bool = False,
    backend_mode: str = "auto",
    stop_j_below: Optional[float] = None,
    stop_grad_sq_below: Optional[float] = None,
    round_offset: int = 0,
) -> TrajectoryResult:
    """Sequential rounds from ``w0``; deterministic in ``fc.seed``.

    Round i consumes the randomness addressed by ``round_offset + i``, so a
    run split into segments reproduces the unsegmented run exactly.

    With both stop thresholds set, the run ends at the first round where the
    cost has dropped below ``stop_j_below`` and the squared gradient norm is
    at most ``stop_grad_sq_below``.  Trajectories whose iterate norm exceeds
    1e6 are truncated and flagged as diverged.
    """
    if rounds < 1:
        raise ConfigError("need at least one round")
    from . import backend

    if backend_mode != "reference" and not keep_records and backend.supports(problem, fc):
        return backend.trajectory(
            problem,
            w0,
            rounds,
            fc,
            compute_decomposition=compute_decomposition,
            stop_j_below=stop_j_below,
            stop_grad_sq_below=stop_grad_sq_below,
            round_offset=round_offset,
        )
    if backend_mode == "kernel":
        raise ConfigError("configuration not supported by the compiled kernels")

    streams = Streams(fc.seed)
    dim = problem.dim
    w = np.asarray(w0, dtype=np.float64).copy()
    w_hist = np.zeros((rounds + 1, dim))
    J = np.zeros(rounds + 1)
    gn = np.zeros(rounds + 1)
    sn = np.zeros(rounds) if compute_decomposition else None
    dn = np.zeros(rounds) if compute_decomposition else None
    res = np.zeros(rounds) if compute_decomposition else None
    records = []

    w_hist[0] = w
    J[0] = problem.aggregate_loss_flat(w, fc.p)
    gn[0] = float(np.linalg.norm(problem.aggregate_grad_flat(w, fc.p)))
    diverged = False
    rounds_run = 0
    for i in range(1, rounds + 1):
        rec = run_round(
            problem,
            w,
            fc,
            round_offset + i,
            streams=streams,
            compute_decomposition=compute_decomposition,
            keep_trajectories=keep_records,
        )
        w = rec.w_flat
        w_hist[i] = w
        J[i] = problem.aggregate_loss_flat(w, fc.p)
        gn[i] = float(np.linalg.norm(problem.aggregate_grad_flat(w, fc.p)))
        if compute_decomposition:
            sn[i - 1] = float(np.linalg.norm(rec.s_flat))
            dn[i - 1] = float(np.linalg.norm(rec.d_flat))
            res[i - 1] = rec.residual
        if keep_records:
            records.append(rec)
        rounds_run = i
        if np.linalg.norm(w) > DIVERGENCE_NORM:
            diverged = True
            break
        if (
            stop_j_below is not None
            and stop_grad_sq_below is not None
            and J[i] < stop_j_below
            and gn[i] ** 2 <= stop_grad_sq_below
        ):
            break

    n = rounds_run
    return TrajectoryResult(
        w_hist=w_hist[: n + 1],
        J=J[: n + 1],
        grad_norm=gn[: n + 1],
        s_norm=None if sn is None else sn[:n],
        d_norm=None if dn is None else dn[:n],
        residual=None if res is None else res[:n],
        rounds_run=n,
        diverged=diverged,
        records=records,
    )

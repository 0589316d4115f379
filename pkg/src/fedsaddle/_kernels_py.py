"""Vectorized fallback kernels (numpy).

Same contract as the compiled extension ``fedsaddle._kernels``: identical
stream addressing, identical draw layouts, per-trial arithmetic in the same
order up to floating-point reassociation inside vectorized reductions.

Kind codes: 0 = minibatch (with replacement, batch < N), 1 = single sample
plus additive noise, 2 = exact gradient (plus Gaussian noise when sigma > 0).
A straggler wrapper is flagged separately (swrap/sdelta).
"""

from __future__ import annotations

import numpy as np

from .rng import (
    P_COIN,
    P_PARTICIPANTS,
    P_PERTURB,
    P_SAMPLE,
    Streams,
    laplace_from_u64,
    u01,
)

IS_COMPILED = False

_DIST_GAUSS = 0
_DIST_LAPLACE = 1


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(-np.abs(x))))


def exact_grads(w, H, gam, rho, d1):
    """Exact per-agent gradients at a shared point; (K, dim)."""
    K, N, d2 = H.shape
    w1 = w[:d1]
    W2 = w[d1:].reshape(d1, d2)
    u = W2.T @ w1  # (d2,)
    a = H @ u  # (K, N)
    c = -gam * _sigmoid(-gam * a)  # (K, N)
    HW = H @ W2.T  # (K, N, d1)
    gw1 = np.einsum("kn,kni->ki", c, HW) / N + rho * w1[None, :]
    hbar = np.einsum("kn,knj->kj", c, H) / N  # (K, d2)
    gW2 = w1[None, :, None] * hbar[:, None, :] + rho * W2[None, :, :]
    return np.concatenate([gw1, gW2.reshape(K, -1)], axis=1)


def losses(w, H, gam, rho, d1):
    """Per-agent empirical costs at a shared point; (K,)."""
    K, N, d2 = H.shape
    w1 = w[:d1]
    W2 = w[d1:].reshape(d1, d2)
    a = H @ (W2.T @ w1)
    vals = _softplus(-gam * a).mean(axis=1)
    reg = 0.5 * rho * (w1 @ w1 + np.sum(W2 * W2))
    return vals + reg


def _participants(streams, rnds, K, L):
    """Partial Fisher-Yates per round; returns sorted (R, L) agent ids."""
    R = len(rnds)
    words = streams.u64_grid(P_PARTICIPANTS, rnds, 0, 0, L)  # (R, L)
    perm = np.tile(np.arange(K, dtype=np.int64), (R, 1))
    rows = np.arange(R)
    for i in range(L):
        j = i + (words[:, i] % np.uint64(K - i)).astype(np.int64)
        tmp = perm[rows, j].copy()
        perm[rows, j] = perm[rows, i]
        perm[rows, i] = tmp
    return np.sort(perm[:, :L], axis=1)


def _perturbations(streams, rnds_f, agents_f, E_max, dim, params):
    codes, batches, sigmas, dists, swraps, sdeltas = params
    code_f = codes[agents_f]
    sig_f = sigmas[agents_f]
    dist_f = dists[agents_f]
    needs = (code_f == 1) | ((code_f == 2) & (sig_f > 0))
    if not np.any(needs):
        return None
    epochs = np.arange(1, E_max + 1, dtype=np.uint32)
    pert = np.zeros((len(agents_f), E_max, dim))
    if np.any(needs & (dist_f == _DIST_GAUSS)):
        z = streams.normals_grid(
            P_PERTURB, rnds_f[:, None], agents_f[:, None], epochs[None, :], dim
        )
        mask = (needs & (dist_f == _DIST_GAUSS))[:, None, None]
        pert = np.where(mask, sig_f[:, None, None] * z, pert)
    if np.any(needs & (dist_f == _DIST_LAPLACE)):
        words = streams.u64_grid(
            P_PERTURB, rnds_f[:, None], agents_f[:, None], epochs[None, :], dim
        )
        lap = laplace_from_u64(words, 1.0)
        mask = (needs & (dist_f == _DIST_LAPLACE))[:, None, None]
        pert = np.where(mask, (sig_f / np.sqrt(2.0))[:, None, None] * lap, pert)
    return pert


def _frozen_evals(w, agents_f, idx, pert, scale, H, gam, rho, d1, exact_k, params):
    """Oracle values at the shared point w for every (cell, epoch); (M, E, dim)."""
    codes, batches, sigmas, dists, swraps, sdeltas = params
    K, N, d2 = H.shape
    dim = d1 + d1 * d2
    M = len(agents_f)
    E_max = scale.shape[1]
    code_f = codes[agents_f]
    out = np.zeros((M, E_max, dim))

    sample_rows = code_f <= 1
    if np.any(sample_rows):
        w1 = w[:d1]
        W2 = w[d1:].reshape(d1, d2)
        u = W2.T @ w1
        B_max = idx.shape[2]
        h = H[agents_f[:, None, None], idx]  # (M, E, B, d2)
        g = gam[agents_f[:, None, None], idx]  # (M, E, B)
        a = h @ u
        c = -g * _sigmoid(-g * a)
        bcount = np.where(code_f == 1, 1, np.maximum(batches[agents_f], 1))  # (M,)
        bmask = np.arange(B_max)[None, None, :] < bcount[:, None, None]
        cw = np.where(bmask, c, 0.0)
        hw2 = h @ W2.T  # (M, E, B, d1)
        gw1 = np.einsum("meb,mebi->mei", cw, hw2) / bcount[:, None, None]
        hbar = np.einsum("meb,mebj->mej", cw, h) / bcount[:, None, None]
        gW2 = w1[None, None, :, None] * hbar[:, :, None, :]  # (M, E, d1, d2)
        vals = np.concatenate([gw1, gW2.reshape(M, E_max, -1)], axis=2)
        vals += rho * w[None, None, :]
        out[sample_rows] = vals[sample_rows]

    exact_rows = code_f == 2
    if np.any(exact_rows):
        out[exact_rows] = exact_k[agents_f[exact_rows]][:, None, :]

    if pert is not None:
        out += pert
    return out * scale[:, :, None]


def _rowwise_eval(wrows, agents_f, e_index, idx, pert, scale, H, gam, rho, d1, params):
    """Oracle values at per-row points for epoch ``e_index`` (0-based); (M, dim)."""
    codes, batches, sigmas, dists, swraps, sdeltas = params
    K, N, d2 = H.shape
    dim = d1 + d1 * d2
    M = wrows.shape[0]
    code_f = codes[agents_f]
    w1r = wrows[:, :d1]
    W2r = wrows[:, d1:].reshape(M, d1, d2)
    out = np.zeros((M, dim))

    sample_rows = code_f <= 1
    if np.any(sample_rows):
        B_max = idx.shape[2]
        h = H[agents_f[:, None], idx[:, e_index, :]]  # (M, B, d2)
        g = gam[agents_f[:, None], idx[:, e_index, :]]  # (M, B)
        ur = np.einsum("mij,mi->mj", W2r, w1r)  # (M, d2)
        a = np.einsum("mbj,mj->mb", h, ur)
        c = -g * _sigmoid(-g * a)
        bcount = np.where(code_f == 1, 1, np.maximum(batches[agents_f], 1))
        bmask = np.arange(B_max)[None, :] < bcount[:, None]
        cw = np.where(bmask, c, 0.0)
        hw = np.einsum("mij,mbj->mbi", W2r, h)  # (M, B, d1)
        gw1 = np.einsum("mb,mbi->mi", cw, hw) / bcount[:, None]
        hbar = np.einsum("mb,mbj->mj", cw, h) / bcount[:, None]
        gW2 = w1r[:, :, None] * hbar[:, None, :]
        vals = np.concatenate([gw1, gW2.reshape(M, -1)], axis=1)
        vals += rho * wrows
        out[sample_rows] = vals[sample_rows]

    exact_rows = code_f == 2
    if np.any(exact_rows):
        sel = np.flatnonzero(exact_rows)
        Hk = H[agents_f[sel]]  # (m, N, d2)
        gk = gam[agents_f[sel]]
        w1s = w1r[sel]
        W2s = W2r[sel]
        us = np.einsum("mij,mi->mj", W2s, w1s)
        a = np.einsum("mnj,mj->mn", Hk, us)
        c = -gk * _sigmoid(-gk * a)
        hw = np.einsum("mij,mnj->mni", W2s, Hk)
        gw1 = np.einsum("mn,mni->mi", c, hw) / N
        hbar = np.einsum("mn,mnj->mj", c, Hk) / N
        gW2 = w1s[:, :, None] * hbar[:, None, :]
        vals = np.concatenate([gw1, gW2.reshape(len(sel), -1)], axis=1)
        vals += rho * wrows[sel]
        out[sel] = vals

    if pert is not None:
        out += pert[:, e_index, :]
    return out * scale[:, e_index, None]


def _chunk_size(L, E_max, B_max, dim, target=1 << 21):
    cells = max(1, L * E_max * max(B_max, 1) * max(dim, 1))
    return max(16, int(target // cells))


def trial_moments(
    seed,
    w,
    H,
    gam,
    rho,
    d1,
    p,
    E,
    L,
    mu,
    codes,
    batches,
    sigmas,
    dists,
    swraps,
    sdeltas,
    trials,
    trial_offset,
    need_d,
):
    """Monte Carlo replication of one round at a frozen point.

    Returns raw sums so chunks merge order-independently:
    (n, sum_s, sum_s2, sum_ssT, sum_s2s2, sum_s4, sum_s8, sum_d4, sum_d8).
    """
    w = np.asarray(w, dtype=np.float64)
    K, N, d2 = H.shape
    dim = w.size
    params = (codes, batches, sigmas, dists, swraps, sdeltas)
    streams = Streams(seed)
    E_max = int(E.max())
    B_max = int(batches.max(initial=1))

    exact_k = exact_grads(w, H, gam, rho, d1)
    gradJ = (p[:, None] * exact_k).sum(axis=0)

    sum_s = np.zeros(dim)
    sum_s2 = np.zeros(dim)
    sum_ssT = np.zeros((dim, dim))
    sum_s2s2 = np.zeros((dim, dim))
    sum_s4 = 0.0
    sum_s8 = 0.0
    sum_d4 = 0.0
    sum_d8 = 0.0

    chunk = _chunk_size(L, E_max, B_max, dim)
    done = 0
    while done < trials:
        R = min(chunk, trials - done)
        rnds = np.arange(trial_offset + done, trial_offset + done + R, dtype=np.uint32)
        parts = _participants(streams, rnds, K, L)  # (R, L)
        agents_f = parts.reshape(-1)
        rnds_f = np.repeat(rnds, L)

        epochs = np.arange(1, E_max + 1, dtype=np.uint32)
        scale = np.ones((R * L, E_max))
        if np.any(swraps[agents_f] == 1):
            words = streams.u64_grid(
                P_COIN, rnds_f[:, None], agents_f[:, None], epochs[None, :], 1
            )[..., 0]
            u = u01(words)
            deltas = sdeltas[agents_f][:, None]
            coin = u < deltas
            wrapped = (swraps[agents_f] == 1)[:, None]
            scale = np.where(wrapped, np.where(coin, 1.0 / deltas, 0.0), 1.0)

        idx = None
        if np.any(codes[agents_f] <= 1):
            words = streams.u64_grid(
                P_SAMPLE, rnds_f[:, None], agents_f[:, None], epochs[None, :], B_max
            )
            idx = (words % np.uint64(N)).astype(np.int64)
        pert = _perturbations(streams, rnds_f, agents_f, E_max, dim, params)

        frozen = _frozen_evals(
            w, agents_f, idx, pert, scale, H, gam, rho, d1, exact_k, params
        )  # (R*L, E_max, dim)
        emask = epochs[None, :] <= E[agents_f][:, None]
        coeff = (p[agents_f] / E[agents_f])[:, None]  # (R*L, 1)
        s_cells = np.einsum("me,med->md", np.where(emask, coeff, 0.0), frozen)
        s = (K / L) * s_cells.reshape(R, L, dim).sum(axis=1) - gradJ[None, :]

        sum_s += s.sum(axis=0)
        sum_s2 += (s * s).sum(axis=0)
        sum_ssT += s.T @ s
        s2 = s * s
        sum_s2s2 += s2.T @ s2
        q = s2.sum(axis=1)
        sum_s4 += float((q * q).sum())
        sum_s8 += float((q**4).sum())

        if need_d and E_max > 1:
            wrows = np.tile(w, (R * L, 1))
            d_cells = np.zeros((R * L, dim))
            step = (mu * K * p[agents_f] / E[agents_f])[:, None]
            active0 = emask[:, 0]
            g1 = frozen[:, 0, :]
            wrows = wrows - np.where(active0[:, None], step * g1, 0.0)
            for e in range(1, E_max):
                active = emask[:, e]
                g_evol = _rowwise_eval(
                    wrows, agents_f, e, idx, pert, scale, H, gam, rho, d1, params
                )
                cf = np.where(active, coeff[:, 0], 0.0)[:, None]
                d_cells += cf * (g_evol - frozen[:, e, :])
                wrows = wrows - np.where(active[:, None], step * g_evol, 0.0)
            d = (K / L) * d_cells.reshape(R, L, dim).sum(axis=1)
            qd = (d * d).sum(axis=1)
            sum_d4 += float((qd * qd).sum())
            sum_d8 += float((qd**4).sum())
        done += R

    return (
        trials,
        sum_s,
        sum_s2,
        sum_ssT,
        sum_s2s2,
        sum_s4,
        sum_s8,
        sum_d4,
        sum_d8,
    )


def agent_noise(
    seed,
    w,
    k,
    H,
    gam,
    rho,
    d1,
    code,
    batch,
    sigma,
    dist,
    swrap,
    sdelta,
    epochs,
    trials,
    trial_offset,
):
    """Per-agent noise draws at a frozen point, pooled and epoch-averaged.

    Returns (n_single, sum_s, sum_s2, sum_ssT, sum_s2s2, sum_s4, sum_s8,
    n_avg, sum_avg4, sum_avg8).
    """
    w = np.asarray(w, dtype=np.float64)
    K, N, d2 = H.shape
    dim = w.size
    codes = np.full(K, code, dtype=np.int64)
    batches = np.full(K, batch, dtype=np.int64)
    sigmas = np.full(K, sigma, dtype=np.float64)
    dists = np.full(K, dist, dtype=np.int64)
    swraps = np.full(K, swrap, dtype=np.int64)
    sdeltas = np.full(K, sdelta, dtype=np.float64)
    params = (codes, batches, sigmas, dists, swraps, sdeltas)
    streams = Streams(seed)
    gk = exact_grads(w, H, gam, rho, d1)[k]

    sum_s = np.zeros(dim)
    sum_s2 = np.zeros(dim)
    sum_ssT = np.zeros((dim, dim))
    sum_s2s2 = np.zeros((dim, dim))
    sum_s4 = sum_s8 = 0.0
    sum_avg4 = sum_avg8 = 0.0

    chunk = _chunk_size(1, epochs, max(batch, 1), dim)
    done = 0
    while done < trials:
        R = min(chunk, trials - done)
        rnds_f = np.arange(trial_offset + done, trial_offset + done + R, dtype=np.uint32)
        agents_f = np.full(R, k, dtype=np.int64)

        ep = np.arange(1, epochs + 1, dtype=np.uint32)
        scale = np.ones((R, epochs))
        if swrap == 1:
            words = streams.u64_grid(
                P_COIN, rnds_f[:, None], agents_f[:, None], ep[None, :], 1
            )[..., 0]
            scale = np.where(u01(words) < sdelta, 1.0 / sdelta, 0.0)
        idx = None
        if code <= 1:
            B_eff = 1 if code == 1 else batch
            words = streams.u64_grid(
                P_SAMPLE, rnds_f[:, None], agents_f[:, None], ep[None, :], max(B_eff, 1)
            )
            idx = (words % np.uint64(N)).astype(np.int64)
        pert = _perturbations(streams, rnds_f, agents_f, epochs, dim, params)
        evals = _frozen_evals(
            w, agents_f, idx, pert, scale, H, gam, rho, d1,
            exact_grads(w, H, gam, rho, d1), params
        )  # (R, epochs, dim)
        s = evals - gk[None, None, :]

        flat = s.reshape(-1, dim)
        sum_s += flat.sum(axis=0)
        sum_s2 += (flat * flat).sum(axis=0)
        sum_ssT += flat.T @ flat
        f2 = flat * flat
        sum_s2s2 += f2.T @ f2
        q = f2.sum(axis=1)
        sum_s4 += float((q * q).sum())
        sum_s8 += float((q**4).sum())

        avg = s.mean(axis=1)
        qa = (avg * avg).sum(axis=1)
        sum_avg4 += float((qa * qa).sum())
        sum_avg8 += float((qa**4).sum())
        done += R

    return (
        trials * epochs,
        sum_s,
        sum_s2,
        sum_ssT,
        sum_s2s2,
        sum_s4,
        sum_s8,
        trials,
        sum_avg4,
        sum_avg8,
    )


def trajectory(
    seed,
    w0,
    rounds,
    H,
    gam,
    rho,
    d1,
    p,
    E,
    L,
    mu,
    codes,
    batches,
    sigmas,
    dists,
    swraps,
    sdeltas,
    compute_decomposition,
    stop_j_below,
    stop_grad_sq_below,
    divergence_norm,
    round_offset=0,
):
    """Sequential rounds; returns per-round scalars and the iterate history.

    Round i consumes the randomness addressed by round_offset + i, so a run
    split into segments reproduces the unsegmented run exactly.
    """
    w = np.asarray(w0, dtype=np.float64).copy()
    K, N, d2 = H.shape
    dim = w.size
    params = (codes, batches, sigmas, dists, swraps, sdeltas)
    streams = Streams(seed)
    E_max = int(E.max())
    B_max = int(batches.max(initial=1))

    w_hist = np.zeros((rounds + 1, dim))
    J = np.zeros(rounds + 1)
    gn = np.zeros(rounds + 1)
    s_norm = np.full(rounds, np.nan)
    d_norm = np.full(rounds, np.nan)
    residual = np.full(rounds, np.nan)

    exact_k = exact_grads(w, H, gam, rho, d1)
    gradJ = (p[:, None] * exact_k).sum(axis=0)
    w_hist[0] = w
    J[0] = float(p @ losses(w, H, gam, rho, d1))
    gn[0] = float(np.linalg.norm(gradJ))

    diverged = False
    rounds_run = 0
    for i in range(1, rounds + 1):
        rnd = np.array([round_offset + i], dtype=np.uint32)
        parts = _participants(streams, rnd, K, L)[0]  # (L,) sorted
        agents_f = parts
        rnds_f = np.full(L, round_offset + i, dtype=np.uint32)

        epochs = np.arange(1, E_max + 1, dtype=np.uint32)
        scale = np.ones((L, E_max))
        if np.any(swraps[agents_f] == 1):
            words = streams.u64_grid(
                P_COIN, rnds_f[:, None], agents_f[:, None], epochs[None, :], 1
            )[..., 0]
            u = u01(words)
            deltas = sdeltas[agents_f][:, None]
            coin = u < deltas
            wrapped = (swraps[agents_f] == 1)[:, None]
            scale = np.where(wrapped, np.where(coin, 1.0 / deltas, 0.0), 1.0)
        idx = None
        if np.any(codes[agents_f] <= 1):
            words = streams.u64_grid(
                P_SAMPLE, rnds_f[:, None], agents_f[:, None], epochs[None, :], B_max
            )
            idx = (words % np.uint64(N)).astype(np.int64)
        pert = _perturbations(streams, rnds_f, agents_f, E_max, dim, params)

        emask = epochs[None, :] <= E[agents_f][:, None]
        step = (mu * K * p[agents_f] / E[agents_f])[:, None]
        coeff = (p[agents_f] / E[agents_f])[:, None]

        frozen = None
        if compute_decomposition:
            frozen = _frozen_evals(
                w, agents_f, idx, pert, scale, H, gam, rho, d1, exact_k, params
            )

        wrows = np.tile(w, (L, 1))
        d_cells = np.zeros((L, dim)) if compute_decomposition else None
        s_cells = np.zeros((L, dim)) if compute_decomposition else None
        for e in range(E_max):
            active = emask[:, e]
            if e == 0:
                g_evol = (
                    frozen[:, 0, :]
                    if frozen is not None
                    else _rowwise_eval(
                        wrows, agents_f, 0, idx, pert, scale, H, gam, rho, d1, params
                    )
                )
            else:
                g_evol = _rowwise_eval(
                    wrows, agents_f, e, idx, pert, scale, H, gam, rho, d1, params
                )
            if compute_decomposition:
                cf = np.where(active, coeff[:, 0], 0.0)[:, None]
                s_cells += cf * frozen[:, e, :]
                d_cells += cf * (g_evol - frozen[:, e, :])
            wrows = wrows - np.where(active[:, None], step * g_evol, 0.0)

        w_new = wrows.sum(axis=0) / L
        if compute_decomposition:
            s = (K / L) * s_cells.sum(axis=0) - gradJ
            dvec = (K / L) * d_cells.sum(axis=0)
            recon = w - mu * (gradJ + s + dvec)
            s_norm[i - 1] = float(np.linalg.norm(s))
            d_norm[i - 1] = float(np.linalg.norm(dvec))
            residual[i - 1] = float(np.linalg.norm(w_new - recon))

        w = w_new
        exact_k = exact_grads(w, H, gam, rho, d1)
        gradJ = (p[:, None] * exact_k).sum(axis=0)
        w_hist[i] = w
        J[i] = float(p @ losses(w, H, gam, rho, d1))
        gn[i] = float(np.linalg.norm(gradJ))
        rounds_run = i
        if np.linalg.norm(w) > divergence_norm:
            diverged = True
            break
        if (
            not np.isnan(stop_j_below)
            and not np.isnan(stop_grad_sq_below)
            and J[i] < stop_j_below
            and gn[i] ** 2 <= stop_grad_sq_below
        ):
            break

    return (
        w_hist[: rounds_run + 1],
        J[: rounds_run + 1],
        gn[: rounds_run + 1],
        s_norm[:rounds_run],
        d_norm[:rounds_run],
        residual[:rounds_run],
        rounds_run,
        diverged,
    )

# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: Philox-addressed round simulation (twin of _kernels_py).

Draw addressing, layouts, and per-trial arithmetic mirror the fallback;
results agree up to floating-point reassociation in vectorized reductions.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, exp, fabs, log, log1p, sin, sqrt
from libc.stdint cimport int64_t, uint32_t, uint64_t

cnp.import_array()

IS_COMPILED = True

cdef double TWO_PI = 6.283185307179586476925286766559
cdef double INV53 = 1.1102230246251565404236316680908e-16  # 2^-53

cdef int P_PARTICIPANTS = 1
cdef int P_SAMPLE = 2
cdef int P_PERTURB = 3
cdef int P_COIN = 4


cdef inline void _philox(uint32_t c0, uint32_t c1, uint32_t c2, uint32_t c3,
                         uint32_t k0, uint32_t k1, uint32_t* out) noexcept nogil:
    cdef uint32_t x0 = c0, x1 = c1, x2 = c2, x3 = c3
    cdef uint64_t p0, p1
    cdef int r
    for r in range(10):
        p0 = (<uint64_t> x0) * <uint64_t> 0xD2511F53u
        p1 = (<uint64_t> x2) * <uint64_t> 0xCD9E8D57u
        x0 = (<uint32_t> (p1 >> 32)) ^ x1 ^ k0
        x1 = <uint32_t> p1
        x2 = (<uint32_t> (p0 >> 32)) ^ x3 ^ k1
        x3 = <uint32_t> p0
        k0 = k0 + <uint32_t> 0x9E3779B9u
        k1 = k1 + <uint32_t> 0xBB67AE85u
    out[0] = x0
    out[1] = x1
    out[2] = x2
    out[3] = x3


cdef inline void _cell_call(uint64_t seed, int purpose, uint32_t rnd, uint32_t agent,
                            uint32_t epoch, uint32_t draw,
                            uint64_t* w0, uint64_t* w1) noexcept nogil:
    cdef uint32_t out[4]
    cdef uint32_t c3 = ((<uint32_t> purpose) << 24) | (epoch & <uint32_t> 0xFFFFFF)
    _philox(draw, agent, rnd, c3,
            <uint32_t> (seed & <uint64_t> 0xFFFFFFFFu),
            <uint32_t> (seed >> 32), out)
    w0[0] = (<uint64_t> out[0]) | ((<uint64_t> out[1]) << 32)
    w1[0] = (<uint64_t> out[2]) | ((<uint64_t> out[3]) << 32)


cdef inline uint64_t _cell_u64(uint64_t seed, int purpose, uint32_t rnd, uint32_t agent,
                               uint32_t epoch, int j) noexcept nogil:
    cdef uint64_t w0, w1
    _cell_call(seed, purpose, rnd, agent, epoch, <uint32_t> (j >> 1), &w0, &w1)
    if j & 1:
        return w1
    return w0


cdef inline double _u01(uint64_t x) noexcept nogil:
    return (<double> (x >> 11)) * INV53


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _softplus(double x) noexcept nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef void _normals(uint64_t seed, int purpose, uint32_t rnd, uint32_t agent,
                   uint32_t epoch, int count, double* out) noexcept nogil:
    cdef int npairs = (count + 1) >> 1
    cdef int t
    cdef uint64_t w0, w1
    cdef double u1, u2, r, ang
    for t in range(npairs):
        _cell_call(seed, purpose, rnd, agent, epoch, <uint32_t> t, &w0, &w1)
        u1 = ((<double> (w0 >> 11)) + 1.0) * INV53
        u2 = (<double> (w1 >> 11)) * INV53
        r = sqrt(-2.0 * log(u1))
        ang = TWO_PI * u2
        out[2 * t] = r * cos(ang)
        if 2 * t + 1 < count:
            out[2 * t + 1] = r * sin(ang)


cdef void _laplaces(uint64_t seed, int purpose, uint32_t rnd, uint32_t agent,
                    uint32_t epoch, int count, double scale, double* out) noexcept nogil:
    cdef int j
    cdef uint64_t x
    cdef double u, c, sign
    for j in range(count):
        x = _cell_u64(seed, purpose, rnd, agent, epoch, j)
        u = ((<double> (x >> 11)) + 0.5) * INV53
        c = u - 0.5
        sign = 1.0 if c > 0 else (-1.0 if c < 0 else 0.0)
        out[j] = -scale * sign * log1p(-2.0 * fabs(c))


cdef void _sample_grad_core(double[::1] x, double[:, :, ::1] H, double[:, ::1] gam,
                            int k, int idx, int d1, int d2, double* acc_w1,
                            double* acc_h, double* wh) noexcept nogil:
    """Accumulate the data-dependent parts of one per-sample gradient.

    acc_w1 += c * (W2 h),  acc_h += c * h  with c = -g sig(-g a); the caller
    assembles gW2 = w1 outer acc_h and adds the regularizer.
    """
    cdef int i, j
    cdef double a = 0.0, c, g
    for i in range(d1):
        wh[i] = 0.0
        for j in range(d2):
            wh[i] += x[d1 + i * d2 + j] * H[k, idx, j]
        a += x[i] * wh[i]
    g = gam[k, idx]
    c = -g * _sigmoid(-g * a)
    for i in range(d1):
        acc_w1[i] += c * wh[i]
    for j in range(d2):
        acc_h[j] += c * H[k, idx, j]


cdef void _exact_grad_row(double[::1] x, double[:, :, ::1] H, double[:, ::1] gam,
                          int k, double rho, int d1, int d2, double* out,
                          double* scratch) noexcept nogil:
    """Exact per-agent gradient at x; scratch needs d1 + d2 + d1 doubles."""
    cdef int N = H.shape[1]
    cdef int i, j, n
    cdef double* acc_w1 = scratch
    cdef double* acc_h = scratch + d1
    cdef double* wh = scratch + d1 + d2
    for i in range(d1):
        acc_w1[i] = 0.0
    for j in range(d2):
        acc_h[j] = 0.0
    for n in range(N):
        _sample_grad_core(x, H, gam, k, n, d1, d2, acc_w1, acc_h, wh)
    for i in range(d1):
        out[i] = acc_w1[i] / N + rho * x[i]
    for i in range(d1):
        for j in range(d2):
            out[d1 + i * d2 + j] = x[i] * (acc_h[j] / N) + rho * x[d1 + i * d2 + j]


cdef double _loss_row(double[::1] x, double[:, :, ::1] H, double[:, ::1] gam,
                      int k, double rho, int d1, int d2) noexcept nogil:
    cdef int N = H.shape[1]
    cdef int i, j, n
    cdef double a, wh, acc = 0.0, reg = 0.0
    for n in range(N):
        a = 0.0
        for i in range(d1):
            wh = 0.0
            for j in range(d2):
                wh += x[d1 + i * d2 + j] * H[k, n, j]
            a += x[i] * wh
        acc += _softplus(-gam[k, n] * a)
    for i in range(d1):
        reg += x[i] * x[i]
    for i in range(d1 * d2):
        reg += x[d1 + i] * x[d1 + i]
    return acc / N + 0.5 * rho * reg


cdef void _eval_oracle(uint64_t seed, uint32_t rnd, int k, uint32_t epoch,
                       double[::1] x, double[:, :, ::1] H, double[:, ::1] gam,
                       double rho, int d1, int d2,
                       int code, int batch, double sigma, int dist,
                       int swrap, double sdelta,
                       double[:, ::1] exact_cache, bint use_cache,
                       double* out, double* scratch) noexcept nogil:
    """One oracle evaluation at x with the cell's frozen randomness.

    scratch needs 2*dim + d1 + d2 + d1 doubles (dim = d1 + d1*d2).
    """
    cdef int dim = d1 + d1 * d2
    cdef int i, j, b, idx
    cdef int N = H.shape[1]
    cdef double scale = 1.0
    cdef double u
    cdef double* acc_w1 = scratch
    cdef double* acc_h = scratch + d1
    cdef double* wh = scratch + d1 + d2
    cdef double* pert = scratch + d1 + d2 + d1

    if swrap:
        u = _u01(_cell_u64(seed, P_COIN, rnd, <uint32_t> k, epoch, 0))
        scale = (1.0 / sdelta) if u < sdelta else 0.0

    if code == 2:
        if use_cache:
            for i in range(dim):
                out[i] = exact_cache[k, i]
        else:
            _exact_grad_row(x, H, gam, k, rho, d1, d2, out, scratch)
    else:
        for i in range(d1):
            acc_w1[i] = 0.0
        for j in range(d2):
            acc_h[j] = 0.0
        if code == 0:
            for b in range(batch):
                idx = <int> (_cell_u64(seed, P_SAMPLE, rnd, <uint32_t> k, epoch, b)
                             % <uint64_t> N)
                _sample_grad_core(x, H, gam, k, idx, d1, d2, acc_w1, acc_h, wh)
            for i in range(d1):
                out[i] = acc_w1[i] / batch + rho * x[i]
            for i in range(d1):
                for j in range(d2):
                    out[d1 + i * d2 + j] = x[i] * (acc_h[j] / batch) + rho * x[d1 + i * d2 + j]
        else:
            idx = <int> (_cell_u64(seed, P_SAMPLE, rnd, <uint32_t> k, epoch, 0)
                         % <uint64_t> N)
            _sample_grad_core(x, H, gam, k, idx, d1, d2, acc_w1, acc_h, wh)
            for i in range(d1):
                out[i] = acc_w1[i] + rho * x[i]
            for i in range(d1):
                for j in range(d2):
                    out[d1 + i * d2 + j] = x[i] * acc_h[j] + rho * x[d1 + i * d2 + j]

    if (code == 1 or (code == 2 and sigma > 0.0)):
        if dist == 0:
            _normals(seed, P_PERTURB, rnd, <uint32_t> k, epoch, dim, pert)
            for i in range(dim):
                out[i] += sigma * pert[i]
        else:
            _laplaces(seed, P_PERTURB, rnd, <uint32_t> k, epoch, dim,
                      sigma / sqrt(2.0), pert)
            for i in range(dim):
                out[i] += pert[i]

    if scale != 1.0:
        for i in range(dim):
            out[i] *= scale


cdef void _draw_participants(uint64_t seed, uint32_t rnd, int K, int L,
                             int64_t* perm, int64_t* parts) noexcept nogil:
    cdef int i, j, pos
    cdef int64_t tmp, key
    for i in range(K):
        perm[i] = i
    for i in range(L):
        j = i + <int> (_cell_u64(seed, P_PARTICIPANTS, rnd, 0, 0, i)
                       % <uint64_t> (K - i))
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    for i in range(L):
        parts[i] = perm[i]
    # insertion sort for canonical aggregation order
    for i in range(1, L):
        key = parts[i]
        pos = i - 1
        while pos >= 0 and parts[pos] > key:
            parts[pos + 1] = parts[pos]
            pos -= 1
        parts[pos + 1] = key


def trial_moments(seed, w, H, gam, rho, d1, p, E, L, mu,
                  codes, batches, sigmas, dists, swraps, sdeltas,
                  trials, trial_offset, need_d):
    """Monte Carlo replication of one round at a frozen point; raw sums."""
    cdef uint64_t c_seed = <uint64_t> seed
    cdef double[::1] w_v = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[:, :, ::1] H_v = np.ascontiguousarray(H, dtype=np.float64)
    cdef double[:, ::1] gam_v = np.ascontiguousarray(gam, dtype=np.float64)
    cdef double c_rho = rho
    cdef int c_d1 = d1
    cdef double[::1] p_v = np.ascontiguousarray(p, dtype=np.float64)
    cdef int64_t[::1] E_v = np.ascontiguousarray(E, dtype=np.int64)
    cdef int c_L = L
    cdef double c_mu = mu
    cdef int64_t[::1] codes_v = np.ascontiguousarray(codes, dtype=np.int64)
    cdef int64_t[::1] batches_v = np.ascontiguousarray(batches, dtype=np.int64)
    cdef double[::1] sigmas_v = np.ascontiguousarray(sigmas, dtype=np.float64)
    cdef int64_t[::1] dists_v = np.ascontiguousarray(dists, dtype=np.int64)
    cdef int64_t[::1] swraps_v = np.ascontiguousarray(swraps, dtype=np.int64)
    cdef double[::1] sdeltas_v = np.ascontiguousarray(sdeltas, dtype=np.float64)
    cdef int64_t c_trials = trials
    cdef int64_t c_offset = trial_offset
    cdef bint c_need_d = need_d

    cdef int K = H_v.shape[0]
    cdef int d2 = H_v.shape[2]
    cdef int dim = c_d1 + c_d1 * d2
    cdef int i, j, e, slot, k, Ek
    cdef int64_t t
    cdef uint32_t rnd
    cdef double coeff, step, q, qd, ratio

    exact_np = np.zeros((K, dim))
    cdef double[:, ::1] exact_cache = exact_np
    scratch_np = np.zeros(3 * dim + c_d1 + d2 + c_d1 + 8)
    cdef double[::1] scratch_v = scratch_np
    cdef double* scratch = &scratch_v[0]
    gradJ_np = np.zeros(dim)
    cdef double[::1] gradJ = gradJ_np

    for k in range(K):
        _exact_grad_row(w_v, H_v, gam_v, k, c_rho, c_d1, d2, &exact_cache[k, 0], scratch)
    for i in range(dim):
        gradJ[i] = 0.0
        for k in range(K):
            gradJ[i] += p_v[k] * exact_cache[k, i]

    sum_s_np = np.zeros(dim)
    sum_s2_np = np.zeros(dim)
    sum_ssT_np = np.zeros((dim, dim))
    sum_s2s2_np = np.zeros((dim, dim))
    cdef double[::1] sum_s = sum_s_np
    cdef double[::1] sum_s2 = sum_s2_np
    cdef double[:, ::1] sum_ssT = sum_ssT_np
    cdef double[:, ::1] sum_s2s2 = sum_s2s2_np
    cdef double sum_s4 = 0.0, sum_s8 = 0.0, sum_d4 = 0.0, sum_d8 = 0.0

    perm_np = np.zeros(K, dtype=np.int64)
    parts_np = np.zeros(c_L, dtype=np.int64)
    cdef int64_t[::1] perm = perm_np
    cdef int64_t[::1] parts = parts_np
    svec_np = np.zeros(dim)
    dvec_np = np.zeros(dim)
    gf_np = np.zeros(dim)
    ge_np = np.zeros(dim)
    wk_np = np.zeros(dim)
    cdef double[::1] svec = svec_np
    cdef double[::1] dvec = dvec_np
    cdef double[::1] g_frozen = gf_np
    cdef double[::1] g_evol = ge_np
    cdef double[::1] wk = wk_np

    ratio = (<double> K) / (<double> c_L)
    with nogil:
        for t in range(c_trials):
            rnd = <uint32_t> (c_offset + t)
            _draw_participants(c_seed, rnd, K, c_L, &perm[0], &parts[0])
            for i in range(dim):
                svec[i] = 0.0
                dvec[i] = 0.0
            for slot in range(c_L):
                k = <int> parts[slot]
                Ek = <int> E_v[k]
                coeff = p_v[k] / Ek
                step = c_mu * K * p_v[k] / Ek
                if c_need_d:
                    for i in range(dim):
                        wk[i] = w_v[i]
                for e in range(1, Ek + 1):
                    _eval_oracle(c_seed, rnd, k, <uint32_t> e, w_v, H_v, gam_v,
                                 c_rho, c_d1, d2,
                                 <int> codes_v[k], <int> batches_v[k], sigmas_v[k],
                                 <int> dists_v[k], <int> swraps_v[k], sdeltas_v[k],
                                 exact_cache, 1, &g_frozen[0], scratch)
                    for i in range(dim):
                        svec[i] += coeff * g_frozen[i]
                    if c_need_d:
                        if e == 1:
                            for i in range(dim):
                                g_evol[i] = g_frozen[i]
                        else:
                            _eval_oracle(c_seed, rnd, k, <uint32_t> e, wk, H_v, gam_v,
                                         c_rho, c_d1, d2,
                                         <int> codes_v[k], <int> batches_v[k], sigmas_v[k],
                                         <int> dists_v[k], <int> swraps_v[k], sdeltas_v[k],
                                         exact_cache, 0, &g_evol[0], scratch)
                        for i in range(dim):
                            dvec[i] += coeff * (g_evol[i] - g_frozen[i])
                            wk[i] -= step * g_evol[i]
            q = 0.0
            for i in range(dim):
                svec[i] = ratio * svec[i] - gradJ[i]
                q += svec[i] * svec[i]
            for i in range(dim):
                sum_s[i] += svec[i]
                sum_s2[i] += svec[i] * svec[i]
                for j in range(dim):
                    sum_ssT[i, j] += svec[i] * svec[j]
                    sum_s2s2[i, j] += svec[i] * svec[i] * svec[j] * svec[j]
            sum_s4 += q * q
            sum_s8 += q * q * q * q
            if c_need_d:
                qd = 0.0
                for i in range(dim):
                    dvec[i] = ratio * dvec[i]
                    qd += dvec[i] * dvec[i]
                sum_d4 += qd * qd
                sum_d8 += qd * qd * qd * qd

    return (int(c_trials), sum_s_np, sum_s2_np, sum_ssT_np, sum_s2s2_np,
            sum_s4, sum_s8, sum_d4, sum_d8)


def agent_noise(seed, w, k, H, gam, rho, d1, code, batch, sigma, dist,
                swrap, sdelta, epochs, trials, trial_offset):
    """Per-agent noise draws at a frozen point; pooled and epoch-averaged."""
    cdef uint64_t c_seed = <uint64_t> seed
    cdef double[::1] w_v = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[:, :, ::1] H_v = np.ascontiguousarray(H, dtype=np.float64)
    cdef double[:, ::1] gam_v = np.ascontiguousarray(gam, dtype=np.float64)
    cdef double c_rho = rho
    cdef int c_d1 = d1
    cdef int c_k = k
    cdef int c_code = code, c_batch = batch, c_dist = dist, c_swrap = swrap
    cdef double c_sigma = sigma, c_sdelta = sdelta
    cdef int c_epochs = epochs
    cdef int64_t c_trials = trials
    cdef int64_t c_offset = trial_offset

    cdef int K = H_v.shape[0]
    cdef int d2 = H_v.shape[2]
    cdef int dim = c_d1 + c_d1 * d2
    cdef int i, j, e
    cdef int64_t t
    cdef double q, qa

    exact_np = np.zeros((K, dim))
    cdef double[:, ::1] exact_cache = exact_np
    scratch_np = np.zeros(3 * dim + c_d1 + d2 + c_d1 + 8)
    cdef double[::1] scratch_v = scratch_np
    cdef double* scratch = &scratch_v[0]
    _exact_grad_row(w_v, H_v, gam_v, c_k, c_rho, c_d1, d2, &exact_cache[c_k, 0],
                    scratch)

    sum_s_np = np.zeros(dim)
    sum_s2_np = np.zeros(dim)
    sum_ssT_np = np.zeros((dim, dim))
    sum_s2s2_np = np.zeros((dim, dim))
    cdef double[::1] sum_s = sum_s_np
    cdef double[::1] sum_s2 = sum_s2_np
    cdef double[:, ::1] sum_ssT = sum_ssT_np
    cdef double[:, ::1] sum_s2s2 = sum_s2s2_np
    cdef double sum_s4 = 0.0, sum_s8 = 0.0, sum_avg4 = 0.0, sum_avg8 = 0.0

    g_np = np.zeros(dim)
    avg_np = np.zeros(dim)
    s_np = np.zeros(dim)
    cdef double[::1] g = g_np
    cdef double[::1] avg = avg_np
    cdef double[::1] s = s_np

    with nogil:
        for t in range(c_trials):
            for i in range(dim):
                avg[i] = 0.0
            for e in range(1, c_epochs + 1):
                _eval_oracle(c_seed, <uint32_t> (c_offset + t), c_k, <uint32_t> e,
                             w_v, H_v, gam_v, c_rho, c_d1, d2,
                             c_code, c_batch, c_sigma, c_dist, c_swrap, c_sdelta,
                             exact_cache, 1, &g[0], scratch)
                q = 0.0
                for i in range(dim):
                    s[i] = g[i] - exact_cache[c_k, i]
                    avg[i] += s[i]
                    q += s[i] * s[i]
                for i in range(dim):
                    sum_s[i] += s[i]
                    sum_s2[i] += s[i] * s[i]
                    for j in range(dim):
                        sum_ssT[i, j] += s[i] * s[j]
                        sum_s2s2[i, j] += s[i] * s[i] * s[j] * s[j]
                sum_s4 += q * q
                sum_s8 += q * q * q * q
            qa = 0.0
            for i in range(dim):
                avg[i] /= c_epochs
                qa += avg[i] * avg[i]
            sum_avg4 += qa * qa
            sum_avg8 += qa * qa * qa * qa

    return (int(c_trials) * int(c_epochs), sum_s_np, sum_s2_np, sum_ssT_np,
            sum_s2s2_np, sum_s4, sum_s8, int(c_trials), sum_avg4, sum_avg8)


def trajectory(seed, w0, rounds, H, gam, rho, d1, p, E, L, mu,
               codes, batches, sigmas, dists, swraps, sdeltas,
               compute_decomposition, stop_j_below, stop_grad_sq_below,
               divergence_norm, round_offset=0):
    """Sequential rounds; per-round scalars and the iterate history.

    Round i consumes the randomness addressed by round_offset + i, so a run
    split into segments reproduces the unsegmented run exactly.
    """
    cdef uint64_t c_seed = <uint64_t> seed
    cdef double[:, :, ::1] H_v = np.ascontiguousarray(H, dtype=np.float64)
    cdef double[:, ::1] gam_v = np.ascontiguousarray(gam, dtype=np.float64)
    cdef double c_rho = rho
    cdef int c_d1 = d1
    cdef double[::1] p_v = np.ascontiguousarray(p, dtype=np.float64)
    cdef int64_t[::1] E_v = np.ascontiguousarray(E, dtype=np.int64)
    cdef int c_L = L
    cdef double c_mu = mu
    cdef int64_t[::1] codes_v = np.ascontiguousarray(codes, dtype=np.int64)
    cdef int64_t[::1] batches_v = np.ascontiguousarray(batches, dtype=np.int64)
    cdef double[::1] sigmas_v = np.ascontiguousarray(sigmas, dtype=np.float64)
    cdef int64_t[::1] dists_v = np.ascontiguousarray(dists, dtype=np.int64)
    cdef int64_t[::1] swraps_v = np.ascontiguousarray(swraps, dtype=np.int64)
    cdef double[::1] sdeltas_v = np.ascontiguousarray(sdeltas, dtype=np.float64)
    cdef int c_rounds = rounds
    cdef bint c_decomp = compute_decomposition
    cdef double c_stop_j = stop_j_below
    cdef double c_stop_g = stop_grad_sq_below
    cdef double c_div = divergence_norm
    cdef uint32_t c_roff = <uint32_t> round_offset

    cdef int K = H_v.shape[0]
    cdef int d2 = H_v.shape[2]
    cdef int dim = c_d1 + c_d1 * d2
    cdef int i, e, slot, k, Ek, rr
    cdef uint32_t rnd
    cdef double coeff, step, acc, nrm, ratio
    cdef bint diverged = 0, has_stop

    has_stop = not (c_stop_j != c_stop_j or c_stop_g != c_stop_g)  # NaN check

    w_hist_np = np.zeros((c_rounds + 1, dim))
    J_np = np.zeros(c_rounds + 1)
    gn_np = np.zeros(c_rounds + 1)
    s_norm_np = np.full(c_rounds, np.nan)
    d_norm_np = np.full(c_rounds, np.nan)
    residual_np = np.full(c_rounds, np.nan)
    cdef double[:, ::1] w_hist = w_hist_np
    cdef double[::1] J = J_np
    cdef double[::1] gn = gn_np
    cdef double[::1] s_norm = s_norm_np
    cdef double[::1] d_norm = d_norm_np
    cdef double[::1] residual = residual_np

    exact_np = np.zeros((K, dim))
    cdef double[:, ::1] exact_cache = exact_np
    scratch_np = np.zeros(3 * dim + c_d1 + d2 + c_d1 + 8)
    cdef double[::1] scratch_v = scratch_np
    cdef double* scratch = &scratch_v[0]
    gradJ_np = np.zeros(dim)
    cdef double[::1] gradJ = gradJ_np

    w_np = np.ascontiguousarray(w0, dtype=np.float64).copy()
    cdef double[::1] w_v = w_np
    perm_np = np.zeros(K, dtype=np.int64)
    parts_np = np.zeros(c_L, dtype=np.int64)
    cdef int64_t[::1] perm = perm_np
    cdef int64_t[::1] parts = parts_np
    svec_np = np.zeros(dim)
    dvec_np = np.zeros(dim)
    gf_np = np.zeros(dim)
    ge_np = np.zeros(dim)
    wrows_np = np.zeros((c_L, dim))
    wnew_np = np.zeros(dim)
    cdef double[::1] svec = svec_np
    cdef double[::1] dvec = dvec_np
    cdef double[::1] g_frozen = gf_np
    cdef double[::1] g_evol = ge_np
    cdef double[:, ::1] wrows = wrows_np
    cdef double[::1] w_new = wnew_np

    ratio = (<double> K) / (<double> c_L)
    rr = 0
    with nogil:
        for k in range(K):
            _exact_grad_row(w_v, H_v, gam_v, k, c_rho, c_d1, d2,
                            &exact_cache[k, 0], scratch)
        acc = 0.0
        nrm = 0.0
        for i in range(dim):
            gradJ[i] = 0.0
            for k in range(K):
                gradJ[i] += p_v[k] * exact_cache[k, i]
            nrm += gradJ[i] * gradJ[i]
            w_hist[0, i] = w_v[i]
        for k in range(K):
            acc += p_v[k] * _loss_row(w_v, H_v, gam_v, k, c_rho, c_d1, d2)
        J[0] = acc
        gn[0] = sqrt(nrm)

        for rnd in range(1, <uint32_t> (c_rounds + 1)):
            _draw_participants(c_seed, c_roff + rnd, K, c_L, &perm[0], &parts[0])
            for i in range(dim):
                svec[i] = 0.0
                dvec[i] = 0.0
            for slot in range(c_L):
                k = <int> parts[slot]
                Ek = <int> E_v[k]
                coeff = p_v[k] / Ek
                step = c_mu * K * p_v[k] / Ek
                for i in range(dim):
                    wrows[slot, i] = w_v[i]
                for e in range(1, Ek + 1):
                    if c_decomp:
                        _eval_oracle(c_seed, c_roff + rnd, k, <uint32_t> e, w_v, H_v, gam_v,
                                     c_rho, c_d1, d2,
                                     <int> codes_v[k], <int> batches_v[k], sigmas_v[k],
                                     <int> dists_v[k], <int> swraps_v[k], sdeltas_v[k],
                                     exact_cache, 1, &g_frozen[0], scratch)
                        for i in range(dim):
                            svec[i] += coeff * g_frozen[i]
                    if e == 1 and c_decomp:
                        for i in range(dim):
                            g_evol[i] = g_frozen[i]
                    else:
                        _eval_oracle(c_seed, c_roff + rnd, k, <uint32_t> e, wrows[slot], H_v,
                                     gam_v, c_rho, c_d1, d2,
                                     <int> codes_v[k], <int> batches_v[k], sigmas_v[k],
                                     <int> dists_v[k], <int> swraps_v[k], sdeltas_v[k],
                                     exact_cache, 0, &g_evol[0], scratch)
                    if c_decomp:
                        for i in range(dim):
                            dvec[i] += coeff * (g_evol[i] - g_frozen[i])
                    for i in range(dim):
                        wrows[slot, i] -= step * g_evol[i]
            for i in range(dim):
                acc = 0.0
                for slot in range(c_L):
                    acc += wrows[slot, i]
                w_new[i] = acc / c_L

            if c_decomp:
                acc = 0.0
                for i in range(dim):
                    svec[i] = ratio * svec[i] - gradJ[i]
                    acc += svec[i] * svec[i]
                s_norm[rnd - 1] = sqrt(acc)
                acc = 0.0
                for i in range(dim):
                    dvec[i] = ratio * dvec[i]
                    acc += dvec[i] * dvec[i]
                d_norm[rnd - 1] = sqrt(acc)
                acc = 0.0
                for i in range(dim):
                    nrm = w_new[i] - (w_v[i] - c_mu * (gradJ[i] + svec[i] + dvec[i]))
                    acc += nrm * nrm
                residual[rnd - 1] = sqrt(acc)

            nrm = 0.0
            for i in range(dim):
                w_v[i] = w_new[i]
                w_hist[rnd, i] = w_v[i]
                nrm += w_v[i] * w_v[i]
            for k in range(K):
                _exact_grad_row(w_v, H_v, gam_v, k, c_rho, c_d1, d2,
                                &exact_cache[k, 0], scratch)
            acc = 0.0
            for i in range(dim):
                gradJ[i] = 0.0
                for k in range(K):
                    gradJ[i] += p_v[k] * exact_cache[k, i]
                acc += gradJ[i] * gradJ[i]
            gn[rnd] = sqrt(acc)
            acc = 0.0
            for k in range(K):
                acc += p_v[k] * _loss_row(w_v, H_v, gam_v, k, c_rho, c_d1, d2)
            J[rnd] = acc
            rr = <int> rnd
            if sqrt(nrm) > c_div:
                diverged = 1
                break
            if has_stop and J[rnd] < c_stop_j and gn[rnd] * gn[rnd] <= c_stop_g:
                break

    return (w_hist_np[: rr + 1], J_np[: rr + 1], gn_np[: rr + 1],
            s_norm_np[:rr], d_norm_np[:rr], residual_np[:rr], rr, bool(diverged))

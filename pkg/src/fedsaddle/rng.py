"""Counter-based random number streams (Philox4x32-10).

Every random quantity in the simulator is addressed by a stream coordinate
``(seed; purpose, round, agent, epoch, draw)`` instead of being pulled from a
sequential generator.  Draws at distinct coordinates are independent, draws at
the same coordinate are identical, and no consumption order has to be tracked:
the compiled kernels, the vectorized fallback, and the object-level reference
engine can all evaluate the same logical randomness in any order.

Counter layout (Philox4x32 words)::

    c0 = draw index          c1 = agent
    c2 = round / trial       c3 = (purpose << 24) | epoch
    key = (seed & 0xffffffff, seed >> 32)

Each Philox call yields four 32-bit words, consumed as two 64-bit words:
u64 number ``j`` of a cell comes from call ``draw = j // 2``, word ``j % 2``.
Normal draws are produced in Box-Muller pairs: pair ``t`` uses both words of
call ``draw = t``.
"""

from __future__ import annotations

import numpy as np

# Purpose codes shared with the compiled kernels; never renumber.
P_PARTICIPANTS = 1
P_SAMPLE = 2
P_PERTURB = 3
P_COIN = 4
P_DATA_LABEL = 5
P_DATA_FEATURE = 6
P_DATA_DIRECTION = 7
P_PROBE = 8

_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = 0x9E3779B9
_PHILOX_W1 = 0xBB67AE85
_ROUNDS = 10

# Precomputed key increments for the 10 rounds.
_KEY_SCHEDULE = [
    ((r * _PHILOX_W0) & 0xFFFFFFFF, (r * _PHILOX_W1) & 0xFFFFFFFF)
    for r in range(_ROUNDS)
]

_U32 = np.uint64(0xFFFFFFFF)
_INV53 = float(2.0**-53)


def philox4x32(c0, c1, c2, c3, seed):
    """Philox4x32-10 on broadcastable uint32 arrays; returns 4 uint32 arrays."""
    x0, x1, x2, x3 = np.broadcast_arrays(
        np.asarray(c0, dtype=np.uint32),
        np.asarray(c1, dtype=np.uint32),
        np.asarray(c2, dtype=np.uint32),
        np.asarray(c3, dtype=np.uint32),
    )
    x0 = x0.astype(np.uint64)
    x1 = x1.astype(np.uint64)
    x2 = x2.astype(np.uint64)
    x3 = x3.astype(np.uint64)
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    k0_base = seed & 0xFFFFFFFF
    k1_base = seed >> 32
    for dk0, dk1 in _KEY_SCHEDULE:
        k0 = np.uint64((k0_base + dk0) & 0xFFFFFFFF)
        k1 = np.uint64((k1_base + dk1) & 0xFFFFFFFF)
        p0 = (x0 & _U32) * _PHILOX_M0
        p1 = (x2 & _U32) * _PHILOX_M1
        hi0 = p0 >> np.uint64(32)
        lo0 = p0 & _U32
        hi1 = p1 >> np.uint64(32)
        lo1 = p1 & _U32
        x0 = hi1 ^ (x1 & _U32) ^ k0
        x1 = lo1
        x2 = hi0 ^ (x3 & _U32) ^ k1
        x3 = lo0
    return (
        x0.astype(np.uint32),
        x1.astype(np.uint32),
        x2.astype(np.uint32),
        x3.astype(np.uint32),
    )


def _u64_words(c0, c1, c2, c3, seed):
    """Two uint64 words per counter cell."""
    r0, r1, r2, r3 = philox4x32(c0, c1, c2, c3, seed)
    w0 = r0.astype(np.uint64) | (r1.astype(np.uint64) << np.uint64(32))
    w1 = r2.astype(np.uint64) | (r3.astype(np.uint64) << np.uint64(32))
    return w0, w1


def counter_word3(purpose, epoch):
    return ((int(purpose) & 0xFF) << 24) | (int(epoch) & 0xFFFFFF)


def u01(x):
    """uint64 -> float64 in [0, 1)."""
    return (np.asarray(x, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * _INV53


def u01_open(x):
    """uint64 -> float64 in (0, 1]; safe as a log argument."""
    return (
        (np.asarray(x, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) + 1.0
    ) * _INV53


def _normals_from_words(w0, w1):
    """Box-Muller pair from two uint64 words (elementwise)."""
    u1 = u01_open(w0)
    u2 = u01(w1)
    r = np.sqrt(-2.0 * np.log(u1))
    ang = (2.0 * np.pi) * u2
    return r * np.cos(ang), r * np.sin(ang)


def laplace_from_u64(x, scale):
    """uint64 -> Laplace(0, scale) via inverse CDF; u is kept in (0, 1)."""
    u = ((np.asarray(x, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53
    c = u - 0.5
    return -scale * np.sign(c) * np.log1p(-2.0 * np.abs(c))


class Streams:
    """All random draws for one simulation seed, addressed by coordinates."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    # -- cell primitives ---------------------------------------------------

    def u64(self, purpose, rnd, agent, epoch, count):
        """``count`` uint64 words for one (purpose, round, agent, epoch) cell."""
        if count == 0:
            return np.empty(0, dtype=np.uint64)
        ncalls = (count + 1) // 2
        draws = np.arange(ncalls, dtype=np.uint32)
        w0, w1 = _u64_words(draws, agent, rnd, counter_word3(purpose, epoch), self.seed)
        out = np.empty(2 * ncalls, dtype=np.uint64)
        out[0::2] = w0
        out[1::2] = w1
        return out[:count]

    def u64_grid(self, purpose, rnds, agents, epochs, count):
        """Vectorized cell draws.

        ``rnds``, ``agents``, ``epochs`` broadcast to a common cell shape;
        the result has one extra trailing axis of length ``count``.
        """
        rnds, agents, epochs = np.broadcast_arrays(
            np.asarray(rnds, dtype=np.uint32),
            np.asarray(agents, dtype=np.uint32),
            np.asarray(epochs, dtype=np.uint32),
        )
        ncalls = (count + 1) // 2
        draws = np.arange(ncalls, dtype=np.uint32)
        c3 = ((int(purpose) & 0xFF) << 24) | (epochs.astype(np.uint32) & np.uint32(0xFFFFFF))
        w0, w1 = _u64_words(
            draws,
            agents[..., None],
            rnds[..., None],
            c3[..., None],
            self.seed,
        )
        out = np.empty(rnds.shape + (2 * ncalls,), dtype=np.uint64)
        out[..., 0::2] = w0
        out[..., 1::2] = w1
        return out[..., :count]

    # -- typed draws --------------------------------------------------------

    def uniforms(self, purpose, rnd, agent, epoch, count):
        return u01(self.u64(purpose, rnd, agent, epoch, count))

    def normals(self, purpose, rnd, agent, epoch, count):
        if count == 0:
            return np.empty(0, dtype=np.float64)
        npairs = (count + 1) // 2
        draws = np.arange(npairs, dtype=np.uint32)
        w0, w1 = _u64_words(draws, agent, rnd, counter_word3(purpose, epoch), self.seed)
        z0, z1 = _normals_from_words(w0, w1)
        out = np.empty(2 * npairs, dtype=np.float64)
        out[0::2] = z0
        out[1::2] = z1
        return out[:count]

    def normals_grid(self, purpose, rnds, agents, epochs, count):
        """Vectorized normals; same broadcasting contract as :meth:`u64_grid`."""
        rnds, agents, epochs = np.broadcast_arrays(
            np.asarray(rnds, dtype=np.uint32),
            np.asarray(agents, dtype=np.uint32),
            np.asarray(epochs, dtype=np.uint32),
        )
        npairs = (count + 1) // 2
        draws = np.arange(npairs, dtype=np.uint32)
        c3 = ((int(purpose) & 0xFF) << 24) | (epochs.astype(np.uint32) & np.uint32(0xFFFFFF))
        w0, w1 = _u64_words(
            draws, agents[..., None], rnds[..., None], c3[..., None], self.seed
        )
        z0, z1 = _normals_from_words(w0, w1)
        out = np.empty(rnds.shape + (2 * npairs,), dtype=np.float64)
        out[..., 0::2] = z0
        out[..., 1::2] = z1
        return out[..., :count]

    def integers(self, purpose, rnd, agent, epoch, count, mod):
        return (self.u64(purpose, rnd, agent, epoch, count) % np.uint64(mod)).astype(
            np.int64
        )

    def coin(self, purpose, rnd, agent, epoch, prob, index=0):
        word = self.u64(purpose, rnd, agent, epoch, index + 1)[index]
        return bool(u01(word) < prob)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def derive_seed(seed: int, *tags: int) -> int:
    """Derived sub-seed for an independent analysis within one master seed."""
    state = splitmix64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    for tag in tags:
        state = splitmix64(state ^ (int(tag) & 0xFFFFFFFFFFFFFFFF))
    return state

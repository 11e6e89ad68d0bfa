"""Counter-based random number streams for reproducible parallel Monte Carlo.

Every path owns an independent Philox4x64-10 stream keyed by
``(stream_seed, path_index)``, and draw ``t`` of a path is a pure function of
``(stream_seed, path_index, t)``.  Consequences relied on elsewhere:

* simulating the same paths in any block split / worker count is bit-identical;
* extending a simulation horizon leaves earlier draws unchanged (a ``tau``-step
  inner simulation is an exact prefix of the ``T``-step one);
* growing ``n_paths`` never perturbs existing paths.

The block function matches :class:`numpy.random.Philox` output word for word
(numpy emits blocks starting at counter value 1), which the test suite uses as
an independent reference implementation.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One SplitMix64 scrambling step; used to derive child seeds."""
    x = (x + _SPLITMIX_GAMMA) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def derive_seed(base: int, *indices: int) -> int:
    """Derive a child seed from a base seed and an index tuple.

    Deterministic and collision-resistant enough to hand independent seeds to
    sub-simulations (surface slices, per-level training runs, ...).
    """
    s = splitmix64(base & _MASK64)
    for ix in indices:
        s = splitmix64(s ^ (ix & _MASK64))
    return s


def _mulhilo(a: np.uint64, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full 64x64 -> 128 bit product, returned as (high, low) words."""
    lo = a * b
    ah = a >> _SHIFT32
    al = a & _LO32
    bh = b >> _SHIFT32
    bl = b & _LO32
    mid1 = ah * bl
    mid2 = al * bh
    lolo = al * bl
    carry = ((lolo >> _SHIFT32) + (mid1 & _LO32) + (mid2 & _LO32)) >> _SHIFT32
    hi = ah * bh + (mid1 >> _SHIFT32) + (mid2 >> _SHIFT32) + carry
    return hi, lo


def philox_blocks(counter0: np.ndarray, key0: int, key1: np.ndarray) -> np.ndarray:
    """Philox4x64-10 blocks for counters ``(counter0, 0, 0, 0)``.

    `counter0` and `key1` broadcast against each other; `key0` is shared.
    Returns an array with a trailing axis of 4 uint64 output words, in the
    same word order numpy's Philox emits them.
    """
    counter0 = np.asarray(counter0, dtype=np.uint64)
    key1 = np.asarray(key1, dtype=np.uint64)
    shape = np.broadcast_shapes(counter0.shape, key1.shape)
    c0 = np.broadcast_to(counter0, shape).copy()
    c1 = np.zeros(shape, dtype=np.uint64)
    c2 = np.zeros(shape, dtype=np.uint64)
    c3 = np.zeros(shape, dtype=np.uint64)
    k1 = np.broadcast_to(key1, shape).copy()
    k0 = np.full(shape, np.uint64(key0 & _MASK64), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for _ in range(10):
            hi0, lo0 = _mulhilo(_M0, c0)
            hi1, lo1 = _mulhilo(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
            k0 = k0 + _W0
            k1 = k1 + _W1
    return np.stack([c0, c1, c2, c3], axis=-1)


def _uniforms_from_bits(bits: np.ndarray) -> np.ndarray:
    """Map raw uint64 words to doubles strictly inside (0, 1)."""
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def normal_block(seed: int, path_start: int, n_paths: int, n_steps: int) -> np.ndarray:
    """Standard normal draws, shape ``(n_paths, n_steps)``.

    Row ``i`` is the stream of path ``path_start + i``; column ``t`` is that
    stream's ``t``-th draw.  Normals come from the inverse CDF so each draw
    consumes exactly one 64-bit word, preserving counter alignment.
    """
    if n_paths <= 0 or n_steps <= 0:
        raise ValueError("n_paths and n_steps must be positive")
    n_blocks = -(-n_steps // 4)
    counters = np.arange(1, n_blocks + 1, dtype=np.uint64)[None, :]
    keys = (np.arange(path_start, path_start + n_paths, dtype=np.uint64))[:, None]
    words = philox_blocks(counters, seed, keys).reshape(n_paths, n_blocks * 4)
    return ndtri(_uniforms_from_bits(words[:, :n_steps]))


def normal_matrix(
    seed: int,
    n_paths: int,
    n_steps: int,
    path_start: int = 0,
    block_size: int = 65536,
) -> np.ndarray:
    """`normal_block` evaluated in memory-friendly path blocks."""
    out = np.empty((n_paths, n_steps))
    for lo in range(0, n_paths, block_size):
        hi = min(lo + block_size, n_paths)
        out[lo:hi] = normal_block(seed, path_start + lo, hi - lo, n_steps)
    return out

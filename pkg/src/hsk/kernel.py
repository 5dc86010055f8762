"""Spectrum kernel on fine-to-coarse feature sequences.

The kernel compares two sequences through all pairs of equal-length
contiguous subsequences. A pair of subsequences is scored by the product of
Gaussian atomic kernels between aligned nodes, the per-length sums are
weighted, and the result is cosine-normalized.

All lengths are obtained in one pass: with ``A[i, j]`` the atomic kernel
between node ``i`` of one sequence and node ``j`` of the other,

    M_1 = A
    M_p[i, j] = A[i, j] * M_{p-1}[i-1, j-1]

and the length-``p`` kernel is the sum of ``M_p``. Only two planes of ``M``
are alive at a time.

Every per-pair value is computed by elementwise array operations and
sequential reductions in a fixed order, so a pair evaluated alone, inside a
batch, or with its arguments swapped gives bit-identical results.
"""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Sequence, Union

import numpy as np

from .datamodel import FeatureSequence, GramMatrix

#: Sequences longer than this are always evaluated in log space.
LOG_SPACE_LENGTH = 32
#: Atomic values below this switch the pair to log space.
LOG_SPACE_FLOOR = 1e-300

# Upper bound on (pairs x L x L') elements materialized per chunk.
_CHUNK_ELEMENTS = 1 << 21


class KernelError(ValueError):
    """Raised for invalid kernel inputs or degenerate kernel values."""


# -- weighting schemes -----------------------------------------------------------

@dataclass(frozen=True)
class QSpectrum:
    """Only subsequences of length ``q`` contribute."""

    q: int

    def __post_init__(self):
        if int(self.q) != self.q or self.q < 1:
            raise ValueError(f"q must be an integer >= 1, got {self.q}")
        object.__setattr__(self, "q", int(self.q))

    def __str__(self):
        return f"q={self.q}"


@dataclass(frozen=True)
class Constant:
    """All subsequence lengths weighted equally."""

    def __str__(self):
        return "const"


@dataclass(frozen=True)
class Decay:
    """Length ``p`` weighted by ``lam ** p``."""

    lam: float

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"decay factor must lie in (0, 1), got {self.lam}")
        object.__setattr__(self, "lam", float(self.lam))

    def __str__(self):
        return f"decay={self.lam!r}"


Weighting = Union[QSpectrum, Constant, Decay]


def parse_weighting(text: str) -> Weighting:
    """Parse ``q=<k>``, ``const`` or ``decay=<lambda>``."""
    text = text.strip()
    if text in ("const", "constant", "c"):
        return Constant()
    key, sep, value = text.partition("=")
    if not sep:
        raise ValueError(f"unknown weighting {text!r}; expected q=<k>, const or decay=<lambda>")
    key = key.strip().lower()
    if key == "q":
        return QSpectrum(int(value))
    if key in ("decay", "lambda", "lam"):
        return Decay(float(value))
    raise ValueError(f"unknown weighting {text!r}; expected q=<k>, const or decay=<lambda>")


def weighting_sort_key(w: Weighting) -> tuple:
    if isinstance(w, QSpectrum):
        return (0, w.q)
    if isinstance(w, Constant):
        return (1, 0.0)
    return (2, w.lam)


@dataclass(frozen=True)
class KernelConfig:
    gamma: float
    weighting: Weighting = field(default_factory=Constant)
    normalize: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be a positive finite number, got {self.gamma}")
        if not isinstance(self.weighting, (QSpectrum, Constant, Decay)):
            raise TypeError(f"unsupported weighting {self.weighting!r}")
        object.__setattr__(self, "gamma", float(self.gamma))


# -- helpers -----------------------------------------------------------------------

def _as_vectors(s) -> np.ndarray:
    if isinstance(s, FeatureSequence):
        return s.vectors
    v = np.asarray(s, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if v.ndim != 2 or v.shape[0] < 1:
        raise KernelError("empty sequence")
    if not np.all(np.isfinite(v)):
        raise KernelError("sequence contains non-finite values")
    return v


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise KernelError("empty sequence")
    if x.shape[1] != y.shape[1]:
        raise KernelError(f"dimension mismatch: {x.shape[1]} != {y.shape[1]}")


def _seqsum(a: np.ndarray, axis: int) -> np.ndarray:
    """Left-to-right sum along ``axis``; order does not depend on layout."""
    a = np.moveaxis(a, axis, 0)
    acc = a[0].copy()
    for k in range(1, a.shape[0]):
        acc += a[k]
    return acc


def _symsum(m: np.ndarray) -> np.ndarray:
    """Sum over the last two axes, invariant under swapping them."""
    rows_first = _seqsum(_seqsum(m, -1), -1)
    cols_first = _seqsum(_seqsum(m, -2), -1)
    return 0.5 * (rows_first + cols_first)


def _sq_dist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise squared distances ``(B, L, L')`` for aligned stacks."""
    acc = np.square(x[:, :, None, 0] - y[:, None, :, 0])
    for d in range(1, x.shape[2]):
        acc += np.square(x[:, :, None, d] - y[:, None, :, d])
    return acc


def per_p_from_atomic(atomic: np.ndarray) -> np.ndarray:
    """Per-length sums from a stack of atomic matrices ``(B, L, L')``."""
    a = np.asarray(atomic, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[None]
    depth = min(a.shape[1], a.shape[2])
    out = np.empty((a.shape[0], depth))
    m = a
    out[:, 0] = _symsum(m)
    for p in range(2, depth + 1):
        m = a[:, p - 1:, p - 1:] * m[:, :-1, :-1]
        out[:, p - 1] = _symsum(m)
    return out[0] if squeeze else out


def _per_p_from_log_atomic(log_a: np.ndarray) -> np.ndarray:
    depth = min(log_a.shape[1], log_a.shape[2])
    out = np.empty((log_a.shape[0], depth))
    m = log_a
    for p in range(1, depth + 1):
        if p > 1:
            m = log_a[:, p - 1:, p - 1:] + m[:, :-1, :-1]
        top = m.max(axis=(1, 2))
        s = _symsum(np.exp(m - top[:, None, None]))
        out[:, p - 1] = np.exp(top + np.log(s))
    return out


def _aligned_per_p(x: np.ndarray, y: np.ndarray, gamma: float) -> np.ndarray:
    """Per-length kernels of aligned pairs ``(x[k], y[k])`` of uniform shape."""
    neg = -gamma * _sq_dist(x, y)
    if max(x.shape[1], y.shape[1]) > LOG_SPACE_LENGTH:
        return _per_p_from_log_atomic(neg)
    atomic = np.exp(neg)
    out = per_p_from_atomic(atomic)
    tiny = atomic.min(axis=(1, 2)) < LOG_SPACE_FLOOR
    if tiny.any():
        out[tiny] = _per_p_from_log_atomic(neg[tiny])
    return out


# -- single-pair operations ----------------------------------------------------------

def atomic_kernel(x, y, gamma: float) -> float:
    """Gaussian kernel ``exp(-gamma * ||x - y||^2)`` between two feature vectors."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise KernelError(f"dimension mismatch: {x.size} != {y.size}")
    return float(np.exp(-gamma * np.sum(np.square(x - y))))


def atomic_matrix(s, t, gamma: float) -> np.ndarray:
    """Atomic kernel between every node of ``s`` and every node of ``t``."""
    x, y = _as_vectors(s), _as_vectors(t)
    _check_pair(x, y)
    return np.exp(-gamma * _sq_dist(x[None], y[None])[0])


def spectrum_kernel_all_p(s, t, gamma: float, atomic: Callable | None = None) -> np.ndarray:
    """Unweighted p-spectrum kernels for ``p = 1 .. min(len(s), len(t))``.

    Parameters
    ----------
    s, t : FeatureSequence or array-like, shape (length, dim)
    gamma : float
        Bandwidth of the Gaussian atomic kernel.
    atomic : callable, optional
        ``atomic(x, y) -> float`` used instead of the built-in Gaussian.
        It is called exactly once per node pair.

    Returns
    -------
    numpy.ndarray, shape (min(len(s), len(t)),)
    """
    x, y = _as_vectors(s), _as_vectors(t)
    _check_pair(x, y)
    if atomic is None:
        return _aligned_per_p(x[None], y[None], gamma)[0]
    a = np.empty((x.shape[0], y.shape[0]))
    for i, j in product(range(x.shape[0]), range(y.shape[0])):
        a[i, j] = atomic(x[i], y[j])
    return per_p_from_atomic(a)


def contiguous_subsequences(length: int) -> list[tuple[int, int]]:
    """All ``(start, length)`` windows of a sequence, shortest first."""
    return [(t, p) for p in range(1, length + 1) for t in range(length - p + 1)]


def brute_force_spectrum(s, t, gamma: float) -> np.ndarray:
    """Reference p-spectrum kernels by explicit subsequence enumeration.

    Slow; intended as a test oracle for :func:`spectrum_kernel_all_p`.
    """
    x, y = _as_vectors(s), _as_vectors(t)
    _check_pair(x, y)
    xs, ys = x.tolist(), y.tolist()

    def node(u, v):
        return math.exp(-gamma * math.fsum((a - b) ** 2 for a, b in zip(u, v)))

    depth = min(len(xs), len(ys))
    terms = [[] for _ in range(depth)]
    for t0, p in contiguous_subsequences(len(xs)):
        if p > depth:
            continue
        for u0, q in contiguous_subsequences(len(ys)):
            if q != p:
                continue
            prod_ = 1.0
            for k in range(p):
                prod_ *= node(xs[t0 + k], ys[u0 + k])
            terms[p - 1].append(prod_)
    return np.array([math.fsum(tt) for tt in terms])


def weighted_kernel(per_p, weighting: Weighting) -> np.ndarray | float:
    """Combine per-length kernels (last axis) with a weighting scheme."""
    per_p = np.asarray(per_p, dtype=np.float64)
    if per_p.shape[-1] < 1:
        raise KernelError("empty per-length array")
    depth = per_p.shape[-1]
    if isinstance(weighting, QSpectrum):
        if weighting.q > depth:
            out = np.zeros(per_p.shape[:-1])
        else:
            out = per_p[..., weighting.q - 1].copy()
    elif isinstance(weighting, Constant):
        out = _seqsum(per_p, -1)
    elif isinstance(weighting, Decay):
        out = weighting.lam * per_p[..., 0]
        for p in range(2, depth + 1):
            out = out + weighting.lam ** p * per_p[..., p - 1]
    else:
        raise TypeError(f"unsupported weighting {weighting!r}")
    return float(out) if np.ndim(out) == 0 else out


def _structural_zero(weighting: Weighting, min_length) -> np.ndarray | bool:
    if isinstance(weighting, QSpectrum):
        return np.asarray(min_length) < weighting.q
    return np.zeros(np.shape(min_length), dtype=bool) if np.ndim(min_length) else False


def normalized_kernel(s, t, config: KernelConfig) -> float:
    """Weighted spectrum kernel, cosine-normalized when ``config.normalize``."""
    x, y = _as_vectors(s), _as_vectors(t)
    _check_pair(x, y)
    if _structural_zero(config.weighting, min(len(x), len(y))):
        return 0.0
    k = weighted_kernel(spectrum_kernel_all_p(x, y, config.gamma), config.weighting)
    if not config.normalize:
        return k
    kss = weighted_kernel(spectrum_kernel_all_p(x, x, config.gamma), config.weighting)
    ktt = weighted_kernel(spectrum_kernel_all_p(y, y, config.gamma), config.weighting)
    if not (kss > 0 and ktt > 0):
        raise KernelError(f"self-kernel underflow to 0 (gamma={config.gamma} too large?)")
    return k / (math.sqrt(kss) * math.sqrt(ktt))


def stacked_gaussian_kernel(s, t, gamma: float) -> float:
    """Gaussian kernel between the concatenations of all node vectors."""
    x, y = _as_vectors(s), _as_vectors(t)
    _check_pair(x, y)
    if x.shape[0] != y.shape[0]:
        raise KernelError(f"length mismatch: stacked form needs equal lengths ({len(x)} != {len(y)})")
    return float(np.exp(-gamma * np.sum(np.square(x.ravel() - y.ravel()))))


# -- Gram construction ----------------------------------------------------------------

def default_threads() -> int:
    env = os.environ.get("HSK_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"HSK_THREADS must be >= 1, got {env!r}")
        return n
    return os.cpu_count() or 1


def _stack(seqs: Sequence) -> list[np.ndarray]:
    vecs = [_as_vectors(s) for s in seqs]
    dims = {v.shape[1] for v in vecs}
    if len(dims) > 1:
        raise KernelError(f"non-uniform feature dimension {sorted(dims)}")
    return vecs


def _groups(vecs: list[np.ndarray]) -> dict[int, np.ndarray]:
    by_len: dict[int, list[int]] = {}
    for i, v in enumerate(vecs):
        by_len.setdefault(v.shape[0], []).append(i)
    return {k: np.array(v) for k, v in sorted(by_len.items())}


def _block_per_p(xa: np.ndarray, xb: np.ndarray, gamma: float, threads: int) -> np.ndarray:
    """All-pairs per-length kernels between uniform stacks ``(na, L, D)``, ``(nb, L', D)``."""
    na, la, _ = xa.shape
    nb, lb, _ = xb.shape
    rows_per_chunk = max(1, _CHUNK_ELEMENTS // max(1, nb * la * lb))
    starts = list(range(0, na, rows_per_chunk))

    def work(r0):
        r1 = min(na, r0 + rows_per_chunk)
        x = np.repeat(xa[r0:r1], nb, axis=0)
        y = np.tile(xb, (r1 - r0, 1, 1))
        return _aligned_per_p(x, y, gamma).reshape(r1 - r0, nb, -1)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(r0) for r0 in starts]
    return np.concatenate(parts, axis=0)


def per_p_gram(seqs_a: Sequence, seqs_b: Sequence | None = None, gamma: float = 1.0,
               threads: int | None = None) -> np.ndarray:
    """Per-length kernels for every pair, zero-padded to the longest depth.

    Returns an array of shape ``(len(a), len(b), P)``; entry ``[i, j, p-1]``
    is the length-``p`` kernel, 0 when ``p`` exceeds the shorter sequence.
    """
    threads = default_threads() if threads is None else threads
    va = _stack(seqs_a)
    vb = va if seqs_b is None else _stack(seqs_b)
    if not va or not vb:
        return np.zeros((len(va), len(vb), 0))
    if va[0].shape[1] != vb[0].shape[1]:
        raise KernelError(f"dimension mismatch: {va[0].shape[1]} != {vb[0].shape[1]}")
    depth = min(max(v.shape[0] for v in va), max(v.shape[0] for v in vb))
    out = np.zeros((len(va), len(vb), depth))
    ga, gb = _groups(va), _groups(vb)
    for la, ia in ga.items():
        xa = np.stack([va[i] for i in ia])
        for lb, ib in gb.items():
            xb = np.stack([vb[i] for i in ib])
            block = _block_per_p(xa, xb, gamma, threads)
            out[np.ix_(ia, ib, np.arange(block.shape[2]))] = block
    return out


def self_per_p(seqs: Sequence, gamma: float) -> np.ndarray:
    """Per-length self-kernels ``K_p(S, S)``, zero-padded, shape ``(n, P)``."""
    vecs = _stack(seqs)
    if not vecs:
        return np.zeros((0, 0))
    out = np.zeros((len(vecs), max(v.shape[0] for v in vecs)))
    for length, idx in _groups(vecs).items():
        x = np.stack([vecs[i] for i in idx])
        out[idx, :length] = _aligned_per_p(x, x, gamma)
    return out


def kernel_from_per_p(cross: np.ndarray, self_a: np.ndarray, self_b: np.ndarray,
                      len_a: Sequence[int], len_b: Sequence[int],
                      weighting: Weighting, normalize: bool = True) -> np.ndarray:
    """Weighted (and optionally normalized) kernel matrix from per-length arrays."""
    len_a = np.asarray(len_a)
    len_b = np.asarray(len_b)
    zero = _structural_zero(weighting, np.minimum.outer(len_a, len_b))
    k = np.asarray(weighted_kernel(cross, weighting), dtype=np.float64).reshape(len(len_a), len(len_b))
    k = np.where(zero, 0.0, k)
    if not normalize:
        return k
    ka = np.asarray(weighted_kernel(self_a, weighting), dtype=np.float64).reshape(-1)
    kb = np.asarray(weighted_kernel(self_b, weighting), dtype=np.float64).reshape(-1)
    bad_a = (ka <= 0) & ~_structural_zero(weighting, len_a)
    bad_b = (kb <= 0) & ~_structural_zero(weighting, len_b)
    if bad_a.any() or bad_b.any():
        which = int(np.flatnonzero(bad_a)[0]) if bad_a.any() else int(np.flatnonzero(bad_b)[0])
        side = "a" if bad_a.any() else "b"
        raise KernelError(f"self-kernel underflow to 0 for sample {side}[{which}]")
    denom = np.multiply.outer(np.sqrt(ka), np.sqrt(kb))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(zero, 0.0, k / np.where(zero, 1.0, denom))
    return out


def _ids(seqs: Sequence, prefix: str) -> tuple[str, ...]:
    return tuple(
        s.sample_id if isinstance(s, FeatureSequence) and s.sample_id else f"{prefix}{i}"
        for i, s in enumerate(seqs)
    )


def warn_if_q_exceeds(weighting: Weighting, lengths: Sequence[int]) -> None:
    if isinstance(weighting, QSpectrum) and lengths and weighting.q > min(lengths):
        warnings.warn(
            f"q={weighting.q} exceeds the shortest sequence length {min(lengths)}; "
            "affected kernel values are 0",
            stacklevel=3,
        )


def gram(seqs_a: Sequence, seqs_b: Sequence | None, config: KernelConfig,
         threads: int | None = None) -> GramMatrix:
    """Kernel matrix ``entries[i, j] = normalized_kernel(a[i], b[j], config)``.

    ``seqs_b=None`` builds the symmetric self-Gram of ``seqs_a``.
    """
    va = _stack(seqs_a)
    vb = va if seqs_b is None else _stack(seqs_b)
    if va and vb and va[0].shape[1] != vb[0].shape[1]:
        raise KernelError(f"dimension mismatch: {va[0].shape[1]} != {vb[0].shape[1]}")
    len_a = [v.shape[0] for v in va]
    len_b = [v.shape[0] for v in vb]
    warn_if_q_exceeds(config.weighting, len_a + len_b)
    cross = per_p_gram(va, None if seqs_b is None else vb, config.gamma, threads)
    sa = self_per_p(va, config.gamma)
    sb = sa if seqs_b is None else self_per_p(vb, config.gamma)
    entries = kernel_from_per_p(cross, sa, sb, len_a, len_b, config.weighting, config.normalize)
    ids_a = _ids(seqs_a, "a")
    ids_b = ids_a if seqs_b is None else _ids(seqs_b, "b")
    return GramMatrix(entries, ids_a, ids_b)


def stacked_gram(seqs_a: Sequence, seqs_b: Sequence | None, gamma: float) -> GramMatrix:
    """Gaussian kernel on stacked vectors; all sequences must share one length."""
    va = _stack(seqs_a)
    vb = va if seqs_b is None else _stack(seqs_b)
    lengths = {v.shape[0] for v in va + vb}
    if len(lengths) > 1:
        raise KernelError(f"length mismatch: stacked form needs equal lengths, got {sorted(lengths)}")
    za = np.stack([v.ravel() for v in va])
    zb = np.stack([v.ravel() for v in vb])
    d2 = np.square(za[:, None, 0] - zb[None, :, 0])
    for k in range(1, za.shape[1]):
        d2 += np.square(za[:, None, k] - zb[None, :, k])
    ids_a = _ids(seqs_a, "a")
    ids_b = ids_a if seqs_b is None else _ids(seqs_b, "b")
    return GramMatrix(np.exp(-gamma * d2), ids_a, ids_b)

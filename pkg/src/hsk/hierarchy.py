"""Fine-to-coarse region hierarchies and per-pixel ancestor sequences.

The segmenter is a deterministic best-merge region grower on the
4-connected region adjacency graph. Regions are merged in order of the
Ward linkage cost

    |A| |B| / (|A| + |B|) * ||mean(A) - mean(B)||^2

with ties resolved on the ``(smaller id, larger id)`` key; the merged
region keeps the smaller id, so every region is identified by the flat
index of its first pixel. One merge process runs through the threshold
ladder and a label map is snapshot whenever the cheapest remaining merge
exceeds the next threshold.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datamodel import (
    FeatureSequence,
    HyperCube,
    atomic_write,
    read_level_map,
    write_level_map,
)

MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "HSH-MANIFEST 1"

DEFAULT_ALPHAS = tuple(2.0 ** k for k in range(-2, 9))


class NestingError(ValueError):
    """Raised when a finer region is not contained in a single coarser region."""


@dataclass(frozen=True)
class RegionStats:
    pixel_count: int
    mean_spectrum: np.ndarray


@dataclass(frozen=True, eq=False)
class Hierarchy:
    """Nested label maps, finest first.

    ``levels[0]`` is the pixel partition (or the finest imported
    segmentation). ``parent_links[l]`` maps a region id of ``levels[l]`` to
    the id of its containing region in ``levels[l + 1]``. ``alphas[l]`` is
    the threshold that produced ``levels[l + 1]``.
    """

    levels: tuple[np.ndarray, ...]
    parent_links: tuple[dict[int, int], ...] = field(default=None)
    alphas: tuple[float, ...] = field(default=None)

    def __post_init__(self):
        levels = tuple(np.ascontiguousarray(np.asarray(lv, dtype=np.int64)) for lv in self.levels)
        if not levels:
            raise ValueError("hierarchy needs at least one level")
        shape = levels[0].shape
        for lv in levels:
            if lv.ndim != 2 or lv.shape != shape:
                raise ValueError(f"level maps must share shape {shape}, got {lv.shape}")
            lv.setflags(write=False)
        for k in range(len(levels) - 1):
            check_nesting(levels[k], levels[k + 1], k + 1)
        links = tuple(_parent_links(levels[k], levels[k + 1]) for k in range(len(levels) - 1))
        if self.parent_links is not None:
            given = tuple(dict(p) for p in self.parent_links)
            if given != links:
                raise ValueError("parent_links inconsistent with label maps")
        alphas = self.alphas
        if alphas is None:
            alphas = tuple(float(k) for k in range(1, len(levels)))
        alphas = tuple(float(a) for a in alphas)
        if len(alphas) != len(levels) - 1:
            raise ValueError(f"expected {len(levels) - 1} alphas, got {len(alphas)}")
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError("alphas not strictly increasing")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "parent_links", links)
        object.__setattr__(self, "alphas", alphas)

    @property
    def shape(self) -> tuple[int, int]:
        return self.levels[0].shape

    def __len__(self) -> int:
        return len(self.levels)

    def region_counts(self) -> list[int]:
        return [int(np.unique(lv).size) for lv in self.levels]

    def __eq__(self, other):
        if not isinstance(other, Hierarchy):
            return NotImplemented
        return (
            len(self.levels) == len(other.levels)
            and all(np.array_equal(a, b) for a, b in zip(self.levels, other.levels))
            and self.alphas == other.alphas
        )


def _parent_links(fine: np.ndarray, coarse: np.ndarray) -> dict[int, int]:
    ids, first = np.unique(fine.ravel(), return_index=True)
    parents = coarse.ravel()[first]
    return {int(a): int(b) for a, b in zip(ids, parents)}


def check_nesting(fine: np.ndarray, coarse: np.ndarray, level: int = 1) -> None:
    """Raise :class:`NestingError` naming the first pixel that breaks nesting."""
    f = fine.ravel()
    c = coarse.ravel()
    _, first, inverse = np.unique(f, return_index=True, return_inverse=True)
    expected = c[first][inverse.ravel()]
    bad = np.flatnonzero(expected != c)
    if bad.size:
        r, col = divmod(int(bad[0]), fine.shape[1])
        raise NestingError(
            f"nesting violation at pixel ({r}, {col}) between level {level} and {level + 1}: "
            f"region {int(f[bad[0]])} is split across coarser regions"
        )


def standardize_cube(cube: HyperCube) -> np.ndarray:
    """Per-band z-scores of all pixels, ``(rows * cols, bands)`` float64."""
    v = cube.values.reshape(-1, cube.bands).astype(np.float64)
    mean = v.mean(axis=0)
    std = v.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return (v - mean) / std


def _validate_alphas(alphas: Sequence[float]) -> tuple[float, ...]:
    alphas = tuple(float(a) for a in alphas)
    if any(not a > 0 for a in alphas):
        raise ValueError("alphas must be positive")
    if any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas not strictly increasing")
    return alphas


def segment(cube: HyperCube, alphas: Sequence[float] = DEFAULT_ALPHAS,
            standardize: bool = True) -> Hierarchy:
    """Best-merge hierarchical segmentation with one level per threshold.

    Parameters
    ----------
    cube : HyperCube
    alphas : sequence of float
        Strictly increasing positive merge thresholds. Level ``l + 1`` is
        reached once every remaining adjacent pair costs more than
        ``alphas[l]``.
    standardize : bool
        Compare costs on per-band z-scored spectra, which makes the
        threshold ladder independent of the data scale.
    """
    if cube.values.size == 0:
        raise ValueError("empty cube")
    alphas = _validate_alphas(alphas)
    rows, cols = cube.rows, cube.cols
    n = rows * cols
    data = standardize_cube(cube) if standardize else cube.values.reshape(n, -1).astype(np.float64)

    sums = data.copy()
    counts = np.ones(n, dtype=np.int64)
    parent = np.arange(n, dtype=np.int64)
    version = [0] * n
    alive = [True] * n
    neighbors: list[set[int]] = [set() for _ in range(n)]
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                neighbors[i].add(i + 1)
                neighbors[i + 1].add(i)
            if r + 1 < rows:
                neighbors[i].add(i + cols)
                neighbors[i + cols].add(i)

    def cost(a: int, b: int) -> float:
        na, nb = counts[a], counts[b]
        diff = sums[a] / na - sums[b] / nb
        return float(na * nb / (na + nb) * np.dot(diff, diff))

    heap: list[tuple[float, int, int, int, int]] = []
    for a in range(n):
        for b in neighbors[a]:
            if a < b:
                heap.append((cost(a, b), a, b, 0, 0))
    heapq.heapify(heap)

    def merge_until(alpha: float) -> None:
        while heap:
            d, a, b, va, vb = heap[0]
            if not (alive[a] and alive[b]) or version[a] != va or version[b] != vb:
                heapq.heappop(heap)
                continue
            if d > alpha:
                return
            heapq.heappop(heap)
            # a < b always; a survives
            sums[a] += sums[b]
            counts[a] += counts[b]
            parent[b] = a
            alive[b] = False
            nb_union = (neighbors[a] | neighbors[b]) - {a, b}
            for c in neighbors[b]:
                if c != a:
                    neighbors[c].discard(b)
                    neighbors[c].add(a)
            neighbors[a] = nb_union
            neighbors[b] = set()
            version[a] += 1
            for c in nb_union:
                lo, hi = (a, c) if a < c else (c, a)
                heapq.heappush(heap, (cost(lo, hi), lo, hi, version[lo], version[hi]))

    def snapshot() -> np.ndarray:
        lab = parent.copy()
        while True:
            nxt = lab[lab]
            if np.array_equal(nxt, lab):
                return lab.reshape(rows, cols)
            lab = nxt

    levels = [np.arange(n, dtype=np.int64).reshape(rows, cols)]
    for alpha in alphas:
        merge_until(alpha)
        levels.append(snapshot())
    return Hierarchy(tuple(levels), alphas=alphas)


def import_hierarchy(label_map_paths: Sequence, alphas: Sequence[float] | None = None) -> Hierarchy:
    """Build a hierarchy from externally computed label maps, finest first.

    Nesting is verified; a violation raises :class:`NestingError` with the
    offending pixel.
    """
    if not label_map_paths:
        raise ValueError("no label maps given")
    maps = [read_level_map(p) for p in label_map_paths]
    return Hierarchy(tuple(maps), alphas=None if alphas is None else tuple(alphas))


def save_hierarchy(hierarchy: Hierarchy, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER, f"levels {len(hierarchy)}"]
    width = max(2, len(str(len(hierarchy))))
    for k, lv in enumerate(hierarchy.levels):
        name = f"level_{k + 1:0{width}d}.hsh"
        write_level_map(lv, directory / name)
        alpha = "-" if k == 0 else repr(hierarchy.alphas[k - 1])
        lines.append(f"{name} {alpha}")
    atomic_write(directory / MANIFEST_NAME, ("\n".join(lines) + "\n").encode("utf-8"))


def load_hierarchy(directory) -> Hierarchy:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ValueError(f"{manifest}: not a hierarchy manifest")
    count = int(lines[1].split()[1])
    entries = [ln.split() for ln in lines[2:2 + count]]
    if len(entries) != count:
        raise ValueError(f"{manifest}: expected {count} level entries")
    paths = [directory / e[0] for e in entries]
    alphas = [float(e[1]) for e in entries[1:]]
    return import_hierarchy(paths, alphas)


def region_stats(level: np.ndarray, cube: HyperCube) -> dict[int, RegionStats]:
    ids, inverse, counts = np.unique(level.ravel(), return_inverse=True, return_counts=True)
    means = _region_means(inverse.ravel(), len(ids), counts, cube)
    return {int(i): RegionStats(int(c), m) for i, c, m in zip(ids, counts, means)}


def _region_means(inverse: np.ndarray, k: int, counts: np.ndarray, cube: HyperCube) -> np.ndarray:
    values = cube.values.reshape(-1, cube.bands).astype(np.float64)
    sums = np.stack([np.bincount(inverse, weights=values[:, d], minlength=k) for d in range(cube.bands)], axis=1)
    return sums / counts[:, None]


def retained_levels(hierarchy: Hierarchy, top_levels_discarded: int = 0,
                    drop_whole_image: bool = True) -> list[int]:
    """Indices of the levels kept in ancestor sequences, finest first.

    Levels consisting of a single whole-image region carry no information
    and are dropped when ``drop_whole_image`` is set; the pixel level is
    always kept. ``top_levels_discarded`` further levels are removed from
    the coarse end.
    """
    if top_levels_discarded < 0 or top_levels_discarded >= len(hierarchy):
        raise ValueError(
            f"top_levels_discarded must be in [0, {len(hierarchy) - 1}], got {top_levels_discarded}"
        )
    keep = list(range(len(hierarchy)))
    if drop_whole_image:
        counts = hierarchy.region_counts()
        keep = [k for k in keep if k == 0 or counts[k] > 1]
    if top_levels_discarded:
        keep = keep[:max(1, len(keep) - top_levels_discarded)]
    return keep


def extract_sequences(hierarchy: Hierarchy, cube: HyperCube, pixels: Iterable[tuple[int, int]],
                      top_levels_discarded: int = 0, drop_whole_image: bool = True,
                      labels: np.ndarray | None = None) -> list[FeatureSequence]:
    """Ancestor mean-spectrum sequences for many pixels.

    Sample ids are ``"<row>_<col>"``; when ``labels`` is given the pixel's
    class id is attached.
    """
    if hierarchy.shape != (cube.rows, cube.cols):
        raise ValueError(f"hierarchy shape {hierarchy.shape} != cube shape {(cube.rows, cube.cols)}")
    pixels = [(int(r), int(c)) for r, c in pixels]
    for r, c in pixels:
        if not (0 <= r < cube.rows and 0 <= c < cube.cols):
            raise IndexError(f"pixel ({r}, {c}) out of bounds for {cube.rows}x{cube.cols} image")
    keep = retained_levels(hierarchy, top_levels_discarded, drop_whole_image)
    flat = np.array([r * cube.cols + c for r, c in pixels], dtype=np.int64)
    per_level = []
    for k in keep:
        _, inverse, counts = np.unique(hierarchy.levels[k].ravel(), return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        means = _region_means(inverse, len(counts), counts, cube)
        per_level.append(means[inverse[flat]])
    stacked = np.stack(per_level, axis=1) if pixels else np.zeros((0, len(keep), cube.bands))
    out = []
    for n, (r, c) in enumerate(pixels):
        label = 0 if labels is None else int(labels[r, c])
        out.append(FeatureSequence(stacked[n], f"{r}_{c}", label))
    return out


def extract_sequence(hierarchy: Hierarchy, cube: HyperCube, pixel: tuple[int, int],
                     top_levels_discarded: int = 0, drop_whole_image: bool = True) -> FeatureSequence:
    """Mean spectra of the regions containing ``pixel``, pixel level first."""
    return extract_sequences(hierarchy, cube, [pixel], top_levels_discarded, drop_whole_image)[0]


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension affine transform fitted on training vectors."""

    mean: np.ndarray
    std: np.ndarray

    def apply_vectors(self, v: np.ndarray) -> np.ndarray:
        return (np.asarray(v, dtype=np.float64) - self.mean) / self.std

    def apply(self, sequences: Sequence[FeatureSequence]) -> list[FeatureSequence]:
        return [FeatureSequence(self.apply_vectors(s.vectors), s.sample_id, s.label) for s in sequences]


def fit_standardizer(sequences: Sequence[FeatureSequence]) -> Standardizer:
    if not sequences:
        raise ValueError("empty input")
    dims = {s.dim for s in sequences}
    if len(dims) > 1:
        raise ValueError(f"non-uniform feature dimension {sorted(dims)}")
    allv = np.concatenate([s.vectors for s in sequences], axis=0)
    if allv.shape[0] < 2:
        raise ValueError("standardization needs at least 2 vectors")
    mean = allv.mean(axis=0)
    std = allv.std(axis=0)
    # near-constant dimensions are only centered
    std = np.where(std < 1e-12, 1.0, std)
    return Standardizer(mean, std)


def standardize_features(sequences: Sequence[FeatureSequence]) -> tuple[list[FeatureSequence], Standardizer]:
    """Z-score every dimension over all vectors of all sequences."""
    st = fit_standardizer(sequences)
    return st.apply(sequences), st

"""Synthetic scenes with nested rectangular regions for desk-scale checks."""
from __future__ import annotations

import numpy as np

from .datamodel import HyperCube, LabelRaster


def _class_means(rng: np.random.Generator, classes: int, bands: int, separation: float) -> np.ndarray:
    base = rng.uniform(0.3, 0.7, size=bands)
    if classes <= bands:
        # orthonormal offsets: every pair of classes is separation * sqrt(2) apart
        q, _ = np.linalg.qr(rng.normal(size=(bands, classes)))
        return base + separation * q.T
    return base + rng.uniform(-separation, separation, size=(classes, bands))


def synth(rows: int, cols: int, bands: int, classes: int, noise_std: float, seed: int = 0,
          block: int = 8, inner_offset: float = 0.15,
          separation: float = 0.5) -> tuple[HyperCube, LabelRaster]:
    """Generate a labeled cube.

    Class mean spectra are a common random base plus mutually orthogonal
    offsets of norm ``separation`` (random offsets when there are more
    classes than bands). The image is tiled with ``block x block`` rectangles, each owned by one
    class (every class owns at least one). Each rectangle holds a centred
    inner rectangle of the same class whose spectrum is shifted by a random
    direction of norm ``inner_offset``, giving two nested scales per class
    region. Gaussian noise of standard deviation ``noise_std`` is added to
    every band of every pixel. All pixels are labeled ``1..classes``.
    """
    if classes < 2:
        raise ValueError(f"classes must be >= 2, got {classes}")
    if rows < 4 or cols < 4:
        raise ValueError(f"image must be at least 4x4, got {rows}x{cols}")
    if bands < 1:
        raise ValueError(f"bands must be >= 1, got {bands}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    block = max(2, min(block, rows // 2, cols // 2))
    rng = np.random.default_rng(seed)

    means = _class_means(rng, classes, bands, separation)
    edges_r = list(range(0, rows - block + 1, block)) + [rows]
    edges_c = list(range(0, cols - block + 1, block)) + [cols]
    edges_r = sorted(set(edges_r))
    edges_c = sorted(set(edges_c))
    n_blocks = (len(edges_r) - 1) * (len(edges_c) - 1)
    if n_blocks < classes:
        raise ValueError(f"{rows}x{cols} with block {block} gives {n_blocks} blocks for {classes} classes")
    owner = rng.permutation(np.arange(n_blocks) % classes)

    clean = np.empty((rows, cols, bands))
    labels = np.empty((rows, cols), dtype=np.int64)
    k = 0
    for r0, r1 in zip(edges_r[:-1], edges_r[1:]):
        for c0, c1 in zip(edges_c[:-1], edges_c[1:]):
            cls = int(owner[k])
            k += 1
            clean[r0:r1, c0:c1] = means[cls]
            labels[r0:r1, c0:c1] = cls + 1
            h, w = r1 - r0, c1 - c0
            ir0, ic0 = r0 + h // 4, c0 + w // 4
            ir1, ic1 = r1 - h // 4, c1 - w // 4
            direction = rng.normal(size=bands)
            direction /= np.linalg.norm(direction)
            clean[ir0:ir1, ic0:ic1] = means[cls] + inner_offset * direction

    noise = rng.normal(scale=noise_std, size=clean.shape) if noise_std > 0 else 0.0
    return HyperCube((clean + noise).astype(np.float32)), LabelRaster(labels)

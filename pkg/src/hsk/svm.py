"""Soft-margin SVM on a precomputed kernel, one-against-one multiclass.

The binary solver is SMO on the standard dual

    max_a  sum(a) - 1/2 a^T Q a,   Q_ij = y_i y_j K_ij
    s.t.   0 <= a_i <= C,  sum(a_i y_i) = 0

with maximal-violating-pair working set selection and no shrinking.
The decision function is ``f(x) = sum_i a_i y_i K(x_i, x) + bias``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import GramMatrix, atomic_write

MODEL_FORMAT = "hsk-svm"
MODEL_VERSION = 1

# Curvature floor for non-PSD round-off in the two-variable subproblem.
TAU = 1e-12


class SvmError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BinarySvm:
    """One binary machine; ``support`` indexes the rows it was trained on."""

    support: np.ndarray
    support_ids: tuple[str, ...]
    alphas_signed: np.ndarray
    bias: float
    C: float
    iterations: int = 0

    def decision(self, kernel_rows: np.ndarray) -> np.ndarray:
        """Decision values from kernel columns against this machine's support set.

        ``kernel_rows`` has shape ``(n_test, n_support)`` in ``support`` order.
        """
        return np.asarray(kernel_rows) @ self.alphas_signed + self.bias


@dataclass(frozen=True, eq=False)
class SvmModel:
    classes: tuple[int, ...]
    machines: tuple[BinarySvm, ...]
    pairs: tuple[tuple[int, int], ...]
    training_sample_ids: tuple[str, ...]


def _as_kernel(gram) -> np.ndarray:
    k = gram.entries if isinstance(gram, GramMatrix) else np.asarray(gram, dtype=np.float64)
    if not np.all(np.isfinite(k)):
        raise SvmError("non-finite Gram entries")
    return k


def dual_objective(K: np.ndarray, y: np.ndarray, alpha: np.ndarray) -> float:
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


def kkt_residual(K: np.ndarray, y: np.ndarray, alpha: np.ndarray, bias: float, C: float) -> float:
    """Largest violation of the soft-margin KKT conditions."""
    margin = y * (K @ (alpha * y) + bias)
    at_zero = alpha <= 0
    at_c = alpha >= C
    free = ~(at_zero | at_c)
    viol = np.zeros_like(margin)
    viol[at_zero] = np.maximum(0.0, 1.0 - margin[at_zero])
    viol[at_c] = np.maximum(0.0, margin[at_c] - 1.0)
    viol[free] = np.abs(margin[free] - 1.0)
    return float(viol.max()) if viol.size else 0.0


def solve_dual(K: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3,
               max_iter: int | None = None, debug: bool = False) -> tuple[np.ndarray, float, int]:
    """SMO; returns ``(alpha, bias, iterations)``."""
    n = len(y)
    Q = (y[:, None] * y[None, :]) * K
    diag = np.diag(Q).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)
    max_iter = max(10_000_000, 100 * n) if max_iter is None else max_iter
    pos = y > 0
    obj = 0.0
    it = 0
    while it < max_iter:
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        v = -y * G
        vu = np.where(up, v, -np.inf)
        vl = np.where(low, v, np.inf)
        i = int(np.argmax(vu))
        j = int(np.argmin(vl))
        if vu[i] - vl[j] <= tol:
            break
        it += 1
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = diag[i] + diag[j] + 2.0 * Q[i, j]
            if quad <= 0:
                quad = TAU
            delta = (-G[i] - G[j]) / quad
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            quad = diag[i] + diag[j] - 2.0 * Q[i, j]
            if quad <= 0:
                quad = TAU
            delta = (G[i] - G[j]) / quad
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
            elif nj < 0:
                nj, ni = 0.0, total
            if total > C:
                if nj > C:
                    nj, ni = C, total - C
            elif ni < 0:
                ni, nj = 0.0, total
        alpha[i], alpha[j] = ni, nj
        G += Q[:, i] * (ni - ai) + Q[:, j] * (nj - aj)
        if debug:
            new_obj = float(alpha.sum() - 0.5 * alpha @ (G + 1.0))
            assert new_obj >= obj - 1e-12 * max(1.0, abs(obj)), (
                f"dual objective decreased at iteration {it}: {obj} -> {new_obj}"
            )
            obj = new_obj
    else:
        warnings.warn(f"SMO reached max_iter={max_iter} before converging", stacklevel=2)

    yG = y * G
    at_c = alpha >= C
    at_zero = alpha <= 0
    free = ~(at_c | at_zero)
    if free.any():
        rho = float(yG[free].mean())
    else:
        upper = (at_c & ~pos) | (at_zero & pos)
        lower = (at_c & pos) | (at_zero & ~pos)
        ub = float(yG[upper].min()) if upper.any() else np.inf
        lb = float(yG[lower].max()) if lower.any() else -np.inf
        rho = (ub + lb) / 2.0
    return alpha, -rho, it


def train_binary(gram, labels, C: float = 1.0, tol: float = 1e-3,
                 sample_ids: Sequence[str] | None = None, debug: bool = False) -> BinarySvm:
    """Train one binary machine on a precomputed Gram with labels in {+1, -1}."""
    K = _as_kernel(gram)
    y = np.asarray(labels, dtype=np.float64)
    if K.shape != (len(y), len(y)):
        raise SvmError(f"Gram shape {K.shape} does not match {len(y)} labels")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise SvmError("binary labels must be +1 or -1")
    if not ((y > 0).any() and (y < 0).any()):
        raise SvmError("single-class input: both +1 and -1 samples are required")
    if not C > 0 or not tol > 0:
        raise SvmError("C and tol must be positive")
    if sample_ids is None:
        sample_ids = gram.row_ids if isinstance(gram, GramMatrix) else tuple(str(i) for i in range(len(y)))
    alpha, bias, it = solve_dual(K, y, float(C), float(tol), debug=debug)
    sv = np.flatnonzero(alpha > 0)
    return BinarySvm(
        support=sv,
        support_ids=tuple(sample_ids[i] for i in sv),
        alphas_signed=alpha[sv] * y[sv],
        bias=float(bias),
        C=float(C),
        iterations=it,
    )


def train(gram, labels, C: float = 1.0, tol: float = 1e-3,
          sample_ids: Sequence[str] | None = None) -> SvmModel:
    """One-against-one: a binary machine per unordered class pair.

    In the machine for classes ``(a, b)`` with ``a < b``, ``a`` is the
    positive class.
    """
    K = _as_kernel(gram)
    labels = np.asarray(labels)
    if K.shape != (len(labels), len(labels)):
        raise SvmError(f"Gram shape {K.shape} does not match {len(labels)} labels")
    if sample_ids is None:
        sample_ids = gram.row_ids if isinstance(gram, GramMatrix) else tuple(str(i) for i in range(len(labels)))
    sample_ids = tuple(sample_ids)
    classes = tuple(int(c) for c in np.unique(labels))
    if len(classes) < 2:
        raise SvmError(f"need at least 2 classes, got {list(classes)}")
    machines = []
    pairs = tuple(combinations(classes, 2))
    for a, b in pairs:
        idx = np.flatnonzero((labels == a) | (labels == b))
        y = np.where(labels[idx] == a, 1.0, -1.0)
        m = train_binary(K[np.ix_(idx, idx)], y, C, tol, [sample_ids[i] for i in idx])
        support = idx[m.support]
        machines.append(BinarySvm(support, m.support_ids, m.alphas_signed, m.bias, m.C, m.iterations))
    return SvmModel(classes, tuple(machines), pairs, sample_ids)


def decision_values(model: SvmModel, test_gram) -> np.ndarray:
    """Per-machine decision values, shape ``(n_test, n_machines)``."""
    K = _as_kernel(test_gram)
    if K.ndim != 2 or K.shape[1] != len(model.training_sample_ids):
        raise SvmError(
            f"column misalignment: test Gram has {K.shape[-1]} columns, "
            f"model has {len(model.training_sample_ids)} training samples"
        )
    if isinstance(test_gram, GramMatrix) and test_gram.col_ids != model.training_sample_ids:
        raise SvmError("column misalignment: test Gram column ids differ from training sample ids")
    return np.stack([m.decision(K[:, m.support]) for m in model.machines], axis=1)


def predict(model: SvmModel, test_gram) -> np.ndarray:
    """Majority vote over binary machines; ties go to the smallest class id."""
    dec = decision_values(model, test_gram)
    index = {c: k for k, c in enumerate(model.classes)}
    votes = np.zeros((dec.shape[0], len(model.classes)), dtype=np.int64)
    for col, (a, b) in enumerate(model.pairs):
        pos = dec[:, col] > 0
        votes[pos, index[a]] += 1
        votes[~pos, index[b]] += 1
    return np.asarray(model.classes)[np.argmax(votes, axis=1)]


def model_to_dict(model: SvmModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "classes": list(model.classes),
        "training_sample_ids": list(model.training_sample_ids),
        "machines": [
            {
                "classes": [a, b],
                "C": m.C,
                "bias": m.bias,
                "support_ids": list(m.support_ids),
                "alphas_signed": [float(x) for x in m.alphas_signed],
            }
            for (a, b), m in zip(model.pairs, model.machines)
        ],
    }


def model_from_dict(data: dict) -> SvmModel:
    if data.get("format") != MODEL_FORMAT or data.get("version") != MODEL_VERSION:
        raise SvmError(f"unsupported model format {data.get('format')!r} v{data.get('version')}")
    ids = tuple(data["training_sample_ids"])
    position = {s: k for k, s in enumerate(ids)}
    machines, pairs = [], []
    for m in data["machines"]:
        try:
            support = np.array([position[s] for s in m["support_ids"]], dtype=np.int64)
        except KeyError as exc:
            raise SvmError(f"support id {exc.args[0]!r} not among training samples") from None
        machines.append(BinarySvm(support, tuple(m["support_ids"]),
                                  np.array(m["alphas_signed"], dtype=np.float64),
                                  float(m["bias"]), float(m["C"])))
        pairs.append(tuple(m["classes"]))
    return SvmModel(tuple(data["classes"]), tuple(machines), tuple(pairs), ids)


def save_model(model: SvmModel, path) -> None:
    text = json.dumps(model_to_dict(model), indent=1) + "\n"
    atomic_write(path, text.encode("utf-8"))


def load_model(path) -> SvmModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

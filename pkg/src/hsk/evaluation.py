"""Experimental protocol: per-class sampling, grid-search CV, OA/AA/kappa."""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence, Union

import numpy as np

from . import kernel as K
from .datamodel import FeatureSequence, HyperCube, LabelRaster, atomic_write
from .hierarchy import Hierarchy, extract_sequences, fit_standardizer, retained_levels
from .kernel import Constant, Decay, QSpectrum, Weighting
from .svm import predict, train

log = logging.getLogger(__name__)

METHODS = ("pixel-only", "stacked", "spectrum-c", "spectrum-q", "spectrum-lambda")
_METHOD_ALIASES = {"spectrum-λ": "spectrum-lambda", "pixel": "pixel-only", "spectrum-l": "spectrum-lambda"}

DEFAULT_GAMMAS = tuple(2.0 ** k for k in range(-6, 5))
DEFAULT_CS = tuple(2.0 ** k for k in range(-2, 11))
DEFAULT_LAMBDAS = tuple(round(0.1 * k, 1) for k in range(1, 10))


def canonical_method(name: str) -> str:
    name = _METHOD_ALIASES.get(name, name)
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
    return name


@dataclass(frozen=True)
class Stacked:
    """Gaussian kernel on the concatenated sequence vectors."""

    def __str__(self):
        return "stacked"


KernelChoice = Union[Weighting, Stacked]


def _choice_key(w: KernelChoice) -> tuple:
    return (3, 0.0) if isinstance(w, Stacked) else K.weighting_sort_key(w)


@dataclass(frozen=True)
class SplitSpec:
    n_per_class: int
    seed: int = 0
    half_class_rule: bool = True

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValueError(f"n_per_class must be >= 1, got {self.n_per_class}")


@dataclass(frozen=True)
class CvGrid:
    gammas: tuple[float, ...] = DEFAULT_GAMMAS
    Cs: tuple[float, ...] = DEFAULT_CS
    weightings: tuple[KernelChoice, ...] = (Constant(),)

    def __post_init__(self):
        for name in ("gammas", "Cs", "weightings"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"grid {name} must be non-empty")
            object.__setattr__(self, name, vals)
        if any(not g > 0 for g in self.gammas) or any(not c > 0 for c in self.Cs):
            raise ValueError("grid gammas and Cs must be positive")

    def for_method(self, method: str, p_max: int) -> "CvGrid":
        """Restrict the weighting axis to what ``method`` cross-validates."""
        method = canonical_method(method)
        if method in ("pixel-only", "spectrum-c"):
            ws = (Constant(),)
        elif method == "stacked":
            # the stacked-vector Gaussian equals the q = p_max spectrum kernel
            ws = (QSpectrum(p_max),)
        elif method == "spectrum-q":
            ws = tuple(w for w in self.weightings if isinstance(w, QSpectrum) and w.q <= p_max)
            ws = ws or tuple(QSpectrum(q) for q in range(1, p_max + 1))
        else:
            ws = tuple(w for w in self.weightings if isinstance(w, Decay))
            ws = ws or tuple(Decay(lam) for lam in DEFAULT_LAMBDAS)
        return CvGrid(self.gammas, self.Cs, ws)


@dataclass(frozen=True, eq=False)
class Metrics:
    overall_accuracy: float
    average_accuracy: float
    kappa: float
    confusion: np.ndarray
    per_class_accuracy: tuple[float, ...]
    classes: tuple[int, ...]


def compute_metrics(predicted, truth, classes: Sequence[int] | None = None) -> Metrics:
    """Confusion-matrix metrics; rows of ``confusion`` are true classes.

    Classes without test samples are left out of the average accuracy.
    """
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if truth.size == 0:
        raise ValueError("empty input")
    if predicted.shape != truth.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    if classes is None:
        classes = np.union1d(np.unique(truth), np.unique(predicted))
    classes = tuple(int(c) for c in classes)
    index = {c: k for k, c in enumerate(classes)}
    conf = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(truth.tolist(), predicted.tolist()):
        conf[index[int(t)], index[int(p)]] += 1
    total = conf.sum()
    oa = float(np.trace(conf) / total)
    support = conf.sum(axis=1)
    recalls = np.where(support > 0, np.diag(conf) / np.maximum(support, 1), np.nan)
    aa = float(np.nanmean(recalls))
    pe = float((support * conf.sum(axis=0)).sum() / total ** 2)
    if pe == 1.0:
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        kappa = (oa - pe) / (1.0 - pe)
    return Metrics(oa, aa, kappa, conf, tuple(float(r) for r in recalls), classes)


def sample_split(labels: LabelRaster, spec: SplitSpec) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Per-class random training pixels; all other labeled pixels are test.

    Classes smaller than ``2 * n_per_class`` contribute half their pixels
    when ``half_class_rule`` is set. Background (label 0) is never used.
    """
    rng = np.random.default_rng(spec.seed)
    lab = labels.labels.ravel()
    cols = labels.cols
    train_idx, test_idx = [], []
    for c in labels.classes():
        pix = np.flatnonzero(lab == c)
        size = pix.size
        if size < 2:
            raise ValueError(f"class {c} has {size} labeled pixel(s); at least 2 are required")
        if spec.half_class_rule and size < 2 * spec.n_per_class:
            n_train = size // 2
        else:
            n_train = min(spec.n_per_class, size - 1)
        chosen = np.zeros(size, dtype=bool)
        chosen[rng.permutation(size)[:n_train]] = True
        train_idx.append(pix[chosen])
        test_idx.append(pix[~chosen])
    tr = np.sort(np.concatenate(train_idx)) if train_idx else np.array([], dtype=np.int64)
    te = np.sort(np.concatenate(test_idx)) if test_idx else np.array([], dtype=np.int64)
    return [divmod(int(i), cols) for i in tr], [divmod(int(i), cols) for i in te]


def stratified_folds(labels, folds: int, seed: int = 0) -> np.ndarray:
    """Fold id per sample; each class is dealt round-robin after shuffling."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    out = np.empty(len(labels), dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < folds:
            warnings.warn(
                f"class {int(c)} has {idx.size} samples, fewer than {folds} folds; "
                f"stratifying it over {idx.size} folds",
                stacklevel=2,
            )
        out[idx[rng.permutation(idx.size)]] = np.arange(idx.size) % min(folds, idx.size)
    return out


class _KernelCache:
    """Training Gram matrices per (gamma, kernel choice) over one sample set."""

    def __init__(self, seqs: Sequence[FeatureSequence], threads: int | None = None):
        self.seqs = seqs
        self.lengths = [len(s) for s in seqs]
        self.threads = threads
        self._per_p: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def gram(self, gamma: float, choice: KernelChoice) -> np.ndarray:
        if isinstance(choice, Stacked):
            return K.stacked_gram(self.seqs, None, gamma).entries
        if gamma not in self._per_p:
            cross = K.per_p_gram(self.seqs, None, gamma, self.threads)
            self._per_p[gamma] = (cross, K.self_per_p(self.seqs, gamma))
        cross, diag = self._per_p[gamma]
        return K.kernel_from_per_p(cross, diag, diag, self.lengths, self.lengths, choice)


def cross_gram(test: Sequence[FeatureSequence], train_: Sequence[FeatureSequence],
               gamma: float, choice: KernelChoice, threads: int | None = None) -> np.ndarray:
    if isinstance(choice, Stacked):
        return K.stacked_gram(test, train_, gamma).entries
    return K.gram(test, train_, K.KernelConfig(gamma, choice), threads).entries


@dataclass(frozen=True)
class CvResult:
    gamma: float
    C: float
    weighting: KernelChoice
    score: float
    scores: tuple[tuple[float, float, KernelChoice, float], ...] = field(repr=False, default=())


def cross_validate(train_sequences: Sequence[FeatureSequence], grid: CvGrid, folds: int = 5,
                   seed: int = 0, tol: float = 1e-3, threads: int | None = None) -> CvResult:
    """Grid search by mean validation OA over stratified folds.

    Ties go to the smaller gamma, then smaller C, then smaller q or lambda.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    labels = np.array([s.label for s in train_sequences])
    if np.unique(labels).size < 2:
        raise ValueError("cross-validation needs at least 2 classes")
    fold_of = stratified_folds(labels, folds, seed)
    fold_ids = np.unique(fold_of)
    cache = _KernelCache(train_sequences, threads)
    scores = []
    for gamma, choice in product(sorted(grid.gammas), sorted(grid.weightings, key=_choice_key)):
        gm = cache.gram(gamma, choice)
        for C in sorted(grid.Cs):
            accs = []
            for f in fold_ids:
                val = fold_of == f
                tr = ~val
                tr_idx, val_idx = np.flatnonzero(tr), np.flatnonzero(val)
                if np.unique(labels[tr_idx]).size < 2:
                    pred = np.full(val_idx.size, labels[tr_idx][0])
                else:
                    model = train(gm[np.ix_(tr_idx, tr_idx)], labels[tr_idx], C, tol)
                    pred = predict(model, gm[np.ix_(val_idx, tr_idx)])
                accs.append(float(np.mean(pred == labels[val_idx])))
            score = sum(accs) / len(accs)
            scores.append((gamma, C, choice, score))
    gamma, C, choice, score = min(scores, key=lambda s: (-s[3], s[0], s[1], _choice_key(s[2])))
    return CvResult(gamma, C, choice, score, tuple(scores))


@dataclass(frozen=True)
class RunRecord:
    method: str
    n_per_class: int
    repetition: int
    seed: int
    metrics: Metrics
    gamma: float
    C: float
    weighting: str
    predictions: tuple[int, ...] = field(repr=False, default=())


@dataclass(frozen=True)
class MethodSummary:
    method: str
    n_per_class: int
    repetitions: int
    oa_mean: float
    oa_std: float
    aa_mean: float
    aa_std: float
    kappa_mean: float
    kappa_std: float


@dataclass(frozen=True)
class ExperimentResult:
    records: tuple[RunRecord, ...]
    summaries: tuple[MethodSummary, ...]

    def summary(self, method: str) -> MethodSummary:
        method = canonical_method(method)
        for s in self.summaries:
            if s.method == method:
                return s
        raise KeyError(method)

    def runs(self, method: str) -> list[RunRecord]:
        method = canonical_method(method)
        return [r for r in self.records if r.method == method]


def summarize(records: Sequence[RunRecord]) -> tuple[MethodSummary, ...]:
    out = []
    seen = []
    for r in records:
        if r.method not in seen:
            seen.append(r.method)
    for m in seen:
        rs = [r for r in records if r.method == m]
        oa = np.array([r.metrics.overall_accuracy for r in rs])
        aa = np.array([r.metrics.average_accuracy for r in rs])
        ka = np.array([r.metrics.kappa for r in rs])
        out.append(MethodSummary(m, rs[0].n_per_class, len(rs),
                                 float(oa.mean()), float(oa.std()),
                                 float(aa.mean()), float(aa.std()),
                                 float(ka.mean()), float(ka.std())))
    return tuple(out)


def method_sequences(method: str, sequences: Sequence[FeatureSequence]) -> list[FeatureSequence]:
    if canonical_method(method) == "pixel-only":
        return [s.truncated(1) for s in sequences]
    return list(sequences)


def run_experiment(cube: HyperCube, hierarchy: Hierarchy, labels: LabelRaster, n_per_class: int,
                   repetitions: int = 10, grid: CvGrid | None = None,
                   methods: Sequence[str] = ("pixel-only", "stacked", "spectrum-c", "spectrum-q", "spectrum-lambda"),
                   seed: int = 0, folds: int = 5, tol: float = 1e-3, top_levels_discarded: int = 0,
                   half_class_rule: bool = True, threads: int | None = None) -> ExperimentResult:
    """Repeat split, standardize, cross-validate, train, predict, score.

    Repetition ``r`` uses seed ``seed + r`` and every method sees the same
    split within a repetition.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    grid = CvGrid() if grid is None else grid
    methods = [canonical_method(m) for m in methods]
    if (cube.rows, cube.cols) != (labels.rows, labels.cols):
        raise ValueError("cube and label raster differ in size")
    p_max = len(retained_levels(hierarchy, top_levels_discarded))
    labeled = [divmod(int(i), labels.cols) for i in np.flatnonzero(labels.labels.ravel() > 0)]
    all_seqs = extract_sequences(hierarchy, cube, labeled, top_levels_discarded, labels=labels.labels)
    by_pixel = dict(zip(labeled, all_seqs))
    records = []
    for rep in range(repetitions):
        rep_seed = seed + rep
        try:
            tr_pix, te_pix = sample_split(labels, SplitSpec(n_per_class, rep_seed, half_class_rule))
            train_raw = [by_pixel[p] for p in tr_pix]
            test_raw = [by_pixel[p] for p in te_pix]
            truth = np.array([s.label for s in test_raw])
            for method in methods:
                tr_m = method_sequences(method, train_raw)
                te_m = method_sequences(method, test_raw)
                st = fit_standardizer(tr_m)
                tr_m, te_m = st.apply(tr_m), st.apply(te_m)
                mgrid = grid.for_method(method, p_max)
                cv = cross_validate(tr_m, mgrid, folds, rep_seed, tol, threads)
                ytr = np.array([s.label for s in tr_m])
                gtr = _KernelCache(tr_m, threads).gram(cv.gamma, cv.weighting)
                model = train(gtr, ytr, cv.C, tol, [s.sample_id for s in tr_m])
                pred = predict(model, cross_gram(te_m, tr_m, cv.gamma, cv.weighting, threads))
                met = compute_metrics(pred, truth, labels.classes())
                log.info("rep %d %s: OA=%.4f (gamma=%g C=%g %s)", rep, method,
                         met.overall_accuracy, cv.gamma, cv.C, cv.weighting)
                records.append(RunRecord(method, n_per_class, rep, rep_seed, met, cv.gamma, cv.C,
                                         str(cv.weighting), tuple(int(p) for p in pred)))
        except Exception as exc:
            raise type(exc)(f"repetition {rep}: {exc}") from exc
    return ExperimentResult(tuple(records), summarize(records))


RESULT_FIELDS = ("method", "n", "repetition", "seed", "OA", "AA", "kappa", "gamma", "C", "weighting")
SUMMARY_FIELDS = ("method", "n", "repetitions", "OA_mean", "OA_std", "AA_mean", "AA_std",
                  "kappa_mean", "kappa_std")


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode("utf-8")


def write_results_csv(result: ExperimentResult, path) -> None:
    rows = [
        (r.method, r.n_per_class, r.repetition, r.seed, repr(r.metrics.overall_accuracy),
         repr(r.metrics.average_accuracy), repr(r.metrics.kappa), repr(r.gamma), repr(r.C), r.weighting)
        for r in result.records
    ]
    atomic_write(path, _csv_bytes(RESULT_FIELDS, rows))


def write_summary_csv(result: ExperimentResult, path) -> None:
    rows = [
        (s.method, s.n_per_class, s.repetitions, repr(s.oa_mean), repr(s.oa_std), repr(s.aa_mean),
         repr(s.aa_std), repr(s.kappa_mean), repr(s.kappa_std))
        for s in result.summaries
    ]
    atomic_write(path, _csv_bytes(SUMMARY_FIELDS, rows))

import numpy as np
import pytest

import hsk.evaluation as ev
from hsk.datamodel import FeatureSequence, LabelRaster
from hsk.evaluation import (
    CvGrid,
    SplitSpec,
    compute_metrics,
    cross_validate,
    run_experiment,
    sample_split,
    stratified_folds,
    write_results_csv,
    write_summary_csv,
)
from hsk.hierarchy import retained_levels, segment
from hsk.kernel import Constant, Decay, QSpectrum
from hsk.synth import synth


def raster(counts, cols=20):
    flat = np.concatenate([np.full(n, c) for c, n in counts.items()])
    rows = -(-flat.size // cols)
    flat = np.concatenate([flat, np.zeros(rows * cols - flat.size, dtype=int)])
    return LabelRaster(flat.reshape(rows, cols))


def per_class(pixels, labels):
    out = {}
    for r, c in pixels:
        k = int(labels.labels[r, c])
        out[k] = out.get(k, 0) + 1
    return out


def test_split_counts_and_half_rule():
    lab = raster({1: 120, 2: 60})
    tr, te = sample_split(lab, SplitSpec(50, seed=3))
    assert per_class(tr, lab) == {1: 50, 2: 30}
    assert per_class(te, lab) == {1: 70, 2: 30}
    assert not set(tr) & set(te)


def test_split_without_half_rule():
    lab = raster({1: 60})
    tr, _ = sample_split(lab, SplitSpec(50, seed=0, half_class_rule=False))
    assert len(tr) == 50


def test_split_is_deterministic_and_seed_dependent():
    lab = raster({1: 40, 2: 33, 3: 90})
    a = sample_split(lab, SplitSpec(10, seed=7))
    assert a == sample_split(lab, SplitSpec(10, seed=7))
    assert a != sample_split(lab, SplitSpec(10, seed=8))


def test_split_excludes_background():
    lab = raster({1: 10, 2: 10})
    tr, te = sample_split(lab, SplitSpec(3))
    assert all(lab.labels[p] > 0 for p in tr + te)
    assert len(tr) + len(te) == 20


def test_split_rejects_singleton_class():
    with pytest.raises(ValueError, match="class 2"):
        sample_split(raster({1: 10, 2: 1}), SplitSpec(3))


@pytest.mark.parametrize("pred, truth, oa, aa, kappa", [
    ([1, 2, 3], [1, 2, 3], 1.0, 1.0, 1.0),
    ([1, 2, 1, 2], [1, 1, 2, 2], 0.5, 0.5, 0.0),
    ([1] * 30, [1] * 10 + [2] * 10 + [3] * 10, 1 / 3, 1 / 3, 0.0),
    ([1, 1, 2, 2], [1, 1, 1, 2], 0.75, 5 / 6, 0.5),
    ([1, 2, 3, 3], [2, 1, 3, 3], 0.5, 1 / 3, 0.2),
    ([1, 1], [1, 1], 1.0, 1.0, 1.0),
    ([2, 2], [1, 1], 0.0, 0.0, 0.0),
])
def test_metrics_hand_cases(pred, truth, oa, aa, kappa):
    m = compute_metrics(pred, truth)
    assert m.overall_accuracy == pytest.approx(oa, abs=1e-12)
    assert m.average_accuracy == pytest.approx(aa, abs=1e-12)
    assert m.kappa == pytest.approx(kappa, abs=1e-12)


def test_metrics_skip_classes_without_test_samples():
    m = compute_metrics([1, 2], [1, 2], classes=[1, 2, 3])
    assert m.average_accuracy == 1.0
    assert np.isnan(m.per_class_accuracy[2])


def test_metrics_invariants():
    rng = np.random.default_rng(0)
    for _ in range(50):
        truth = rng.integers(1, 5, size=40)
        pred = np.where(rng.random(40) < 0.6, truth, rng.integers(1, 5, size=40))
        m = compute_metrics(pred, truth)
        assert 0 <= m.overall_accuracy <= 1 and 0 <= m.average_accuracy <= 1
        assert m.kappa <= 1
        assert m.confusion.sum() == 40
    with pytest.raises(ValueError, match="empty"):
        compute_metrics([], [])


def test_stratified_folds_balance_and_warning():
    labels = np.repeat([1, 2], [10, 15])
    f = stratified_folds(labels, 5, seed=0)
    for c in (1, 2):
        counts = np.bincount(f[labels == c], minlength=5)
        assert counts.max() - counts.min() <= 1
    with pytest.warns(UserWarning, match="fewer than 5 folds"):
        stratified_folds(np.repeat([1, 2], [3, 10]), 5)


def separable_sequences(n=10, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for cls, centre in ((1, -3.0), (2, 3.0)):
        for i in range(n):
            out.append(FeatureSequence(rng.normal(centre, 0.3, size=(2, 2)), f"{cls}_{i}", cls))
    return out


def test_cv_single_point():
    res = cross_validate(separable_sequences(), CvGrid((0.5,), (1.0,), (Constant(),)))
    assert (res.gamma, res.C, res.weighting) == (0.5, 1.0, Constant())


def test_cv_separable_reaches_full_accuracy():
    res = cross_validate(separable_sequences(), CvGrid((0.1, 1.0), (1.0, 10.0)))
    assert res.score == 1.0


def test_cv_dominant_point_wins():
    # eight alternating stripes on a line: a wide kernel cannot follow them,
    # so the larger gamma must win although ties would favour the smaller one
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 2, 80)
    seqs = [FeatureSequence([[v]], f"s{i}", int(np.floor(v * 4)) % 2 + 1) for i, v in enumerate(x)]
    res = cross_validate(seqs, CvGrid((0.01, 100.0), (10.0,)))
    assert res.gamma == 100.0
    wide = [s for s in res.scores if s[0] == 0.01][0][3]
    assert res.score > wide + 0.2


def test_cv_ties_prefer_small_parameters():
    res = cross_validate(separable_sequences(), CvGrid((0.1, 0.2), (1.0, 2.0), (Decay(0.3), Decay(0.6))))
    assert (res.gamma, res.C, res.weighting) == (0.1, 1.0, Decay(0.3))


@pytest.fixture(scope="module")
def small_scene():
    cube, labels = synth(16, 16, 4, 2, noise_std=0.2, seed=1)
    return cube, labels, segment(cube)


def test_single_repetition_has_zero_std(small_scene):
    cube, labels, h = small_scene
    grid = CvGrid((0.25,), (4.0,))
    res = run_experiment(cube, h, labels, 5, repetitions=1, grid=grid, methods=["spectrum-c"], folds=2)
    s = res.summary("spectrum-c")
    assert s.repetitions == 1 and s.oa_std == 0.0 and s.kappa_std == 0.0


def test_stacked_equals_top_length_spectrum(small_scene):
    cube, labels, h = small_scene
    p_max = len(retained_levels(h))
    grid = CvGrid((0.25, 1.0), (1.0, 16.0), (QSpectrum(p_max),))
    res = run_experiment(cube, h, labels, 5, repetitions=2, grid=grid,
                         methods=["stacked", "spectrum-q"], folds=2)
    for a, b in zip(res.runs("stacked"), res.runs("spectrum-q")):
        assert (a.seed, a.gamma, a.C, a.weighting) == (b.seed, b.gamma, b.C, b.weighting)
        assert a.predictions == b.predictions
        assert a.metrics.overall_accuracy == b.metrics.overall_accuracy


def test_cv_never_sees_test_pixels(small_scene, monkeypatch):
    cube, labels, h = small_scene
    seen = []
    real = ev.cross_validate

    def spy(train_sequences, *args, **kwargs):
        seen.append({s.sample_id for s in train_sequences})
        return real(train_sequences, *args, **kwargs)

    monkeypatch.setattr(ev, "cross_validate", spy)
    run_experiment(cube, h, labels, 5, repetitions=2, grid=CvGrid((0.5,), (1.0,)),
                   methods=["pixel-only", "spectrum-c"], seed=11, folds=2)
    assert len(seen) == 4
    for k, ids in enumerate(seen):
        _, te = sample_split(labels, SplitSpec(5, seed=11 + k // 2))
        assert not ids & {f"{r}_{c}" for r, c in te}


def test_results_csv(small_scene, tmp_path):
    cube, labels, h = small_scene
    res = run_experiment(cube, h, labels, 5, repetitions=2, grid=CvGrid((0.5,), (1.0,)),
                         methods=["pixel-only"], folds=2)
    write_results_csv(res, tmp_path / "r.csv")
    write_summary_csv(res, tmp_path / "s.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "method,n,repetition,seed,OA,AA,kappa,gamma,C,weighting"
    assert len(lines) == 3
    assert (tmp_path / "s.csv").read_text().splitlines()[1].startswith("pixel-only,5,2,")


def test_grid_for_method():
    g = CvGrid((1.0,), (1.0,))
    assert g.for_method("stacked", 4).weightings == (QSpectrum(4),)
    assert g.for_method("spectrum-q", 3).weightings == (QSpectrum(1), QSpectrum(2), QSpectrum(3))
    assert g.for_method("pixel-only", 3).weightings == (Constant(),)
    assert len(g.for_method("spectrum-lambda", 3).weightings) == 9

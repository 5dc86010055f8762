"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary lists
PASS / FAIL / SKIP per criterion.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from hsk.datamodel import FeatureSequence, read_cube, read_labels
from hsk.evaluation import CvGrid, SplitSpec, run_experiment, sample_split
from hsk.hierarchy import extract_sequences, fit_standardizer, retained_levels, segment
from hsk.kernel import (
    Constant,
    Decay,
    KernelConfig,
    QSpectrum,
    brute_force_spectrum,
    contiguous_subsequences,
    gram,
    spectrum_kernel_all_p,
    stacked_gaussian_kernel,
    stacked_gram,
    weighted_kernel,
)
from hsk.svm import dual_objective, kkt_residual, solve_dual, train, train_binary
from hsk.synth import synth
from pipeline import output_bytes, run_pipeline
from svm_oracle import exhaustive_dual_optimum

pytestmark = pytest.mark.acceptance

# frozen end-to-end fixture; the noise level was calibrated by a sweep so
# that pixel-only accuracy sits in the 0.7 - 0.85 band
FIXTURE = dict(rows=32, cols=32, bands=8, classes=3, noise_std=0.25, seed=0)
FIXTURE_GRID = dict(gammas=(2.0 ** -4, 2.0 ** -2, 1.0), Cs=(1.0, 16.0, 256.0))


def test_1_dynamic_program_matches_enumeration(report_line):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    pairs = 0
    for _ in range(210):
        d = int(rng.integers(1, 6))
        s = rng.random((int(rng.integers(1, 9)), d))
        t = rng.random((int(rng.integers(1, 9)), d))
        gamma = float(rng.choice([0.1, 1.0, 10.0]))
        got = spectrum_kernel_all_p(s, t, gamma)
        ref = brute_force_spectrum(s, t, gamma)
        assert got.shape == ref.shape
        worst = max(worst, float(np.max(np.abs(got - ref) / np.abs(ref))))
        pairs += 1
    elapsed = time.perf_counter() - start
    report_line(f"criterion 1: {pairs} pairs, max rel err {worst:.2e}, {elapsed:.2f}s")
    assert worst <= 1e-12
    assert elapsed < 5.0


def test_2_stacked_gaussian_equals_top_length_kernel(report_line):
    rng = np.random.default_rng(7)
    cases = []
    for _ in range(120):
        L, d = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        cases.append((rng.random((L, d)), rng.random((L, d)), float(rng.choice([0.1, 1.0, 10.0]))))
    start = time.perf_counter()
    worst = 0.0
    for s, t, gamma in cases:
        q = weighted_kernel(spectrum_kernel_all_p(s, t, gamma), QSpectrum(len(s)))
        stacked = stacked_gaussian_kernel(s, t, gamma)
        worst = max(worst, abs(q - stacked) / abs(stacked))
    elapsed = time.perf_counter() - start
    report_line(f"criterion 2: {len(cases)} pairs, max rel err {worst:.2e}, {elapsed:.3f}s")
    assert worst <= 1e-12
    assert elapsed < 1.0


def test_3_atomic_calls_equal_length_product():
    rng = np.random.default_rng(3)
    for _ in range(20):
        L, Lp = int(rng.integers(1, 13)), int(rng.integers(1, 13))
        calls = [0]

        def atomic(x, y):
            calls[0] += 1
            return float(np.exp(-np.sum((x - y) ** 2)))

        spectrum_kernel_all_p(rng.random((L, 3)), rng.random((Lp, 3)), 1.0, atomic=atomic)
        assert calls[0] == L * Lp


def test_4_gram_validity(report_line):
    rng = np.random.default_rng(4)
    seqs = [FeatureSequence(rng.normal(size=(int(rng.integers(1, 9)), 4))) for _ in range(50)]
    for w in (Constant(), QSpectrum(1), Decay(0.5)):
        g = gram(seqs, None, KernelConfig(0.5, w)).entries
        assert np.max(np.abs(np.diag(g) - 1.0)) <= 1e-12
        assert np.array_equal(g, g.T)
        low = np.linalg.eigvalsh(g).min()
        report_line(f"criterion 4: {w}: min eigenvalue {low:.3e}")
        assert low >= -1e-8 * 50
    # q-spectrum weightings beyond length 1 on equal-length sequences keep the diagonal at 1
    same = [FeatureSequence(rng.normal(size=(5, 4))) for _ in range(50)]
    for q in (2, 5):
        g = gram(same, None, KernelConfig(0.5, QSpectrum(q))).entries
        assert np.max(np.abs(np.diag(g) - 1.0)) <= 1e-12
        assert np.array_equal(g, g.T)
        assert np.linalg.eigvalsh(g).min() >= -1e-8 * 50


def test_5_subsequence_count():
    for L in range(1, 9):
        subs = contiguous_subsequences(L)
        assert len(subs) == L * (L + 1) // 2
        assert len(set(subs)) == len(subs)


def test_6_svm_solver(report_line):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(60):
        n = int(rng.integers(2, 7))
        x = rng.normal(size=(n, 2))
        K = np.exp(-0.7 * np.sum((x[:, None] - x[None]) ** 2, axis=-1))
        y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        y[:2] = (1.0, -1.0)
        C = float(rng.choice([0.5, 1.0, 10.0]))
        best, _ = exhaustive_dual_optimum(K, y, C)
        alpha, _, _ = solve_dual(K, y, C, tol=1e-9)
        worst = max(worst, abs(dual_objective(K, y, alpha) - best))
    report_line(f"criterion 6: max |objective gap| {worst:.2e}")
    assert worst <= 1e-6

    # KKT residual on every machine of a trained multi-class model
    x = rng.normal(size=(45, 3))
    labels = np.repeat([1, 2, 3], 15)
    x += labels[:, None] * 0.8
    K = np.exp(-0.5 * np.sum((x[:, None] - x[None]) ** 2, axis=-1))
    tol = 1e-3
    model = train(K, labels, C=4.0, tol=tol)
    for (a, b), m in zip(model.pairs, model.machines):
        idx = np.flatnonzero((labels == a) | (labels == b))
        yb = np.where(labels[idx] == a, 1.0, -1.0)
        alpha = np.zeros(idx.size)
        pos = {int(i): k for k, i in enumerate(idx)}
        for s, coef in zip(m.support, m.alphas_signed):
            alpha[pos[int(s)]] = abs(coef)
        assert kkt_residual(K[np.ix_(idx, idx)], yb, alpha, m.bias, m.C) <= tol

    hand = train_binary(np.eye(2), [1, -1], C=10.0)
    assert np.allclose(np.abs(hand.alphas_signed), [1.0, 1.0], atol=1e-12)
    assert abs(hand.bias) <= 1e-12


@pytest.fixture(scope="module")
def fixture_experiment():
    cube, labels = synth(**FIXTURE)
    h = segment(cube)
    p_max = len(retained_levels(h))
    grid = CvGrid(FIXTURE_GRID["gammas"], FIXTURE_GRID["Cs"], (QSpectrum(p_max),))
    start = time.perf_counter()
    res = run_experiment(cube, h, labels, 10, repetitions=10, grid=grid,
                         methods=["pixel-only", "spectrum-c", "stacked", "spectrum-q"], seed=0)
    elapsed = time.perf_counter() - start
    return cube, labels, h, res, elapsed


def test_7a_spectrum_beats_pixel_only(fixture_experiment, report_line):
    _, _, _, res, elapsed = fixture_experiment
    px = res.summary("pixel-only").oa_mean
    sc = res.summary("spectrum-c").oa_mean
    report_line(f"criterion 7a: pixel-only OA {px:.4f}, spectrum-c OA {sc:.4f}")
    assert sc >= px


def test_7b_stacked_matches_top_length_spectrum(fixture_experiment, report_line):
    cube, labels, h, res, _ = fixture_experiment
    stacked, qruns = res.runs("stacked"), res.runs("spectrum-q")
    assert len(stacked) == len(qruns) == 10
    for a, b in zip(stacked, qruns):
        assert a.seed == b.seed
        for field in ("overall_accuracy", "average_accuracy", "kappa"):
            assert getattr(a.metrics, field) == getattr(b.metrics, field)
        assert a.predictions == b.predictions
    # the identity also holds for the explicitly stacked Gram on every training set
    all_pix = [divmod(int(i), labels.cols) for i in np.flatnonzero(labels.labels.ravel() > 0)]
    seqs = dict(zip(all_pix, extract_sequences(h, cube, all_pix, labels=labels.labels)))
    p_max = len(retained_levels(h))
    worst = 0.0
    for r in range(10):
        tr, _ = sample_split(labels, SplitSpec(10, seed=r))
        train_seqs = [seqs[p] for p in tr]
        train_seqs = fit_standardizer(train_seqs).apply(train_seqs)
        for gamma in FIXTURE_GRID["gammas"]:
            a = stacked_gram(train_seqs, None, gamma).entries
            b = gram(train_seqs, None, KernelConfig(gamma, QSpectrum(p_max), normalize=False)).entries
            worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-300))))
    report_line(f"criterion 7b: stacked vs q={p_max} Gram max rel diff {worst:.2e}")
    assert worst <= 1e-12


def test_7c_spectrum_accuracy_and_runtime(fixture_experiment, report_line):
    _, _, _, res, elapsed = fixture_experiment
    s = res.summary("spectrum-c")
    report_line(f"criterion 7c: spectrum-c OA {s.oa_mean:.4f} ({s.oa_std:.4f}), experiment {elapsed:.1f}s")
    assert s.oa_mean >= 0.95
    assert elapsed < 120.0


PINES_DIR = os.environ.get("HSK_INDIAN_PINES_DIR")


@pytest.mark.slow
@pytest.mark.skipif(not PINES_DIR, reason="set HSK_INDIAN_PINES_DIR to a directory with cube.hsc and labels.hsl")
def test_8_indian_pines_optional(report_line):
    d = Path(PINES_DIR)
    cube, labels = read_cube(d / "cube.hsc"), read_labels(d / "labels.hsl")
    h = segment(cube)
    res = run_experiment(cube, h, labels, 50, repetitions=10, methods=["stacked", "spectrum-q"], seed=0)
    st, sq = res.summary("stacked"), res.summary("spectrum-q")
    report_line(f"criterion 8: stacked OA {100 * st.oa_mean:.2f}, spectrum-q OA {100 * sq.oa_mean:.2f}")
    assert sq.oa_mean > st.oa_mean
    assert 100 * sq.oa_mean >= 90.0


def test_9_pipeline_outputs_are_byte_identical(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    first.mkdir()
    second.mkdir()
    # empty synth_args keeps the generator defaults, which are the frozen fixture
    assert all(c == 0 for c in run_pipeline(first, []).values())
    assert all(c == 0 for c in run_pipeline(second, []).values())
    a, b = output_bytes(first), output_bytes(second)
    assert sorted(a) == sorted(b)
    assert len(a) >= 12
    for name in a:
        assert a[name] == b[name], name

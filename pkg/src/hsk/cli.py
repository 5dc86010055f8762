"""Command-line pipeline: synth, segment, sequences, gram, train, predict, cv, evaluate.

Errors are reported on stderr as one line ``hsk: error <CODE>: <message>``.
Exit status is 0 on success, 2 for usage errors and missing inputs, 1 for
any other failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import re
import sys
import warnings
from pathlib import Path

import numpy as np

from . import datamodel as dm
from .evaluation import (
    DEFAULT_CS,
    DEFAULT_GAMMAS,
    METHODS,
    CvGrid,
    cross_validate,
    canonical_method,
    run_experiment,
    sample_split,
    SplitSpec,
    write_results_csv,
    write_summary_csv,
)
from .hierarchy import (
    DEFAULT_ALPHAS,
    extract_sequences,
    fit_standardizer,
    load_hierarchy,
    save_hierarchy,
    segment,
)
from .kernel import KernelConfig, KernelError, default_threads, gram, parse_weighting
from .svm import SvmError, load_model, predict, save_model, train
from .synth import synth

log = logging.getLogger("hsk")


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = 1):
        super().__init__(message)
        self.code = code
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message, 2)


_POW = re.compile(r"^\s*([-+0-9.eE]+)\s*\^\s*([-+0-9]+)\s*$")


def _number(text: str) -> float:
    m = _POW.match(text)
    if m:
        return float(m.group(1)) ** int(m.group(2))
    return float(text)


def parse_values(text: str) -> tuple[float, ...]:
    """Parse ``2^-2..2^8`` (power ladder), ``a,b,c`` or a single number."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part and "^" in part:
            lo, hi = part.split("..")
            ml, mh = _POW.match(lo), _POW.match(hi)
            if not (ml and mh) or float(ml.group(1)) != float(mh.group(1)):
                raise ValueError(f"bad power range {part!r}; expected e.g. 2^-2..2^8")
            base = float(ml.group(1))
            out.extend(base ** k for k in range(int(ml.group(2)), int(mh.group(2)) + 1))
        elif part:
            out.append(_number(part))
    if not out:
        raise ValueError(f"no values in {text!r}")
    for v in out:
        if not math.isfinite(v):
            raise ValueError(f"non-finite value in {text!r}")
    return tuple(out)


def _positive_values(text: str) -> tuple[float, ...]:
    vals = parse_values(text)
    if any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError(f"values must be positive: {text!r}")
    return vals


def _positive_float(text: str) -> float:
    v = _number(text)
    if not (math.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"must be a positive number: {text!r}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1: {text!r}")
    return v


def _weighting(text: str):
    try:
        return parse_weighting(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _weighting_list(text: str):
    return tuple(_weighting(t) for t in text.split(",") if t.strip())


def _input(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("E_NOT_FOUND", f"input file not found: {path}", 2)
    return p


def _threads(args) -> int:
    return args.threads if getattr(args, "threads", None) else default_threads()


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> None:
    cube, labels = synth(args.rows, args.cols, args.bands, args.classes, args.noise, args.seed,
                         block=args.block)
    dm.write_cube(cube, args.out_cube)
    dm.write_labels(labels, args.out_labels)


def cmd_segment(args) -> None:
    cube = dm.read_cube(_input(args.cube))
    h = segment(cube, args.alphas, standardize=not args.no_standardize)
    save_hierarchy(h, args.out)
    log.info("levels: %s regions", h.region_counts())


def _write_split(seqs, labels, args) -> None:
    tr, te = sample_split(labels, SplitSpec(args.n_per_class, args.seed))
    by_id = {s.sample_id: s for s in seqs}
    dm.write_sequences([by_id[f"{r}_{c}"] for r, c in tr], args.train_out)
    dm.write_sequences([by_id[f"{r}_{c}"] for r, c in te], args.test_out)


def cmd_sequences(args) -> None:
    cube = dm.read_cube(_input(args.cube))
    _input(Path(args.hierarchy) / "manifest.txt")
    h = load_hierarchy(args.hierarchy)
    labels = dm.read_labels(_input(args.labels))
    if (labels.rows, labels.cols) != (cube.rows, cube.cols):
        raise CliError("E_INPUT", "label raster and cube differ in size")
    lab = labels.labels
    pixels = [divmod(int(i), labels.cols) for i in np.flatnonzero(lab.ravel() > 0)]
    seqs = extract_sequences(h, cube, pixels, args.top_discard, labels=lab)
    dm.write_sequences(seqs, args.out)
    if args.n_per_class is not None:
        if not (args.train_out and args.test_out):
            raise CliError("E_USAGE", "--n-per-class needs --train-out and --test-out", 2)
        _write_split(seqs, labels, args)


def cmd_gram(args) -> None:
    rows = dm.read_sequences(_input(args.sequences))
    cols = dm.read_sequences(_input(args.against)) if args.against else None
    reference = rows if cols is None else cols
    if not args.no_standardize:
        st = fit_standardizer(reference)
        rows = st.apply(rows)
        cols = None if cols is None else st.apply(cols)
    cfg = KernelConfig(args.gamma, args.weighting, normalize=not args.no_normalize)
    g = gram(rows, cols, cfg, threads=_threads(args))
    dm.write_gram(g, args.out)


def _labels_for(ids, sequences_path) -> np.ndarray:
    labels = {s.sample_id: s.label for s in dm.read_sequences(_input(sequences_path))}
    missing = [s for s in ids if s not in labels]
    if missing:
        raise CliError("E_INPUT", f"sample {missing[0]!r} not found in {sequences_path}")
    return np.array([labels[s] for s in ids])


def cmd_train(args) -> None:
    g = dm.read_gram(_input(args.gram))
    if not g.is_square:
        raise CliError("E_INPUT", f"{args.gram}: training needs a square Gram matrix")
    y = _labels_for(g.row_ids, args.labels_from_sequences)
    keep = np.flatnonzero(y > 0)
    ids = [g.row_ids[i] for i in keep]
    model = train(g.entries[np.ix_(keep, keep)], y[keep], args.C, args.tol, ids)
    save_model(model, args.out)


def cmd_predict(args) -> None:
    model = load_model(_input(args.model))
    g = dm.read_gram(_input(args.gram))
    pred = predict(model, g)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("sample_id", "predicted_class"))
    w.writerows(zip(g.row_ids, (int(p) for p in pred)))
    dm.atomic_write(args.out, buf.getvalue().encode("utf-8"))


def _grid(args, weightings) -> CvGrid:
    return CvGrid(args.gammas, args.Cs, weightings or CvGrid().weightings)


def cmd_cv(args) -> None:
    seqs = dm.read_sequences(_input(args.sequences))
    seqs = [s for s in seqs if s.label > 0]
    if not args.no_standardize:
        seqs = fit_standardizer(seqs).apply(seqs)
    res = cross_validate(seqs, _grid(args, args.weightings), args.folds, args.seed, args.tol,
                         _threads(args))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("gamma", "C", "weighting", "mean_fold_OA"))
    for gamma, C, choice, score in res.scores:
        w.writerow((repr(gamma), repr(C), str(choice), repr(score)))
    if args.out:
        dm.atomic_write(args.out, buf.getvalue().encode("utf-8"))
    print(f"best gamma={res.gamma!r} C={res.C!r} weighting={res.weighting} mean_fold_OA={res.score!r}")


def cmd_evaluate(args) -> None:
    cube = dm.read_cube(_input(args.cube))
    labels = dm.read_labels(_input(args.labels))
    if args.hierarchy:
        _input(Path(args.hierarchy) / "manifest.txt")
        h = load_hierarchy(args.hierarchy)
    else:
        h = segment(cube, args.alphas)
    methods = [canonical_method(m) for m in args.methods.split(",")]
    grid = _grid(args, (args.qs or ()) + (args.lambdas or ()))
    res = run_experiment(cube, h, labels, args.n_per_class, args.repetitions, grid, methods,
                         seed=args.seed, folds=args.folds, tol=args.tol,
                         top_levels_discarded=args.top_discard, threads=_threads(args))
    write_results_csv(res, args.out)
    if args.summary:
        write_summary_csv(res, args.summary)
    for s in res.summaries:
        print(f"{s.method}: OA {100 * s.oa_mean:.2f} ({100 * s.oa_std:.2f}) "
              f"AA {100 * s.aa_mean:.2f} ({100 * s.aa_std:.2f}) "
              f"kappa {100 * s.kappa_mean:.2f} ({100 * s.kappa_std:.2f})")


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hsk", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def threads(sp):
        sp.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads (default: $HSK_THREADS or CPU count)")

    def grid_flags(sp):
        sp.add_argument("--gammas", type=_positive_values, default=DEFAULT_GAMMAS,
                        help="gamma grid (default 2^-6..2^4)")
        sp.add_argument("--Cs", type=_positive_values, default=DEFAULT_CS,
                        help="C grid (default 2^-2..2^10)")
        sp.add_argument("--folds", type=_positive_int, default=5, help="cross-validation folds")
        sp.add_argument("--tol", type=_positive_float, default=1e-3, help="SMO stopping tolerance")

    s = sub.add_parser("synth", help="write a synthetic labeled cube")
    s.add_argument("--rows", type=int, default=32)
    s.add_argument("--cols", type=int, default=32)
    s.add_argument("--bands", type=int, default=8)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--noise", type=float, default=0.25, help="Gaussian noise standard deviation")
    s.add_argument("--block", type=_positive_int, default=8, help="side of the class rectangles")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-cube", required=True, help="output HSC1 cube")
    s.add_argument("--out-labels", required=True, help="output HSL1 labels")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("segment", help="hierarchical best-merge segmentation")
    s.add_argument("--cube", required=True)
    s.add_argument("--alphas", type=_positive_values, default=DEFAULT_ALPHAS,
                   help="strictly increasing thresholds (default 2^-2..2^8)")
    s.add_argument("--no-standardize", action="store_true", help="merge on raw spectra")
    s.add_argument("--out", required=True, help="output directory (level files + manifest.txt)")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("sequences", help="ancestor sequences of labeled pixels")
    s.add_argument("--cube", required=True)
    s.add_argument("--hierarchy", required=True, help="directory written by 'segment'")
    s.add_argument("--labels", required=True)
    s.add_argument("--top-discard", type=int, default=0, help="extra coarse levels to drop")
    s.add_argument("--out", required=True, help="HSQ1 file with all labeled pixels")
    s.add_argument("--n-per-class", type=_positive_int, default=None,
                   help="also write a random train/test split")
    s.add_argument("--seed", type=int, default=0, help="split seed")
    s.add_argument("--train-out")
    s.add_argument("--test-out")
    s.set_defaults(func=cmd_sequences)

    s = sub.add_parser("gram", help="spectrum-kernel Gram matrix (HSG1/HSR1)")
    s.add_argument("--sequences", required=True, help="row samples (HSQ1)")
    s.add_argument("--against", help="column samples; omit for a square Gram")
    s.add_argument("--gamma", type=_positive_float, required=True)
    s.add_argument("--weighting", type=_weighting, required=True, help="q=<k> | const | decay=<lambda>")
    s.add_argument("--no-normalize", action="store_true")
    s.add_argument("--no-standardize", action="store_true",
                   help="skip z-scoring (fitted on the column samples)")
    s.add_argument("--out", required=True)
    threads(s)
    s.set_defaults(func=cmd_gram)

    s = sub.add_parser("train", help="one-against-one SVM on a precomputed Gram")
    s.add_argument("--gram", required=True)
    s.add_argument("--labels-from-sequences", required=True, help="HSQ1 file holding the labels")
    s.add_argument("--C", type=_positive_float, required=True)
    s.add_argument("--tol", type=_positive_float, default=1e-3)
    s.add_argument("--out", required=True, help="model file (JSON)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="classify with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--gram", required=True, help="test x train Gram")
    s.add_argument("--out", required=True, help="CSV sample_id,predicted_class")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("cv", help="grid-search cross-validation on training sequences")
    s.add_argument("--sequences", required=True)
    grid_flags(s)
    s.add_argument("--weightings", type=_weighting_list, default=None,
                   help="comma list, e.g. const,q=1,q=2,decay=0.5")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-standardize", action="store_true")
    s.add_argument("--out", help="CSV of every grid point")
    threads(s)
    s.set_defaults(func=cmd_cv)

    s = sub.add_parser("evaluate", help="repeated split / CV / train / test experiment")
    s.add_argument("--cube", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--hierarchy", help="directory written by 'segment' (default: segment now)")
    s.add_argument("--alphas", type=_positive_values, default=DEFAULT_ALPHAS)
    s.add_argument("--top-discard", type=int, default=0)
    s.add_argument("--n-per-class", type=_positive_int, required=True)
    s.add_argument("--repetitions", type=_positive_int, default=10)
    s.add_argument("--seed", type=int, default=0, help="base seed; repetition r uses seed + r")
    s.add_argument("--methods", default=",".join(METHODS), help="comma list of " + ", ".join(METHODS))
    grid_flags(s)
    s.add_argument("--qs", type=lambda t: tuple(parse_weighting(f"q={int(v)}") for v in parse_values(t)),
                   default=None, help="q grid for spectrum-q (default 1..p_max)")
    s.add_argument("--lambdas", type=lambda t: tuple(parse_weighting(f"decay={v!r}") for v in parse_values(t)),
                   default=None, help="lambda grid for spectrum-lambda (default 0.1..0.9)")
    s.add_argument("--out", required=True, help="per-repetition CSV")
    s.add_argument("--summary", help="mean/std CSV per method")
    threads(s)
    s.set_defaults(func=cmd_evaluate)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="hsk: %(message)s", stream=sys.stderr)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                args.func(args)
            finally:
                for w in caught:
                    print(f"hsk: warning: {w.message}", file=sys.stderr)
        return 0
    except CliError as exc:
        print(f"hsk: error {exc.code}: {exc}", file=sys.stderr)
        return exc.status
    except FileNotFoundError as exc:
        print(f"hsk: error E_NOT_FOUND: input file not found: {exc.filename}", file=sys.stderr)
        return 2
    except dm.FormatError as exc:
        print(f"hsk: error E_FORMAT: {exc}", file=sys.stderr)
        return 1
    except KernelError as exc:
        print(f"hsk: error E_KERNEL: {exc}", file=sys.stderr)
        return 1
    except SvmError as exc:
        print(f"hsk: error E_SVM: {exc}", file=sys.stderr)
        return 1
    except (ValueError, IndexError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"hsk: error E_INPUT: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

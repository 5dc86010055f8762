"""Drive every CLI stage on a small synthetic scene."""
from pathlib import Path

from hsk.cli import run

STAGES = (
    ("synth", ["synth", "--rows", "16", "--cols", "16", "--bands", "4", "--classes", "3",
               "--seed", "5", "--out-cube", "{d}/cube.hsc", "--out-labels", "{d}/labels.hsl"]),
    ("segment", ["segment", "--cube", "{d}/cube.hsc", "--out", "{d}/hier"]),
    ("sequences", ["sequences", "--cube", "{d}/cube.hsc", "--hierarchy", "{d}/hier",
                   "--labels", "{d}/labels.hsl", "--out", "{d}/all.hsq", "--n-per-class", "8",
                   "--seed", "2", "--train-out", "{d}/train.hsq", "--test-out", "{d}/test.hsq"]),
    ("gram", ["gram", "--sequences", "{d}/train.hsq", "--gamma", "0.25", "--weighting", "const",
              "--out", "{d}/train.hsg", "--threads", "2"]),
    ("gram-test", ["gram", "--sequences", "{d}/test.hsq", "--against", "{d}/train.hsq",
                   "--gamma", "0.25", "--weighting", "const", "--out", "{d}/test.hsg"]),
    ("train", ["train", "--gram", "{d}/train.hsg", "--labels-from-sequences", "{d}/train.hsq",
               "--C", "16", "--out", "{d}/model.json"]),
    ("predict", ["predict", "--model", "{d}/model.json", "--gram", "{d}/test.hsg",
                 "--out", "{d}/pred.csv"]),
    ("cv", ["cv", "--sequences", "{d}/train.hsq", "--gammas", "0.25,1", "--Cs", "1,16",
            "--weightings", "const,q=2", "--folds", "3", "--out", "{d}/cv.csv"]),
    ("evaluate", ["evaluate", "--cube", "{d}/cube.hsc", "--labels", "{d}/labels.hsl",
                  "--hierarchy", "{d}/hier", "--n-per-class", "5", "--repetitions", "2",
                  "--methods", "pixel-only,spectrum-c", "--gammas", "0.5", "--Cs", "4",
                  "--folds", "2", "--out", "{d}/runs.csv", "--summary", "{d}/summary.csv"]),
)


def run_pipeline(directory, synth_args=None) -> dict[str, int]:
    """Run all stages in order; returns the exit code of each.

    ``synth_args`` replaces the scene-shape flags of the first stage; an
    empty list keeps the generator defaults.
    """
    d = str(directory)
    codes = {}
    for name, argv in STAGES:
        argv = [a.format(d=d) for a in argv]
        if name == "synth" and synth_args is not None:
            argv = ["synth", *synth_args, *argv[-4:]]
        codes[name] = run(argv)
    return codes


def output_bytes(directory) -> dict[str, bytes]:
    root = Path(directory)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

"""Synthesize, train both stages, score, calibrate and evaluate with one config.

Usage: python3 scripts/run_desk.py [--config scripts/desk.yaml] [--workdir DIR] [--set key=value ...]
"""

import argparse
import sys
import time
from pathlib import Path

from spkver.cli import main
from spkver.config import load_config


def pipeline(common: list[str], root: Path):
    scores = root / "scores"
    trials = root / "manifests"
    return [
        ["synth"],
        ["augment"],
        ["train", "--stage", "1"],
        ["train", "--stage", "2"],
        ["extract", "--split", "eval"],
        ["extract", "--split", "dev"],
        ["score", "--split", "eval"],
        ["score", "--split", "dev"],
        ["calibrate", "--dev-scores", str(scores / "dev.txt"), "--dev-trials", str(trials / "dev_trials.txt"),
         "--scores", str(scores / "eval.txt")],
        ["evaluate", "--scores", str(scores / "eval.txt"), str(scores / "eval.cal.txt"),
         "--trials", str(trials / "eval_trials.txt")],
    ]


def run(argv=None) -> int:
    here = Path(__file__).parent
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(here / "desk.yaml"))
    p.add_argument("--workdir")
    p.add_argument("--set", dest="overrides", action="append", default=[])
    args = p.parse_args(argv)
    common = ["--config", args.config]
    if args.workdir:
        common += ["--workdir", args.workdir]
    for item in args.overrides:
        common += ["--set", item]
    cfg = load_config(args.config, args.overrides + ([f"paths.workdir={args.workdir}"] if args.workdir else []))
    root = Path(cfg.paths.workdir)
    for step in pipeline(common, root):
        t0 = time.perf_counter()
        code = main(step + common)
        print(f"[{step[0]}] exit {code} in {time.perf_counter() - t0:.1f}s", flush=True)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())

#!/usr/bin/env python3
"""Run the full desk-scale recipe end to end on the synthetic dataset:
three training phases, evaluation with a gate dump, and analytics.

Everything goes through the command-line interface, so this doubles as a
worked example of the command surface.
"""

import argparse
import sys
from pathlib import Path

from gaternet.cli import main as gaternet

REPO = Path(__file__).resolve().parent.parent


def run(args: list[str]) -> None:
    print(f"\n$ gaternet {' '.join(args)}", flush=True)
    code = gaternet(args)
    if code != 0:
        sys.exit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(REPO / "configs/synthetic_small.json"))
    parser.add_argument("--out-dir", default="runs/synthetic_small")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out_dir)
    base = ["--config", args.config, "--seed", str(args.seed),
            "--out-dir", str(out)]
    run(["train", *base, "--phase", "pretrain-backbone"])
    run(["train", *base, "--phase", "pretrain-gater"])
    run(["train", *base, "--phase", "joint"])
    run(["eval", "--config", args.config, "--seed", str(args.seed),
         "--ckpt", str(out / "joint.ckpt"),
         "--dump-gates", str(out / "gates.glog")])
    run(["analyze", "--gatelog", str(out / "gates.glog"),
         "--out", str(out / "analysis")])
    print(f"\ndone; outputs under {out}")


if __name__ == "__main__":
    main()

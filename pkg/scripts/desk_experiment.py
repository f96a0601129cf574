"""Run the three-seed desk experiment and print the four directional checks.

    python3 scripts/desk_experiment.py [--seeds 0 1 2] [--steps 800] [--json out.json]
"""
import argparse
import json
import sys
from dataclasses import asdict

from mdml.desk import run_desk_experiment


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=800)
    ap.add_argument("--json", help="write per-seed results and medians here")
    args = ap.parse_args(argv)
    summary = run_desk_experiment(tuple(args.seeds), args.steps, echo=print)
    for name, (ok, text) in summary.checks.items():
        print(f"check {name}: {'PASS' if ok else 'FAIL'}  {text}")
    print(f"total training+evaluation time: {summary.seconds:.0f}s")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"medians": summary.medians, "seeds": [asdict(r) for r in summary.seeds],
                       "checks": {k: {"passed": ok, "detail": t} for k, (ok, t) in summary.checks.items()}},
                      fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())

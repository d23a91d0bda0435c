"""Run the study twice with the same config and report whether every number matches."""

import argparse
import sys

from sarutil.config import load_config
from sarutil.study import run_study, timing_free


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    cfg = load_config(args.config, args.set)
    first = run_study(cfg, f"{args.out}/first")
    second = run_study(cfg, f"{args.out}/second")
    same = timing_free(first) == timing_free(second)
    print("identical" if same else "MISMATCH")
    sys.exit(0 if same else 1)


if __name__ == "__main__":
    main()

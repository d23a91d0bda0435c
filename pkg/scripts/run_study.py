"""Run the full seeded study and write study.json plus the harness reports.

    python scripts/run_study.py --out study-out [--config cfg.json] [--set key=value ...]
"""

import argparse
import json

from sarutil.config import load_config
from sarutil.study import run_study


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True, help="directory for study.json and reports")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    cfg = load_config(args.config, args.set)
    result = run_study(cfg, args.out)
    print(json.dumps({k: result[k] for k in ("retrain", "ablation", "utility_gap")}, indent=1))


if __name__ == "__main__":
    main()

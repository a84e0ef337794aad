#!/usr/bin/env python3
"""Train the same model once per gradient engine and tabulate perplexity.

Runs the bundled character corpus config for each requested engine,
collects the last validation perplexity from every run's epoch log, and
prints a small comparison table. Expects to be run from the repository
root (paths in the config are relative).
"""

import argparse
import csv
from pathlib import Path

from rnngrad import cli

DEFAULT_ENGINES = ["BPTT", "DSF_Sequential", "FTBPTT"]


def last_row(out_dir: Path) -> dict:
    with open(out_dir / cli.EPOCH_CSV, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows[-1]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/char-small.cfg")
    parser.add_argument("--engines", default=",".join(DEFAULT_ENGINES))
    parser.add_argument("--out-root", default="runs/compare")
    parser.add_argument("overrides", nargs="*", metavar="key=value")
    args = parser.parse_args()

    engines = [name.strip() for name in args.engines.split(",") if name.strip()]
    results = {}
    for engine in engines:
        out_dir = Path(args.out_root) / engine
        print(f"=== training with {engine} -> {out_dir}")
        code = cli.main(["train", "--config", args.config,
                         f"engine={engine}", f"out_dir={out_dir}"]
                        + args.overrides)
        if code != 0:
            print(f"run failed with exit code {code}")
            return code
        results[engine] = last_row(out_dir)

    print()
    print(f"{'engine':<16} {'train_ppl':>10} {'valid_ppl':>10} {'wall_s/epoch':>13}")
    for engine, row in results.items():
        print(f"{engine:<16} {float(row['train_ppl']):>10.3f} "
              f"{float(row['valid_ppl']):>10.3f} {float(row['wall_s']):>13.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Run every experiment config in a directory and print a one-line summary each.

    python scripts/run_all_configs.py                       # configs/acceptance
    python scripts/run_all_configs.py configs/acceptance --out-dir out/all

Outputs for config NAME land in OUT_DIR/NAME.  The exit code is the largest
code returned by any run (0 when everything succeeded).
"""
import argparse
import sys
import time
from pathlib import Path

from policyflow.cli import main as cli_main

ROOT = Path(__file__).resolve().parent.parent


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config_dir", nargs="?", default=str(ROOT / "configs" / "acceptance"))
    ap.add_argument("--out-dir", default="out/all")
    args = ap.parse_args(argv)

    paths = sorted(Path(args.config_dir).glob("*.json"))
    if not paths:
        print(f"no configs in {args.config_dir}", file=sys.stderr)
        return 2
    worst = 0
    total = time.perf_counter()
    for path in paths:
        t0 = time.perf_counter()
        code = cli_main(["run", str(path), "--out-dir", str(Path(args.out_dir) / path.stem)])
        print(f"  -> exit {code} in {time.perf_counter() - t0:.1f}s")
        worst = max(worst, code)
    print(f"{len(paths)} configs in {time.perf_counter() - total:.1f}s")
    return worst


if __name__ == "__main__":
    sys.exit(main())

"""Compare energy drift between two ``sgfree run`` outputs at step sizes dt and dt/2.

    python scripts/compare_drift.py OUT_COARSE OUT_FINE [--max-ratio 0.25]

Reads diagnostics.jsonl from each directory, prints the max |drift| of both
runs and their ratio, and exits 1 when the fine run is not at least
1/max-ratio times better.
"""

import argparse
import json
import sys
from pathlib import Path


def max_drift(out_dir: Path) -> float:
    lines = (out_dir / "diagnostics.jsonl").read_text().splitlines()
    records = [json.loads(ln) for ln in lines[1:]]  # first line is the schema header
    return max(abs(r["drift"]) for r in records)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("coarse", type=Path)
    ap.add_argument("fine", type=Path)
    ap.add_argument("--max-ratio", type=float, default=0.25)
    args = ap.parse_args(argv)
    a, b = max_drift(args.coarse), max_drift(args.fine)
    ratio = b / a if a > 0 else float("inf")
    ok = ratio <= args.max_ratio
    print(f"coarse max|drift| {a:.6e}")
    print(f"fine   max|drift| {b:.6e}")
    print(f"ratio {ratio:.4f} (limit {args.max_ratio})  {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""Desk-scale transfer-time sweep across layouts and buffer sizes.

Spawns an in-process gateway, times repeated sends of one seeded matrix for
every (layout, buffer) cell, writes the per-repetition CSV, and prints the
relative summary table. The full box-plot protocol (50 repetitions spaced 30
minutes apart to sample network variability) is available via --reps 50
--interval 1800.
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from alchemist import bench, layout
from alchemist.bench import BenchConfig


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=2000)
    parser.add_argument("--cols", type=int, default=1000)
    parser.add_argument("--workers", type=int, default=4)
    parser.add_argument("--reps", type=int, default=10)
    parser.add_argument("--interval", type=float, default=0.0)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--csv", default="transfer_sweep.csv")
    args = parser.parse_args()

    config = BenchConfig(
        rows=args.rows,
        cols=args.cols,
        workers=args.workers,
        pairs=(layout.VC_STAR, layout.MC_MR, layout.STAR_VC),
        buffer_sizes=(2**20, 10 * 2**20, 100 * 2**20),
        repetitions=args.reps,
        seed=args.seed,
        interval=args.interval,
    )
    records = bench.run_bench(
        config, progress=lambda r: print(f"  {r.pair} {r.buffer_bytes:>10d} rep {r.rep}: {r.seconds:.4f}s")
    )
    with open(args.csv, "w", encoding="utf-8", newline="") as fh:
        bench.emit_csv(records, fh)
    print(f"\nwrote {len(records)} records to {args.csv}\n")
    print(bench.format_summary(bench.summarize(records)))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Transfer-time benchmark: timed sends across layouts and buffer sizes.

For every (layout, buffer) cell the same seeded matrix is sent repeatedly
through a fresh session negotiated at that buffer size; each repetition is
recorded together with the planned message/fragment/byte counts for that
layout. Summaries report quartiles relative to a baseline cell, following the
box-plot protocol the gateway's transfer behaviour is judged by.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import random
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import layout, server
from .client import ClientSession
from .errors import AlchemistError, GatewayError, GatewayStartupError

CSV_COLUMNS = ("pair", "buffer_bytes", "rep", "seconds", "messages", "fragments", "bytes")
DEFAULT_BASELINE = (layout.VC_STAR, 100 * 2**20)


@dataclass(frozen=True)
class BenchConfig:
    rows: int
    cols: int
    workers: int
    pairs: tuple[layout.DistPair, ...] = (layout.VC_STAR, layout.MC_MR, layout.STAR_VC)
    buffer_sizes: tuple[int, ...] = (2**20, 10 * 2**20, 100 * 2**20)
    repetitions: int = 10
    seed: int = 0
    interval: float = 0.0
    connect: tuple[str, int] | None = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if not self.pairs or not self.buffer_sizes:
            raise ValueError("need at least one layout and one buffer size")


@dataclass(frozen=True)
class BenchRecord:
    pair: str
    buffer_bytes: int
    rep: int
    seconds: float
    messages: int
    fragments: int
    nbytes: int


def plan_for(config: BenchConfig, pair: layout.DistPair, buffer_bytes: int) -> layout.TransferPlan:
    """The transfer plan checked against each record of a cell (single-source send)."""
    grid = layout.make_grid(config.workers)
    return layout.plan_transfer(
        [(0, config.rows)], grid, pair, config.rows, config.cols, 8, buffer_bytes
    )


def _spawn_gateway(workers: int) -> server.Gateway:
    rng = random.Random()
    for _ in range(32):
        base = rng.randrange(20000, 55000)
        try:
            # The gateway's command log would drown the CSV; keep stdout clean.
            return server.start(workers, base, log_path=os.devnull)
        except GatewayStartupError:
            continue
    raise GatewayStartupError("could not find a free port range for the benchmark gateway")


def run_bench(config: BenchConfig, progress=None) -> list[BenchRecord]:
    """Run every (pair, buffer) cell; a failing cell is skipped, not fatal."""
    gateway = None
    if config.connect is None:
        gateway = _spawn_gateway(config.workers)
        address = (gateway.host, gateway.port)
    else:
        address = config.connect
    matrix = np.random.default_rng(config.seed).standard_normal((config.rows, config.cols))
    records: list[BenchRecord] = []
    try:
        for pair in config.pairs:
            for buffer_bytes in config.buffer_sizes:
                plan = plan_for(config, pair, buffer_bytes)
                try:
                    with ClientSession.connect(*address, buffer_bytes=buffer_bytes) as session:
                        if session.buffer_bytes != buffer_bytes:
                            raise AlchemistError(
                                f"gateway capped buffer at {session.buffer_bytes}"
                            )
                        session.request_workers(config.workers)
                        for rep in range(config.repetitions):
                            start = time.perf_counter()
                            session.send_matrix(matrix, pair)
                            seconds = time.perf_counter() - start
                            records.append(
                                BenchRecord(
                                    pair=pair.label,
                                    buffer_bytes=buffer_bytes,
                                    rep=rep,
                                    seconds=seconds,
                                    messages=plan.total_messages,
                                    fragments=plan.total_fragments,
                                    nbytes=plan.total_bytes,
                                )
                            )
                            if progress:
                                progress(records[-1])
                            if config.interval:
                                time.sleep(config.interval)
                except (GatewayError, AlchemistError, OSError) as exc:
                    print(
                        f"bench: cell ({pair.label}, {buffer_bytes}) aborted: {exc}",
                        file=sys.stderr,
                    )
    finally:
        if gateway is not None:
            gateway.stop()
    return records


# ---------------------------------------------------------------------------
# CSV emit/parse


def emit_csv(records: list[BenchRecord], stream) -> None:
    writer = csv.writer(stream)
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(
            [r.pair, r.buffer_bytes, r.rep, repr(r.seconds), r.messages, r.fragments, r.nbytes]
        )


def records_to_csv(records: list[BenchRecord]) -> str:
    buf = io.StringIO()
    emit_csv(records, buf)
    return buf.getvalue()


def parse_csv(text: str) -> list[BenchRecord]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {header}")
    return [
        BenchRecord(
            pair=row[0],
            buffer_bytes=int(row[1]),
            rep=int(row[2]),
            seconds=float(row[3]),
            messages=int(row[4]),
            fragments=int(row[5]),
            nbytes=int(row[6]),
        )
        for row in reader
    ]


# ---------------------------------------------------------------------------
# Summaries


@dataclass(frozen=True)
class CellSummary:
    pair: str
    buffer_bytes: int
    count: int
    messages: int
    fragments: int
    nbytes: int
    rel_mean: tuple[float, float, float, float, float]  # min, q1, median, q3, max / baseline mean
    rel_median: tuple[float, float, float, float, float]  # same, / baseline median


def _five_numbers(values: list[float]) -> tuple[float, float, float, float, float]:
    arr = np.sort(np.asarray(values, dtype=np.float64))
    return tuple(float(np.quantile(arr, q)) for q in (0.0, 0.25, 0.5, 0.75, 1.0))


def summarize(
    records: list[BenchRecord],
    baseline: tuple[layout.DistPair | str, int] = DEFAULT_BASELINE,
) -> list[CellSummary]:
    """Per-cell five-number summaries of seconds relative to the baseline cell."""
    base_pair, base_buffer = baseline
    base_label = base_pair.label if isinstance(base_pair, layout.DistPair) else str(base_pair)
    cells: dict[tuple[str, int], list[BenchRecord]] = {}
    for record in records:
        cells.setdefault((record.pair, record.buffer_bytes), []).append(record)
    base = cells.get((base_label, base_buffer))
    if not base:
        raise ValueError(f"baseline cell ({base_label}, {base_buffer}) missing from records")
    base_seconds = [r.seconds for r in base]
    base_mean = float(np.mean(base_seconds))
    base_median = float(np.median(base_seconds))
    summaries = []
    for (pair_label, buffer_bytes), cell in sorted(cells.items()):
        seconds = [r.seconds for r in cell]
        five = _five_numbers(seconds)
        summaries.append(
            CellSummary(
                pair=pair_label,
                buffer_bytes=buffer_bytes,
                count=len(cell),
                messages=cell[0].messages,
                fragments=cell[0].fragments,
                nbytes=cell[0].nbytes,
                rel_mean=tuple(v / base_mean for v in five),
                rel_median=tuple(v / base_median for v in five),
            )
        )
    return summaries


def format_summary(summaries: list[CellSummary]) -> str:
    header = (
        f"{'pair':<10} {'buffer':>12} {'n':>4} {'msgs':>7} {'frags':>9} "
        f"{'min':>7} {'q1':>7} {'median':>7} {'q3':>7} {'max':>7} {'med/med':>8}"
    )
    lines = [header, "-" * len(header)]
    for s in summaries:
        mn, q1, md, q3, mx = s.rel_mean
        lines.append(
            f"{s.pair:<10} {s.buffer_bytes:>12} {s.count:>4} {s.messages:>7} {s.fragments:>9} "
            f"{mn:>7.3f} {q1:>7.3f} {md:>7.3f} {q3:>7.3f} {mx:>7.3f} {s.rel_median[2]:>8.3f}"
        )
    lines.append("(seconds relative to baseline mean; med/med is median over baseline median)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# CLI


def _parse_pairs(text: str) -> tuple[layout.DistPair, ...]:
    chunks = [c for c in text.replace("]", "] ").split() if c.strip(", ")]
    if "[" in text:
        return tuple(layout.DistPair.parse(c.strip(", ")) for c in chunks)
    return tuple(layout.DistPair.parse(c) for c in text.split(",") if c.strip())


def _parse_buffers(text: str) -> tuple[int, ...]:
    return tuple(server._parse_size(c) for c in text.split(",") if c.strip())


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="alchemist-bench",
        description="Measure matrix transfer times across layouts and buffer sizes.",
    )
    parser.add_argument("--rows", type=int, required=True)
    parser.add_argument("--cols", type=int, required=True)
    parser.add_argument("--workers", type=int, required=True)
    parser.add_argument("--pairs", default="VC_STAR,MC_MR,STAR_VC",
                        help="comma-separated layouts, e.g. VC_STAR,STAR_VC (default %(default)s)")
    parser.add_argument("--buffers", default="1MB,10MB,100MB",
                        help="comma-separated buffer sizes with K/M/G suffixes (default %(default)s)")
    parser.add_argument("--reps", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--csv", metavar="PATH", default=None, help="write records to PATH instead of stdout")
    parser.add_argument("--interval", type=float, default=0.0, help="pause between repetitions in seconds")
    parser.add_argument("--connect", metavar="HOST:PORT", default=None,
                        help="use a running gateway instead of spawning one")
    args = parser.parse_args(argv)

    connect = None
    if args.connect:
        host, _, port = args.connect.rpartition(":")
        connect = (host, int(port))
    try:
        config = BenchConfig(
            rows=args.rows,
            cols=args.cols,
            workers=args.workers,
            pairs=_parse_pairs(args.pairs),
            buffer_sizes=_parse_buffers(args.buffers),
            repetitions=args.reps,
            seed=args.seed,
            interval=args.interval,
            connect=connect,
        )
    except (ValueError, AlchemistError) as exc:
        print(f"alchemist-bench: {exc}", file=sys.stderr)
        return 1

    records = run_bench(config)
    if not records:
        print("alchemist-bench: no records produced", file=sys.stderr)
        return 1
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            emit_csv(records, fh)
    else:
        emit_csv(records, sys.stdout)

    baseline = DEFAULT_BASELINE
    have = {(r.pair, r.buffer_bytes) for r in records}
    if (baseline[0].label, baseline[1]) not in have:
        fallback = max(have, key=lambda cell: cell[1])
        print(f"alchemist-bench: baseline cell absent, using ({fallback[0]}, {fallback[1]})",
              file=sys.stderr)
        baseline = (fallback[0], fallback[1])
    print(format_summary(summarize(records, baseline)), file=sys.stderr if not args.csv else sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())

import numpy as np
import pytest

from alchemist import bench, layout
from alchemist.bench import BenchConfig, BenchRecord, CellSummary, parse_csv, records_to_csv

from conftest import start_gateway


def small_config(gateway, **overrides):
    base = dict(
        rows=64,
        cols=32,
        workers=4,
        pairs=(layout.VC_STAR, layout.STAR_VC, layout.MC_MR),
        buffer_sizes=(2**20, 10 * 2**20, 100 * 2**20),
        repetitions=3,
        seed=1,
        connect=(gateway.host, gateway.port),
    )
    base.update(overrides)
    return BenchConfig(**base)


@pytest.fixture(scope="module")
def records():
    gw = start_gateway(4)
    try:
        config_gw = gw
        cfg = small_config(config_gw)
        yield bench.run_bench(cfg), cfg
    finally:
        gw.stop()


def test_record_cardinality(records):
    recs, cfg = records
    assert len(recs) == len(cfg.pairs) * len(cfg.buffer_sizes) * cfg.repetitions
    assert all(r.seconds > 0 for r in recs)


def test_records_match_plan(records):
    recs, cfg = records
    for record in recs:
        plan = bench.plan_for(cfg, layout.DistPair.parse(record.pair), record.buffer_bytes)
        assert record.messages == plan.total_messages
        assert record.fragments == plan.total_fragments
        assert record.nbytes == plan.total_bytes == cfg.rows * cfg.cols * 8


def test_messages_non_increasing_in_buffer(records):
    recs, cfg = records
    for pair in cfg.pairs:
        messages = [
            next(r.messages for r in recs if r.pair == pair.label and r.buffer_bytes == b)
            for b in sorted(cfg.buffer_sizes)
        ]
        assert all(later <= earlier for earlier, later in zip(messages, messages[1:]))


def test_fragment_ordering(records):
    recs, _ = records
    frags = {r.pair: r.fragments for r in recs}
    assert frags["VC_STAR"] <= frags["MC_MR"] <= frags["STAR_VC"]


def test_csv_round_trip(records):
    recs, _ = records
    assert parse_csv(records_to_csv(recs)) == recs


def test_csv_round_trip_synthetic():
    recs = [
        BenchRecord("VC_STAR", 2**20, 0, 0.12345678901234567, 20, 2000, 16000),
        BenchRecord("STAR_VC", 100 * 2**20, 4, 1e-05, 4, 64000, 16000),
    ]
    assert parse_csv(records_to_csv(recs)) == recs


def quartile_oracle(values, q):
    """Sort-based linear interpolation, written independently of numpy."""
    xs = sorted(values)
    if len(xs) == 1:
        return xs[0]
    pos = q * (len(xs) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(xs) - 1)
    frac = pos - lo
    return xs[lo] * (1 - frac) + xs[hi] * frac


def synthetic_records(seconds_by_cell):
    records = []
    for (pair, buffer_bytes), seconds in seconds_by_cell.items():
        for rep, s in enumerate(seconds):
            records.append(BenchRecord(pair, buffer_bytes, rep, s, 1, 1, 8))
    return records


class TestSummarize:
    BASE = ("VC_STAR", 100 * 2**20)

    def test_baseline_median_near_one(self):
        cells = {
            self.BASE: [1.0, 1.1, 0.9, 1.05, 0.95],
            ("STAR_VC", 2**20): [2.0, 2.2, 2.4],
        }
        summaries = bench.summarize(synthetic_records(cells))
        base = next(s for s in summaries if (s.pair, s.buffer_bytes) == self.BASE)
        assert base.rel_median[2] == pytest.approx(1.0)
        assert base.rel_mean[2] == pytest.approx(1.0 / np.mean(cells[self.BASE]))
        assert all(v > 0 for s in summaries for v in s.rel_mean)

    def test_quartiles_match_oracle(self):
        rng = np.random.default_rng(4)
        cells = {
            self.BASE: list(rng.uniform(0.5, 1.5, size=11)),
            ("MC_MR", 2**20): list(rng.uniform(1.0, 3.0, size=9)),
        }
        summaries = bench.summarize(synthetic_records(cells))
        base_mean = np.mean(cells[self.BASE])
        cell = next(s for s in summaries if s.pair == "MC_MR")
        for value, q in zip(cell.rel_mean, (0, 0.25, 0.5, 0.75, 1.0)):
            assert value == pytest.approx(quartile_oracle(cells[("MC_MR", 2**20)], q) / base_mean)

    def test_missing_baseline_errors(self):
        cells = {("STAR_VC", 2**20): [1.0, 2.0]}
        with pytest.raises(ValueError):
            bench.summarize(synthetic_records(cells))

    def test_format_summary_mentions_cells(self, records):
        recs, _ = records
        text = bench.format_summary(bench.summarize(recs))
        assert "VC_STAR" in text and "STAR_VC" in text


class TestCli:
    def test_pairs_and_buffers_parsing(self):
        pairs = bench._parse_pairs("VC_STAR, STAR_VC,MC_MR")
        assert pairs == (layout.VC_STAR, layout.STAR_VC, layout.MC_MR)
        pairs = bench._parse_pairs("[VC,STAR] [STAR,VC]")
        assert pairs == (layout.VC_STAR, layout.STAR_VC)
        assert bench._parse_buffers("1MB,10MB,1024") == (2**20, 10 * 2**20, 1024)

    def test_cli_writes_csv(self, tmp_path, gateway):
        out = tmp_path / "records.csv"
        code = bench.main(
            [
                "--rows", "32", "--cols", "16", "--workers", "2",
                "--pairs", "VC_STAR", "--buffers", "100MB", "--reps", "2",
                "--seed", "3", "--csv", str(out),
                "--connect", f"{gateway.host}:{gateway.port}",
            ]
        )
        assert code == 0
        parsed = parse_csv(out.read_text())
        assert len(parsed) == 2

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BenchConfig(rows=4, cols=4, workers=1, repetitions=0)
        with pytest.raises(ValueError):
            BenchConfig(rows=4, cols=4, workers=0)

    def test_full_protocol_knobs_accepted(self):
        cfg = BenchConfig(rows=4, cols=4, workers=1, repetitions=50, interval=1800.0)
        assert cfg.repetitions == 50 and cfg.interval == 1800.0


def test_failing_cell_aborts_without_killing_run(gateway):
    # Requesting more workers than the gateway has makes every cell abort.
    cfg = BenchConfig(
        rows=4, cols=4, workers=32, pairs=(layout.VC_STAR,),
        buffer_sizes=(2**20,), repetitions=2, seed=0,
        connect=(gateway.host, gateway.port),
    )
    assert bench.run_bench(cfg) == []

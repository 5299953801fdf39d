import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alchemist import layout
from alchemist.errors import (
    InvalidBufferError,
    InvalidGridError,
    InvalidLayoutError,
    InvalidPartitioningError,
    NotLocalError,
)
from alchemist.layout import (
    ALL_PAIRS,
    CIRC_CIRC,
    MC_MR,
    MR_MC,
    STAR_VC,
    STAR_VR,
    VC_STAR,
    VR_STAR,
    DistPair,
    DistScheme,
    ProcessGrid,
    global_of,
    local_of,
    local_selection,
    local_shape,
    make_grid,
    owner,
    plan_transfer,
)

# Published ownership tables for six workers on a 2x3 grid (1-based worker IDs).
GOLDEN_7X7 = {
    MC_MR: [
        [1, 3, 5, 1, 3, 5, 1],
        [2, 4, 6, 2, 4, 6, 2],
        [1, 3, 5, 1, 3, 5, 1],
        [2, 4, 6, 2, 4, 6, 2],
        [1, 3, 5, 1, 3, 5, 1],
        [2, 4, 6, 2, 4, 6, 2],
        [1, 3, 5, 1, 3, 5, 1],
    ],
    MR_MC: [
        [1, 2, 1, 2, 1, 2, 1],
        [3, 4, 3, 4, 3, 4, 3],
        [5, 6, 5, 6, 5, 6, 5],
        [1, 2, 1, 2, 1, 2, 1],
        [3, 4, 3, 4, 3, 4, 3],
        [5, 6, 5, 6, 5, 6, 5],
        [1, 2, 1, 2, 1, 2, 1],
    ],
    STAR_VC: [[1, 2, 3, 4, 5, 6, 1]] * 7,
    VC_STAR: [[k] * 7 for k in [1, 2, 3, 4, 5, 6, 1]],
}


grids = st.builds(
    make_grid,
    st.integers(min_value=1, max_value=12),
    st.none(),
)
pairs = st.sampled_from(ALL_PAIRS)
dims = st.integers(min_value=0, max_value=32)


def brute_owner_table(grid, pair, m, n):
    return [[owner(grid, pair, i, j) for j in range(n)] for i in range(m)]


class TestMakeGrid:
    def test_square_for_four(self):
        assert make_grid(4) == ProcessGrid(2, 2)

    def test_single_worker(self):
        assert make_grid(1) == ProcessGrid(1, 1)

    def test_force_rows(self):
        grid = make_grid(6, force_rows=2)
        assert (grid.rows, grid.cols) == (2, 3)
        assert grid.rank_at(1, 1) == 3  # worker ID 4

    def test_most_square_default(self):
        assert make_grid(6) == ProcessGrid(2, 3)
        assert make_grid(9) == ProcessGrid(3, 3)
        assert make_grid(12) == ProcessGrid(3, 4)
        assert make_grid(7) == ProcessGrid(1, 7)

    def test_force_rows_must_divide(self):
        with pytest.raises(InvalidGridError):
            make_grid(6, force_rows=4)

    def test_positive_worker_count(self):
        with pytest.raises(InvalidGridError):
            make_grid(0)

    def test_column_major_rank_placement(self):
        grid = make_grid(6, force_rows=2)
        assert [grid.rank_at(a, b) for b in range(3) for a in range(2)] == list(range(6))
        assert grid.position(3) == (1, 1)


class TestDistPair:
    def test_rejects_redundant_pairs(self):
        with pytest.raises(InvalidLayoutError):
            DistPair(DistScheme.STAR, DistScheme.STAR)
        with pytest.raises(InvalidLayoutError):
            DistPair(DistScheme.MC, DistScheme.MC)
        with pytest.raises(InvalidLayoutError):
            DistPair(DistScheme.VC, DistScheme.VR)

    def test_parse_forms(self):
        assert DistPair.parse("VC_STAR") == VC_STAR
        assert DistPair.parse("[MC,MR]") == MC_MR
        assert DistPair.parse("[ * , VC]") == STAR_VC
        assert DistPair.parse("star vr") == STAR_VR
        with pytest.raises(InvalidLayoutError):
            DistPair.parse("XX_YY")

    def test_labels(self):
        assert VC_STAR.label == "VC_STAR"
        assert str(MC_MR) == "[MC,MR]"


class TestOwner:
    @pytest.mark.parametrize("pair", list(GOLDEN_7X7))
    def test_golden_tables(self, pair):
        grid = make_grid(6)
        table = brute_owner_table(grid, pair, 7, 7)
        expected = [[v - 1 for v in row] for row in GOLDEN_7X7[pair]]
        assert table == expected

    def test_spot_values(self):
        grid = make_grid(6)
        assert owner(grid, MC_MR, 0, 1) == 2
        assert owner(grid, MR_MC, 2, 0) == 4
        assert owner(grid, STAR_VC, 4, 3) == 3

    def test_single_worker_owns_everything(self):
        grid = make_grid(1)
        for pair in ALL_PAIRS:
            assert owner(grid, pair, 5, 9) == 0

    def test_rejects_negative_indices(self):
        with pytest.raises(ValueError):
            owner(make_grid(4), VC_STAR, -1, 0)

    def test_vr_is_vc_with_rows_permuted(self):
        grid = make_grid(6)
        vc_owners = [owner(grid, VC_STAR, i, 0) for i in range(6)]
        vr_owners = [owner(grid, VR_STAR, i, 0) for i in range(6)]
        assert sorted(vc_owners) == sorted(vr_owners) == list(range(6))
        assert vr_owners == [0, 2, 4, 1, 3, 5]  # row-major sweep of the grid


class TestLocalGlobalMaps:
    def test_vc_star_example(self):
        coord = local_of(make_grid(6), VC_STAR, 7, 5)
        assert (coord.rank, coord.li, coord.lj) == (1, 1, 5)

    def test_mc_mr_example(self):
        coord = local_of(make_grid(6), MC_MR, 3, 4)
        assert (coord.rank, coord.li, coord.lj) == (3, 1, 1)

    def test_circ_is_identity_on_rank0(self):
        coord = local_of(make_grid(6), CIRC_CIRC, 11, 4)
        assert (coord.rank, coord.li, coord.lj) == (0, 11, 4)

    def test_global_of_rejects_unowning_rank(self):
        with pytest.raises(NotLocalError):
            global_of(make_grid(6), CIRC_CIRC, 3, 0, 0)

    @given(grids, pairs, dims, dims)
    def test_partition_of_unity(self, grid, pair, m, n):
        seen = {}
        for rank in range(grid.size):
            lr, lc = local_shape(grid, pair, rank, m, n)
            for li in range(lr):
                for lj in range(lc):
                    coord = global_of(grid, pair, rank, li, lj)
                    assert coord not in seen, f"{coord} owned twice"
                    seen[coord] = rank
        assert len(seen) == m * n
        for (i, j), rank in seen.items():
            assert 0 <= i < m and 0 <= j < n
            assert owner(grid, pair, i, j) == rank

    @given(grids, pairs, dims, dims)
    def test_inverse_maps(self, grid, pair, m, n):
        for i in range(m):
            for j in range(n):
                coord = local_of(grid, pair, i, j)
                assert global_of(grid, pair, coord.rank, coord.li, coord.lj) == (i, j)

    @given(grids, dims, dims)
    def test_vc_star_balance(self, grid, m, n):
        counts = [local_shape(grid, VC_STAR, rank, m, n)[0] for rank in range(grid.size)]
        assert max(counts) - min(counts) <= 1

    def test_local_shape_examples(self):
        grid = make_grid(6)
        assert local_shape(grid, VC_STAR, 0, 7, 7) == (2, 7)
        assert local_shape(grid, VC_STAR, 3, 7, 7) == (1, 7)
        assert local_shape(grid, MC_MR, 0, 0, 9) == (0, 0)

    @given(grids, pairs, dims, dims)
    def test_local_shapes_conserve_elements(self, grid, pair, m, n):
        total = sum(
            lr * lc
            for lr, lc in (local_shape(grid, pair, rank, m, n) for rank in range(grid.size))
        )
        assert total == m * n

    def test_selection_matches_shape(self):
        grid = make_grid(6)
        (r0, rs, rc), (c0, cs, cc) = local_selection(grid, MC_MR, 3, 7, 9)
        assert (rc, cc) == local_shape(grid, MC_MR, 3, 7, 9)
        rows = [r0 + rs * t for t in range(rc)]
        cols = [c0 + cs * t for t in range(cc)]
        for i in rows:
            for j in cols:
                assert owner(grid, MC_MR, i, j) == 3


# ---------------------------------------------------------------------------
# Transfer planning


def brute_plan(ranges, grid, pair, m, n, elem_bytes, buffer_bytes):
    """Independent per-element oracle: run lengths per row, bytes per rank."""
    usable = buffer_bytes - 16
    per = {}
    for pid, (start, stop) in enumerate(ranges):
        for i in range(start, stop):
            prev = None
            for j in range(n):
                rank = owner(grid, pair, i, j)
                cell = per.setdefault((pid, rank), [0, 0])
                cell[0] += elem_bytes
                if rank != prev:
                    cell[1] += 1
                prev = rank
    return {
        key: (nbytes, frags, -(-nbytes // usable)) for key, (nbytes, frags) in sorted(per.items())
    }


class TestPlanTransfer:
    def test_single_worker_single_partition(self):
        grid = make_grid(1)
        m, n = 5, 4
        for pair in ALL_PAIRS:
            plan = plan_transfer([(0, m)], grid, pair, m, n, 8, 100)
            assert len(plan.entries) == 1
            entry = plan.entries[0]
            assert entry.fragments == m
            assert entry.nbytes == m * n * 8
            assert entry.messages == -(-m * n * 8 // (100 - 16))

    def test_fragment_counts_2x2(self):
        grid = make_grid(4)
        vc = plan_transfer([(0, 8)], grid, VC_STAR, 8, 8, 8, 10**6)
        sv = plan_transfer([(0, 8)], grid, STAR_VC, 8, 8, 8, 10**6)
        assert vc.total_fragments == 8
        assert sv.total_fragments == 64

    def test_row_interleaving_ten_workers(self):
        grid = make_grid(10)
        m = 10_000
        plan = plan_transfer([(0, m)], grid, VC_STAR, m, 1, 8, 10**6)
        by_rank = {e.rank: e.nbytes // 8 for e in plan.entries}
        for rank in range(10):
            assert by_rank[rank] == sum(1 for i in range(rank, m, 10))

    @pytest.mark.parametrize("pair", ALL_PAIRS)
    def test_matches_per_element_oracle(self, pair):
        grid = make_grid(6)
        ranges = [(0, 3), (3, 7), (7, 11)]
        plan = plan_transfer(ranges, grid, pair, 11, 9, 8, 200)
        got = {(e.partition, e.rank): (e.nbytes, e.fragments, e.messages) for e in plan.entries}
        assert got == brute_plan(ranges, grid, pair, 11, 9, 8, 200)

    @given(
        grids,
        pairs,
        st.integers(min_value=0, max_value=20),
        st.integers(min_value=0, max_value=12),
        st.integers(min_value=32, max_value=4096),
    )
    @settings(max_examples=60)
    def test_conservation(self, grid, pair, m, n, buffer_bytes):
        bounds = sorted({0, m, *(min(m, b) for b in range(0, m, 3))})
        ranges = list(zip(bounds[:-1], bounds[1:])) or [(0, 0)]
        plan = plan_transfer(ranges, grid, pair, m, n, 8, buffer_bytes)
        assert plan.total_bytes == m * n * 8
        assert all(e.fragments >= 1 for e in plan.entries)

    @given(
        grids,
        pairs,
        st.integers(min_value=1, max_value=24),
        st.integers(min_value=1, max_value=12),
        st.integers(min_value=20, max_value=300),
        st.integers(min_value=1, max_value=2000),
    )
    @settings(max_examples=60)
    def test_messages_non_increasing_in_buffer(self, grid, pair, m, n, buffer_bytes, extra):
        small = plan_transfer([(0, m)], grid, pair, m, n, 8, buffer_bytes)
        large = plan_transfer([(0, m)], grid, pair, m, n, 8, buffer_bytes + extra)
        assert large.total_messages <= small.total_messages

    @pytest.mark.parametrize("workers", [4, 6, 12])
    def test_fragment_ordering_across_layouts(self, workers):
        grid = make_grid(workers)
        assert grid.rows > 1 and grid.cols > 1
        ranges = [(0, 5), (5, 16)]
        plans = {
            pair: plan_transfer(ranges, grid, pair, 16, 10, 8, 10**6).total_fragments
            for pair in (VC_STAR, MC_MR, STAR_VC)
        }
        assert plans[VC_STAR] <= plans[MC_MR] <= plans[STAR_VC]

    def test_rejects_bad_partitionings(self):
        grid = make_grid(4)
        with pytest.raises(InvalidPartitioningError):
            plan_transfer([(0, 4), (3, 8)], grid, VC_STAR, 8, 4, 8, 100)  # overlap
        with pytest.raises(InvalidPartitioningError):
            plan_transfer([(0, 4), (5, 8)], grid, VC_STAR, 8, 4, 8, 100)  # gap
        with pytest.raises(InvalidPartitioningError):
            plan_transfer([(0, 4)], grid, VC_STAR, 8, 4, 8, 100)  # short
        with pytest.raises(InvalidBufferError):
            plan_transfer([(0, 8)], grid, VC_STAR, 8, 4, 8, 16)  # no payload room

    def test_empty_matrix(self):
        plan = plan_transfer([], make_grid(4), VC_STAR, 0, 5, 8, 100)
        assert plan.entries == ()
        assert plan.total_bytes == 0

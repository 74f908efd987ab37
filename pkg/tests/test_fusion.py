from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coeflow.arch import TileConfig
from coeflow.errors import Infeasible
from coeflow.fusion import (
    AccessPattern,
    Interleave,
    allocate_pcus,
    build_kernel,
    check_plan,
    fold_transpose,
    partition_stage_buffer,
    plan_fusion,
)
from coeflow.opgraph import DType, OpGraph, Operator, Partition, TensorSpec, operational_intensity

from helpers import random_graph

bf = DType.BF16
TILE = TileConfig()


# -- compute allocation ------------------------------------------------------


def test_largest_remainder_tie_goes_to_earlier_stage():
    assert allocate_pcus([45, 10, 45], 10) == [5, 1, 4]


def test_single_stage_gets_everything():
    assert allocate_pcus([3.0], 7) == [7]


def test_equal_shares():
    assert allocate_pcus([1, 1], 4) == [2, 2]


def test_budget_below_stage_count():
    with pytest.raises(Infeasible):
        allocate_pcus([1, 1, 1], 2)


def test_demand_caps_total():
    assert allocate_pcus([1, 100], 50, demand=[1, 3]) == [1, 3]


@settings(max_examples=200)
@given(
    st.lists(st.integers(0, 10**6), min_size=1, max_size=8),
    st.integers(8, 200),
    st.data(),
)
def test_allocation_properties(weights, budget, data):
    demand = data.draw(st.lists(st.integers(1, 300), min_size=len(weights), max_size=len(weights)))
    a = allocate_pcus(weights, budget, demand)
    assert sum(a) == min(budget, sum(demand))
    assert all(1 <= x <= d for x, d in zip(a, demand))


@settings(max_examples=200)
@given(st.lists(st.integers(1, 10**6), min_size=2, max_size=6, unique=True), st.integers(6, 100), st.randoms())
def test_allocation_permutation_equivariant(weights, budget, rnd):
    # distinct weights with distinct remainders: only the tie-break could differ
    base = allocate_pcus(weights, budget)
    fracs = [w * budget / sum(weights) % 1 for w in weights]
    if len(set(round(f, 9) for f in fracs)) < len(fracs) or min(base) == 1:
        return
    perm = list(range(len(weights)))
    rnd.shuffle(perm)
    shuffled = allocate_pcus([weights[i] for i in perm], budget)
    assert shuffled == [base[i] for i in perm]


# -- buffers -------------------------------------------------------------------


def test_buffer_bandwidth_bound():
    t = TensorSpec("i0", (100, 100))
    b = partition_stage_buffer(t, 2 * TILE.pmu_read_bw, TILE)
    assert (b.pmu_alloc, b.reason) == (2, "bandwidth")


def test_buffer_capacity_bound():
    t = TensorSpec("i0", (1000, 1000))  # 2 MB = 4 PMUs
    b = partition_stage_buffer(t, 1e9, TILE)
    assert (b.pmu_alloc, b.reason) == (4, "capacity")


def test_buffer_both_bounds():
    t = TensorSpec("i0", (1000, 1000))
    b = partition_stage_buffer(t, 3 * TILE.pmu_read_bw, TILE)
    assert (b.pmu_alloc, b.reason) == (4, "both")


@given(st.integers(1, 10**7), st.floats(0, 5e12))
def test_buffer_units_cover_both_needs(nbytes, bw):
    t = TensorSpec("t", (nbytes,), DType.INT32)
    b = partition_stage_buffer(t, bw, TILE, footprint_bytes=nbytes)
    assert b.pmu_alloc * TILE.pmu_capacity_bytes >= nbytes
    assert b.pmu_alloc * TILE.pmu_read_bw >= bw * (1 - 1e-9)


@given(st.integers(0, 10**6), st.integers(1, 64))
def test_interleave_ranges_partition(total, units):
    il = Interleave("range", total, units)
    covered = sum(hi - lo for lo, hi in il.ranges())
    assert covered == total
    for (lo1, hi1), (lo2, hi2) in zip(il.ranges(), il.ranges()[1:]):
        assert hi1 == lo2
    if total:
        for a in {0, total // 2, total - 1}:
            lo, hi = il.ranges()[il.owner(a)]
            assert lo <= a < hi


# -- planning ------------------------------------------------------------------


def test_monarch_maximal_one_kernel(monarch_graph):
    plan = plan_fusion(monarch_graph, TILE, "maximal")
    assert len(plan) == 1
    k = plan.kernels[0]
    assert len(k.operators) == 4
    assert [s.op for s in k.stages] == ["Gemm0", "Mul", "Gemm1"]
    assert k.folded == {"Transpose": "y1"}
    assert k.buffer("y1").read_pattern.transposed
    assert check_plan(plan, TILE) == []


def test_monarch_gemms_get_most_pcus(monarch_graph):
    k = plan_fusion(monarch_graph, TILE, "maximal").kernels[0]
    alloc = {s.op: s.pcu_alloc for s in k.stages}
    assert alloc["Gemm1"] > alloc["Mul"] and alloc["Gemm0"] > alloc["Mul"]
    assert sum(alloc.values()) <= TILE.pcu_count


def test_monarch_unfused_four_kernels(monarch_graph):
    plan = plan_fusion(monarch_graph, TILE, "unfused")
    assert len(plan) == 4
    assert check_plan(plan, TILE) == []


def test_hinted_decoder_three_kernels(prefill_graph):
    plan = plan_fusion(prefill_graph, TILE, "hinted", ["p", "n2_out"])
    assert len(prefill_graph.operators) == 33
    assert len(plan) == 3
    assert check_plan(plan, TILE) == []


def _chain():
    R = 4096
    t = [
        TensorSpec("x", (R, 4)),
        TensorSpec("w1", (4, 32), bf, "weight"),
        TensorSpec("t1", (R, 32)),
        TensorSpec("w2", (32, 32), bf, "weight"),
        TensorSpec("t2", (R, 32)),
        TensorSpec("w3", (32, 4), bf, "weight"),
        TensorSpec("y", (R, 4)),
    ]
    ops = [
        Operator("G1", "gemm", ("x", "w1"), ("t1",)),
        Operator("G2", "gemm", ("t1", "w2"), ("t2",)),
        Operator("G3", "gemm", ("t2", "w3"), ("y",)),
    ]
    tile = TileConfig(pcu_count=16, pmu_count=20, pmu_capacity_bytes=2731, mesh_rows=8, mesh_cols=8,
                      tile_rows=256, tile_cols=4)
    return OpGraph(t, ops), tile


def _feasible(g, ops, tile):
    try:
        build_kernel(g, ops, tile)
        return True
    except Infeasible:
        return False


def test_gemm_chain_splits_at_capacity():
    g, tile = _chain()
    order = g.topological_order()
    k = build_kernel(g, ["G1", "G2"], tile)
    # the on-chip intermediate really takes ~60% of SRAM
    assert k.buffer("t1").footprint_bytes / tile.sram_total_bytes == pytest.approx(0.6, abs=0.01)
    # exhaustive oracle: the longest feasible prefix of the chain
    best = max(i for i in range(1, len(order) + 1) if _feasible(g, order[:i], tile))
    plan = plan_fusion(g, tile, "maximal")
    assert len(plan) == 2
    assert plan.kernels[0].order == order[:best]
    # and no 1-kernel plan exists
    assert not _feasible(g, order, tile)


def test_single_op_too_big_names_limit():
    t = [TensorSpec("a", (64, 4096)), TensorSpec("w", (4096, 4096), bf, "weight"), TensorSpec("c", (64, 4096))]
    g = OpGraph(t, [Operator("g", "gemm", ("a", "w"), ("c",))])
    tiny = TileConfig(pcu_count=4, pmu_count=4, mesh_rows=4, mesh_cols=4)
    with pytest.raises(Infeasible) as ei:
        plan_fusion(g, tiny, "maximal")
    assert ei.value.limit == "sram_capacity"


def test_fold_transpose_preserves_oi(monarch_graph):
    g = monarch_graph
    raw = build_kernel(g, g.topological_order(), TILE, fold=False)
    assert any(s.op == "Transpose" for s in raw.stages)
    folded = fold_transpose(raw)
    assert all(s.op != "Transpose" for s in folded.stages)
    assert folded.flops == raw.flops
    assert folded.boundary_bytes() == raw.boundary_bytes()


def test_fold_without_transpose_is_identity(monarch_graph):
    k = build_kernel(monarch_graph, ["Gemm0", "Mul"], TILE)
    assert fold_transpose(k) is k


def test_double_transpose_composes_to_identity():
    t = [TensorSpec("a", (32, 64)), TensorSpec("b", (64, 32)), TensorSpec("c", (32, 64)), TensorSpec("d", (32, 64))]
    ops = [
        Operator("t1", "transpose", ("a",), ("b",), {"perm": [1, 0]}),
        Operator("t2", "transpose", ("b",), ("c",), {"perm": [1, 0]}),
        Operator("e", "elementwise", ("c",), ("d",)),
    ]
    k = build_kernel(OpGraph(t, ops), ["t1", "t2", "e"], TILE)
    assert [s.op for s in k.stages] == ["e"]
    pat = k.buffer("a").read_pattern
    assert not pat.transposed


def test_access_pattern_transposed_offsets():
    p = AccessPattern.plain((2, 3)).compose((1, 0))
    assert p.view_shape == (3, 2)
    # element (j, i) of the view is element (i, j) of storage
    for i in range(2):
        for j in range(3):
            assert p.offset((j, i)) == i * 3 + j


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12))
def test_maximal_vs_unfused_on_random_graphs(seed, n):
    g = random_graph(random.Random(seed), n)
    mx = plan_fusion(g, TILE, "maximal")
    un = plan_fusion(g, TILE, "unfused")
    assert len(mx) <= len(un)
    assert check_plan(mx, TILE) == []
    assert operational_intensity(g, mx.partition).bytes <= operational_intensity(g, un.partition).bytes


def test_plan_json_dump(tmp_path, monarch_graph):
    import json

    plan = plan_fusion(monarch_graph, TILE, "maximal")
    plan.dump(tmp_path / "p.json")
    d = json.loads((tmp_path / "p.json").read_text())
    assert d["version"] == "fusionplan_v1"
    assert len(d["kernels"]) == 1

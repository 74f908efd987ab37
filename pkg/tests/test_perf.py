from __future__ import annotations

import random
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coeflow.arch import HBM, TileConfig
from coeflow.errors import Infeasible
from coeflow.fusion import build_kernel, plan_fusion
from coeflow.opgraph import OpGraph, Operator, Roofline, TensorSpec
from coeflow.perf import (
    COMPUTE,
    HO,
    MEMORY,
    SO,
    PipelineModel,
    RunSchedule,
    allreduce_time,
    decode_throughput_bound,
    estimate_kernel_time,
    estimate_pipeline,
    estimate_run,
    kernel_call_ratio,
    perf_csv,
    plan_time,
    scenario,
    simulate_kernel,
    simulate_pipeline,
)

TILE = TileConfig()


def random_pipeline(rng: random.Random) -> PipelineModel:
    n = rng.randint(1, 6)
    return PipelineModel(
        tuple(rng.uniform(0.5, 5.0) for _ in range(n)),
        tuple(rng.uniform(0.0, 3.0) for _ in range(n)),
        rng.randint(1, 1000),
        tuple(rng.randint(1, 4) for _ in range(n - 1)),
    )


# -- pipeline model ------------------------------------------------------------


@pytest.mark.parametrize("n,r,lat", [(1, 1.0, 0.0), (100, 2.0, 0.5), (1000, 3.0, 7.0)])
def test_one_stage_closed_form(n, r, lat):
    m = PipelineModel((r,), (lat,), n)
    assert simulate_pipeline(m).time == pytest.approx(n / r + lat, rel=1e-12)
    assert estimate_pipeline(m).time == pytest.approx(n / r + lat, rel=1e-12)


def test_two_balanced_stages():
    n, r, lat = 500, 4.0, 0.25
    m = PipelineModel((r, r), (lat, lat), n, 4)
    t = simulate_pipeline(m).time
    # first tile pays both stages, the rest stream at rate r
    assert t == pytest.approx(n / r + 1 / r + 2 * lat, rel=1e-9)
    assert t == pytest.approx(n / r + 2 * (1 / r + lat), rel=0.01)
    assert estimate_pipeline(m).time == pytest.approx(t, rel=1e-9)


def test_shallow_buffer_backpressure():
    # slot round trip 1/r + L + 1/r = 0.75 over 2 slots beats 1/r = 0.25
    m = PipelineModel((4.0, 4.0), (0.25, 0.25), 500, 2)
    est = estimate_pipeline(m)
    assert est.backpressure and est.interval == pytest.approx(0.375)
    assert simulate_pipeline(m).time == pytest.approx(est.time, rel=0.01)


def test_three_stage_example():
    # rates in tiles per microsecond
    m = PipelineModel((1e6, 2e6, 4e6), (1e-7, 1e-7, 1e-7), 100)
    est = estimate_pipeline(m)
    des = simulate_pipeline(m).time
    assert est.bottleneck == 0
    assert est.time == pytest.approx(100e-6, rel=0.05)
    assert abs(est.time - des) / des < 0.10


def test_twenty_random_pipelines_within_ten_percent():
    rng = random.Random(2024)
    t0 = time.perf_counter()
    for _ in range(20):
        m = random_pipeline(rng)
        est = estimate_pipeline(m).time
        des = simulate_pipeline(m, record=False).time
        assert abs(est - des) / des < 0.10, m
    assert time.perf_counter() - t0 < 10


def test_des_deterministic_and_ordered():
    m = PipelineModel((1.0, 3.0, 2.0), (0.5, 0.1, 0.2), 50, 2)
    a = simulate_pipeline(m, seed=9, jitter=0.2)
    b = simulate_pipeline(m, seed=9, jitter=0.2)
    assert a.events == b.events and a.time == b.time
    for e in range(3):
        ts = [ev.time for ev in a.for_entity(e)]
        assert ts == sorted(ts)


def test_zero_rate_infeasible():
    with pytest.raises(Infeasible) as ei:
        PipelineModel((1.0, 0.0), (0.0, 0.0), 10, names=("load", "Gemm0"))
    assert ei.value.limit == "Gemm0"


@settings(max_examples=100)
@given(st.randoms(use_true_random=False), st.integers(0, 5), st.floats(1.01, 10))
def test_faster_stage_never_slower(rnd, idx, factor):
    m = random_pipeline(rnd)
    i = idx % len(m.rates)
    rates = list(m.rates)
    rates[i] *= factor
    faster = PipelineModel(tuple(rates), m.latencies, m.tiles, m.depth)
    assert estimate_pipeline(faster).time <= estimate_pipeline(m).time * (1 + 1e-12)


# -- kernels -------------------------------------------------------------------


def _copy_graph(elems: int) -> OpGraph:
    t = [TensorSpec("a", (elems // 1024, 1024)), TensorSpec("b", (elems // 1024, 1024))]
    return OpGraph(t, [Operator("neg", "elementwise", ("a",), ("b",), {"op": "neg"})])


def test_memory_bound_kernel(sn40l):
    g = _copy_graph(2**28)  # 0.5 GiB in, 0.5 GiB out
    k = build_kernel(g, ["neg"], TILE)
    c = estimate_kernel_time(k, sn40l)
    total = sum(g.tensors[t].nbytes for t in ("a", "b"))
    assert total == 2**30
    assert c.est_time >= total / 1.8e12
    assert c.est_time >= 1e9 / 1.8e12  # the 0.556 ms floor for 1 GB
    assert c.bound == MEMORY
    assert c.roofline is Roofline.MEMORY_BOUND


def test_more_bytes_never_faster(sn40l):
    small = estimate_kernel_time(build_kernel(_copy_graph(2**22), ["neg"], TILE), sn40l).est_time
    big = estimate_kernel_time(build_kernel(_copy_graph(2**24), ["neg"], TILE), sn40l).est_time
    assert big >= small


def test_monarch_fused_compute_bound(monarch_graph, sn40l):
    k = plan_fusion(monarch_graph, TILE, "maximal").kernels[0]
    c = estimate_kernel_time(k, sn40l.with_(machine_balance=150.0))
    assert c.bound == COMPUTE
    assert c.roofline is Roofline.COMPUTE_BOUND


def test_kernel_cost_floors(prefill_graph, sn40l):
    plan = plan_fusion(prefill_graph, TILE, "hinted", ["p", "n2_out"])
    for k in plan.kernels:
        c = estimate_kernel_time(k, sn40l)
        peak_alloc = sum(s.pcu_alloc for s in k.stages) * TILE.pcu_peak_flops
        assert c.est_time >= k.flops / peak_alloc * (1 - 1e-12)
        assert c.est_time >= c.tier_bytes[HBM] / sn40l.hbm_bw * (1 - 1e-12)


def test_monarch_estimate_matches_des(sn40l):
    from coeflow.fixtures import monarch

    # a smaller batch keeps the event count low
    k = plan_fusion(monarch(batch=16), TILE, "maximal").kernels[0]
    c = estimate_kernel_time(k, sn40l)
    des = simulate_kernel(k, sn40l)
    assert abs(c.est_time - des) / des < 0.10


# -- runs ----------------------------------------------------------------------


def test_estimate_run_arithmetic():
    costs = {i: 50e-6 for i in range(32)}
    so = estimate_run(RunSchedule(tuple(range(32)), SO, 100e-6), costs)
    ho = estimate_run(RunSchedule(tuple(range(32)), HO, 5e-6), costs)
    assert so.total == pytest.approx(4.8e-3)
    assert ho.total == pytest.approx(1.76e-3)
    assert so.total / ho.total == pytest.approx(2.727, abs=1e-3)


def test_single_kernel_one_overhead_delta():
    so = estimate_run(RunSchedule((0,), SO, 100e-6), {0: 1e-3})
    ho = estimate_run(RunSchedule((0,), HO, 5e-6), {0: 1e-3})
    assert so.total - ho.total == pytest.approx(95e-6)


def test_long_kernels_amortize_overhead():
    costs = {i: 50e-3 for i in range(32)}
    so = estimate_run(RunSchedule(tuple(range(32)), SO, 100e-6), costs)
    ho = estimate_run(RunSchedule(tuple(range(32)), HO, 5e-6), costs)
    assert so.total / ho.total < 1.01


@given(st.floats(1e-7, 1.0), st.floats(1e-7, 1.0), st.integers(1, 64))
def test_ho_speedup_non_increasing_in_kernel_time(t1, t2, n):
    lo, hi = sorted((t1, t2))

    def speedup(t):
        c = {i: t for i in range(n)}
        s = RunSchedule(tuple(range(n)), SO, 100e-6)
        h = RunSchedule(tuple(range(n)), HO, 5e-6)
        return estimate_run(s, c).total / estimate_run(h, c).total

    assert speedup(hi) <= speedup(lo) * (1 + 1e-12)


def test_kernel_call_ratios(monarch_graph, prefill_graph):
    un = plan_fusion(monarch_graph, TILE, "unfused")
    fu = plan_fusion(monarch_graph, TILE, "maximal")
    assert kernel_call_ratio(un, fu) == 4
    assert kernel_call_ratio(fu, fu) == 1
    pre_un = plan_fusion(prefill_graph, TILE, "unfused")
    pre_fu = plan_fusion(prefill_graph, TILE, "hinted", ["p", "n2_out"])
    assert kernel_call_ratio(pre_un, pre_fu) == 11


@pytest.mark.parametrize("fixture", ["monarch_graph", "prefill_graph", "decode_graph"])
def test_fused_not_slower_than_unfused(fixture, request, sn40l):
    g = request.getfixturevalue(fixture)
    policy = "hinted" if g.meta.get("hints") else "maximal"
    s = scenario(g, sn40l, policy)
    assert s.fused_so <= s.unfused_so
    assert s.fused_ho <= s.unfused_ho
    assert s.fusion_speedup > 1


def test_orchestration_trend(decode_graph, prefill_graph, monarch_graph, sn40l):
    dec = scenario(decode_graph, sn40l)
    pre = scenario(prefill_graph, sn40l)
    assert dec.ho_speedup > pre.ho_speedup
    single = plan_fusion(monarch_graph, TILE, "maximal")
    delta = plan_time(single, sn40l, SO).total - plan_time(single, sn40l, HO).total
    assert delta == pytest.approx(sn40l.launch_overhead_so - sn40l.launch_overhead_ho)


# -- bounds --------------------------------------------------------------------


def test_decode_bound_llama8b(sn40l):
    p = sn40l.with_(sockets=16)
    tps = decode_throughput_bound(16e9, 0, p, 0.85)
    assert tps == pytest.approx(1530)
    assert tps >= 1042


def test_decode_bound_one_socket(sn40l):
    assert decode_throughput_bound(14e9, 0, sn40l, 0.5, sockets=1) == pytest.approx(64.2857, rel=1e-4)


@given(st.floats(1e6, 1e12), st.floats(0.01, 1.0))
def test_decode_bound_linear_in_bandwidth(model_bytes, util):
    from coeflow.arch import builtin_platform

    p = builtin_platform("sn40l_node")
    doubled = p.with_(tiers=tuple(
        t if t.name != HBM else type(t)(t.name, t.capacity_bytes, 2 * t.bandwidth_bytes_per_s) for t in p.tiers
    ))
    a = decode_throughput_bound(model_bytes, 0, p, util)
    assert decode_throughput_bound(model_bytes, 0, doubled, util) == 2 * a


def test_allreduce(sn40l):
    assert allreduce_time(0, sn40l) == 0
    assert allreduce_time(1e6, sn40l, sockets=1) == 0
    assert allreduce_time(50e9, sn40l) == pytest.approx(sn40l.allreduce_alpha + 1.0)


def test_perf_csv_columns(monarch_graph, sn40l):
    plan = plan_fusion(monarch_graph, TILE, "unfused")
    rows = perf_csv(plan, sn40l, des_budget=0).splitlines()
    assert rows[0] == "kernel,flops,bytes,bound,est_time,des_time,delta_pct"
    assert len(rows) == 5

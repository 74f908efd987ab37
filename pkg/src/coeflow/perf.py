"""Kernel and run time estimation.

A fused kernel is modelled as a linear pipeline of stages. Stage ``i``
accepts a new tile every ``1/r_i`` seconds and hands it downstream ``L_i``
seconds after its service slot ends. Stages talk through buffers of
``depth`` slots (double buffering by default): a slot is claimed when the
producer starts a tile and released once the consumer has read it.

:func:`estimate_pipeline` is the closed form, :func:`simulate_pipeline`
the event-driven oracle it is checked against.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .arch import DDR, HBM, PlatformConfig, TileConfig
from .errors import Infeasible, InvalidInput
from .opgraph import Roofline, classify_roofline

SO, HO = "SO", "HO"

COMPUTE, MEMORY, PIPELINE = "compute", "memory", "pipeline-bottleneck"


# ---------------------------------------------------------------------------
# pipeline model


@dataclass(frozen=True)
class PipelineModel:
    rates: tuple[float, ...]  # tiles/s per stage
    latencies: tuple[float, ...]  # seconds per stage
    tiles: int
    depth: int | tuple[int, ...] = 2  # slots per inter-stage buffer
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.rates) != len(self.latencies) or not self.rates:
            raise InvalidInput("pipeline needs matching, non-empty rates and latencies")
        if self.tiles < 1 or min(self.depths, default=1) < 1:
            raise InvalidInput("tiles and depth must be >= 1")
        if len(self.depths) != len(self.rates) - 1:
            raise InvalidInput("need one depth per inter-stage buffer")
        for i, r in enumerate(self.rates):
            if not r > 0:
                raise Infeasible(f"stage {self.label(i)} has zero throughput", self.label(i))
        if any(l < 0 for l in self.latencies):
            raise InvalidInput("latencies must be non-negative")

    def label(self, i: int) -> str:
        return self.names[i] if i < len(self.names) else f"stage{i}"

    @property
    def depths(self) -> tuple[int, ...]:
        if isinstance(self.depth, int):
            return (self.depth,) * (len(self.rates) - 1)
        return tuple(self.depth)

    def tail(self) -> "PipelineModel":
        """The pipeline without its first stage."""
        return PipelineModel(self.rates[1:], self.latencies[1:], self.tiles, self.depths[1:], self.names[1:])

    @property
    def service(self) -> tuple[float, ...]:
        return tuple(1.0 / r for r in self.rates)


@dataclass(frozen=True)
class PipelineEstimate:
    time: float
    fill_drain: float
    interval: float  # steady-state seconds per tile
    bottleneck: int
    backpressure: bool  # interval set by buffer depth rather than a stage rate


def estimate_pipeline(m: PipelineModel) -> PipelineEstimate:
    """Fill/drain of the first tile plus ``n - 1`` steady-state intervals.

    The interval is the larger of the slowest stage's service time and, for
    each buffer, the slot round trip (producer service, latency, consumer
    read) divided by the buffer depth.
    """
    svc = m.service
    fill = sum(s + l for s, l in zip(svc, m.latencies))
    interval, bott, bp = -1.0, 0, False
    for i, s in enumerate(svc):
        if s > interval:
            interval, bott, bp = s, i, False
    for i in range(len(svc) - 1):
        rt = (svc[i] + m.latencies[i] + svc[i + 1]) / m.depths[i]
        if rt > interval * (1 + 1e-12):
            interval, bott, bp = rt, i, True
    return PipelineEstimate(fill + (m.tiles - 1) * interval, fill, interval, bott, bp)


@dataclass(frozen=True)
class Event:
    time: float
    entity: int
    tile: int
    kind: str  # start | done


@dataclass
class EventTrace:
    events: list[Event] = field(default_factory=list)
    time: float = 0.0

    def for_entity(self, entity: int) -> list[Event]:
        return [e for e in self.events if e.entity == entity]


def simulate_pipeline(
    m: PipelineModel,
    seed: int = 0,
    jitter: float = 0.0,
    record: bool = True,
) -> EventTrace:
    """Tile-granular discrete-event simulation with bounded stage buffers.

    ``jitter`` perturbs each service time uniformly by up to that fraction,
    drawn from a generator seeded with ``seed``. Equal-time events are
    processed in (entity, sequence) order.
    """
    rng = random.Random(seed)
    n_st = len(m.rates)
    svc = m.service
    depths = m.depths
    started = [0] * n_st  # tiles started per stage
    done = [0] * n_st  # tiles available downstream per stage
    released = [0] * n_st  # tiles of stage i's output buffer already read by i+1
    busy = [False] * n_st
    trace = EventTrace()
    heap: list[tuple[float, int, int, str, int]] = []
    seq = 0

    def push(t: float, ent: int, kind: str, tile: int):
        nonlocal seq
        heapq.heappush(heap, (t, ent, seq, kind, tile))
        seq += 1

    def try_start(i: int, now: float) -> bool:
        j = started[i]
        if busy[i] or j >= m.tiles:
            return False
        if i > 0 and done[i - 1] <= j:
            return False
        if i < n_st - 1 and j - released[i] >= depths[i]:
            return False
        busy[i] = True
        started[i] += 1
        d = svc[i] * (1 + rng.uniform(-jitter, jitter)) if jitter else svc[i]
        if record:
            trace.events.append(Event(now, i, j, "start"))
        push(now + d, i, "free", j)
        push(now + d + m.latencies[i], i, "done", j)
        return True

    try_start(0, 0.0)
    end = 0.0
    while heap:
        now, i, _, kind, j = heapq.heappop(heap)
        if kind == "free":
            busy[i] = False
            if i > 0:
                released[i - 1] += 1
        else:
            done[i] += 1
            if record:
                trace.events.append(Event(now, i, j, "done"))
            if i == n_st - 1:
                end = max(end, now)
        progress = True
        while progress:
            progress = False
            for k in range(n_st):
                if try_start(k, now):
                    progress = True
    trace.time = end
    return trace


# ---------------------------------------------------------------------------
# kernel cost


@dataclass(frozen=True)
class KernelCost:
    kernel: int
    flops: int
    tier_bytes: dict
    stage_rates: tuple[float, ...]
    stage_names: tuple[str, ...]
    tiles: int
    fill_drain: float
    est_time: float
    bound: str
    bottleneck: str
    model: PipelineModel | None = None
    roofline: Roofline | None = None

    @property
    def bytes(self) -> float:
        return sum(self.tier_bytes.values())


def _tile_of(platform: PlatformConfig) -> TileConfig:
    return platform.tile or TileConfig(pcu_peak_flops=platform.peak_flops / 1040)


def kernel_pipeline(k, platform: PlatformConfig, placement=None, spilled: Iterable[str] = ()) -> PipelineModel:
    """Pipeline stages of a fused kernel: load, compute stages, store.

    Each compute stage runs at the slowest of its PCU rate, the bandwidth of
    the buffers it reads and writes, and (when a placement is given) the
    share of routed link bandwidth its flows receive.
    """
    tile = k.tile or _tile_of(platform)
    g = k.graph
    n = k.tiles
    lat = tile.stage_latency_cycles / tile.clock_hz
    spilled = set(spilled)
    hbm = platform.tier(HBM).bandwidth_bytes_per_s
    ddr_t = platform.tier(DDR) or platform.capacity_tier
    ddr = ddr_t.bandwidth_bytes_per_s if ddr_t else hbm

    slow = {}
    if placement is not None:
        from .fabric import flow_slowdown, flows_from_kernel, route

        routes = route(placement, flows_from_kernel(k, placement))
        for fid, f in flow_slowdown(routes, placement.mesh).items():
            t = fid.split(":")[0]
            slow[t] = min(slow.get(t, 1.0), f)

    def mem_stage(tensors) -> float | None:
        b_hbm = sum(g.tensors[t].nbytes for t in tensors if t not in spilled)
        b_ddr = sum(g.tensors[t].nbytes for t in tensors if t in spilled)
        sec = b_hbm / hbm + b_ddr / ddr
        return n / sec if sec > 0 else None

    names, rates, lats, units = [], [], [], []
    # weights held resident are loaded before the stream begins
    streamed_in = [t for t in k.inputs if not _resident(k, t)]
    resident_in = [t for t in k.inputs if _resident(k, t)]
    r = mem_stage(streamed_in)
    if r is not None:
        names.append("load")
        rates.append(r)
        lats.append(lat)
        units.append(1)
    buffers = {b.tensor: b for b in k.buffers}
    for s in k.stages:
        rate = s.throughput
        for b in buffers.values():
            per_tile = g.tensors[b.tensor].nbytes / n
            if per_tile <= 0:
                continue
            if _reads_buf(k, s.op, b.tensor):
                rate = min(rate, b.pmu_alloc * tile.pmu_read_bw / per_tile * slow.get(b.tensor, 1.0))
            if g.producer(b.tensor) == s.op:
                rate = min(rate, b.pmu_alloc * tile.pmu_write_bw / per_tile * slow.get(b.tensor, 1.0))
        if not math.isfinite(rate):
            rate = tile.clock_hz
        names.append(s.op)
        rates.append(rate)
        lats.append(lat)
        units.append(s.pcu_alloc)
    r = mem_stage(k.outputs)
    if r is not None:
        names.append("store")
        rates.append(r)
        lats.append(lat)
        units.append(1)
    if not rates:
        names, rates, lats, units = ["noop"], [tile.clock_hz], [lat], [1]
    # every unit is double buffered, and a pipelined producer also holds
    # latency * rate tiles in its own registers
    depths = [
        2 * max(units[i], units[i + 1]) + math.ceil(lats[i] * rates[i])
        for i in range(len(rates) - 1)
    ]
    pre = sum(g.tensors[t].nbytes for t in resident_in if t not in spilled) / hbm
    pre += sum(g.tensors[t].nbytes for t in resident_in if t in spilled) / ddr
    if pre > 0:
        # a one-tile preload stage ahead of the stream
        names.insert(0, "preload")
        rates.insert(0, 1.0 / pre)
        lats.insert(0, 0.0)
        depths.insert(0, 1)
        return _Preloaded(tuple(rates), tuple(lats), n, tuple(depths), tuple(names))
    return PipelineModel(tuple(rates), tuple(lats), n, tuple(depths), tuple(names))


class _Preloaded(PipelineModel):
    """Marker subclass: stage 0 is a one-off preload, not a per-tile stage."""


def _resident(k, tensor: str) -> bool:
    try:
        return k.buffer(tensor).resident
    except KeyError:
        return False


def _reads_buf(k, op: str, tensor: str) -> bool:
    from .fabric import _reads

    return _reads(k.graph, k, op, tensor)


def _pipeline_time(m: PipelineModel) -> PipelineEstimate:
    if isinstance(m, _Preloaded):
        pre = m.service[0]
        e = estimate_pipeline(m.tail())
        return PipelineEstimate(pre + e.time, pre + e.fill_drain, e.interval, e.bottleneck + 1, e.backpressure)
    return estimate_pipeline(m)


def _des_time(m: PipelineModel, seed: int = 0) -> float:
    if isinstance(m, _Preloaded):
        return m.service[0] + simulate_pipeline(m.tail(), seed, record=False).time
    return simulate_pipeline(m, seed, record=False).time


def estimate_kernel_time(k, platform: PlatformConfig, placement=None, spilled: Iterable[str] = ()) -> KernelCost:
    spilled = set(spilled)
    tile = k.tile or _tile_of(platform)
    m = kernel_pipeline(k, platform, placement, spilled)
    est = _pipeline_time(m)
    g = k.graph
    tier_bytes = {HBM: 0, DDR: 0}
    for t in (*k.inputs, *k.outputs):
        tier_bytes[DDR if t in spilled else HBM] += g.tensors[t].nbytes
    hbm = platform.tier(HBM).bandwidth_bytes_per_s
    ddr_t = platform.tier(DDR) or platform.capacity_tier
    ddr = ddr_t.bandwidth_bytes_per_s if ddr_t else hbm
    mem_time = tier_bytes[HBM] / hbm + tier_bytes[DDR] / ddr
    peak_alloc = sum(s.pcu_alloc for s in k.stages) * tile.pcu_peak_flops
    comp_time = k.flops / peak_alloc if peak_alloc and k.flops else 0.0
    t = max(est.time, mem_time, comp_time)

    name = m.label(est.bottleneck)
    if t == comp_time and comp_time > est.time:
        bound = COMPUTE
    elif t == mem_time and mem_time > est.time:
        bound = MEMORY
    elif est.backpressure:
        bound = PIPELINE
    elif name in ("load", "store", "preload"):
        bound = MEMORY
    else:
        stage = k.stage(name)
        bound = COMPUTE if math.isclose(m.rates[est.bottleneck], stage.throughput, rel_tol=1e-9) else PIPELINE
    nbytes = tier_bytes[HBM] + tier_bytes[DDR]
    roof = classify_roofline(k.flops / nbytes, platform.machine_balance) if nbytes else Roofline.COMPUTE_BOUND
    return KernelCost(
        kernel=k.index,
        flops=k.flops,
        tier_bytes=tier_bytes,
        stage_rates=m.rates,
        stage_names=m.names,
        tiles=k.tiles,
        fill_drain=est.fill_drain,
        est_time=t,
        bound=bound,
        bottleneck=name,
        model=m,
        roofline=roof,
    )


def simulate_kernel(k, platform: PlatformConfig, placement=None, seed: int = 0) -> float:
    """DES-measured time of a kernel under the same stage model."""
    return _des_time(kernel_pipeline(k, platform, placement), seed)


# ---------------------------------------------------------------------------
# runs


@dataclass(frozen=True)
class RunSchedule:
    kernels: tuple[int, ...]  # kernel indices in launch order
    orchestration: str = HO
    launch_overhead: float = 5e-6

    def __post_init__(self):
        if not self.kernels:
            raise InvalidInput("a run schedule needs at least one kernel")
        if self.orchestration not in (SO, HO):
            raise InvalidInput(f"orchestration must be SO or HO, got {self.orchestration!r}")

    @classmethod
    def for_plan(cls, plan, platform: PlatformConfig, orchestration: str = HO, repeat: int = 1) -> "RunSchedule":
        oh = platform.launch_overhead_so if orchestration == SO else platform.launch_overhead_ho
        idx = tuple(k.index for k in plan.kernels) * max(1, repeat)
        return cls(idx, orchestration, oh)


@dataclass(frozen=True)
class RunEstimate:
    total: float
    overhead: float
    compute: float
    per_kernel: tuple[tuple[int, float, float], ...]  # (kernel, overhead, est_time)


def estimate_run(s: RunSchedule, costs) -> RunEstimate:
    """Total = sum over launches of (launch overhead + kernel time)."""
    by_idx = costs if isinstance(costs, dict) else {c.kernel: c for c in costs}
    rows = []
    for i in s.kernels:
        if i not in by_idx:
            raise InvalidInput(f"no cost for kernel {i}")
        c = by_idx[i]
        rows.append((i, s.launch_overhead, c.est_time if hasattr(c, "est_time") else float(c)))
    oh = sum(r[1] for r in rows)
    ex = sum(r[2] for r in rows)
    return RunEstimate(oh + ex, oh, ex, tuple(rows))


def kernel_call_ratio(plan_unfused, plan_fused) -> float:
    if plan_unfused.graph is not plan_fused.graph and set(plan_unfused.graph.operators) != set(
        plan_fused.graph.operators
    ):
        raise InvalidInput("plans are over different graphs")
    return len(plan_unfused.kernels) / len(plan_fused.kernels)


def plan_time(plan, platform: PlatformConfig, orchestration: str = HO, repeat: int = 1) -> RunEstimate:
    costs = [estimate_kernel_time(k, platform) for k in plan.kernels]
    return estimate_run(RunSchedule.for_plan(plan, platform, orchestration, repeat), costs)


def decode_throughput_bound(
    model_bytes_per_token: float,
    kv_bytes_per_token: float,
    platform: PlatformConfig,
    hbm_utilization: float | None = None,
    sockets: int | None = None,
) -> float:
    """Tokens/s ceiling for memory-bound decode: every token streams the
    weights and its KV cache from HBM once."""
    u = platform.decode_utilization if hbm_utilization is None else hbm_utilization
    if not 0 < u <= 1:
        raise InvalidInput("hbm_utilization must be in (0, 1]")
    per_tok = model_bytes_per_token + kv_bytes_per_token
    if per_tok <= 0:
        raise InvalidInput("bytes per token must be positive")
    n = platform.sockets if sockets is None else sockets
    return n * platform.hbm_bw * u / per_tok


def allreduce_time(nbytes: float, platform: PlatformConfig, sockets: int | None = None) -> float:
    n = platform.sockets if sockets is None else sockets
    if n <= 1 or nbytes <= 0:
        return 0.0
    return platform.allreduce_alpha + nbytes / platform.allreduce_beta


# ---------------------------------------------------------------------------
# scenario suite and reports


@dataclass(frozen=True)
class Scenario:
    name: str
    kernels_unfused: int
    kernels_fused: int
    unfused_so: float
    unfused_ho: float
    fused_so: float
    fused_ho: float

    @property
    def call_ratio(self) -> float:
        return self.kernels_unfused / self.kernels_fused

    @property
    def ho_speedup(self) -> float:
        return self.fused_so / self.fused_ho

    @property
    def fusion_speedup(self) -> float:
        return self.unfused_ho / self.fused_ho


def scenario(g, platform: PlatformConfig, policy: str = "hinted", hints: Sequence[str] | None = None) -> Scenario:
    from .fusion import UNFUSED, plan_fusion

    tile = platform.tile or _tile_of(platform)
    hints = list(g.meta.get("hints", [])) if hints is None else list(hints)
    fused = plan_fusion(g, tile, policy, hints)
    unfused = plan_fusion(g, tile, UNFUSED)
    return Scenario(
        g.name,
        len(unfused),
        len(fused),
        plan_time(unfused, platform, SO).total,
        plan_time(unfused, platform, HO).total,
        plan_time(fused, platform, SO).total,
        plan_time(fused, platform, HO).total,
    )


def perf_csv(plan, platform: PlatformConfig, seed: int = 0, des_budget: int = 300_000) -> str:
    """Per-kernel report. The DES column is left empty for kernels whose
    stage-tile count exceeds ``des_budget`` (the simulation is O(events))."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kernel", "flops", "bytes", "bound", "est_time", "des_time", "delta_pct"])
    for k in plan.kernels:
        c = estimate_kernel_time(k, platform)
        des = delta = ""
        if c.model is not None and c.tiles * len(c.stage_rates) <= des_budget:
            d = simulate_kernel(k, platform, seed=seed)
            des = f"{d:.9g}"
            delta = f"{100.0 * (c.est_time - d) / d:.3f}" if d else "0"
        w.writerow([k.index, c.flops, c.bytes, c.bound, f"{c.est_time:.9g}", des, delta])
    return buf.getvalue()

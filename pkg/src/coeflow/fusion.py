"""Streaming-dataflow fusion planner.

Operators are grouped into kernels. Inside a kernel every non-transpose
operator becomes a pipeline stage running on one or more compute units
(PCUs); every physical tensor gets a stage buffer spread over one or more
memory units (PMUs). Transposes never become stages: they are folded into
the read pattern of the buffer holding their source tensor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .arch import TileConfig
from .errors import Infeasible, InvalidInput
from .opgraph import (
    GEMM,
    REDUCE,
    SOFTMAX,
    TRANSPOSE,
    OpGraph,
    Partition,
    kernel_boundary,
    op_flops,
    validate_graph,
)

SCHEMA = "fusionplan_v1"

MAXIMAL = "maximal"
UNFUSED = "unfused"
HINTED = "hinted"

# interleave granule for bandwidth-partitioned buffers
LINE_BYTES = 64


# ---------------------------------------------------------------------------
# access patterns and interleaving


@dataclass(frozen=True)
class AccessPattern:
    """Affine index map over a row-major tensor, visited in ``perm`` order.

    Logical index ``j`` of the permuted view maps to element offset
    ``sum(j[i] * stride[perm[i]])``.
    """

    shape: tuple[int, ...]
    perm: tuple[int, ...]

    @classmethod
    def plain(cls, shape: Sequence[int]) -> "AccessPattern":
        return cls(tuple(shape), tuple(range(len(shape))))

    @property
    def transposed(self) -> bool:
        return self.perm != tuple(range(len(self.perm)))

    @property
    def view_shape(self) -> tuple[int, ...]:
        return tuple(self.shape[p] for p in self.perm)

    def compose(self, perm: Sequence[int]) -> "AccessPattern":
        return AccessPattern(self.shape, tuple(self.perm[p] for p in perm))

    def strides(self) -> tuple[int, ...]:
        out = [1] * len(self.shape)
        for i in range(len(self.shape) - 2, -1, -1):
            out[i] = out[i + 1] * self.shape[i + 1]
        return tuple(out)

    def offset(self, index: Sequence[int]) -> int:
        st = self.strides()
        return sum(j * st[p] for j, p in zip(index, self.perm))


@dataclass(frozen=True)
class Interleave:
    """How a logical buffer's byte range is split across memory units.

    ``range`` gives each unit one contiguous slice; ``predicate`` assigns
    ``granule``-sized lines round-robin (a bank-bit style predicate).
    """

    mode: str
    total_bytes: int
    units: int
    granule: int = LINE_BYTES

    def ranges(self) -> list[tuple[int, int]]:
        if self.mode != "range":
            raise ValueError("ranges() only defined for range interleaving")
        chunk = -(-self.total_bytes // self.units) if self.total_bytes else 0
        return [
            (min(i * chunk, self.total_bytes), min((i + 1) * chunk, self.total_bytes))
            for i in range(self.units)
        ]

    def owner(self, addr: int) -> int:
        if not 0 <= addr < self.total_bytes:
            raise ValueError(f"address {addr} outside buffer")
        if self.mode == "range":
            chunk = -(-self.total_bytes // self.units)
            return addr // chunk
        return (addr // self.granule) % self.units


# ---------------------------------------------------------------------------
# plan values


@dataclass(frozen=True)
class StagePlan:
    op: str
    pcu_alloc: int
    parallelism: str  # data | tensor | pipeline-stage
    flops: int
    flops_per_tile: float
    throughput: float  # tiles/s


@dataclass(frozen=True)
class BufferPlan:
    tensor: str
    pmu_alloc: int
    reason: str  # bandwidth | capacity | both
    interleave: Interleave
    footprint_bytes: int
    required_bw: float
    write_bw: float = 0.0
    role: str = "internal"  # input | output | internal
    resident: bool = False
    read_pattern: AccessPattern | None = None
    write_pattern: AccessPattern | None = None
    capacity_units: int = 1
    bandwidth_units: int = 1


@dataclass(eq=False)
class FusedKernel:
    index: int
    operators: frozenset[str]
    order: list[str]
    stages: list[StagePlan]
    buffers: list[BufferPlan]
    inputs: list[str]
    outputs: list[str]
    tiles: int
    flops: int
    folded: dict[str, str] = field(default_factory=dict)  # transpose op -> buffer tensor
    graph: OpGraph | None = field(default=None, repr=False)
    tile: TileConfig | None = field(default=None, repr=False)

    @property
    def sram_bytes(self) -> int:
        return sum(b.footprint_bytes for b in self.buffers)

    @property
    def pcus(self) -> int:
        return sum(s.pcu_alloc for s in self.stages)

    @property
    def pmus(self) -> int:
        return sum(b.pmu_alloc for b in self.buffers)

    def buffer(self, tensor: str) -> BufferPlan:
        for b in self.buffers:
            if b.tensor == tensor:
                return b
        raise KeyError(tensor)

    def stage(self, op: str) -> StagePlan:
        for s in self.stages:
            if s.op == op:
                return s
        raise KeyError(op)

    def boundary_bytes(self) -> tuple[int, int]:
        g = self.graph
        return (
            sum(g.tensors[t].nbytes for t in self.inputs),
            sum(g.tensors[t].nbytes for t in self.outputs),
        )

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "operators": list(self.order),
            "tiles": self.tiles,
            "flops": self.flops,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "folded_transposes": self.folded,
            "sram_bytes": self.sram_bytes,
            "stages": [
                {
                    "op": s.op,
                    "pcu_alloc": s.pcu_alloc,
                    "parallelism": s.parallelism,
                    "flops": s.flops,
                    "throughput_tiles_per_s": s.throughput,
                }
                for s in self.stages
            ],
            "buffers": [
                {
                    "tensor": b.tensor,
                    "role": b.role,
                    "pmu_alloc": b.pmu_alloc,
                    "reason": b.reason,
                    "footprint_bytes": b.footprint_bytes,
                    "resident": b.resident,
                    "interleave": b.interleave.mode,
                    "read_perm": list(b.read_pattern.perm) if b.read_pattern else None,
                    "write_perm": list(b.write_pattern.perm) if b.write_pattern else None,
                }
                for b in self.buffers
            ],
        }


@dataclass(eq=False)
class FusionPlan:
    kernels: list[FusedKernel]
    policy: str
    graph: OpGraph = field(repr=False)

    @property
    def partition(self) -> Partition:
        return Partition(tuple(k.operators for k in self.kernels))

    def __len__(self) -> int:
        return len(self.kernels)

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA,
            "graph": self.graph.name,
            "policy": self.policy,
            "kernels": [k.to_dict() for k in self.kernels],
        }

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


# ---------------------------------------------------------------------------
# compute allocation


def allocate_pcus(
    weights: Sequence[float],
    budget: int,
    demand: Sequence[int] | None = None,
) -> list[int]:
    """Split ``budget`` units proportionally to ``weights``.

    Largest-remainder rounding; ties go to the earlier stage. Every stage
    gets at least one unit and at most ``demand[i]``; the total is
    ``min(budget, sum(demand))``.
    """
    n = len(weights)
    if n == 0:
        return []
    if budget < n:
        raise Infeasible(f"{n} stages need at least {n} PCUs, budget is {budget}", "pcu_count")
    caps = [max(1, int(d)) for d in demand] if demand is not None else [budget] * n
    target = min(budget, sum(caps))
    w = [Fraction(x) for x in weights]
    if sum(w) == 0:
        w = [Fraction(1)] * n

    # water-fill: stages whose proportional share exceeds their cap are pinned
    quota: list[Fraction] = [Fraction(0)] * n
    active = list(range(n))
    remaining = Fraction(target)
    while active:
        tot = sum(w[i] for i in active)
        share = {i: (remaining * w[i] / tot if tot else remaining / len(active)) for i in active}
        over = [i for i in active if share[i] > caps[i]]
        if not over:
            for i in active:
                quota[i] = share[i]
            break
        for i in over:
            quota[i] = Fraction(caps[i])
            remaining -= caps[i]
            active.remove(i)

    alloc = [math.floor(q) for q in quota]
    left = target - sum(alloc)
    order = sorted(range(n), key=lambda i: (-(quota[i] - alloc[i]), i))
    for i in order:
        if left <= 0:
            break
        if alloc[i] < caps[i]:
            alloc[i] += 1
            left -= 1
    for i in range(n):
        if alloc[i] == 0:
            donor = max(range(n), key=lambda j: (alloc[j], j))
            alloc[donor] -= 1
            alloc[i] = 1
    return alloc


def _parallelism(kind: str, alloc: int) -> str:
    if alloc == 1:
        return "pipeline-stage"
    return "tensor" if kind == GEMM else "data"


def allocate_stage_compute(
    g: OpGraph,
    ops: Sequence[str],
    pcu_budget: int,
    tile: TileConfig,
    tiles: int | None = None,
) -> list[StagePlan]:
    """One StagePlan per operator in ``ops``, PCUs proportional to FLOPs."""
    flops = [op_flops(g.operators[o], g) for o in ops]
    n_tiles = tiles if tiles is not None else _kernel_tiles(g, ops, tile)
    alloc = allocate_pcus(flops, pcu_budget, demand=[n_tiles] * len(ops))
    out = []
    for o, f, a in zip(ops, flops, alloc):
        per_tile = f / n_tiles
        rate = a * tile.pcu_peak_flops / per_tile if per_tile else math.inf
        out.append(StagePlan(o, a, _parallelism(g.operators[o].kind, a), f, per_tile, rate))
    return out


# ---------------------------------------------------------------------------
# buffers


def partition_stage_buffer(
    t,
    required_bw: float,
    tile: TileConfig,
    footprint_bytes: int | None = None,
    write_bw: float = 0.0,
) -> BufferPlan:
    """Memory units for one stage buffer: enough for both capacity and bandwidth."""
    if required_bw < 0 or write_bw < 0:
        raise ValueError("bandwidth must be non-negative")
    nbytes = t.nbytes if footprint_bytes is None else footprint_bytes
    cap_units = max(1, -(-nbytes // tile.pmu_capacity_bytes))
    bw_units = max(
        1,
        math.ceil(required_bw / tile.pmu_read_bw - 1e-9),
        math.ceil(write_bw / tile.pmu_write_bw - 1e-9),
    )
    units = max(cap_units, bw_units)
    if cap_units > 1 and bw_units > 1:
        reason = "both"
    elif bw_units > 1:
        reason = "bandwidth"
    else:
        reason = "capacity"
    mode = "predicate" if reason == "bandwidth" else "range"
    return BufferPlan(
        tensor=t.id,
        pmu_alloc=units,
        reason=reason,
        interleave=Interleave(mode, nbytes, units),
        footprint_bytes=nbytes,
        required_bw=required_bw,
        write_bw=write_bw,
        capacity_units=cap_units,
        bandwidth_units=bw_units,
    )


def _kernel_tiles(g: OpGraph, ops: Iterable[str], tile: TileConfig) -> int:
    n = 1
    for o in ops:
        for t in g.operators[o].outputs:
            n = max(n, -(-g.tensors[t].numel // tile.tile_elems))
    return n


def _plane(shape: tuple[int, ...]) -> int:
    return shape[-2] * shape[-1] if len(shape) >= 2 else shape[-1]


def _slab_elems(g: OpGraph, tid: str, reader: str, transposed: bool, tile: TileConfig) -> int:
    """Elements a reader needs resident before it can start on a tensor."""
    shape = g.shape(tid)
    if transposed:
        return _plane(shape)
    op = g.operators[reader]
    if op.kind == GEMM:
        if len(op.inputs) > 1 and op.inputs[1] == tid:
            return _plane(shape)
        return tile.tile_rows * shape[-1]
    if op.kind == SOFTMAX:
        return tile.tile_rows * shape[-1]
    if op.kind == REDUCE:
        axis = int(op.attrs.get("axis", -1)) % len(shape)
        if axis == len(shape) - 1:
            return tile.tile_rows * shape[-1]
    if op.kind == TRANSPOSE:
        return _plane(shape)
    return tile.tile_elems


@dataclass
class _Phys:
    """A physical tensor in a kernel and who reads it, after folding."""

    tid: str
    role: str
    readers: dict[str, AccessPattern]  # op id or "store:<tid>" -> pattern
    producer: str | None


def _physical_tensors(g: OpGraph, ops: Sequence[str], fold: bool):
    opset = set(ops)
    ins, outs, _ = kernel_boundary(g, ops)
    folded: dict[str, str] = {}
    alias: dict[str, tuple[str, AccessPattern]] = {}  # virtual tensor -> (root, pattern)
    order_t: dict[str, None] = {}
    for t in ins:
        order_t[t] = None
    for o in ops:
        for t in g.operators[o].outputs:
            order_t[t] = None
    for o in ops:
        op = g.operators[o]
        if fold and op.kind == TRANSPOSE:
            src = op.inputs[0]
            root, pat = alias.get(src, (src, AccessPattern.plain(g.shape(src))))
            perm = tuple(op.attrs.get("perm", tuple(reversed(range(len(g.shape(src)))))))
            alias[op.outputs[0]] = (root, pat.compose(perm))
            folded[o] = root
    phys: dict[str, _Phys] = {}
    for t in order_t:
        if t in alias:
            continue
        role = "input" if t in ins else ("output" if t in outs else "internal")
        p = g.producer(t)
        phys[t] = _Phys(t, role, {}, p if p in opset else None)
    for o in ops:
        op = g.operators[o]
        if fold and op.kind == TRANSPOSE:
            continue
        for t in op.inputs:
            root, pat = alias.get(t, (t, AccessPattern.plain(g.shape(t))))
            phys[root].readers[o] = pat
    for t in outs:
        if t in alias:
            root, pat = alias[t]
            phys[root].readers[f"store:{t}"] = pat
            if phys[root].role == "internal":
                phys[root].role = "output"
    return phys, folded, ins, outs


def _footprints(g: OpGraph, phys: dict[str, _Phys], tile: TileConfig) -> dict[str, tuple[int, int]]:
    """(streamed bytes, resident bytes) per physical tensor, double-buffered."""
    out = {}
    for t, p in phys.items():
        spec = g.tensors[t]
        bpe = spec.dtype.bytes_per_element
        slab = tile.tile_elems
        for r, pat in p.readers.items():
            if r.startswith("store:"):
                slab = max(slab, _plane(spec.shape) if pat.transposed else tile.tile_elems)
            else:
                slab = max(slab, _slab_elems(g, t, r, pat.transposed, tile))
        streamed = min(spec.nbytes, 2 * slab * bpe)
        out[t] = (streamed, spec.nbytes)
    return out


def _units(nbytes: int, tile: TileConfig) -> int:
    return max(1, -(-nbytes // tile.pmu_capacity_bytes))


def _check_resources(g: OpGraph, ops: Sequence[str], tile: TileConfig) -> str | None:
    """Name of the violated limit, or None when the kernel fits."""
    stages = [o for o in ops if g.operators[o].kind != TRANSPOSE]
    if len(stages) > tile.pcu_count:
        return "pcu_count"
    phys, _, _, _ = _physical_tensors(g, ops, fold=True)
    fp = _footprints(g, phys, tile)
    if sum(_units(s, tile) for s, _ in fp.values()) > tile.pmu_count:
        return "sram_capacity"
    return None


def build_kernel(
    g: OpGraph,
    ops: Iterable[str],
    tile: TileConfig,
    index: int = 0,
    fold: bool = True,
) -> FusedKernel:
    opset = set(ops)
    order = [o for o in g.topological_order() if o in opset]
    limit = _check_resources(g, order, tile)
    if limit is not None:
        raise Infeasible(f"kernel {sorted(order)} exceeds tile {limit}", limit)

    stage_ops = [o for o in order if not (fold and g.operators[o].kind == TRANSPOSE)]
    n_tiles = _kernel_tiles(g, stage_ops or order, tile)
    stages = allocate_stage_compute(g, stage_ops, tile.pcu_count, tile, n_tiles)
    rates = {s.op: s.throughput for s in stages}
    finite = [r for r in rates.values() if math.isfinite(r)]
    default_rate = min(finite) if finite else tile.pmu_read_bw / (tile.tile_elems * 2)

    phys, folded, ins, outs = _physical_tensors(g, order, fold)
    fp = _footprints(g, phys, tile)

    # weights and constants stay resident while they fit, otherwise stream
    used = sum(_units(s, tile) for s, _ in fp.values())
    resident: set[str] = set()
    for t in phys:
        spec = g.tensors[t]
        if phys[t].role == "input" and spec.role in ("weight", "constant"):
            s, full = fp[t]
            extra = _units(full, tile) - _units(s, tile)
            if used + extra <= tile.pmu_count:
                used += extra
                resident.add(t)

    buffers: list[BufferPlan] = []
    for t, p in phys.items():
        spec = g.tensors[t]
        per_tile = spec.nbytes / n_tiles
        read_rates = [rates.get(r, default_rate) for r in p.readers if not r.startswith("store:")]
        read_rate = max((r if math.isfinite(r) else default_rate for r in read_rates), default=0.0)
        w_rate = rates.get(p.producer, default_rate) if p.producer else 0.0
        if not math.isfinite(w_rate):
            w_rate = default_rate
        footprint = fp[t][1] if t in resident else fp[t][0]
        b = partition_stage_buffer(spec, read_rate * per_tile, tile, footprint, w_rate * per_tile)
        reads = [pat for r, pat in p.readers.items() if pat.transposed and not r.startswith("store:")]
        stores = [pat for r, pat in p.readers.items() if pat.transposed and r.startswith("store:")]
        plain = AccessPattern.plain(spec.shape)
        b = replace(
            b,
            role=p.role,
            resident=t in resident,
            read_pattern=reads[0] if reads else plain,
            write_pattern=stores[0] if stores else plain,
        )
        buffers.append(b)

    buffers = _trim_bandwidth_units(buffers, tile)
    return FusedKernel(
        index=index,
        operators=frozenset(order),
        order=order,
        stages=stages,
        buffers=buffers,
        inputs=ins,
        outputs=outs,
        tiles=n_tiles,
        flops=sum(s.flops for s in stages) + sum(
            op_flops(g.operators[o], g) for o in order if o not in rates
        ),
        folded=folded,
        graph=g,
        tile=tile,
    )


def _trim_bandwidth_units(buffers: list[BufferPlan], tile: TileConfig) -> list[BufferPlan]:
    """Scale bandwidth-driven extra units down when the PMU budget is short.

    Trimmed buffers record the bandwidth they can actually serve.
    """
    base = sum(b.capacity_units for b in buffers)
    extra = [max(0, b.pmu_alloc - b.capacity_units) for b in buffers]
    spare = tile.pmu_count - base
    if sum(extra) <= spare:
        return buffers
    scale = max(spare, 0) / sum(extra)
    out = []
    for b, e in zip(buffers, extra):
        if e == 0:
            out.append(b)
            continue
        units = b.capacity_units + math.floor(e * scale)
        out.append(
            replace(
                b,
                pmu_alloc=units,
                required_bw=min(b.required_bw, units * tile.pmu_read_bw),
                write_bw=min(b.write_bw, units * tile.pmu_write_bw),
                bandwidth_units=units,
                interleave=Interleave(b.interleave.mode, b.footprint_bytes, units),
                reason="both" if units > 1 and b.capacity_units > 1 else b.reason,
            )
        )
    return out


def fold_transpose(kernel: FusedKernel) -> FusedKernel:
    """Remove Transpose stages, moving their permutation into buffer access patterns."""
    if not any(kernel.graph.operators[s.op].kind == TRANSPOSE for s in kernel.stages):
        return kernel
    return build_kernel(kernel.graph, kernel.order, kernel.tile, kernel.index, fold=True)


# ---------------------------------------------------------------------------
# planning


def _touches(g: OpGraph, op: str, group: set[str]) -> bool:
    return any(n in group for n in g.neighbors(op))


def _greedy(g: OpGraph, seq: Sequence[str], tile: TileConfig) -> list[list[str]]:
    kernels: list[list[str]] = []
    cur: list[str] = []
    for o in seq:
        if cur and _touches(g, o, set(cur)) and _check_resources(g, cur + [o], tile) is None:
            cur.append(o)
            continue
        if cur:
            kernels.append(cur)
        limit = _check_resources(g, [o], tile)
        if limit is not None:
            raise Infeasible(f"operator {o!r} alone exceeds tile {limit}", limit)
        cur = [o]
    if cur:
        kernels.append(cur)
    return kernels


def plan_fusion(
    g: OpGraph,
    tile: TileConfig,
    policy: str = MAXIMAL,
    boundaries: Iterable[str] = (),
) -> FusionPlan:
    """Partition ``g`` into fused kernels.

    ``maximal`` grows kernels greedily in topological order until a PCU or
    SRAM limit would be exceeded; ``unfused`` makes one kernel per operator;
    ``hinted`` additionally cuts after the producer of each tensor in
    ``boundaries``.
    """
    rep = validate_graph(g)
    if not rep.ok:
        raise InvalidInput("invalid graph: " + "; ".join(rep.errors))
    order = g.topological_order()
    if policy == UNFUSED:
        groups = [[o] for o in order]
        for o in order:
            limit = _check_resources(g, [o], tile)
            if limit is not None:
                raise Infeasible(f"operator {o!r} alone exceeds tile {limit}", limit)
    elif policy in (MAXIMAL, HINTED):
        cuts = set()
        if policy == HINTED:
            for t in boundaries:
                if t not in g.tensors:
                    raise InvalidInput(f"hint names unknown tensor {t!r}")
                p = g.producer(t)
                if p is not None:
                    cuts.add(p)
        segments: list[list[str]] = [[]]
        for o in order:
            segments[-1].append(o)
            if o in cuts:
                segments.append([])
        groups = [k for seg in segments if seg for k in _greedy(g, seg, tile)]
    else:
        raise InvalidInput(f"unknown fusion policy {policy!r}")
    kernels = [build_kernel(g, grp, tile, i) for i, grp in enumerate(groups)]
    return FusionPlan(kernels, policy, g)


def check_plan(plan: FusionPlan, tile: TileConfig) -> list[str]:
    """Invariant violations of a plan, checkable from the plan alone."""
    from .opgraph import validate_partition

    errs = list(validate_partition(plan.graph, plan.partition).errors)
    for k in plan.kernels:
        if k.pcus > tile.pcu_count:
            errs.append(f"kernel {k.index} uses {k.pcus} PCUs > {tile.pcu_count}")
        if k.pmus > tile.pmu_count:
            errs.append(f"kernel {k.index} uses {k.pmus} PMUs > {tile.pmu_count}")
        if k.sram_bytes > tile.sram_total_bytes:
            errs.append(f"kernel {k.index} uses {k.sram_bytes} B SRAM > {tile.sram_total_bytes}")
        if any(plan.graph.operators[s.op].kind == TRANSPOSE for s in k.stages):
            errs.append(f"kernel {k.index} has a transpose stage")
        pos = {o: i for i, o in enumerate(k.order)}
        idx = [pos[s.op] for s in k.stages]
        if idx != sorted(idx):
            errs.append(f"kernel {k.index} stages not in topological order")
    return errs

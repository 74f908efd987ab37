"""Composition-of-Experts serving simulator.

Requests are routed to experts by a stub policy. Experts live in the
platform's capacity tier (DDR, or host memory on GPU nodes) and are copied
into HBM on demand; HBM holds as many as fit after the per-accelerator
reserve, evicting least-recently-used experts.
"""

from __future__ import annotations

import csv
import io
import json
import math
import random
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .arch import HBM, PlatformConfig
from .errors import Infeasible, InvalidInput
from .perf import decode_throughput_bound

SCHEMA = "coeconfig_v1"

# Llama-2-7B style KV cache: 2 (K,V) x 32 layers x 4096 hidden x 2 bytes
KV_BYTES_PER_TOKEN_7B = 2 * 32 * 4096 * 2


@dataclass(frozen=True)
class ExpertModel:
    id: str
    param_count: float = 7e9
    dtype_bytes: int = 2
    hbm_segment_bytes: int | None = None  # bytes copied on a switch
    read_only_fraction: float = 1.0
    kv_bytes_per_token: int = KV_BYTES_PER_TOKEN_7B

    def __post_init__(self):
        if not 0.0 <= self.read_only_fraction <= 1.0:
            raise InvalidInput(f"{self.id}: read_only_fraction must be in [0, 1]")
        if self.hbm_segment_bytes is not None and not 0 <= self.hbm_segment_bytes <= self.bytes:
            raise InvalidInput(f"{self.id}: HBM segment larger than the expert")

    @property
    def bytes(self) -> int:
        return int(round(self.param_count * self.dtype_bytes))

    @property
    def segment(self) -> int:
        return self.bytes if self.hbm_segment_bytes is None else self.hbm_segment_bytes

    @property
    def ddr_segment_bytes(self) -> int:
        """Bytes that stay in the capacity tier while the expert runs."""
        return self.bytes - self.segment

    @property
    def writable_bytes(self) -> int:
        return int(round(self.segment * (1.0 - self.read_only_fraction)))

    @classmethod
    def from_manifest(cls, id: str, manifest: Mapping, dtype_bytes: int = 2) -> "ExpertModel":
        """Build from a ``memplan_v1`` document of the compiled expert."""
        s = manifest["summary"]
        total = int(s["total_bytes"])
        hbm = total - int(s["spill_bytes"])
        ro = int(s.get("read_only_bytes", total))
        return cls(
            id=id,
            param_count=total / dtype_bytes,
            dtype_bytes=dtype_bytes,
            hbm_segment_bytes=hbm,
            read_only_fraction=min(1.0, ro / total) if total else 1.0,
        )


@dataclass(frozen=True)
class RouterCost:
    """Router charged as one decode pass of a ``param_count`` model."""

    param_count: float = 7e9
    dtype_bytes: int = 2
    fixed_seconds: float | None = None

    def time(self, platform: PlatformConfig, tp: int) -> float:
        if self.fixed_seconds is not None:
            return self.fixed_seconds
        rate = decode_throughput_bound(self.param_count * self.dtype_bytes, 0, platform, sockets=tp)
        return 1.0 / rate


@dataclass(frozen=True)
class CoEConfig:
    experts: tuple[ExpertModel, ...]
    batch: int = 8
    output_tokens: int = 20
    prompt_tokens: int = 4096
    tp: int = 8
    router: RouterCost = RouterCost()
    reserve_bytes: float | None = None  # per accelerator; None = platform default

    def __post_init__(self):
        if self.batch < 1:
            raise InvalidInput("batch must be >= 1")
        if self.tp < 1:
            raise InvalidInput("tensor-parallel degree must be >= 1")
        if not self.experts:
            raise InvalidInput("config needs at least one expert")
        ids = [e.id for e in self.experts]
        if len(set(ids)) != len(ids):
            raise InvalidInput("duplicate expert ids")

    @classmethod
    def uniform(cls, n: int, param_count: float = 7e9, dtype_bytes: int = 2, **kw) -> "CoEConfig":
        return cls(tuple(ExpertModel(f"E{i}", param_count, dtype_bytes) for i in range(n)), **kw)

    def expert(self, eid: str) -> ExpertModel:
        for e in self.experts:
            if e.id == eid:
                return e
        raise InvalidInput(f"unknown expert {eid!r}")

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.experts]

    @classmethod
    def from_dict(cls, d: Mapping) -> "CoEConfig":
        d = dict(d)
        if d.pop("version", SCHEMA) != SCHEMA:
            raise InvalidInput(f"expected a {SCHEMA} document")
        dtype = str(d.pop("dtype", "BF16")).upper()
        bpe = {"BF16": 2, "FP32": 4, "INT32": 4}.get(dtype)
        if bpe is None:
            raise InvalidInput(f"unknown dtype {dtype!r}")
        n = int(d.pop("experts", 150))
        params = float(d.pop("param_count", 7e9))
        router = d.pop("router", None)
        try:
            cfg = cls.uniform(n, params, bpe, **d)
        except TypeError as exc:
            raise InvalidInput(f"malformed CoE config: {exc}") from exc
        if router:
            cfg = replace(cfg, router=RouterCost(**router))
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "CoEConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise InvalidInput(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# routing


@dataclass(frozen=True)
class Request:
    request_id: int | str
    tag: str | None = None
    expert_id: str | None = None
    seed: int | None = None


class FixedMap:
    def __init__(self, mapping: Mapping[str, str]):
        self.mapping = dict(mapping)

    def __call__(self, req: Request) -> str:
        if req.tag not in self.mapping:
            raise InvalidInput(f"request {req.request_id}: no expert mapped for tag {req.tag!r}")
        return self.mapping[req.tag]


class SeededCategorical:
    """Draws an expert from ``weights``; a request's own seed overrides the stream."""

    def __init__(self, experts: Sequence[str], weights: Sequence[float] | None = None, seed: int = 0):
        self.experts = list(experts)
        self.weights = list(weights) if weights is not None else None
        self.rng = random.Random(seed)

    def __call__(self, req: Request) -> str:
        rng = random.Random(req.seed) if req.seed is not None else self.rng
        return rng.choices(self.experts, self.weights)[0]


def route_request(req: Request, policy, known: Iterable[str] | None = None) -> str:
    if req.expert_id is not None:
        eid = req.expert_id
    elif policy is None:
        raise InvalidInput(f"request {req.request_id} has no expert and no routing policy is set")
    else:
        eid = policy(req)
    if known is not None and eid not in set(known):
        raise InvalidInput(f"request {req.request_id}: unknown expert {eid!r}")
    return eid


def uniform_trace(n: int, experts: Sequence[str], seed: int = 0) -> list[Request]:
    rng = random.Random(seed)
    return [Request(i, expert_id=rng.choice(list(experts))) for i in range(n)]


def read_trace(path: str | Path) -> list[Request]:
    out = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            out.append(Request(d["request_id"], d.get("tag"), d.get("expert_id"), d.get("seed")))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InvalidInput(f"{path}:{ln}: bad trace record ({exc})") from exc
    if not out:
        raise InvalidInput(f"{path}: empty trace")
    return out


def write_trace(path: str | Path, trace: Iterable[Request]) -> None:
    lines = []
    for r in trace:
        d = {"request_id": r.request_id}
        for k in ("tag", "expert_id", "seed"):
            if getattr(r, k) is not None:
                d[k] = getattr(r, k)
        lines.append(json.dumps(d))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# timing


def switch_time(e: ExpertModel, platform: PlatformConfig) -> float:
    return e.segment / platform.model_ingress_bw


def copy_back_time(e: ExpertModel, platform: PlatformConfig) -> float:
    return e.writable_bytes / platform.model_ingress_bw


def execute_time(e: ExpertModel, cfg: CoEConfig, platform: PlatformConfig) -> float:
    """Prefill at a fixed fraction of peak plus memory-bound decode."""
    tp = min(cfg.tp, platform.sockets)
    prefill = 2 * e.param_count * cfg.prompt_tokens / (tp * platform.peak_flops * platform.prefill_efficiency)
    kv = e.kv_bytes_per_token * cfg.prompt_tokens
    decode = cfg.output_tokens / decode_throughput_bound(e.bytes, kv, platform, sockets=tp)
    return prefill + decode


def usable_hbm(platform: PlatformConfig, cfg: CoEConfig | None = None) -> int:
    reserve = platform.hbm_reserve_bytes if cfg is None or cfg.reserve_bytes is None else cfg.reserve_bytes
    per = platform.tier(HBM).capacity_bytes - reserve
    return int(max(0, per) * platform.sockets)


def check_capacity(cfg: CoEConfig, platform: PlatformConfig) -> None:
    """Raise Infeasible when the expert set cannot be held anywhere."""
    cap = usable_hbm(platform, cfg)
    for e in cfg.experts:
        if e.segment > cap:
            raise Infeasible(f"expert {e.id} ({e.segment} B) exceeds usable HBM {cap} B", "hbm_capacity")
    total = sum(e.bytes for e in cfg.experts)
    tier = platform.capacity_tier
    if tier is None:
        if total > cap:
            raise Infeasible(f"{total} B of experts exceed HBM and there is no capacity tier", "hbm_capacity")
        return
    agg = tier.capacity_bytes * platform.sockets
    if platform.kind == "gpu":
        # offloaded experts move between host and HBM rather than being copied
        agg += cap
    if total > agg:
        raise Infeasible(f"{total:.4g} B of experts exceed {tier.name} capacity {agg:.4g} B", f"{tier.name.lower()}_capacity")


# ---------------------------------------------------------------------------
# serving


class LRUCache:
    """HBM residency keyed by expert id, evicting least recently used."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.used = 0
        self.entries: OrderedDict[str, int] = OrderedDict()

    def __contains__(self, eid: str) -> bool:
        return eid in self.entries

    def touch(self, eid: str) -> None:
        self.entries.move_to_end(eid)

    def admit(self, eid: str, size: int, pinned: Iterable[str] = ()) -> list[str]:
        """Insert ``eid``; returns evicted ids. Pinned ids are evicted last."""
        if size > self.capacity:
            raise Infeasible(f"expert {eid} larger than HBM cache", "hbm_capacity")
        pinned = set(pinned)
        victims = []
        while self.used + size > self.capacity:
            cand = next((k for k in self.entries if k not in pinned), None)
            if cand is None:
                cand = next(iter(self.entries))
            self.used -= self.entries.pop(cand)
            victims.append(cand)
        self.entries[eid] = size
        self.used += size
        return victims


@dataclass(frozen=True)
class RequestTiming:
    request_id: int | str
    expert: str
    hit: bool
    router: float
    switch: float
    execute: float

    @property
    def total(self) -> float:
        return self.router + self.switch + self.execute


@dataclass
class LatencyBreakdown:
    requests: list[RequestTiming] = field(default_factory=list)
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    copyback_bytes: int = 0
    makespan: float = 0.0
    router_total: float = 0.0
    switch_total: float = 0.0
    execute_total: float = 0.0
    warmup: int = 0  # requests served before HBM first filled
    batches: list[float] = field(default_factory=list)  # makespan per batch
    miss_sequence: list[str] = field(default_factory=list)

    def steady(self) -> list[RequestTiming]:
        return self.requests[self.warmup :]

    def mean_latency(self, skip_warmup: bool = True) -> float:
        rs = self.steady() if skip_warmup else self.requests
        rs = rs or self.requests
        return sum(r.total for r in rs) / len(rs)

    @property
    def switch_fraction(self) -> float:
        return self.switch_total / self.makespan if self.makespan else 0.0

    @property
    def execute_fraction(self) -> float:
        return self.execute_total / self.makespan if self.makespan else 0.0

    def requests_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["request_id", "router_s", "switch_s", "execute_s", "total_s"])
        for r in self.requests:
            w.writerow([r.request_id, f"{r.router:.9g}", f"{r.switch:.9g}", f"{r.execute:.9g}", f"{r.total:.9g}"])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["hits", "misses", "evictions", "copyback_bytes", "makespan_s",
             "router_s", "switch_s", "execute_s", "switch_fraction", "execute_fraction"]
        )
        w.writerow(
            [self.hits, self.misses, self.evictions, self.copyback_bytes, f"{self.makespan:.9g}",
             f"{self.router_total:.9g}", f"{self.switch_total:.9g}", f"{self.execute_total:.9g}",
             f"{self.switch_fraction:.6f}", f"{self.execute_fraction:.6f}"]
        )
        return buf.getvalue()


def serve_trace(
    trace: Sequence[Request],
    cfg: CoEConfig,
    platform: PlatformConfig,
    policy=None,
) -> LatencyBreakdown:
    """Serve ``trace`` in batches of ``cfg.batch`` requests.

    Per batch the router runs once, every distinct expert the batch needs is
    copied into HBM (evicting LRU experts, copying back their writable
    bytes), then the (prompt, expert) pairs run one after another. A
    request's ``execute`` time runs from the start of the batch's execution
    to its own completion, so it includes the pairs queued ahead of it.
    """
    if not trace:
        raise InvalidInput("empty trace")
    check_capacity(cfg, platform)
    experts = {e.id: e for e in cfg.experts}
    tp = min(cfg.tp, platform.sockets)
    cache = LRUCache(usable_hbm(platform, cfg))
    router_t = cfg.router.time(platform, tp)
    exec_cache: dict[str, float] = {}
    out = LatencyBreakdown()
    full_at = None
    target = min(len(experts), _slots(cache.capacity, cfg))

    def run(eid: str) -> float:
        if eid not in exec_cache:
            exec_cache[eid] = execute_time(experts[eid], cfg, platform)
        return exec_cache[eid]

    for start in range(0, len(trace), cfg.batch):
        batch = trace[start : start + cfg.batch]
        eids = [route_request(r, policy, experts) for r in batch]
        # groups of the batch whose experts fit HBM together
        groups: list[list[int]] = [[]]
        size = 0
        seen: set[str] = set()
        for i, e in enumerate(eids):
            if e not in seen and size + experts[e].segment > cache.capacity:
                groups.append([])
                size, seen = 0, set()
            if e not in seen:
                seen.add(e)
                size += experts[e].segment
            groups[-1].append(i)

        first = True
        batch_time = 0.0
        for grp in groups:
            need = list(dict.fromkeys(eids[i] for i in grp))
            sw = 0.0
            hit_of: dict[str, bool] = {}
            for e in need:
                if e in cache:
                    cache.touch(e)
                    hit_of[e] = True
                    continue
                hit_of[e] = False
                out.miss_sequence.append(e)
                for v in cache.admit(e, experts[e].segment, pinned=need):
                    out.evictions += 1
                    out.copyback_bytes += experts[v].writable_bytes
                    sw += copy_back_time(experts[v], platform)
                sw += switch_time(experts[e], platform)
            r_t = router_t if first else 0.0
            first = False
            elapsed = 0.0
            counted: set[str] = set()
            for i in grp:
                e = eids[i]
                elapsed += run(e)
                hit = hit_of[e] or e in counted
                counted.add(e)
                if hit:
                    out.hits += 1
                else:
                    out.misses += 1
                out.requests.append(RequestTiming(batch[i].request_id, e, hit, r_t, sw, elapsed))
            out.router_total += r_t
            out.switch_total += sw
            out.execute_total += elapsed
            out.makespan += r_t + sw + elapsed
            batch_time += r_t + sw + elapsed
        out.batches.append(batch_time)
        if full_at is None and len(cache.entries) >= target:
            full_at = len(out.requests)
    out.warmup = full_at if full_at is not None else len(out.requests)
    return out


def _slots(capacity: int, cfg: CoEConfig) -> int:
    biggest = max(e.segment for e in cfg.experts)
    return max(1, capacity // biggest) if biggest else len(cfg.experts)


# ---------------------------------------------------------------------------
# curves and footprint


@dataclass(frozen=True)
class CurvePoint:
    experts: int
    feasible: bool
    mean_latency: float  # per request, after warm-up
    batch_latency: float  # makespan per batch, after warm-up
    switch_share: float
    misses: int


def _point(n: int, cfg: CoEConfig, platform: PlatformConfig, requests: int, seed: int) -> CurvePoint:
    proto = cfg.experts[0]
    c = replace(cfg, experts=tuple(replace(proto, id=f"E{i}") for i in range(n)))
    try:
        check_capacity(c, platform)
    except Infeasible:
        return CurvePoint(n, False, math.nan, math.nan, math.nan, 0)
    # warm-up is trimmed afterwards, so pad the trace by the cold-start length
    trace = uniform_trace(requests + 8 * n, c.ids, seed)
    res = serve_trace(trace, c, platform)
    steady = res.steady() or res.requests
    mean = sum(r.total for r in steady) / len(steady)
    batches = res.batches[res.warmup // c.batch :] or res.batches
    bl = sum(batches) / len(batches)
    sw = sum(r.switch for r in steady) / sum(r.total for r in steady)
    return CurvePoint(n, True, mean, bl, sw, res.misses)


def latency_curve(
    counts: Sequence[int],
    cfg: CoEConfig,
    platform: PlatformConfig,
    requests: int = 2000,
    seed: int = 0,
) -> list[CurvePoint]:
    if list(counts) != sorted(counts) or not counts or counts[0] < 1:
        raise InvalidInput("expert counts must be positive and ascending")
    return [_point(n, cfg, platform, requests, seed) for n in counts]


def find_knee(points: Sequence[CurvePoint], threshold: float = 0.05) -> int | None:
    """First count where latency rises faster than ``threshold`` of the
    first point's latency per added expert."""
    pts = [p for p in points if p.feasible]
    if len(pts) < 2:
        return None
    base = pts[0].mean_latency
    for a, b in zip(pts, pts[1:]):
        slope = (b.mean_latency - a.mean_latency) / (b.experts - a.experts)
        if slope > threshold * base:
            return b.experts
    return None


def footprint(num_experts: int, platform: PlatformConfig, expert_bytes: int = 14 * 10**9) -> int:
    """Machines needed to hold ``num_experts`` experts at TP8 speed.

    GPU nodes must keep every expert in HBM; RDU nodes keep them in DDR and
    pay the switch inside the latency budget.
    """
    if num_experts < 1:
        raise InvalidInput("num_experts must be >= 1")
    total = num_experts * int(expert_bytes)
    if platform.kind == "rdu":
        per = platform.capacity_tier.capacity_bytes * platform.sockets
    else:
        per = platform.tier(HBM).capacity_bytes * platform.sockets
    per = int(per)
    return max(1, -(-total // per))


def speedup(trace: Sequence[Request], cfg: CoEConfig, fast: PlatformConfig, slow: PlatformConfig) -> float:
    return serve_trace(trace, cfg, slow).makespan / serve_trace(trace, cfg, fast).makespan

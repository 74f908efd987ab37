"""Machine descriptions: the dataflow tile, RDU node and HBM-only GPU nodes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .errors import InvalidInput, ValidationReport

SCHEMA = "arch_v1"

GB = 1e9
TB = 1e12
GiB = 2**30

SRAM, HBM, DDR, HOST = "SRAM", "HBM", "DDR", "HOST"


@dataclass(frozen=True)
class TileConfig:
    pcu_count: int = 1040
    pmu_count: int = 1040
    pcu_peak_flops: float = 638e12 / 1040
    pmu_capacity_bytes: int = 500_000
    pmu_read_bw: float = 204.8e9
    pmu_write_bw: float = 204.8e9
    mesh_rows: int = 40
    mesh_cols: int = 56
    link_bw: float = 102.4e9
    clock_hz: float = 1.6e9
    # fixed pipeline depth of a compute stage, in cycles
    stage_latency_cycles: int = 64
    hop_latency_cycles: int = 1
    tile_rows: int = 32
    tile_cols: int = 32

    @property
    def sram_total_bytes(self) -> int:
        return self.pmu_count * self.pmu_capacity_bytes

    @property
    def peak_flops(self) -> float:
        return self.pcu_count * self.pcu_peak_flops

    @property
    def tile_elems(self) -> int:
        return self.tile_rows * self.tile_cols


@dataclass(frozen=True)
class MemoryTier:
    name: str
    capacity_bytes: float
    bandwidth_bytes_per_s: float


@dataclass(frozen=True)
class PlatformConfig:
    name: str
    kind: str  # "rdu" or "gpu"
    sockets: int
    peak_flops: float  # per socket, BF16
    tiers: tuple[MemoryTier, ...]  # per socket
    model_ingress_bw: float  # aggregate, capacity tier -> HBM
    machine_balance: float
    launch_overhead_so: float = 100e-6
    launch_overhead_ho: float = 5e-6
    allreduce_alpha: float = 5e-6
    allreduce_beta: float = 50e9
    decode_utilization: float = 0.5
    prefill_efficiency: float = 0.5
    hbm_reserve_bytes: float = 10 * GB  # per accelerator, router + KV cache
    tile: TileConfig | None = None

    def tier(self, name: str) -> MemoryTier | None:
        for t in self.tiers:
            if t.name == name:
                return t
        return None

    @property
    def capacity_tier(self) -> MemoryTier | None:
        """Tier holding inactive experts: DDR on RDU-like, host memory on GPU-like."""
        return self.tier(DDR) or self.tier(HOST)

    def aggregate_capacity(self, name: str) -> float:
        t = self.tier(name)
        return 0.0 if t is None else t.capacity_bytes * self.sockets

    def aggregate_bandwidth(self, name: str) -> float:
        t = self.tier(name)
        return 0.0 if t is None else t.bandwidth_bytes_per_s * self.sockets

    @property
    def hbm_bw(self) -> float:
        return self.tier(HBM).bandwidth_bytes_per_s

    def with_(self, **kw: Any) -> "PlatformConfig":
        return replace(self, **kw)

    # -- file format -----------------------------------------------------
    def to_toml(self) -> str:
        d = asdict(self)
        tiers = d.pop("tiers")
        tile = d.pop("tile")
        lines = [f'version = "{SCHEMA}"']
        for k, v in d.items():
            lines.append(f"{k} = {_toml_value(v)}")
        for t in tiers:
            lines.append("\n[[tiers]]")
            lines += [f"{k} = {_toml_value(v)}" for k, v in t.items()]
        if tile is not None:
            lines.append("\n[tile]")
            lines += [f"{k} = {_toml_value(v)}" for k, v in tile.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, d: Mapping[str, Any]) -> "PlatformConfig":
        d = dict(d)
        version = d.pop("version", SCHEMA)
        if version != SCHEMA:
            raise InvalidInput(f"unsupported platform schema {version!r}")
        base = d.pop("base", None)
        try:
            tiers = tuple(MemoryTier(**t) for t in d.pop("tiers", []))
            tile = d.pop("tile", None)
            if base is not None:
                p = builtin_platform(base)
                kw: dict[str, Any] = dict(d)
                if tiers:
                    kw["tiers"] = tiers
                if tile is not None:
                    kw["tile"] = replace(p.tile or TileConfig(), **tile)
                return replace(p, **kw)
            return cls(tiers=tiers, tile=TileConfig(**tile) if tile else None, **d)
        except TypeError as exc:
            raise InvalidInput(f"malformed platform document: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "PlatformConfig":
        try:
            with open(path, "rb") as f:
                return cls.from_mapping(tomllib.load(f))
        except tomllib.TOMLDecodeError as exc:
            raise InvalidInput(f"{path}: {exc}") from exc


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    return repr(v)


def sn40l_node() -> PlatformConfig:
    tile = TileConfig()
    return PlatformConfig(
        name="sn40l_node",
        kind="rdu",
        sockets=8,
        peak_flops=638e12,
        tiers=(
            MemoryTier(SRAM, tile.sram_total_bytes, tile.pmu_count * tile.pmu_read_bw),
            MemoryTier(HBM, 64 * GiB, 1.8 * TB),
            MemoryTier(DDR, 1.5 * TB, 200 * GB),
        ),
        model_ingress_bw=1 * TB,
        machine_balance=638e12 / 1.8e12,
        decode_utilization=0.85,
        prefill_efficiency=0.5,
        tile=tile,
    )


def _dgx(name: str, peak: float, hbm_bw: float, ingress: float, balance: float) -> PlatformConfig:
    return PlatformConfig(
        name=name,
        kind="gpu",
        sockets=8,
        peak_flops=peak,
        tiers=(
            MemoryTier(HBM, 80 * GB, hbm_bw),
            # 2 TB host DRAM per node, shared by the 8 GPUs
            MemoryTier(HOST, 2 * TB / 8, ingress / 8),
        ),
        model_ingress_bw=ingress,
        machine_balance=balance,
        decode_utilization=0.5,
        prefill_efficiency=0.5,
        launch_overhead_so=5e-6,
        launch_overhead_ho=5e-6,
    )


def dgx_a100() -> PlatformConfig:
    return _dgx("dgx_a100", 300e12, 2.0 * TB, 32 * GB, 150.0)


def dgx_h100() -> PlatformConfig:
    return _dgx("dgx_h100", 989e12, 3.35 * TB, 64 * GB, 989e12 / 3.35e12)


BUILTINS = {"sn40l_node": sn40l_node, "dgx_a100": dgx_a100, "dgx_h100": dgx_h100}


def builtin_platform(name: str) -> PlatformConfig:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise InvalidInput(f"unknown platform {name!r}; known: {sorted(BUILTINS)}") from None


def resolve_platform(name_or_path: str | PlatformConfig) -> PlatformConfig:
    if isinstance(name_or_path, PlatformConfig):
        return name_or_path
    if name_or_path in BUILTINS:
        return builtin_platform(name_or_path)
    path = Path(name_or_path)
    if not path.exists():
        raise InvalidInput(f"no builtin platform or file named {name_or_path!r}")
    return PlatformConfig.load(path)


def validate_tile(t: TileConfig, rep: ValidationReport | None = None) -> ValidationReport:
    rep = rep or ValidationReport()
    for k, v in asdict(t).items():
        if v <= 0 and k not in ("stage_latency_cycles", "hop_latency_cycles"):
            rep.error(f"tile.{k} must be positive (got {v})")
    if t.mesh_rows * t.mesh_cols < t.pcu_count + t.pmu_count:
        rep.error("mesh has fewer sites than PCUs + PMUs")
    return rep


def validate_platform(p: PlatformConfig) -> ValidationReport:
    rep = ValidationReport()
    if p.kind not in ("rdu", "gpu"):
        rep.error(f"kind must be 'rdu' or 'gpu' (got {p.kind!r})")
    for k in ("sockets", "peak_flops", "model_ingress_bw", "machine_balance"):
        if getattr(p, k) <= 0:
            rep.error(f"{k} must be positive (got {getattr(p, k)})")
    for k in ("launch_overhead_so", "launch_overhead_ho", "hbm_reserve_bytes"):
        if getattr(p, k) < 0:
            rep.error(f"{k} must be non-negative")
    for k in ("decode_utilization", "prefill_efficiency"):
        if not 0 < getattr(p, k) <= 1:
            rep.error(f"{k} must be in (0, 1]")
    names = [t.name for t in p.tiers]
    if len(set(names)) != len(names):
        rep.error("duplicate memory tier")
    for t in p.tiers:
        if t.name not in (SRAM, HBM, DDR, HOST):
            rep.error(f"unknown tier {t.name!r}")
        if t.capacity_bytes <= 0 or t.bandwidth_bytes_per_s <= 0:
            rep.error(f"tier {t.name} capacity and bandwidth must be positive")
    if p.tier(HBM) is None:
        rep.error("platform has no HBM tier")
    if p.tile is not None:
        validate_tile(p.tile, rep)
    src = p.capacity_tier
    if src is not None and p.sockets > 0 and src.bandwidth_bytes_per_s > 0:
        agg = src.bandwidth_bytes_per_s * p.sockets
        if p.model_ingress_bw > agg * (1 + 1e-9):
            rep.warn(
                f"ingress exceeds {src.name} aggregate: "
                f"{p.model_ingress_bw:.3g} B/s > {agg:.3g} B/s"
            )
    if p.tile is not None and p.tier(HBM) is not None:
        bal = p.peak_flops / p.hbm_bw
        if not math.isclose(bal, p.machine_balance, rel_tol=0.25):
            rep.warn(f"machine_balance {p.machine_balance:.1f} far from peak/HBM {bal:.1f}")
    return rep

"""Static memory planning over a kernel schedule.

Symbols live over inclusive ranges of schedule positions. Symbols whose
lifetimes do not overlap may share HBM addresses. When the high-water mark
exceeds capacity, symbols with the least aggregate traffic move to DDR;
weights go last.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .arch import DDR, HBM
from .errors import AnalysisError, Infeasible, InvalidInput

SCHEMA = "memplan_v1"

WEIGHT, ACTIVATION, METADATA = "weight", "activation", "metadata"


class SpillWarning(UserWarning):
    """Weights had to leave HBM."""


@dataclass(frozen=True)
class Access:
    kernel: int
    nbytes: int
    write: bool = False


@dataclass
class Symbol:
    id: str
    size: int
    kind: str = ACTIVATION
    read_only: bool = False
    accesses: list[Access] = field(default_factory=list)
    first_def: int | None = None
    last_use: int | None = None

    @property
    def aggregate_transfer(self) -> int:
        return sum(a.nbytes for a in self.accesses)

    @property
    def interval(self) -> tuple[int, int]:
        """Half-open ``[first_def, last_use + 1)``."""
        return self.first_def, self.last_use + 1

    def overlaps(self, other: "Symbol") -> bool:
        return self.first_def <= other.last_use and other.first_def <= self.last_use


def lifetimes(schedule, symbols: Iterable[Symbol]) -> list[Symbol]:
    """Fill in ``first_def`` / ``last_use`` from each symbol's accesses.

    ``schedule`` is a RunSchedule, a sequence of kernels or a length.
    Read-only symbols live for the whole program.
    """
    n = schedule if isinstance(schedule, int) else len(getattr(schedule, "kernels", schedule))
    if n < 1:
        raise InvalidInput("empty schedule")
    out = []
    for s in symbols:
        for a in s.accesses:
            if not 0 <= a.kernel < n:
                raise AnalysisError(f"{s.id}: access at position {a.kernel} outside schedule of {n}")
        if s.read_only:
            first, last = 0, n - 1
        else:
            writes = [a.kernel for a in s.accesses if a.write]
            reads = [a.kernel for a in s.accesses if not a.write]
            if not writes:
                if reads:
                    raise AnalysisError(f"{s.id} is read at {min(reads)} but never written")
                raise AnalysisError(f"{s.id} has no accesses")
            first = min(writes)
            if reads and min(reads) < first:
                raise AnalysisError(f"{s.id} is read at {min(reads)} before its definition at {first}")
            last = max(reads + writes)
        out.append(
            Symbol(s.id, s.size, s.kind, s.read_only, list(s.accesses), first, last)
        )
    return out


@dataclass
class MemoryPlanResult:
    placements: dict[str, tuple[str, int]]  # id -> (tier, offset)
    peak_hbm: int
    capacity: float
    spills: list[str] = field(default_factory=list)
    symbols: list[Symbol] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def deficit(self) -> float:
        return max(0.0, self.peak_hbm - self.capacity)

    @property
    def fits(self) -> bool:
        return self.peak_hbm <= self.capacity

    @property
    def spill_bytes(self) -> int:
        by_id = {s.id: s for s in self.symbols}
        return sum(by_id[i].size for i in self.spills)

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA,
            "symbols": [
                {
                    "id": s.id,
                    "size": s.size,
                    "kind": s.kind,
                    "read_only": s.read_only,
                    "tier": self.placements[s.id][0],
                    "offset": self.placements[s.id][1],
                    "lifetime": [s.first_def, s.last_use],
                    "aggregate_transfer": s.aggregate_transfer,
                }
                for s in self.symbols
            ],
            "summary": {
                "peak_hbm_bytes": self.peak_hbm,
                "hbm_capacity_bytes": self.capacity if math.isfinite(self.capacity) else None,
                "spill_bytes": self.spill_bytes,
                "spilled": list(self.spills),
                "read_only_bytes": sum(s.size for s in self.symbols if s.read_only),
                "total_bytes": sum(s.size for s in self.symbols),
            },
            "warnings": list(self.warnings),
        }

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def _order(symbols: Iterable[Symbol]) -> list[Symbol]:
    return sorted(symbols, key=lambda s: (s.first_def, -s.size, s.id))


def assign_addresses(symbols: Sequence[Symbol], hbm_capacity: float, align: int = 1) -> MemoryPlanResult:
    """First-fit offsets; lifetime-disjoint symbols may share addresses.

    Never raises on overflow: the result's ``deficit`` says by how much the
    high-water mark exceeds ``hbm_capacity``.
    """
    for s in symbols:
        if s.first_def is None or s.last_use is None:
            raise AnalysisError(f"{s.id} has no lifetime; run lifetimes() first")
        if s.size < 0:
            raise InvalidInput(f"{s.id} has negative size")
    placed: list[tuple[Symbol, int]] = []
    placements: dict[str, tuple[str, int]] = {}
    peak = 0
    for s in _order(symbols):
        busy = sorted((off, off + o.size) for o, off in placed if o.overlaps(s) and o.size > 0)
        off = 0
        for lo, hi in busy:
            if off + s.size <= lo:
                break
            off = max(off, -(-hi // align) * align)
        placed.append((s, off))
        placements[s.id] = (HBM, off)
        peak = max(peak, off + s.size)
    return MemoryPlanResult(placements, peak, hbm_capacity, [], list(symbols))


def _with_spills(symbols: Sequence[Symbol], spilled: Sequence[str], cap: float) -> MemoryPlanResult:
    sp = set(spilled)
    res = assign_addresses([s for s in symbols if s.id not in sp], cap)
    bump = 0
    for s in symbols:
        if s.id in sp:
            res.placements[s.id] = (DDR, bump)
            bump += s.size
    res.symbols = list(symbols)
    res.spills = [i for i in spilled]
    return res


def select_spills(
    symbols: Sequence[Symbol],
    hbm_capacity: float,
    ddr_capacity: float = math.inf,
) -> MemoryPlanResult:
    """Move symbols to DDR, least aggregate transfer first, until HBM fits.

    Weights are only considered once no other candidate is left. A final
    pass returns any spilled symbol whose absence is no longer needed, so
    every symbol in the spill set is necessary.
    """
    res = assign_addresses(symbols, hbm_capacity)
    if res.fits:
        return res
    key = lambda s: (s.aggregate_transfer, s.id)
    others = sorted((s for s in symbols if s.kind != WEIGHT), key=key)
    weights = sorted((s for s in symbols if s.kind == WEIGHT), key=key)
    spilled: list[str] = []
    notes: list[str] = []
    for s in [*others, *weights]:
        if s.kind == WEIGHT and not any(n.startswith("weights") for n in notes):
            notes.append("weights spilled to DDR: no other candidates left")
            warnings.warn(notes[-1], SpillWarning, stacklevel=2)
        spilled.append(s.id)
        res = _with_spills(symbols, spilled, hbm_capacity)
        if res.fits:
            break

    changed = True
    while changed:
        changed = False
        for sid in reversed(list(spilled)):
            trial = [x for x in spilled if x != sid]
            if _with_spills(symbols, trial, hbm_capacity).fits:
                spilled = trial
                changed = True
    res = _with_spills(symbols, spilled, hbm_capacity)
    res.warnings = notes
    if res.spill_bytes > ddr_capacity:
        raise Infeasible(
            f"spilling {res.spill_bytes} B exceeds DDR capacity {ddr_capacity:.3g} B", "ddr_capacity"
        )
    return res


def plan_memory(symbols: Sequence[Symbol], schedule, hbm_capacity: float, ddr_capacity: float = math.inf):
    return select_spills(lifetimes(schedule, symbols), hbm_capacity, ddr_capacity)


def check_plan(res: MemoryPlanResult) -> list[str]:
    """Pairs of co-live symbols in the same tier whose ranges overlap."""
    errs = []
    syms = res.symbols
    for i, a in enumerate(syms):
        ta, oa = res.placements[a.id]
        for b in syms[i + 1 :]:
            tb, ob = res.placements[b.id]
            if ta != tb or not a.overlaps(b) or a.size == 0 or b.size == 0:
                continue
            if oa < ob + b.size and ob < oa + a.size:
                errs.append(f"{a.id} and {b.id} overlap in {ta}")
    return errs


def symbols_from_plan(plan, repeat: int = 1) -> list[Symbol]:
    """Symbols for a fusion plan run ``repeat`` times back to back.

    Weights and constants are read-only. Other external inputs count as
    written at position 0; boundary tensors between kernels are written
    by the producing kernel and read by each consuming one.
    """
    g = plan.graph
    nk = len(plan.kernels)
    syms: dict[str, Symbol] = {}
    for rep in range(max(1, repeat)):
        for k in plan.kernels:
            pos = rep * nk + k.index
            for t in k.inputs:
                spec = g.tensors[t]
                ro = spec.role in ("weight", "constant")
                sid = t if ro else f"{t}@{rep}"
                s = syms.setdefault(sid, Symbol(sid, spec.nbytes, WEIGHT if ro else ACTIVATION, ro))
                if g.producer(t) is None and not ro and not s.accesses:
                    s.accesses.append(Access(pos, spec.nbytes, write=True))
                s.accesses.append(Access(pos, spec.nbytes))
            for t in k.outputs:
                spec = g.tensors[t]
                sid = f"{t}@{rep}"
                s = syms.setdefault(sid, Symbol(sid, spec.nbytes, ACTIVATION))
                s.accesses.append(Access(pos, spec.nbytes, write=True))
    return list(syms.values())


def load_manifest(path: str | Path) -> dict:
    d = json.loads(Path(path).read_text())
    if d.get("version") != SCHEMA:
        raise InvalidInput(f"{path}: expected {SCHEMA} document")
    return d

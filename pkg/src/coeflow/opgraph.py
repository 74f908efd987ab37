"""Operator-graph IR with FLOP/byte accounting and operational intensity.

A graph is a DAG of tensor operators. Tensors without a producer are
external inputs (activations, weights or constants); tensors without
consumers are graph outputs. A :class:`Partition` groups operators into
kernels, and :func:`operational_intensity` counts the bytes that cross each
kernel boundary.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import InvalidInput, ValidationReport

SCHEMA = "opgraph_v1"

GEMM = "gemm"
ELEMENTWISE = "elementwise"
TRANSPOSE = "transpose"
REDUCE = "reduce"
SOFTMAX = "softmax"
OTHER = "other"
KINDS = (GEMM, ELEMENTWISE, TRANSPOSE, REDUCE, SOFTMAX, OTHER)

# exact (inputs, outputs) arity; None means "at least one"
_ARITY = {
    GEMM: (2, 1),
    TRANSPOSE: (1, 1),
    REDUCE: (1, 1),
    SOFTMAX: (1, 1),
    ELEMENTWISE: (None, 1),
    OTHER: (None, None),
}


class DType(Enum):
    BF16 = "BF16"
    FP32 = "FP32"
    INT32 = "INT32"

    @property
    def bytes_per_element(self) -> int:
        return 2 if self is DType.BF16 else 4

    @classmethod
    def parse(cls, name: str | "DType") -> "DType":
        if isinstance(name, DType):
            return name
        try:
            return cls(str(name).upper())
        except ValueError:
            raise InvalidInput(f"unknown dtype {name!r}") from None


class Roofline(Enum):
    MEMORY_BOUND = "MemoryBound"
    COMPUTE_BOUND = "ComputeBound"


@dataclass(frozen=True)
class TensorSpec:
    id: str
    shape: tuple[int, ...]
    dtype: DType = DType.BF16
    # activation | weight | constant
    role: str = "activation"

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype.bytes_per_element


@dataclass(frozen=True, eq=False)
class Operator:
    id: str
    kind: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: Mapping[str, Any] = field(default_factory=dict)


def _norm_kind(kind: str) -> str:
    return str(kind).strip().lower()


class OpGraph:
    """Immutable operator graph.

    Construction never raises on dangling references or cycles; those are
    reported by :func:`validate_graph`.
    """

    def __init__(
        self,
        tensors: Iterable[TensorSpec],
        operators: Iterable[Operator],
        name: str = "",
        meta: Mapping[str, Any] | None = None,
    ):
        self.name = name
        self.meta = dict(meta or {})
        self.tensors: dict[str, TensorSpec] = {}
        self._dup_tensors: list[str] = []
        for t in tensors:
            if t.id in self.tensors:
                self._dup_tensors.append(t.id)
            self.tensors[t.id] = t
        self.operators: dict[str, Operator] = {}
        self._dup_ops: list[str] = []
        for op in operators:
            if op.id in self.operators:
                self._dup_ops.append(op.id)
            self.operators[op.id] = op

        self._producers: dict[str, list[str]] = {}
        self._consumers: dict[str, list[str]] = {}
        for op in self.operators.values():
            for t in op.outputs:
                self._producers.setdefault(t, []).append(op.id)
            for t in dict.fromkeys(op.inputs):
                self._consumers.setdefault(t, []).append(op.id)
        self._order: list[str] | None = None

    # -- structure -------------------------------------------------------
    def producer(self, tid: str) -> str | None:
        prods = self._producers.get(tid)
        return prods[0] if prods else None

    def consumers(self, tid: str) -> list[str]:
        return list(self._consumers.get(tid, ()))

    def external_inputs(self) -> list[str]:
        return [t for t in self.tensors if t not in self._producers and t in self._consumers]

    def graph_outputs(self) -> list[str]:
        return [t for t in self.tensors if t in self._producers and t not in self._consumers]

    def successors(self, oid: str) -> list[str]:
        out: dict[str, None] = {}
        for t in self.operators[oid].outputs:
            for c in self._consumers.get(t, ()):
                out[c] = None
        return list(out)

    def neighbors(self, oid: str) -> list[str]:
        """Operators sharing any tensor with ``oid`` (edges or common inputs)."""
        out: dict[str, None] = {}
        op = self.operators[oid]
        for t in (*op.inputs, *op.outputs):
            for o in (*self._producers.get(t, ()), *self._consumers.get(t, ())):
                if o != oid:
                    out[o] = None
        return list(out)

    def predecessors(self, oid: str) -> list[str]:
        out: dict[str, None] = {}
        for t in self.operators[oid].inputs:
            p = self.producer(t)
            if p is not None:
                out[p] = None
        return list(out)

    def topological_order(self) -> list[str]:
        """Kahn's algorithm, ties broken by declaration order (stable)."""
        if self._order is not None:
            return list(self._order)
        index = {oid: i for i, oid in enumerate(self.operators)}
        indeg = {oid: len(self.predecessors(oid)) for oid in self.operators}
        ready = [index[o] for o, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        names = list(self.operators)
        order = []
        while ready:
            oid = names[heapq.heappop(ready)]
            order.append(oid)
            for s in self.successors(oid):
                indeg[s] -= 1
                if indeg[s] == 0:
                    heapq.heappush(ready, index[s])
        if len(order) != len(self.operators):
            raise InvalidInput("graph has a cycle")
        self._order = order
        return list(order)

    def shape(self, tid: str) -> tuple[int, ...]:
        return self.tensors[tid].shape

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": SCHEMA,
            "name": self.name,
            "meta": self.meta,
            "tensors": [
                {"id": t.id, "shape": list(t.shape), "dtype": t.dtype.value, "role": t.role}
                for t in self.tensors.values()
            ],
            "operators": [
                {
                    "id": op.id,
                    "kind": op.kind,
                    "inputs": list(op.inputs),
                    "outputs": list(op.outputs),
                    "attrs": dict(op.attrs),
                }
                for op in self.operators.values()
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "OpGraph":
        version = d.get("version", SCHEMA)
        if version != SCHEMA:
            raise InvalidInput(f"unsupported graph schema {version!r}")
        try:
            tensors = [
                TensorSpec(
                    id=str(t["id"]),
                    shape=tuple(int(x) for x in t["shape"]),
                    dtype=DType.parse(t.get("dtype", "BF16")),
                    role=t.get("role", "activation"),
                )
                for t in d.get("tensors", [])
            ]
            ops = [
                Operator(
                    id=str(o["id"]),
                    kind=_norm_kind(o["kind"]),
                    inputs=tuple(o.get("inputs", ())),
                    outputs=tuple(o.get("outputs", ())),
                    attrs=dict(o.get("attrs", {})),
                )
                for o in d.get("operators", [])
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInput(f"malformed graph document: {exc}") from exc
        return cls(tensors, ops, name=d.get("name", ""), meta=d.get("meta"))

    @classmethod
    def load(cls, path: str | Path) -> "OpGraph":
        with open(path) as f:
            try:
                return cls.from_dict(json.load(f))
            except json.JSONDecodeError as exc:
                raise InvalidInput(f"{path}: {exc}") from exc

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


# ---------------------------------------------------------------------------
# shape rules


def _broadcast(*shapes: tuple[int, ...]) -> tuple[int, ...] | None:
    nd = max(len(s) for s in shapes)
    out = []
    for i in range(nd):
        dims = {s[len(s) - nd + i] for s in shapes if len(s) - nd + i >= 0} - {1}
        if len(dims) > 1:
            return None
        out.append(dims.pop() if dims else 1)
    return tuple(out)


def gemm_dims(g: OpGraph, op: Operator) -> tuple[int, int, int, int]:
    """(batch, M, K, N) for a Gemm; operands are ``(*b, M, K) @ (*b, K, N)``."""
    a = g.shape(op.inputs[0])
    b = g.shape(op.inputs[1])
    out = g.shape(op.outputs[0])
    m, k = a[-2], a[-1]
    n = b[-1]
    batch = math.prod(out[:-2]) if len(out) > 2 else 1
    return batch, m, k, n


def _expected_output(g: OpGraph, op: Operator) -> tuple[int, ...] | str | None:
    """Expected output shape, or an error string when inputs do not conform."""
    ins = [g.shape(t) for t in op.inputs]
    if op.kind == GEMM:
        a, b = ins
        if len(a) < 2 or len(b) < 2:
            return "gemm operands must be at least 2-D"
        if a[-1] != b[-2]:
            return f"gemm inner dims differ ({a[-1]} vs {b[-2]})"
        batch = _broadcast(a[:-2], b[:-2]) if (a[:-2] or b[:-2]) else ()
        if batch is None:
            return "gemm batch dims do not broadcast"
        return tuple(batch) + (a[-2], b[-1])
    if op.kind == TRANSPOSE:
        perm = tuple(op.attrs.get("perm", tuple(reversed(range(len(ins[0]))))))
        if sorted(perm) != list(range(len(ins[0]))):
            return f"invalid permutation {perm}"
        return tuple(ins[0][p] for p in perm)
    if op.kind == REDUCE:
        axis = int(op.attrs.get("axis", -1)) % len(ins[0])
        keep = bool(op.attrs.get("keepdims", True))
        s = list(ins[0])
        if keep:
            s[axis] = 1
        else:
            del s[axis]
        return tuple(s) or (1,)
    if op.kind == SOFTMAX:
        return ins[0]
    if op.kind == ELEMENTWISE:
        b = _broadcast(*ins)
        return b if b is not None else "elementwise inputs do not broadcast"
    return None


def validate_graph(g: OpGraph) -> ValidationReport:
    rep = ValidationReport()
    for tid in g._dup_tensors:
        rep.error(f"reference: duplicate tensor id {tid!r}")
    for oid in g._dup_ops:
        rep.error(f"reference: duplicate operator id {oid!r}")
    for t in g.tensors.values():
        if not t.shape or any(x < 1 for x in t.shape):
            rep.error(f"shape: tensor {t.id!r} has invalid shape {t.shape}")
    resolved = True
    for op in g.operators.values():
        if op.kind not in KINDS:
            rep.error(f"kind: operator {op.id!r} has unknown kind {op.kind!r}")
            continue
        n_in, n_out = _ARITY[op.kind]
        if (n_in is not None and len(op.inputs) != n_in) or (n_in is None and not op.inputs):
            rep.error(f"arity: {op.kind} {op.id!r} has {len(op.inputs)} inputs")
        if (n_out is not None and len(op.outputs) != n_out) or (n_out is None and not op.outputs):
            rep.error(f"arity: {op.kind} {op.id!r} has {len(op.outputs)} outputs")
        for t in (*op.inputs, *op.outputs):
            if t not in g.tensors:
                rep.error(f"reference: operator {op.id!r} refers to unknown tensor {t!r}")
                resolved = False
    for tid, prods in g._producers.items():
        if len(prods) > 1:
            rep.error(f"producer: tensor {tid!r} has producers {prods}")
    if not rep.ok or not resolved:
        return rep
    try:
        g.topological_order()
    except InvalidInput:
        rep.error("cycle: graph is not acyclic")
        return rep
    for op in g.operators.values():
        exp = _expected_output(g, op)
        if isinstance(exp, str):
            rep.error(f"shape: {op.id!r}: {exp}")
        elif exp is not None and tuple(exp) != g.shape(op.outputs[0]):
            rep.error(f"shape: {op.id!r} output {g.shape(op.outputs[0])} expected {tuple(exp)}")
        if op.kind == GEMM and not isinstance(exp, str):
            _, m, k, n = gemm_dims(g, op)
            for key, val in (("M", m), ("K", k), ("N", n)):
                if key in op.attrs and int(op.attrs[key]) != val:
                    rep.error(f"shape: gemm {op.id!r} attr {key}={op.attrs[key]} but shapes give {val}")
    return rep


# ---------------------------------------------------------------------------
# FLOP accounting


def op_flops(op: Operator, g: OpGraph) -> int:
    kind = op.kind
    if kind == GEMM:
        batch, m, k, n = gemm_dims(g, op)
        return 2 * batch * m * k * n
    if kind == TRANSPOSE:
        return 0
    out = g.tensors[op.outputs[0]] if op.outputs else None
    if kind == ELEMENTWISE:
        return out.numel * int(op.attrs.get("flops_per_element", 1))
    if kind == REDUCE:
        src = g.shape(op.inputs[0])
        n = src[int(op.attrs.get("axis", -1)) % len(src)]
        return (math.prod(src) // n) * (n - 1)
    if kind == SOFTMAX:
        # per row: max (n-1), subtract n, exp n, sum (n-1), divide n
        src = g.shape(op.inputs[0])
        n = src[-1]
        return (math.prod(src) // n) * (5 * n - 2)
    if kind == OTHER:
        return out.numel * int(op.attrs.get("flops_per_element", 0))
    raise InvalidInput(f"unknown operator kind {kind!r}")


def total_flops(g: OpGraph, ops: Iterable[str] | None = None) -> int:
    ids = g.operators if ops is None else ops
    return sum(op_flops(g.operators[o], g) for o in ids)


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class Partition:
    kernels: tuple[frozenset[str], ...]

    @classmethod
    def of(cls, kernels: Iterable[Iterable[str]]) -> "Partition":
        return cls(tuple(frozenset(k) for k in kernels))

    @classmethod
    def unfused(cls, g: OpGraph) -> "Partition":
        return cls.of([o] for o in g.topological_order())

    @classmethod
    def single(cls, g: OpGraph) -> "Partition":
        return cls.of([g.topological_order()]) if g.operators else cls(())

    def kernel_of(self) -> dict[str, int]:
        return {o: i for i, k in enumerate(self.kernels) for o in k}

    def __len__(self) -> int:
        return len(self.kernels)


def _connected(g: OpGraph, ops: frozenset[str]) -> bool:
    if not ops:
        return False
    start = next(iter(ops))
    seen = {start}
    todo = deque([start])
    while todo:
        o = todo.popleft()
        for nb in g.neighbors(o):
            if nb in ops and nb not in seen:
                seen.add(nb)
                todo.append(nb)
    return seen == ops


def _convex(g: OpGraph, ops: frozenset[str]) -> bool:
    frontier = deque(s for o in ops for s in g.successors(o) if s not in ops)
    seen = set(frontier)
    while frontier:
        o = frontier.popleft()
        for s in g.successors(o):
            if s in ops:
                return False
            if s not in seen:
                seen.add(s)
                frontier.append(s)
    return True


def validate_partition(g: OpGraph, p: Partition, require_connected: bool = True) -> ValidationReport:
    rep = ValidationReport()
    seen: dict[str, int] = {}
    for i, k in enumerate(p.kernels):
        if not k:
            rep.error(f"kernel {i} is empty")
        for o in k:
            if o not in g.operators:
                rep.error(f"kernel {i} names unknown operator {o!r}")
            elif o in seen:
                rep.error(f"operator {o!r} in kernels {seen[o]} and {i}")
            else:
                seen[o] = i
    missing = set(g.operators) - set(seen)
    if missing:
        rep.error(f"operators not covered: {sorted(missing)}")
    if not rep.ok:
        return rep
    for i, k in enumerate(p.kernels):
        if require_connected and not _connected(g, k):
            rep.error(f"kernel {i} is not connected")
        if not _convex(g, k):
            rep.error(f"kernel {i} is not convex")
    return rep


def kernel_boundary(g: OpGraph, ops: Iterable[str]) -> tuple[list[str], list[str], list[str]]:
    """Split tensors touched by ``ops`` into (inputs, outputs, internal)."""
    ops = set(ops)
    inputs: dict[str, None] = {}
    outputs: dict[str, None] = {}
    internal: dict[str, None] = {}
    for oid in g.topological_order():
        if oid not in ops:
            continue
        op = g.operators[oid]
        for t in op.inputs:
            if g.producer(t) not in ops:
                inputs[t] = None
        for t in op.outputs:
            cons = g.consumers(t)
            if not cons or any(c not in ops for c in cons):
                outputs[t] = None
            if any(c in ops for c in cons) and t not in outputs:
                internal[t] = None
    return list(inputs), list(outputs), list(internal)


@dataclass(frozen=True)
class KernelOI:
    index: int
    operators: frozenset[str]
    flops: int
    bytes_in: int
    bytes_out: int

    @property
    def bytes(self) -> int:
        return self.bytes_in + self.bytes_out

    @property
    def oi(self) -> float:
        return self.flops / self.bytes if self.bytes else math.inf


@dataclass(frozen=True)
class OIReport:
    kernels: tuple[KernelOI, ...]

    @property
    def flops(self) -> int:
        return sum(k.flops for k in self.kernels)

    @property
    def bytes(self) -> int:
        return sum(k.bytes for k in self.kernels)

    @property
    def oi(self) -> float:
        return self.flops / self.bytes if self.bytes else math.inf


def operational_intensity(g: OpGraph, p: Partition) -> OIReport:
    rep = validate_partition(g, p, require_connected=False)
    if not rep.ok:
        raise InvalidInput("invalid partition: " + "; ".join(rep.errors))
    out = []
    for i, k in enumerate(p.kernels):
        ins, outs, _ = kernel_boundary(g, k)
        out.append(
            KernelOI(
                index=i,
                operators=k,
                flops=total_flops(g, k),
                bytes_in=sum(g.tensors[t].nbytes for t in ins),
                bytes_out=sum(g.tensors[t].nbytes for t in outs),
            )
        )
    return OIReport(tuple(out))


def classify_roofline(oi: float, machine_balance: float) -> Roofline:
    if machine_balance <= 0 or oi < 0:
        raise ValueError("oi must be >= 0 and machine_balance > 0")
    return Roofline.MEMORY_BOUND if oi < machine_balance else Roofline.COMPUTE_BOUND

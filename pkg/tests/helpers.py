"""Random instance generators shared by the property tests."""

from __future__ import annotations

import random

from coeflow.opgraph import DType, OpGraph, Operator, TensorSpec

DIMS = (8, 16, 32, 48)


def random_graph(rng: random.Random, n_ops: int) -> OpGraph:
    """A valid DAG of 2-D elementwise/gemm/transpose/reduce/softmax ops."""
    tensors: dict[str, TensorSpec] = {}
    ops: list[Operator] = []

    def new(shape, role="activation"):
        tid = f"t{len(tensors)}"
        tensors[tid] = TensorSpec(tid, tuple(shape), rng.choice((DType.BF16, DType.FP32)), role)
        return tid

    pool = [new((rng.choice(DIMS), rng.choice(DIMS)))]
    for i in range(n_ops):
        kind = rng.choice(("ew", "ew2", "gemm", "transpose", "reduce", "softmax"))
        a = rng.choice(pool)
        sa = tensors[a].shape
        oid = f"o{i}"
        if kind == "gemm":
            cands = [t for t in pool if t != a and tensors[t].shape[0] == sa[1]]
            if cands and rng.random() < 0.5:
                b = rng.choice(cands)
            else:
                b = new((sa[1], rng.choice(DIMS)), "weight")
            out = new((sa[0], tensors[b].shape[1]))
            ops.append(Operator(oid, "gemm", (a, b), (out,)))
        elif kind == "ew2":
            cands = [t for t in pool if t != a and tensors[t].shape == sa]
            b = rng.choice(cands) if cands and rng.random() < 0.6 else new(sa, "constant")
            out = new(sa)
            ops.append(Operator(oid, "elementwise", (a, b), (out,), {"op": "add"}))
        elif kind == "ew":
            out = new(sa)
            ops.append(Operator(oid, "elementwise", (a,), (out,), {"op": "exp", "flops_per_element": rng.randint(1, 4)}))
        elif kind == "transpose":
            out = new((sa[1], sa[0]))
            ops.append(Operator(oid, "transpose", (a,), (out,), {"perm": [1, 0]}))
        elif kind == "reduce":
            out = new((sa[0], 1))
            ops.append(Operator(oid, "reduce", (a,), (out,), {"axis": -1}))
        else:
            out = new(sa)
            ops.append(Operator(oid, "softmax", (a,), (out,)))
        pool.append(out)
    return OpGraph(tensors.values(), ops, name=f"rand{n_ops}")


def random_convex_partition(rng: random.Random, g: OpGraph) -> list[list[str]]:
    """Cut the topological order into contiguous runs (always convex)."""
    order = g.topological_order()
    out, cur = [], []
    for o in order:
        cur.append(o)
        if rng.random() < 0.4:
            out.append(cur)
            cur = []
    if cur:
        out.append(cur)
    return out


def brute_force_boundary_bytes(g: OpGraph, kernels) -> list[tuple[int, int]]:
    """(bytes in, bytes out) per kernel by walking every (tensor, kernel) pair.

    A kernel reads a tensor once if one of its ops consumes it and the
    producer lives elsewhere (or is external). It writes a tensor once if
    it produces it and the tensor is consumed outside the kernel or is a
    graph output.
    """
    owner = {o: i for i, k in enumerate(kernels) for o in k}
    producer = {t: op.id for op in g.operators.values() for t in op.outputs}
    consumers: dict[str, set[str]] = {}
    for op in g.operators.values():
        for t in op.inputs:
            consumers.setdefault(t, set()).add(op.id)
    res = []
    for i, _ in enumerate(kernels):
        bin_ = bout = 0
        for tid, spec in g.tensors.items():
            cons_here = any(owner[c] == i for c in consumers.get(tid, ()))
            prod = producer.get(tid)
            prod_here = prod is not None and owner[prod] == i
            if cons_here and not prod_here:
                bin_ += spec.nbytes
            if prod_here:
                outside = any(owner[c] != i for c in consumers.get(tid, ()))
                if outside or not consumers.get(tid):
                    bout += spec.nbytes
        res.append((bin_, bout))
    return res

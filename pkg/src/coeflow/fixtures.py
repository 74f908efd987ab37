"""Builders for the graph fixtures shipped with the package.

``monarch`` is the four-operator FFT-style block (Gemm, twiddle Mul,
Transpose, Gemm). Its shapes are calibrated so the three fusion levels land
close to the published operational intensities of 39.5, 102.6 and 410.4
FLOPs/byte (within about 3%; exact shapes were never published).

``decoder`` is a 33-operator Llama-style decoder block (RMSNorm, QKV, RoPE,
attention, output projection, SwiGLU FFN) in prefill and decode variants.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from .opgraph import DType, OpGraph, Operator, TensorSpec

DECODER_HINTS = ("p", "n2_out")


def monarch(batch: int = 1024, m: int = 384, k: int = 16, n: int = 1024, p: int = 256) -> OpGraph:
    bf = DType.BF16
    t = [
        TensorSpec("x", (batch, m, k), bf),
        TensorSpec("f0", (k, n), bf, "weight"),
        TensorSpec("y0", (batch, m, n), bf),
        TensorSpec("twiddle", (m, n), bf, "constant"),
        TensorSpec("y1", (batch, m, n), bf),
        TensorSpec("y2", (batch, n, m), bf),
        TensorSpec("f1", (m, p), bf, "weight"),
        TensorSpec("out", (batch, n, p), bf),
    ]
    ops = [
        Operator("Gemm0", "gemm", ("x", "f0"), ("y0",), {"M": m, "K": k, "N": n}),
        Operator("Mul", "elementwise", ("y0", "twiddle"), ("y1",), {"op": "mul"}),
        Operator("Transpose", "transpose", ("y1",), ("y2",), {"perm": [0, 2, 1]}),
        Operator("Gemm1", "gemm", ("y2", "f1"), ("out",), {"M": n, "K": m, "N": p}),
    ]
    return OpGraph(t, ops, name="monarch")


def decoder(
    seq: int = 4096,
    decode: bool = False,
    kv_len: int = 4096,
    hidden: int = 4096,
    heads: int = 32,
    head_dim: int = 128,
    ffn: int = 11008,
    layers: int = 32,
) -> OpGraph:
    """One decoder layer; ``decode`` processes one new token against a KV cache."""
    bf = DType.BF16
    S = 1 if decode else seq
    L = kv_len if decode else seq
    E, H, D, F = hidden, heads, head_dim, ffn
    tensors: list[TensorSpec] = []
    ops: list[Operator] = []

    def T(tid, shape, role="activation"):
        tensors.append(TensorSpec(tid, tuple(shape), bf, role))

    def op(oid, kind, ins, out, **attrs):
        ops.append(Operator(oid, kind, tuple(ins), (out,), attrs))

    def rmsnorm(prefix, x, gamma):
        T(f"{prefix}_sq", (S, E))
        T(f"{prefix}_ms", (S, 1))
        T(f"{prefix}_rs", (S, 1))
        T(f"{prefix}_xn", (S, E))
        T(gamma, (E,), "weight")
        T(f"{prefix}_out", (S, E))
        op(f"{prefix}_square", "elementwise", (x, x), f"{prefix}_sq", op="mul")
        op(f"{prefix}_mean", "reduce", (f"{prefix}_sq",), f"{prefix}_ms", axis=-1)
        op(f"{prefix}_rsqrt", "elementwise", (f"{prefix}_ms",), f"{prefix}_rs", op="rsqrt", flops_per_element=2)
        op(f"{prefix}_scale", "elementwise", (x, f"{prefix}_rs"), f"{prefix}_xn", op="mul")
        op(f"{prefix}_gamma", "elementwise", (f"{prefix}_xn", gamma), f"{prefix}_out", op="mul")

    T("x", (S, E))
    rmsnorm("n1", "x", "g1")
    for name in ("q", "k", "v"):
        T(f"w{name}", (H, E, D), "weight")
        T(name, (H, S, D))
        op(f"{name}_proj", "gemm", ("n1_out", f"w{name}"), name)
    T("cos", (S, D), "constant")
    T("sin", (S, D), "constant")
    for name in ("q", "k"):
        T(f"{name}_c", (H, S, D))
        T(f"{name}_s", (H, S, D))
        T(f"{name}_r", (H, S, D))
        op(f"{name}_rope_cos", "elementwise", (name, "cos"), f"{name}_c", op="mul")
        op(f"{name}_rope_sin", "elementwise", (name, "sin"), f"{name}_s", op="mul")
        op(f"{name}_rope_add", "elementwise", (f"{name}_c", f"{name}_s"), f"{name}_r", op="add")
    T("kt", (H, D, S))
    op("k_transpose", "transpose", ("k_r",), "kt", perm=[0, 2, 1])
    if decode:
        T("kcache_t", (H, D, L))
        T("vcache", (H, L, D))
        keys, values = "kcache_t", "vcache"
    else:
        keys, values = "kt", "v"
    T("s", (H, S, L))
    T("mask", (S, L), "constant")
    T("sm", (H, S, L))
    T("p", (H, S, L))
    T("o", (H, S, D))
    T("wo", (H, D, E), "weight")
    T("oh", (H, S, E))
    T("a", (S, E))
    T("h", (S, E))
    op("qk", "gemm", ("q_r", keys), "s")
    op("mask_add", "elementwise", ("s", "mask"), "sm", op="add")
    op("softmax", "softmax", ("sm",), "p")
    op("pv", "gemm", ("p", values), "o")
    op("o_proj", "gemm", ("o", "wo"), "oh")
    op("head_sum", "reduce", ("oh",), "a", axis=0, keepdims=False)
    op("residual1", "elementwise", ("x", "a"), "h", op="add")
    rmsnorm("n2", "h", "g2")
    T("wg", (E, F), "weight")
    T("wu", (E, F), "weight")
    T("wd", (F, E), "weight")
    for tid in ("gate", "up", "act", "mix"):
        T(tid, (S, F))
    T("down", (S, E))
    T("y", (S, E))
    op("gate_proj", "gemm", ("n2_out", "wg"), "gate")
    op("up_proj", "gemm", ("n2_out", "wu"), "up")
    op("silu", "elementwise", ("gate",), "act", op="silu", flops_per_element=4)
    op("gate_mul", "elementwise", ("act", "up"), "mix", op="mul")
    op("down_proj", "gemm", ("mix", "wd"), "down")
    op("residual2", "elementwise", ("h", "down"), "y", op="add")
    name = "decoder_decode" if decode else "decoder_prefill"
    meta = {"hints": list(DECODER_HINTS), "repeat": layers}
    return OpGraph(tensors, ops, name=name, meta=meta)


def write_all(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for g in (monarch(), decoder(decode=False), decoder(decode=True)):
        path = directory / f"{g.name}.json"
        g.dump(path)
        out.append(path)
    coe = directory / "coe150.json"
    coe.write_text(json.dumps(default_coe_config(), indent=1) + "\n")
    out.append(coe)
    return out


def default_coe_config() -> dict:
    return {
        "version": "coeconfig_v1",
        "experts": 150,
        "param_count": 7e9,
        "dtype": "BF16",
        "batch": 8,
        "output_tokens": 20,
        "prompt_tokens": 4096,
        "tp": 8,
    }


def fixture_path(name: str) -> Path:
    """Path of a shipped fixture file (``monarch``, ``decoder_prefill``, ...)."""
    fname = name if name.endswith(".json") else f"{name}.json"
    return Path(str(resources.files("coeflow") / "data" / fname))

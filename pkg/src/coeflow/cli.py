"""Command-line front end.

Every subcommand prints a table to stdout and, with ``--out DIR``, writes
CSV/JSON artifacts plus a ``manifest.json`` describing the run.

Exit codes: 0 success, 2 invalid input, 3 infeasible model or mapping.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .arch import PlatformConfig, TileConfig, resolve_platform
from .errors import AnalysisError, ConfigurationError, Infeasible, InvalidInput, ProtocolError
from .fixtures import fixture_path

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3


# ---------------------------------------------------------------------------
# helpers


def _resolve_file(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    shipped = fixture_path(p.name)
    if shipped.exists():
        return shipped
    raise InvalidInput(f"no such file: {name}")


def _load_graph(name: str):
    from .opgraph import OpGraph

    path = _resolve_file(name)
    try:
        return OpGraph.load(path), path
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InvalidInput(f"{path}: malformed graph ({exc})") from exc


def _platform(args) -> PlatformConfig:
    return resolve_platform(args.platform)


def _tile(p: PlatformConfig) -> TileConfig:
    return p.tile or TileConfig(pcu_peak_flops=p.peak_flops / 1040)


def _hints(args, g) -> list[str]:
    if getattr(args, "hints", None):
        return [h for h in args.hints.split(",") if h]
    return list(g.meta.get("hints", []))


def _default_policy(g) -> str:
    return "hinted" if g.meta.get("hints") else "maximal"


def _table(rows: list[list], header: list[str]) -> str:
    cells = [[str(c) for c in header]] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "-"
        return f"{v:.4g}"
    return str(v)


def _csv(rows: list[list], header: list[str]) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


class Output:
    """Collects artifacts for ``--out`` and writes the run manifest."""

    def __init__(self, args, inputs: list[str]):
        self.dir = Path(args.out) if args.out else None
        self.manifest = {
            "command": args.command,
            "inputs": inputs,
            "platform": args.platform,
            "seed": args.seed,
            "out": args.out,
            "version": __version__,
            "outputs": [],
        }

    def write(self, name: str, text: str) -> None:
        if self.dir is None:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / name).write_text(text)
        self.manifest["outputs"].append(name)

    def close(self) -> None:
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            (self.dir / "manifest.json").write_text(json.dumps(self.manifest, indent=1) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(args) -> int:
    from .fusion import plan_fusion
    from .opgraph import Partition, classify_roofline, operational_intensity

    g, path = _load_graph(args.graph)
    p = _platform(args)
    out = Output(args, [str(path)])
    if args.partition == "unfused":
        part = Partition.unfused(g)
    else:
        part = plan_fusion(g, _tile(p), args.partition, _hints(args, g)).partition
    rep = operational_intensity(g, part)
    header = ["kernel", "operators", "flops", "bytes", "oi", "roofline"]
    rows = []
    for k in rep.kernels:
        ops = ",".join(o for o in g.topological_order() if o in k.operators)
        rows.append([k.index, ops, k.flops, k.bytes, k.oi, classify_roofline(k.oi, p.machine_balance).value])
    rows.append(["aggregate", len(rep.kernels), rep.flops, rep.bytes, rep.oi,
                 classify_roofline(rep.oi, p.machine_balance).value])
    print(f"# {g.name}: {args.partition} partition, balance {p.machine_balance:.4g} FLOP/B ({p.name})")
    print(_table(rows, header))
    out.write("analyze.csv", _csv(rows, header))
    out.close()
    return EXIT_OK


def cmd_fuse(args) -> int:
    from .fusion import plan_fusion

    g, path = _load_graph(args.graph)
    p = _platform(args)
    policy = args.policy or _default_policy(g)
    plan = plan_fusion(g, _tile(p), policy, _hints(args, g))
    rows = [[k.index, len(k.order), len(k.stages), k.pcus, k.pmus, k.sram_bytes, k.tiles,
             ",".join(k.folded) or "-"] for k in plan.kernels]
    print(f"# {g.name}: {policy} -> {len(plan)} kernels")
    print(_table(rows, ["kernel", "ops", "stages", "pcus", "pmus", "sram_bytes", "tiles", "folded"]))
    out = Output(args, [str(path)])
    out.write("fusionplan.json", json.dumps(plan.to_dict(), indent=1) + "\n")
    out.close()
    return EXIT_OK


def cmd_pnr(args) -> int:
    from .fabric import MeshTopology, flows_from_kernel, link_utilization, netlist_from_kernel, place, route, route_csv
    from .fusion import plan_fusion

    g, path = _load_graph(args.graph)
    p = _platform(args)
    tile = _tile(p)
    plan = plan_fusion(g, tile, args.policy or _default_policy(g), _hints(args, g))
    if not 0 <= args.kernel < len(plan):
        raise InvalidInput(f"kernel index {args.kernel} out of range (plan has {len(plan)})")
    k = plan.kernels[args.kernel]
    mesh = MeshTopology.from_tile(tile)
    pl = place(netlist_from_kernel(k, expand_units=args.expand), mesh, seed=args.seed)
    routes = route(pl, flows_from_kernel(k, pl))
    rep = link_utilization(routes, mesh)
    print(f"# {g.name} kernel {k.index}: {len(pl.sites)} entities on {mesh.rows}x{mesh.cols} mesh")
    print(_table(
        [[len(pl.sites), pl.wirelength, len(routes), len(rep.demand), rep.max_utilization, len(rep.hotspots)]],
        ["entities", "wirelength", "flows", "links_used", "max_util", "hotspots"],
    ))
    out = Output(args, [str(path)])
    out.write("routes.csv", route_csv(routes, mesh))
    out.write("placement.json", json.dumps(
        {"kernel": k.index, "wirelength": pl.wirelength, "sites": {e: list(s) for e, s in pl.sites.items()}},
        indent=1) + "\n")
    out.close()
    return EXIT_OK


def cmd_estimate(args) -> int:
    from .fusion import UNFUSED, plan_fusion
    from .perf import HO, SO, kernel_call_ratio, perf_csv, plan_time

    g, path = _load_graph(args.graph)
    p = _platform(args)
    tile = _tile(p)
    policy = args.policy or _default_policy(g)
    fused = plan_fusion(g, tile, policy, _hints(args, g))
    unfused = plan_fusion(g, tile, UNFUSED)
    orch = [SO, HO] if args.orchestration == "both" else [args.orchestration]
    rows = []
    times = {}
    for name, plan in (("unfused", unfused), (policy, fused)):
        for o in orch:
            r = plan_time(plan, p, o, args.repeat)
            times[(name, o)] = r.total
            rows.append([name, o, len(plan), r.total, r.overhead, r.compute])
    print(f"# {g.name} on {p.name}, repeat {args.repeat}")
    print(_table(rows, ["plan", "orch", "kernels", "total_s", "overhead_s", "kernel_s"]))
    ratio = kernel_call_ratio(unfused, fused)
    summary = [["kernel_call_ratio", ratio]]
    for o in orch:
        summary.append([f"fusion_speedup_{o}", times[("unfused", o)] / times[(policy, o)]])
    if len(orch) == 2:
        summary.append(["ho_speedup_fused", times[(policy, SO)] / times[(policy, HO)]])
        summary.append(["ho_speedup_unfused", times[("unfused", SO)] / times[("unfused", HO)]])
    print()
    print(_table(summary, ["metric", "value"]))
    out = Output(args, [str(path)])
    out.write("estimate.csv", _csv(rows, ["plan", "orch", "kernels", "total_s", "overhead_s", "kernel_s"]))
    out.write("summary.csv", _csv(summary, ["metric", "value"]))
    if out.dir is not None:
        out.write("perf.csv", perf_csv(fused, p, seed=args.seed))
    out.close()
    return EXIT_OK


def cmd_memplan(args) -> int:
    from .arch import HBM
    from .fusion import plan_fusion
    from .memplan import plan_memory, symbols_from_plan

    g, path = _load_graph(args.graph)
    p = _platform(args)
    plan = plan_fusion(g, _tile(p), args.policy or _default_policy(g), _hints(args, g))
    cap = args.hbm_capacity if args.hbm_capacity is not None else p.tier(HBM).capacity_bytes
    syms = symbols_from_plan(plan, args.repeat)
    ddr = p.capacity_tier.capacity_bytes if p.capacity_tier else math.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # reported below from res.warnings
        res = plan_memory(syms, len(plan) * args.repeat, cap, ddr)
    print(f"# {g.name}: {len(syms)} symbols over {len(plan) * args.repeat} kernels")
    print(_table(
        [[res.peak_hbm, cap, len(res.spills), res.spill_bytes]],
        ["peak_hbm_bytes", "hbm_capacity", "spilled", "spill_bytes"],
    ))
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    out = Output(args, [str(path)])
    out.write("memplan.json", json.dumps(res.to_dict(), indent=1) + "\n")
    out.close()
    return EXIT_OK


def _coe_config(args):
    from dataclasses import replace

    from .coesim import CoEConfig

    path = _resolve_file(args.config)
    cfg = CoEConfig.load(path)
    if args.experts is not None:
        proto = cfg.experts[0]
        cfg = replace(cfg, experts=tuple(replace(proto, id=f"E{i}") for i in range(args.experts)))
    if args.batch is not None:
        cfg = replace(cfg, batch=args.batch)
    if args.output_tokens is not None:
        cfg = replace(cfg, output_tokens=args.output_tokens)
    return cfg, path


def cmd_serve(args) -> int:
    from .coesim import SeededCategorical, read_trace, serve_trace, uniform_trace

    cfg, cpath = _coe_config(args)
    p = _platform(args)
    inputs = [str(cpath)]
    if args.trace:
        tpath = _resolve_file(args.trace)
        trace = read_trace(tpath)
        inputs.append(str(tpath))
    else:
        trace = uniform_trace(args.requests, cfg.ids, args.seed)
    policy = SeededCategorical(cfg.ids, seed=args.seed)
    res = serve_trace(trace, cfg, p, policy)
    print(f"# {len(trace)} requests, {len(cfg.experts)} experts, batch {cfg.batch} on {p.name}")
    print(_table(
        [[res.hits, res.misses, res.evictions, res.copyback_bytes, res.makespan,
          res.switch_fraction, res.execute_fraction, res.mean_latency()]],
        ["hits", "misses", "evictions", "copyback_B", "makespan_s", "switch_frac", "exec_frac", "mean_lat_s"],
    ))
    out = Output(args, inputs)
    out.write("requests.csv", res.requests_csv())
    out.write("summary.csv", res.summary_csv())
    out.close()
    return EXIT_OK


def _platform_list(args) -> list[str]:
    return [x for x in (args.platforms or args.platform).split(",") if x]


def _counts(text: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x]
    except ValueError:
        raise InvalidInput(f"bad expert count list {text!r}") from None
    if not out or min(out) < 1:
        raise InvalidInput("expert counts must be positive")
    return out


def cmd_footprint(args) -> int:
    from .coesim import footprint

    counts = _counts(args.experts)
    rows = []
    for name in _platform_list(args):
        p = resolve_platform(name)
        for n in counts:
            rows.append([n, p.name, footprint(n, p, int(args.expert_bytes))])
    print(_table(rows, ["experts", "platform", "machines"]))
    out = Output(args, [])
    out.write("footprint.csv", _csv(rows, ["experts", "platform", "machines"]))
    out.close()
    return EXIT_OK


def _sweep_point(task):
    name, n, cfg, requests, seed = task
    from .coesim import _point, footprint

    p = resolve_platform(name)
    pt = _point(n, cfg, p, requests, seed)
    return [n, p.name, footprint(n, p, cfg.experts[0].bytes), "yes" if pt.feasible else "OOM",
            pt.mean_latency, pt.batch_latency, pt.switch_share, pt.misses]


def cmd_sweep(args) -> int:
    from .coesim import CurvePoint, find_knee

    cfg, cpath = _coe_config(args)
    counts = sorted(_counts(args.counts))
    tasks = [(name, n, cfg, args.requests, args.seed) for name in _platform_list(args) for n in counts]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            rows = list(ex.map(_sweep_point, tasks))
    else:
        rows = [_sweep_point(t) for t in tasks]
    header = ["experts", "platform", "machines", "feasible", "mean_latency_s", "batch_latency_s",
              "switch_share", "misses"]
    print(_table(rows, header))
    knees = []
    for name in dict.fromkeys(r[1] for r in rows):
        pts = [CurvePoint(r[0], r[3] == "yes", r[4], r[5], r[6], r[7]) for r in rows if r[1] == name]
        knees.append([name, find_knee(pts) or "none"])
    print()
    print(_table(knees, ["platform", "knee"]))
    out = Output(args, [str(cpath)])
    out.write("sweep.csv", _csv(rows, header))
    out.write("knees.csv", _csv(knees, ["platform", "knee"]))
    out.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--platform", default="sn40l_node", help="builtin name or arch_v1 TOML file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="directory for CSV/JSON artifacts")
    common.add_argument("--jobs", type=int, default=1, help="concurrent independent simulations")

    ap = argparse.ArgumentParser(prog="coeflow", description=__doc__.splitlines()[0], parents=[common])
    ap.add_argument("--version", action="version", version=f"coeflow {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def graph_cmd(name, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.add_argument("--graph", required=True, help="opgraph_v1 JSON file or shipped fixture name")
        sp.add_argument("--hints", default=None, help="comma-separated boundary tensors for hinted fusion")
        return sp

    sp = graph_cmd("analyze", "operational intensity per kernel")
    sp.add_argument("--partition", choices=["unfused", "maximal", "hinted"], default="unfused")
    sp.set_defaults(func=cmd_analyze)

    sp = graph_cmd("fuse", "plan fusion and dump the plan")
    sp.add_argument("--policy", choices=["unfused", "maximal", "hinted"], default=None)
    sp.set_defaults(func=cmd_fuse)

    sp = graph_cmd("pnr", "place and route one fused kernel")
    sp.add_argument("--policy", choices=["unfused", "maximal", "hinted"], default=None)
    sp.add_argument("--kernel", type=int, default=0)
    sp.add_argument("--expand", action="store_true", help="place every PCU/PMU unit separately")
    sp.set_defaults(func=cmd_pnr)

    sp = graph_cmd("estimate", "fused vs unfused and SO vs HO timing")
    sp.add_argument("--policy", choices=["maximal", "hinted"], default=None)
    sp.add_argument("--orchestration", choices=["SO", "HO", "both"], default="both")
    sp.add_argument("--repeat", type=int, default=1, help="run the kernel sequence this many times")
    sp.set_defaults(func=cmd_estimate)

    sp = graph_cmd("memplan", "static HBM/DDR plan for the kernel schedule")
    sp.add_argument("--policy", choices=["unfused", "maximal", "hinted"], default=None)
    sp.add_argument("--hbm-capacity", type=float, default=None, help="bytes (default: one socket's HBM)")
    sp.add_argument("--repeat", type=int, default=1)
    sp.set_defaults(func=cmd_memplan)

    def coe_cmd(name, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.add_argument("--config", default="coe150.json", help="coeconfig_v1 JSON")
        sp.add_argument("--experts", type=int, default=None, help="override the expert count")
        sp.add_argument("--batch", type=int, default=None)
        sp.add_argument("--output-tokens", type=int, default=None)
        return sp

    sp = coe_cmd("serve", "simulate serving a request trace")
    sp.add_argument("--trace", default=None, help="JSONL trace; default is a uniform random trace")
    sp.add_argument("--requests", type=int, default=2000)
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("footprint", help="machines needed per expert count", parents=[common])
    sp.add_argument("--experts", default="50,150,850", help="comma-separated counts")
    sp.add_argument("--platforms", default="sn40l_node,dgx_a100,dgx_h100")
    sp.add_argument("--expert-bytes", type=float, default=14e9)
    sp.set_defaults(func=cmd_footprint)

    sp = coe_cmd("sweep", "latency curves and footprints over expert counts")
    sp.add_argument("--counts", default="1,10,20,30,40,41,45,50,60,100,150,300,850",
                    help="comma-separated expert counts")
    sp.add_argument("--platforms", default="sn40l_node,dgx_a100,dgx_h100")
    sp.add_argument("--requests", type=int, default=2000)
    sp.set_defaults(func=cmd_sweep)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.jobs < 1:
        ap.error("--jobs must be >= 1")
    return _run(args)


def _run(args) -> int:
    try:
        return args.func(args)
    except Infeasible as exc:
        limit = f" [{exc.limit}]" if exc.limit else ""
        print(f"infeasible{limit}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (InvalidInput, ProtocolError, ConfigurationError, AnalysisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

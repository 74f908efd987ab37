"""On-chip mechanics: placement and routing on the tile mesh, link load,
stream reordering, diagonal banking and address-range predication.

Coordinates are ``(x, y)`` with ``0 <= x < cols`` and ``0 <= y < rows``.
Compute (PCU) and memory (PMU) sites alternate in a checkerboard; an
optional column of AGCU sites sits on the west edge.
"""

from __future__ import annotations

import csv
import io
import math
import random
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .arch import TileConfig
from .errors import ConfigurationError, Infeasible, InvalidInput, ProtocolError

PCU, PMU, AGCU = "PCU", "PMU", "AGCU"

Site = tuple[int, int]
Link = tuple[Site, Site]


@dataclass(frozen=True)
class MeshTopology:
    rows: int
    cols: int
    link_bw: float = 102.4e9
    agcu_column: bool = False

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InvalidInput("mesh needs at least one row and one column")

    @classmethod
    def from_tile(cls, tile: TileConfig, agcu_column: bool = False) -> "MeshTopology":
        return cls(tile.mesh_rows, tile.mesh_cols, tile.link_bw, agcu_column)

    def kind(self, site: Site) -> str:
        x, y = site
        if self.agcu_column and x == 0:
            return AGCU
        return PCU if (x + y) % 2 == 0 else PMU

    def sites(self, kind: str | None = None) -> list[Site]:
        out = [(x, y) for y in range(self.rows) for x in range(self.cols)]
        return out if kind is None else [s for s in out if self.kind(s) == kind]

    def contains(self, site: Site) -> bool:
        return 0 <= site[0] < self.cols and 0 <= site[1] < self.rows

    def has_link(self, link: Link) -> bool:
        a, b = link
        return self.contains(a) and self.contains(b) and manhattan(a, b) == 1


def manhattan(a: Site, b: Site) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


# ---------------------------------------------------------------------------
# netlists and placement


@dataclass(frozen=True)
class Entity:
    id: str
    kind: str | None  # PCU, PMU, AGCU, or None for any site


@dataclass
class Netlist:
    """Entities to place and weighted two-point nets between them."""

    entities: list[Entity]
    nets: list[tuple[str, str, float]] = field(default_factory=list)

    def neighbors(self) -> dict[str, list[tuple[str, float]]]:
        adj: dict[str, list[tuple[str, float]]] = {e.id: [] for e in self.entities}
        for a, b, w in self.nets:
            adj[a].append((b, w))
            adj[b].append((a, w))
        return adj


def netlist_from_kernel(kernel, expand_units: bool = False, agcu: bool = False) -> Netlist:
    """Stages become PCU entities and buffers PMU entities.

    With ``expand_units`` each allocated unit is its own entity (``op#i``),
    otherwise one entity stands for the whole stage or buffer.
    """
    ents: list[Entity] = []
    groups: dict[str, list[str]] = {}

    def add(name: str, kind: str, n: int):
        ids = [f"{name}#{i}" for i in range(n)] if expand_units else [name]
        groups[name] = ids
        ents.extend(Entity(i, kind) for i in ids)

    for s in kernel.stages:
        add(s.op, PCU, s.pcu_alloc)
    for b in kernel.buffers:
        add(f"buf:{b.tensor}", PMU, b.pmu_alloc)
    if agcu:
        ents.append(Entity("agcu", AGCU))
        groups["agcu"] = ["agcu"]

    nets: list[tuple[str, str, float]] = []
    g = kernel.graph
    stage_ops = {s.op for s in kernel.stages}

    def link(u: str, v: str):
        # units pair up round-robin; a single entity per side gives one net
        gu, gv = groups[u], groups[v]
        for i in range(max(len(gu), len(gv))):
            nets.append((gu[i % len(gu)], gv[i % len(gv)], 1.0))

    for b in kernel.buffers:
        bname = f"buf:{b.tensor}"
        prod = g.producer(b.tensor)
        if prod in stage_ops:
            link(prod, bname)
        elif agcu:
            link("agcu", bname)
        for s in kernel.stages:
            if _reads(g, kernel, s.op, b.tensor):
                link(bname, s.op)
        if agcu and b.role == "output":
            link(bname, "agcu")
    return Netlist(ents, nets)


def _reads(g, kernel, op: str, tensor: str) -> bool:
    for t in g.operators[op].inputs:
        if t == tensor:
            return True
        # a folded transpose reads its root buffer
        p = g.producer(t)
        if p in kernel.folded and kernel.folded[p] == tensor:
            return True
    return False


@dataclass
class Placement:
    sites: dict[str, Site]
    mesh: MeshTopology
    netlist: Netlist | None = None

    @property
    def wirelength(self) -> float:
        if self.netlist is None:
            return 0.0
        return wirelength(self.netlist, self.sites)

    def site(self, entity: str) -> Site:
        return self.sites[entity]


def wirelength(netlist: Netlist, sites: Mapping[str, Site]) -> float:
    return sum(w * manhattan(sites[a], sites[b]) for a, b, w in netlist.nets)


def _kind_ok(mesh: MeshTopology, ent: Entity, site: Site) -> bool:
    return ent.kind is None or mesh.kind(site) == ent.kind


def place(target, mesh: MeshTopology, seed: int = 0, improve: bool = True) -> Placement:
    """Greedy BFS placement followed by pairwise swap improvement.

    ``target`` is a :class:`Netlist` or a fused kernel. Entities are visited
    breadth-first from the best-connected one; each goes to the free site of
    its kind that minimises weighted distance to already placed neighbours.
    Ties are broken by a seeded shuffle of the candidate sites.
    """
    net = target if isinstance(target, Netlist) else netlist_from_kernel(target)
    ids = [e.id for e in net.entities]
    if len(set(ids)) != len(ids):
        raise InvalidInput("duplicate entity ids in netlist")
    ent = {e.id: e for e in net.entities}
    for kind in {e.kind for e in net.entities}:
        need = sum(1 for e in net.entities if e.kind == kind)
        have = len(mesh.sites(kind)) if kind is not None else mesh.rows * mesh.cols
        if need > have:
            raise Infeasible(f"{need} {kind or 'any'} entities but only {have} sites", "mesh_sites")
    if len(ids) > mesh.rows * mesh.cols:
        raise Infeasible(f"{len(ids)} entities exceed {mesh.rows * mesh.cols} sites", "mesh_sites")

    rng = random.Random(seed)
    adj = net.neighbors()
    all_sites = mesh.sites()
    rng.shuffle(all_sites)
    centre = ((mesh.cols - 1) / 2, (mesh.rows - 1) / 2)

    order: list[str] = []
    seen: set[str] = set()
    degree = {e: sum(w for _, w in adj[e]) for e in ids}
    for root in sorted(ids, key=lambda e: (-degree[e], ids.index(e))):
        if root in seen:
            continue
        seen.add(root)
        q = deque([root])
        while q:
            e = q.popleft()
            order.append(e)
            for nb, _ in sorted(adj[e], key=lambda t: (-t[1], ids.index(t[0]))):
                if nb not in seen:
                    seen.add(nb)
                    q.append(nb)

    free = set(all_sites)
    sites: dict[str, Site] = {}
    for e in order:
        placed_nb = [(sites[n], w) for n, w in adj[e] if n in sites]
        best, best_cost = None, math.inf
        for s in all_sites:
            if s not in free or not _kind_ok(mesh, ent[e], s):
                continue
            if placed_nb:
                cost = sum(w * manhattan(s, p) for p, w in placed_nb)
            else:
                cost = abs(s[0] - centre[0]) + abs(s[1] - centre[1])
            if cost < best_cost - 1e-12:
                best, best_cost = s, cost
        if best is None:
            raise Infeasible(f"no free site for {e}", "mesh_sites")
        sites[e] = best
        free.discard(best)

    if improve and len(ids) <= 400:
        _swap_improve(net, mesh, sites, free, adj, ent)
    return Placement(sites, mesh, net)


def _swap_improve(net, mesh, sites, free, adj, ent, max_passes: int = 20) -> None:
    """Accept any move to a free site or swap of two entities that lowers wirelength."""

    def local(e: str, s: Site, skip: str | None = None, s_skip: Site | None = None) -> float:
        tot = 0.0
        for n, w in adj[e]:
            p = s_skip if n == skip else sites[n]
            tot += w * manhattan(s, p)
        return tot

    ids = [e.id for e in net.entities]
    for _ in range(max_passes):
        improved = False
        for a in ids:
            sa = sites[a]
            for s in sorted(free):
                if not _kind_ok(mesh, ent[a], s):
                    continue
                if local(a, s) < local(a, sa) - 1e-9:
                    free.add(sa)
                    free.discard(s)
                    sites[a] = sa = s
                    improved = True
            for b in ids:
                if b == a:
                    continue
                sb = sites[b]
                if not (_kind_ok(mesh, ent[a], sb) and _kind_ok(mesh, ent[b], sa)):
                    continue
                before = local(a, sa) + local(b, sb)
                after = local(a, sb, b, sa) + local(b, sa, a, sb)
                if after < before - 1e-9:
                    sites[a], sites[b] = sb, sa
                    sa = sb
                    improved = True
        if not improved:
            break


def validate_placement(p: Placement) -> list[str]:
    errs = []
    used: dict[Site, str] = {}
    kinds = {e.id: e.kind for e in p.netlist.entities} if p.netlist else {}
    for e, s in p.sites.items():
        if not p.mesh.contains(s):
            errs.append(f"{e} placed off-mesh at {s}")
        if s in used:
            errs.append(f"{e} and {used[s]} share site {s}")
        used[s] = e
        k = kinds.get(e)
        if k is not None and p.mesh.kind(s) != k:
            errs.append(f"{e} needs a {k} site, got {p.mesh.kind(s)} at {s}")
    return errs


# ---------------------------------------------------------------------------
# routing


@dataclass(frozen=True)
class Flow:
    id: str
    src: str
    dsts: tuple[str, ...]
    demand: float  # bytes/s
    throttle_weight: float = 1.0


@dataclass(frozen=True)
class FlowRoute:
    flow_id: str
    src: Site
    dsts: tuple[Site, ...]
    links: tuple[Link, ...]
    demand: float
    throttle_weight: float = 1.0

    @property
    def effective_demand(self) -> float:
        return self.demand * self.throttle_weight


def dor_path(a: Site, b: Site) -> list[Link]:
    """X-then-Y dimension-order path as a list of directed links."""
    links = []
    x, y = a
    step = 1 if b[0] > x else -1
    while x != b[0]:
        links.append(((x, y), (x + step, y)))
        x += step
    step = 1 if b[1] > y else -1
    while y != b[1]:
        links.append(((x, y), (x, y + step)))
        y += step
    return links


def multicast_tree(src: Site, dsts: Iterable[Site]) -> list[Link]:
    """Static multicast tree built from dimension-order segments.

    Destinations are attached nearest-first; each one joins the tree along
    the dimension-order path from the closest node already in the tree, so
    shared prefixes are paid once and no link exceeds its unicast cost.
    """
    tree_nodes = [src]
    in_tree = {src}
    links: list[Link] = []
    pending = sorted(set(dsts) - {src}, key=lambda d: (manhattan(src, d), d))
    while pending:
        d = pending.pop(0)
        if d in in_tree:
            continue
        anchor = min(tree_nodes, key=lambda n: (manhattan(n, d), tree_nodes.index(n)))
        path = dor_path(anchor, d)
        # keep only the part after the last node already on the tree
        cut = 0
        for i, (_, v) in enumerate(path):
            if v in in_tree:
                cut = i + 1
        for u, v in path[cut:]:
            links.append((u, v))
            in_tree.add(v)
            tree_nodes.append(v)
    return links


def route(p: Placement, flows: Iterable[Flow]) -> list[FlowRoute]:
    out = []
    for f in flows:
        for e in (f.src, *f.dsts):
            if e not in p.sites:
                raise InvalidInput(f"flow {f.id}: entity {e!r} not placed")
        src = p.sites[f.src]
        dsts = tuple(p.sites[d] for d in f.dsts)
        if len(set(dsts) - {src}) <= 1:
            links = tuple(dor_path(src, dsts[0])) if dsts else ()
        else:
            links = tuple(multicast_tree(src, dsts))
        out.append(FlowRoute(f.id, src, dsts, links, f.demand, f.throttle_weight))
    return out


def route_sites(src: Site, dsts: Sequence[Site]) -> list[Link]:
    """Links of the route from ``src`` to ``dsts`` (unicast or multicast)."""
    if len(set(dsts) - {src}) <= 1:
        return dor_path(src, dsts[0]) if dsts else []
    return multicast_tree(src, dsts)


def _units_of(placement: Placement, name: str) -> list[str]:
    if name in placement.sites:
        return [name]
    out, i = [], 0
    while f"{name}#{i}" in placement.sites:
        out.append(f"{name}#{i}")
        i += 1
    return out


def flows_from_kernel(kernel, placement: Placement) -> list[Flow]:
    """Read and write flows of every placed buffer.

    Each buffer unit multicasts its share of the read bandwidth to one PCU
    of every reader stage; each producer PCU writes its share to one unit.
    """
    flows = []
    g = kernel.graph
    stage_ops = {s.op for s in kernel.stages}
    for b in kernel.buffers:
        units = _units_of(placement, f"buf:{b.tensor}")
        if not units:
            continue
        readers = [_units_of(placement, s.op) for s in kernel.stages if _reads(g, kernel, s.op, b.tensor)]
        readers = [r for r in readers if r]
        if readers:
            for i, u in enumerate(units):
                dsts = tuple(r[i % len(r)] for r in readers)
                flows.append(Flow(f"{b.tensor}:read:{i}", u, dsts, b.required_bw / len(units)))
        prod = g.producer(b.tensor)
        if prod in stage_ops and b.write_bw > 0:
            pcus = _units_of(placement, prod)
            n = max(len(pcus), len(units))
            for i in range(n):
                flows.append(
                    Flow(f"{b.tensor}:write:{i}", pcus[i % len(pcus)], (units[i % len(units)],), b.write_bw / n)
                )
    return flows


# ---------------------------------------------------------------------------
# link load


@dataclass
class LinkReport:
    demand: dict[Link, float]
    utilization: dict[Link, float]
    hotspots: list[Link]
    capacity: float

    @property
    def max_utilization(self) -> float:
        return max(self.utilization.values(), default=0.0)


def link_utilization(routes: Iterable[FlowRoute], mesh: MeshTopology) -> LinkReport:
    demand: dict[Link, float] = {}
    for r in routes:
        for link in r.links:
            if not mesh.has_link(link):
                raise InvalidInput(f"flow {r.flow_id} uses non-existent link {link}")
            demand[link] = demand.get(link, 0.0) + r.effective_demand
    util = {k: v / mesh.link_bw for k, v in demand.items()}
    hot = sorted(k for k, u in util.items() if u > 1.0 + 1e-12)
    return LinkReport(demand, util, hot, mesh.link_bw)


def throttle(routes: Sequence[FlowRoute], mesh: MeshTopology) -> list[FlowRoute]:
    """Scale down flows crossing overloaded links so no link exceeds capacity.

    Each flow's weight is multiplied by ``1 / utilization`` of its most
    loaded link, which rescales every flagged link proportionally.
    """
    rep = link_utilization(routes, mesh)
    out = []
    for r in routes:
        worst = max((rep.utilization[l] for l in r.links), default=0.0)
        w = r.throttle_weight / worst if worst > 1.0 else r.throttle_weight
        out.append(replace(r, throttle_weight=w))
    return out


def flow_slowdown(routes: Sequence[FlowRoute], mesh: MeshTopology) -> dict[str, float]:
    """Fraction of requested bandwidth each flow gets (1.0 when uncongested)."""
    rep = link_utilization(routes, mesh)
    out = {}
    for r in routes:
        worst = max((rep.utilization[l] for l in r.links), default=0.0)
        out[r.flow_id] = 1.0 / worst if worst > 1.0 else 1.0
    return out


def route_csv(routes: Sequence[FlowRoute], mesh: MeshTopology) -> str:
    rep = link_utilization(routes, mesh)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["flow_id", "link", "demand", "utilization"])
    for r in routes:
        for l in r.links:
            w.writerow([r.flow_id, f"{l[0][0]},{l[0][1]}->{l[1][0]},{l[1][1]}", r.effective_demand, rep.utilization[l]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# stream reordering


@dataclass(frozen=True)
class Packet:
    flow_id: str
    sequence_id: int
    payload: object = None
    size: int = 0


class ReorderBuffer:
    """Streaming reorder of one flow by sequence id, starting at ``start``.

    ``push`` returns the payloads that became deliverable. ``occupancy``
    counts packets held waiting for an earlier id.
    """

    def __init__(self, start: int = 0):
        self.next_id = start
        self.held: dict[int, object] = {}
        self.max_occupancy = 0

    def push(self, pkt: Packet) -> list:
        sid = pkt.sequence_id
        if sid < 0:
            raise ProtocolError(f"negative sequence id {sid}")
        if sid < self.next_id or sid in self.held:
            raise ProtocolError(f"duplicate sequence id {sid}")
        self.held[sid] = pkt.payload
        self.max_occupancy = max(self.max_occupancy, len(self.held))
        out = []
        while self.next_id in self.held:
            out.append(self.held.pop(self.next_id))
            self.next_id += 1
        return out

    @property
    def occupancy(self) -> int:
        return len(self.held)

    def finish(self) -> None:
        if self.held:
            raise ProtocolError(
                f"missing sequence id {self.next_id} (holding {sorted(self.held)[:5]}...)"
            )


def reorder_stream(packets: Iterable[Packet], start: int = 0) -> list:
    buf = ReorderBuffer(start)
    out = []
    for p in packets:
        out.extend(buf.push(p))
    buf.finish()
    return out


# ---------------------------------------------------------------------------
# banking and predication


def diagonal_bank_address(row: int, col: int, banks: int, cols: int) -> tuple[int, int]:
    """Bank and in-bank offset of element ``(row, col)`` in a ``cols``-wide tensor.

    Rows are striped diagonally so both row and column runs of ``banks``
    consecutive elements hit distinct banks.
    """
    if banks < 1:
        raise ValueError("banks must be >= 1")
    if not 0 <= col < cols or row < 0:
        raise ValueError(f"element ({row}, {col}) outside a {cols}-column tensor")
    return (row + col) % banks, row * (-(-cols // banks)) + col // banks


def _ranges_of(plans) -> list[tuple[int, int]]:
    out = []
    for p in plans:
        if hasattr(p, "interleave"):
            p = p.interleave
        if hasattr(p, "ranges"):
            out.extend(p.ranges())
        else:
            lo, hi = p
            out.append((int(lo), int(hi)))
    return out


def check_ranges(ranges: Sequence[tuple[int, int]]) -> None:
    """Raise ConfigurationError unless the half-open ranges tile one interval."""
    spans = sorted((lo, hi, i) for i, (lo, hi) in enumerate(ranges) if hi > lo)
    for lo, hi, i in spans:
        if lo < 0:
            raise ConfigurationError(f"unit {i} range starts below zero")
    for (lo1, hi1, i), (lo2, hi2, j) in zip(spans, spans[1:]):
        if lo2 < hi1:
            raise ConfigurationError(f"units {i} and {j} overlap on [{lo2}, {min(hi1, hi2)})")
        if lo2 > hi1:
            raise ConfigurationError(f"addresses [{hi1}, {lo2}) are not covered")


def predicate_partition(address: int, plans) -> int:
    """Index of the unit whose programmed range accepts ``address``."""
    ranges = _ranges_of(plans)
    check_ranges(ranges)
    hits = [i for i, (lo, hi) in enumerate(ranges) if lo <= address < hi]
    if not hits:
        raise ConfigurationError(f"address {address} is not covered by any unit")
    return hits[0]

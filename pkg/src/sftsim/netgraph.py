"""Decoder layer graphs: text format, validation, chain extraction, simulation.

Graph files are line oriented::

    # comment
    node <id> kind=conv3x3s1 cin=36 cout=36 h=34 w=60 [key=value ...]
    edge <src> <dst>

``h``/``w`` give the node's input size. Optional keys: tag, algorithm,
activation, pad, rho, out_h, out_w (boundary nodes), boundary_bytes,
boundary_cycles, wfmt/afmt/ofmt (``total.fraction``). A boundary node may
declare more input channels than its edges deliver; the rest is read from
external memory.
"""

from __future__ import annotations

import graphlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .chainsim import BufferConfig, ChainSpec, DeadlockError, \
    TrafficCycleReport, boundary_bytes, simulate_baseline, simulate_chain
from .engine import BOUNDARY, CONV, DECONV, LayerSpec, ScuConfig
from .tensors import FxpFormat

log = logging.getLogger(__name__)

_INT_KEYS = {"cin", "cout", "h", "w", "pad", "out_h", "out_w",
             "boundary_bytes", "boundary_cycles"}
_STR_KEYS = {"kind", "tag", "algorithm", "activation"}
_FMT_KEYS = {"wfmt": "weight_fmt", "afmt": "act_fmt", "ofmt": "out_fmt"}
_FIELD = {"out_h": "out_h_", "out_w": "out_w_"}


class GraphError(ValueError):
    pass


@dataclass
class NetGraph:
    nodes: dict[str, LayerSpec] = field(default_factory=dict)
    edges: list[tuple[str, str]] = field(default_factory=list)

    def producers(self, nid: str) -> list[str]:
        return [a for a, b in self.edges if b == nid]

    def consumers(self, nid: str) -> list[str]:
        return [b for a, b in self.edges if a == nid]

    def topo_order(self) -> list[str]:
        ts = graphlib.TopologicalSorter({n: set() for n in self.nodes})
        for a, b in self.edges:
            ts.add(b, a)
        try:
            order = list(ts.static_order())
        except graphlib.CycleError as exc:
            raise GraphError(f"graph has a cycle: {exc.args[1]}") from None
        # stable: file order among ready nodes
        pos = {n: i for i, n in enumerate(self.nodes)}
        done, out = set(), []
        pending = sorted(self.nodes, key=pos.get)
        while pending:
            for n in pending:
                if all(p in done for p in self.producers(n)):
                    out.append(n)
                    done.add(n)
                    pending.remove(n)
                    break
        assert len(out) == len(order)
        return out

    def validate(self) -> None:
        for a, b in self.edges:
            for n in (a, b):
                if n not in self.nodes:
                    raise GraphError(f"edge {a}->{b}: unknown node {n!r}")
        if len(set(self.edges)) != len(self.edges):
            raise GraphError("duplicate edge")
        self.topo_order()
        for nid, spec in self.nodes.items():
            prods = self.producers(nid)
            if spec.is_boundary:
                chans = 0
                for p in prods:
                    ps = self.nodes[p]
                    if (ps.out_h, ps.out_w) != (spec.h, spec.w):
                        raise GraphError(
                            f"edge {p}->{nid}: spatial size "
                            f"{(ps.out_h, ps.out_w)} != {(spec.h, spec.w)}")
                    chans += ps.cout
                if chans > spec.cin:
                    raise GraphError(f"node {nid}: edges deliver {chans} "
                                     f"channels, node takes {spec.cin}")
                continue
            if len(prods) > 1:
                raise GraphError(f"node {nid}: convolution with "
                                 f"{len(prods)} producers")
            for p in prods:
                ps = self.nodes[p]
                got = (ps.cout, ps.out_h, ps.out_w)
                want = (spec.cin, spec.h, spec.w)
                if got != want:
                    raise GraphError(f"edge {p}->{nid}: produces "
                                     f"(c,h,w)={got}, consumer expects {want}")


def _parse_fmt(text: str) -> FxpFormat:
    total, frac = text.split(".")
    return FxpFormat(int(total), int(frac))


def _node_from_fields(nid: str, kv: dict[str, str], where: str) -> LayerSpec:
    args = {"name": nid}
    for key, val in kv.items():
        if key in _INT_KEYS:
            args[_FIELD.get(key, key)] = int(val)
        elif key in _STR_KEYS:
            args[key] = val
        elif key == "rho":
            args["rho"] = float(val)
        elif key in _FMT_KEYS:
            args[_FMT_KEYS[key]] = _parse_fmt(val)
        else:
            raise GraphError(f"{where}: unknown key {key!r}")
    for req in ("kind", "cin", "cout", "h", "w"):
        if req not in args:
            raise GraphError(f"{where}: node {nid} lacks {req}=")
    try:
        return LayerSpec(**args)
    except ValueError as exc:
        raise GraphError(f"{where}: {exc}") from None


def parse_netgraph(text: str, source: str = "<graph>") -> NetGraph:
    g = NetGraph()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        tok = line.split()
        if tok[0] == "node" and len(tok) >= 2:
            nid = tok[1]
            if nid in g.nodes:
                raise GraphError(f"{where}: duplicate node {nid!r}")
            kv = {}
            for item in tok[2:]:
                if "=" not in item:
                    raise GraphError(f"{where}: expected key=value, got {item!r}")
                k, v = item.split("=", 1)
                kv[k] = v
            g.nodes[nid] = _node_from_fields(nid, kv, where)
        elif tok[0] == "edge" and len(tok) == 3:
            g.edges.append((tok[1], tok[2]))
        else:
            raise GraphError(f"{where}: cannot parse {raw.strip()!r}")
    g.validate()
    return g


def load_netgraph(path: str | Path) -> NetGraph:
    return parse_netgraph(Path(path).read_text(), str(path))


def bundled_graph_path(name: str = "video_decoder.graph") -> Path:
    return Path(str(resources.files("sftsim") / "data" / name))


def format_node(spec: LayerSpec) -> str:
    default = LayerSpec(spec.kind, spec.cin, spec.cout, spec.h, spec.w)
    parts = [f"node {spec.name}", f"kind={spec.kind}", f"cin={spec.cin}",
             f"cout={spec.cout}", f"h={spec.h}", f"w={spec.w}"]
    for key in ("tag", "algorithm", "activation", "pad", "rho"):
        val = getattr(spec, key)
        if val != getattr(default, key):
            parts.append(f"{key}={val}")
    for key, attr in _FIELD.items():
        if getattr(spec, attr) is not None:
            parts.append(f"{key}={getattr(spec, attr)}")
    if spec.boundary_bytes is not None:
        parts.append(f"boundary_bytes={spec.boundary_bytes}")
    if spec.boundary_cycles:
        parts.append(f"boundary_cycles={spec.boundary_cycles}")
    for key, attr in _FMT_KEYS.items():
        fmt = getattr(spec, attr)
        if fmt != getattr(default, attr):
            parts.append(f"{key}={fmt.total_bits}.{fmt.fraction_bits}")
    return " ".join(parts)


def save_netgraph(g: NetGraph, path: str | Path | None = None) -> str:
    lines = [format_node(s) for s in g.nodes.values()]
    lines += [f"edge {a} {b}" for a, b in g.edges]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


# --- chains --------------------------------------------------------------------

@dataclass
class ChainExtraction:
    chains: list[ChainSpec]
    residue: list[str]

    def chain_ids(self) -> list[list[str]]:
        return [[L.name for L in c.layers] for c in self.chains]


def _fits(layers, buf, scu) -> bool:
    try:
        simulate_chain(ChainSpec(tuple(layers)), buf, scu)
        return True
    except DeadlockError:
        return False


def extract_chains(g: NetGraph, buf: BufferConfig | None = None,
                   scu: ScuConfig | None = None) -> ChainExtraction:
    """Greedy longest runs of ``conv* deconv?`` along single-consumer paths.

    A run continues from a convolution only into its sole consumer, and only
    if that consumer has no other producer. With ``buf`` given, a run is also
    cut where adding the next layer would no longer schedule in the buffer.
    Runs of one layer go to the residue.
    """
    scu = scu or ScuConfig()
    assigned: set[str] = set()
    chains, residue = [], []
    tags = {}
    for nid in g.topo_order():
        if nid in assigned:
            continue
        spec = g.nodes[nid]
        if spec.is_boundary:
            residue.append(nid)
            assigned.add(nid)
            continue
        run = [nid]
        cur = nid
        while g.nodes[cur].kind == CONV:
            cons = g.consumers(cur)
            if len(cons) != 1:
                break
            nxt = cons[0]
            ns = g.nodes[nxt]
            if nxt in assigned or ns.is_boundary or len(g.producers(nxt)) != 1:
                break
            if buf is not None and not _fits(
                    [g.nodes[x] for x in run + [nxt]], buf, scu):
                break
            run.append(nxt)
            cur = nxt
        assigned.update(run)
        if len(run) == 1:
            residue.append(nid)
        else:
            tags = {g.nodes[x].tag for x in run}
            chains.append(ChainSpec(tuple(g.nodes[x] for x in run),
                                    name=f"{run[0]}..{run[-1]}",
                                    tag=tags.pop() if len(tags) == 1 else ""))
    return ChainExtraction(chains, residue)


# --- whole-graph simulation ----------------------------------------------------

@dataclass
class GraphReport:
    parts: list[TrafficCycleReport]
    frequency_hz: float
    extraction: ChainExtraction | None = None
    deadlocked: list[str] = field(default_factory=list)

    @property
    def reads(self):
        return sum(p.reads for p in self.parts)

    @property
    def writes(self):
        return sum(p.writes for p in self.parts)

    @property
    def cycles(self):
        return sum(p.cycles for p in self.parts)

    @property
    def baseline_traffic(self):
        return sum(p.baseline_traffic for p in self.parts)

    @property
    def traffic(self):
        return sum(p.traffic for p in self.parts)

    @property
    def baseline_cycles(self):
        return sum(p.baseline_cycles for p in self.parts)

    @property
    def reduction(self) -> float:
        b = self.baseline_traffic
        return 1.0 - self.traffic / b if b else 0.0

    def by_tag(self) -> dict[str, dict]:
        out: dict[str, dict] = {}
        for p in self.parts:
            row = out.setdefault(p.tag or "untagged", {
                "reads": 0, "writes": 0, "baseline_reads": 0,
                "baseline_writes": 0, "cycles": 0, "baseline_cycles": 0})
            row["reads"] += p.reads
            row["writes"] += p.writes
            row["baseline_reads"] += p.baseline_reads
            row["baseline_writes"] += p.baseline_writes
            row["cycles"] += p.cycles
            row["baseline_cycles"] += p.baseline_cycles
        return dict(sorted(out.items()))

    def to_json(self) -> dict:
        seconds = self.cycles / self.frequency_hz
        return {
            "reads": self.reads, "writes": self.writes,
            "baseline_reads": sum(p.baseline_reads for p in self.parts),
            "baseline_writes": sum(p.baseline_writes for p in self.parts),
            "cycles": self.cycles, "baseline_cycles": self.baseline_cycles,
            "reduction": round(self.reduction, 12),
            "frame_seconds": seconds,
            "fps": (1.0 / seconds) if seconds else None,
            "modules": self.by_tag(),
            "parts": [p.summary() for p in self.parts],
            "chains": self.extraction.chain_ids() if self.extraction else [],
            "residue": self.extraction.residue if self.extraction else [],
            "deadlocked": self.deadlocked,
        }


def simulate_graph(g: NetGraph, scu: ScuConfig, buf: BufferConfig,
                   threads: int = 1, split: bool = True,
                   keep_events: bool = False) -> GraphReport:
    """Chains run fused, everything else layer by layer.

    Parts are ordered by their first node in topological order whatever
    ``threads`` is. With ``split=False`` chains are not cut to fit the buffer;
    a chain that deadlocks then contributes its partial report and is listed
    in ``GraphReport.deadlocked``.
    """
    ext = extract_chains(g, buf if split else None, scu)
    order = {n: i for i, n in enumerate(g.topo_order())}
    jobs = [(order[c.layers[0].name], c) for c in ext.chains]
    jobs += [(order[n], g.nodes[n]) for n in ext.residue]
    jobs.sort(key=lambda j: j[0])

    def run(job):
        obj = job[1]
        if isinstance(obj, LayerSpec):
            return simulate_baseline([obj], scu, buf, obj.name, obj.tag), False
        try:
            return simulate_chain(obj, buf, scu), False
        except DeadlockError as exc:
            log.error("%s", exc)
            return exc.report, True

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    parts = [r for r, _ in results]
    if not keep_events:
        for p in parts:
            p.events = []
    return GraphReport(parts, scu.frequency_hz, extraction=ext,
                       deadlocked=[p.name for p, bad in results if bad])


def frame_latency_estimate(g: NetGraph, scu: ScuConfig,
                           buf: BufferConfig) -> tuple[float, float]:
    """(seconds per frame, frames per second) from the cycle model.

    Model estimate only: boundary layers contribute their configured cycles
    and DRAM stalls are not modelled.
    """
    rep = simulate_graph(g, scu, buf)
    seconds = rep.cycles / scu.frequency_hz
    return seconds, (1.0 / seconds if seconds else float("inf"))


__all__ = ["NetGraph", "GraphError", "ChainExtraction", "GraphReport",
           "load_netgraph", "parse_netgraph", "save_netgraph",
           "extract_chains", "simulate_graph", "frame_latency_estimate",
           "bundled_graph_path", "BOUNDARY", "CONV", "DECONV",
           "boundary_bytes"]

"""Row-granular simulator of the layer-chaining dataflow.

A chain is a run of convolutions ending in at most one deconvolution. Its
input feature is streamed in from DRAM one row at a time; intermediate
features live only in the Input Buffer, whose banks each hold one feature
row. Row ``i`` of a feature goes to bank ``(i + base) % num_banks``. The
first feature has ``base = 0``; each later feature is shifted back by its
producer's padding so that an output row lands on the bank of the first
input row it consumes. A bank is only overwritten once every consumer of its
row has run. The last layer's output goes straight back to DRAM.

The baseline executes the same layers one at a time, with every feature
crossing the off-chip boundary.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from .engine import CONV, DECONV, DIRECT, FAST_DENSE, FAST_SPARSE, LayerSpec, \
    ScuConfig, kernel_nnz, layer_cycle_model, pipeline_fill, tile_cycles, \
    tile_grid

log = logging.getLogger(__name__)


class DeadlockError(RuntimeError):
    """No layer can make progress; ``blocking`` maps bank -> (feature, row)."""

    def __init__(self, msg, blocking, report=None):
        super().__init__(msg)
        self.blocking = blocking
        self.report = report


@dataclass(frozen=True)
class ChainSpec:
    layers: tuple[LayerSpec, ...]
    name: str = ""
    tag: str = ""

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("a chain needs at least one layer")
        for i, L in enumerate(layers):
            if L.is_boundary:
                raise ValueError(f"chain {self.name!r}: boundary layer "
                                 f"{L.name!r} cannot be chained")
            if L.kind == DECONV and i != len(layers) - 1:
                raise ValueError(f"chain {self.name!r}: deconvolution must "
                                 f"be the last layer")
        for a, b in zip(layers, layers[1:]):
            if (a.cout, a.out_h, a.out_w) != (b.cin, b.h, b.w):
                raise ValueError(
                    f"chain {self.name!r}: {a.name or 'layer'} produces "
                    f"{(a.cout, a.out_h, a.out_w)}, {b.name or 'next'} "
                    f"expects {(b.cin, b.h, b.w)}")

    def __len__(self):
        return len(self.layers)


@dataclass(frozen=True)
class BufferConfig:
    num_banks: int = 10
    bank_capacity: int | None = None   # bytes; None = widest row of the chain
    activation_bits: int = 12
    weight_bits: int = 16
    dram_word_bytes: int = 1

    def __post_init__(self):
        if self.num_banks < 1:
            raise ValueError("need at least one bank")


@dataclass
class TrafficCycleReport:
    name: str
    tag: str = ""
    layers: list[dict] = field(default_factory=list)
    reads: int = 0
    writes: int = 0
    cycles: int = 0
    baseline_reads: int = 0
    baseline_writes: int = 0
    baseline_cycles: int = 0
    intermediate_bytes: int = 0
    chained: bool = False
    events: list[dict] = field(default_factory=list)
    deadlock: dict | None = None

    @property
    def traffic(self) -> int:
        return self.reads + self.writes

    @property
    def baseline_traffic(self) -> int:
        return self.baseline_reads + self.baseline_writes

    @property
    def reduction(self) -> float:
        if not self.baseline_traffic:
            return 0.0
        return 1.0 - self.traffic / self.baseline_traffic

    def summary(self) -> dict:
        """JSON-ready view without the event timeline."""
        return {
            "name": self.name, "tag": self.tag, "chained": self.chained,
            "reads": self.reads, "writes": self.writes, "cycles": self.cycles,
            "baseline_reads": self.baseline_reads,
            "baseline_writes": self.baseline_writes,
            "baseline_cycles": self.baseline_cycles,
            "intermediate_bytes": self.intermediate_bytes,
            "reduction": round(self.reduction, 12),
            "layers": self.layers,
            "deadlock": self.deadlock,
        }

    def trace_rows(self) -> list[tuple]:
        """(cycle, bank, state, feature, row) occupancy transitions."""
        rows = []
        for ev in self.events:
            for f, r, b in ev.get("released", ()):
                rows.append((ev["cycle"], b, "inactive", f, r))
            for f, r, b in ev.get("reads", ()):
                rows.append((ev["cycle"], b, "computing", f, r))
            for f, r, b in ev.get("writes", ()):
                state = "loaded" if ev["op"] == "load" else "written"
                rows.append((ev["cycle"], b, state, f, r))
        return rows


# --- byte accounting ---------------------------------------------------------

def _round_word(nbytes: int, buf: BufferConfig) -> int:
    w = buf.dram_word_bytes
    return -(-nbytes // w) * w


def row_bytes(channels: int, width: int, buf: BufferConfig) -> int:
    return _round_word(math.ceil(channels * width * buf.activation_bits / 8), buf)


def feature_bytes(channels: int, height: int, width: int,
                  buf: BufferConfig) -> int:
    return height * row_bytes(channels, width, buf)


def weight_bytes(spec: LayerSpec, buf: BufferConfig) -> int:
    """Off-chip bytes for one layer's weights (and sparse indices)."""
    if spec.is_boundary:
        return 0
    pairs = spec.cin * spec.cout
    if spec.algorithm == DIRECT:
        bits = pairs * spec.k * spec.k * buf.weight_bits
    elif spec.algorithm == FAST_DENSE:
        mu = spec.transform.mu
        bits = pairs * mu * mu * buf.weight_bits
    else:
        mu = spec.transform.mu
        index_bits = math.ceil(math.log2(mu * mu))
        bits = pairs * kernel_nnz(spec) * (buf.weight_bits + index_bits)
    return _round_word(math.ceil(bits / 8), buf)


def boundary_bytes(spec: LayerSpec, buf: BufferConfig) -> int:
    if spec.boundary_bytes is not None:
        return spec.boundary_bytes
    return (feature_bytes(spec.cin, spec.h, spec.w, buf)
            + feature_bytes(spec.cout, spec.out_h, spec.out_w, buf))


# --- row dependencies --------------------------------------------------------

def input_rows_for(spec: LayerSpec, lo: int, hi: int) -> tuple[int, int]:
    """Input rows ``[a, b)`` that output rows ``[lo, hi)`` depend on, clipped."""
    k, s, pad = spec.k, spec.s, spec.pad
    if spec.kind == CONV:
        a, b = lo * s - pad, (hi - 1) * s - pad + k
    else:
        a = -(-(lo + pad - k + 1) // s)
        b = (hi - 1 + pad) // s + 1
    return max(0, a), min(spec.h, b)


def round_out_rows(spec: LayerSpec, lo: int, hi: int) -> tuple[int, int]:
    """Output rows actually computed when ``[lo, hi)`` is requested."""
    if spec.algorithm == DIRECT or hi <= lo:
        return lo, hi
    if spec.kind == CONV:
        # stride-1 fast conv tiles may start at any row
        m = spec.transform.m
        return lo, min(spec.out_h, lo + -(-(hi - lo) // m) * m)
    g = tile_grid(spec, spec.h, spec.out_h)
    t0 = (lo - g.out0) // g.tile
    t1 = -(-(hi - g.out0) // g.tile)
    return max(0, g.out0 + t0 * g.tile), min(spec.out_h, g.out0 + t1 * g.tile)


def rows_needed(chain: ChainSpec, lo: int, hi: int) -> list[tuple[int, int]]:
    """Row ranges of every feature needed for final output rows ``[lo, hi)``.

    Entry ``i`` is the input feature of layer ``i``; the last entry is the
    requested output range itself.
    """
    out = [(lo, hi)]
    for spec in reversed(chain.layers):
        a, b = round_out_rows(spec, *out[0])
        out.insert(0, input_rows_for(spec, a, b))
    return out


# --- simulation --------------------------------------------------------------

class _Layer:
    """Per-layer scheduling state: which output rows the next group makes."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.done = 0      # output rows produced, contiguous from 0
        self.group = 0
        self.cap = None    # clip for a partial group (stride-1 convs only)
        self.tiles = 0     # tiles issued so far, for pass packing
        if spec.algorithm == DIRECT:
            self.step = spec.s
        elif spec.kind == CONV:
            self.step = spec.transform.m
        else:
            self.grid = tile_grid(spec, spec.h, spec.out_h)
            self.step = None

    @property
    def finished(self) -> bool:
        return self.done >= self.spec.out_h

    def group_out(self, ahead: int = 0) -> tuple[int, int] | None:
        spec = self.spec
        if self.step is not None:
            lo = self.done
            hi = min(spec.out_h, lo + self.step)
            if self.cap is not None:
                hi = min(hi, self.cap)
            for _ in range(ahead):
                lo, hi = hi, min(spec.out_h, hi + self.step)
            return None if lo >= spec.out_h else (lo, hi)
        t = self.group + ahead
        if t >= self.grid.count:
            return None
        lo, hi = self.grid.out_range(t)
        return max(0, lo), min(spec.out_h, hi)

    def group_in(self, ahead: int = 0) -> tuple[int, int] | None:
        out = self.group_out(ahead)
        return None if out is None else input_rows_for(self.spec, *out)

    def advance(self):
        _, hi = self.group_out()
        self.done = hi
        self.group += 1
        self.cap = None


def _bank_bases(chain: ChainSpec) -> list[int]:
    bases = [0]
    for spec in chain.layers:
        bases.append(bases[-1] - (spec.pad if spec.kind == CONV else 0))
    return bases


def _group_tiles(spec: LayerSpec, rows: int) -> int:
    if spec.algorithm == DIRECT:
        return 0
    cols = tile_grid(spec, spec.w, spec.out_w).count
    if spec.kind == CONV:
        return -(-rows // spec.transform.m) * cols
    return cols


def simulate_baseline(layers, scu: ScuConfig, buf: BufferConfig,
                      name: str = "", tag: str = "") -> TrafficCycleReport:
    """Layer-by-layer execution: every feature goes off chip and back."""
    rep = TrafficCycleReport(name=name, tag=tag)
    for spec in layers:
        wb = weight_bytes(spec, buf)
        if spec.is_boundary:
            io = boundary_bytes(spec, buf)
            r = feature_bytes(spec.cin, spec.h, spec.w, buf) \
                if spec.boundary_bytes is None else io
            reads, writes = r + wb, io - r
        else:
            reads = feature_bytes(spec.cin, spec.h, spec.w, buf) + wb
            writes = feature_bytes(spec.cout, spec.out_h, spec.out_w, buf)
        cyc = layer_cycle_model(spec, scu) if spec.algorithm != DIRECT \
            or spec.is_boundary else 0
        rep.layers.append({"name": spec.name, "kind": spec.kind,
                           "reads": reads, "writes": writes, "cycles": cyc,
                           "baseline_reads": reads, "baseline_writes": writes,
                           "baseline_cycles": cyc})
        rep.reads += reads
        rep.writes += writes
        rep.cycles += cyc
    rep.baseline_reads, rep.baseline_writes = rep.reads, rep.writes
    rep.baseline_cycles = rep.cycles
    return rep


def simulate_chain(chain: ChainSpec, buf: BufferConfig,
                   scu: ScuConfig) -> TrafficCycleReport:
    """Event-driven row-group schedule of one chain.

    Each step picks the deepest layer whose next row group is wanted
    downstream, has all input rows resident, and has free banks for its
    output rows. Rows of the chain input are loaded on demand. Raises
    DeadlockError when nothing can move.
    """
    layers = chain.layers
    n = len(layers)
    base = simulate_baseline(layers, scu, buf, chain.name, chain.tag)
    rep = TrafficCycleReport(name=chain.name, tag=chain.tag, chained=n > 1,
                             baseline_reads=base.reads,
                             baseline_writes=base.writes,
                             baseline_cycles=base.cycles)
    widths = [(layers[0].cin, layers[0].w)] + \
             [(L.cout, L.out_w) for L in layers]
    rbytes = [row_bytes(c, w, buf) for c, w in widths]
    cap = buf.bank_capacity if buf.bank_capacity is not None \
        else max(rbytes[:n])
    if cap < max(rbytes[:n]):
        raise ValueError(f"bank capacity {cap} B is below the widest row "
                         f"({max(rbytes[:n])} B)")

    st = [_Layer(L) for L in layers]
    bases = _bank_bases(chain)
    nb = buf.num_banks
    banks: list[tuple[int, int] | None] = [None] * nb
    where: list[dict[int, int]] = [dict() for _ in range(n)]
    loaded = 0
    cycle = 0
    per_layer = [{"name": L.name, "kind": L.kind, "reads": 0, "writes": 0,
                  "cycles": 0} for L in layers]

    def bank_of(f, r):
        return (r + bases[f]) % nb

    def dead(f, r, consuming=None):
        """Row r of feature f has no future reader (``consuming`` layer is
        about to run its current group)."""
        s = st[f]
        nxt = s.group_in(1 if consuming == f else 0)
        return nxt is None or r < nxt[0]

    def free_bank(b, consuming=None):
        held = banks[b]
        return held is None or dead(*held, consuming=consuming)

    def release(b):
        held = banks[b]
        if held is not None:
            del where[held[0]][held[1]]
            banks[b] = None
            return [(held[0], held[1], b)]
        return []

    def wanted(L):
        if L == n - 1:
            return True
        need = st[L + 1].group_in()
        return need is not None and st[L].done < need[1]

    def attempt(L, cap=None) -> bool:
        s = st[L]
        s.cap = cap
        try:
            return step(L, s)
        finally:
            s.cap = None

    def step(L, s) -> bool:
        nonlocal loaded, cycle
        lo, hi = s.group_in()
        missing = [r for r in range(lo, hi) if r not in where[L]]
        if missing:
            if L != 0:
                return False
            r = missing[0]
            if r != loaded:
                raise AssertionError("chain input must stream in order")
            b = bank_of(0, r)
            if not free_bank(b):
                return False
            freed = release(b)
            banks[b] = (0, r)
            where[0][r] = b
            loaded += 1
            rep.events.append({"cycle": cycle, "op": "load", "layer": 0,
                               "released": freed, "writes": [(0, r, b)]})
            return True
        o_lo, o_hi = s.group_out()
        if L < n - 1:
            targets = [(r, bank_of(L + 1, r)) for r in range(o_lo, o_hi)]
            if len({b for _, b in targets}) != len(targets) or \
                    not all(free_bank(b, consuming=L) for _, b in targets):
                return False
        reads = [(L, r, where[L][r]) for r in range(lo, hi)]
        cyc = 0
        if s.spec.algorithm != DIRECT:
            # tiles left over from one row group share a pass with the next
            before = s.tiles
            s.tiles += _group_tiles(s.spec, o_hi - o_lo)
            cyc = tile_cycles(s.spec, scu, s.tiles) - \
                (tile_cycles(s.spec, scu, before) if before else 0)
        ev = {"cycle": cycle, "op": "compute", "layer": L,
              "out": (o_lo, o_hi), "reads": reads, "writes": [],
              "released": []}
        if L < n - 1:
            for r, b in targets:
                ev["released"] += release(b)
                banks[b] = (L + 1, r)
                where[L + 1][r] = b
                ev["writes"].append((L + 1, r, b))
        s.advance()
        # rows nobody will read again become overwritable (inactive)
        nxt = s.group_in()
        for r in sorted(where[L]):
            if nxt is None or r < nxt[0]:
                ev["released"] += release(where[L][r])
        cycle += cyc
        per_layer[L]["cycles"] += cyc
        rep.events.append(ev)
        return True

    def partial_cap(L):
        """Output rows the consumer needs, if less than a full group."""
        s = st[L]
        if L == n - 1 or s.step is None or s.spec.kind != CONV:
            return None
        need = st[L + 1].group_in()[1]
        full = s.group_out()[1]
        return need if s.done < need < full else None

    while not st[-1].finished:
        active = [L for L in range(n - 1, -1, -1)
                  if not st[L].finished and wanted(L)]
        moved = any(attempt(L) for L in active)
        if not moved:
            # fall back to a partial tile row (full tile cost, fewer rows)
            moved = any(attempt(L, cap) for L in active
                        if (cap := partial_cap(L)) is not None)
        if not moved:
            blocking = {b: banks[b] for b in range(nb) if banks[b] is not None}
            rep.deadlock = {"banks": nb,
                            "blocking": [[b, f, r] for b, (f, r)
                                         in sorted(blocking.items())],
                            "progress": [x.done for x in st]}
            raise DeadlockError(
                f"chain {chain.name!r} deadlocked with {nb} banks "
                f"(progress {[x.done for x in st]})", blocking, rep)

    # off-chip traffic: chain input once, weights once, final output once
    in_bytes = loaded * rbytes[0]
    out_bytes = layers[-1].out_h * rbytes[n]
    for L, spec in enumerate(layers):
        per_layer[L]["reads"] = weight_bytes(spec, buf)
    per_layer[0]["reads"] += in_bytes
    per_layer[-1]["writes"] = out_bytes
    for L, bl in enumerate(base.layers):
        per_layer[L].update(baseline_reads=bl["reads"],
                            baseline_writes=bl["writes"],
                            baseline_cycles=bl["cycles"])
    rep.layers = per_layer
    rep.reads = sum(p["reads"] for p in per_layer)
    rep.writes = out_bytes
    rep.cycles = cycle + pipeline_fill(scu)
    rep.intermediate_bytes = sum(layers[i].out_h * rbytes[i + 1]
                                 for i in range(n - 1))
    return rep


def verify_schedule(chain: ChainSpec, rep: TrafficCycleReport) -> list[str]:
    """Replay the event timeline; return a list of violations (empty = safe).

    The inputs of every compute event are re-derived from the layer geometry
    (not from the recorded reads) and must all be resident at that moment.
    Every final output row must be produced exactly once and every chain input
    row loaded exactly once.
    """
    problems = []
    held: dict[int, tuple[int, int]] = {}
    resident: set[tuple[int, int]] = set()
    loads: dict[int, int] = {}
    produced: dict[int, int] = {}
    n = len(chain.layers)
    for i, ev in enumerate(rep.events):
        if ev["op"] == "compute":
            spec = chain.layers[ev["layer"]]
            lo, hi = input_rows_for(spec, *ev["out"])
            for r in range(lo, hi):
                if (ev["layer"], r) not in resident:
                    problems.append(f"event {i}: layer {ev['layer']} read "
                                    f"row {r} which is not resident")
            if ev["layer"] == n - 1:
                for r in range(*ev["out"]):
                    produced[r] = produced.get(r, 0) + 1
        else:
            for _, r, _ in ev["writes"]:
                loads[r] = loads.get(r, 0) + 1
        # a group reads its inputs before its outputs replace them
        for f, r, b in ev.get("released", ()):
            resident.discard((f, r))
            held.pop(b, None)
        for f, r, b in ev.get("writes", ()):
            if b in held:
                problems.append(f"event {i}: bank {b} overwritten while "
                                f"holding live row {held[b]}")
            held[b] = (f, r)
            resident.add((f, r))
    last = chain.layers[-1]
    if sorted(produced) != list(range(last.out_h)) or \
            any(v != 1 for v in produced.values()):
        problems.append("final output rows not produced exactly once")
    if any(v != 1 for v in loads.values()):
        problems.append("a chain input row was loaded more than once")
    return problems


def min_banks(chain: ChainSpec, scu: ScuConfig, buf: BufferConfig,
              limit: int = 64) -> int | None:
    """Smallest bank count that schedules without deadlock."""
    for nb in range(1, limit + 1):
        try:
            simulate_chain(chain, BufferConfig(nb, buf.bank_capacity,
                                               buf.activation_bits,
                                               buf.weight_bits,
                                               buf.dram_word_bytes), scu)
            return nb
        except DeadlockError:
            continue
    return None

"""Synchronization regions, the region dependency graph and parallel-region sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import CycleDetected, UnknownRegion
from .isa import FINAL, INITIAL, Instruction, Opcode, Program


class StepCounter:
    """Elementary-step tally used as a complexity witness."""

    def __init__(self):
        self.count = 0

    def tick(self, n: int = 1):
        self.count += n


@dataclass(frozen=True)
class SyncRegion:
    core: int
    ordinal: int
    start: int
    end: int
    upper_barrier: object   # barrier id or INITIAL
    lower_barrier: object   # barrier id or FINAL

    @property
    def id(self):
        return (self.core, self.ordinal)

    @property
    def pc_range(self):
        return range(self.start, self.end)

    def __len__(self):
        return self.end - self.start

    def __contains__(self, pc):
        return self.start <= pc < self.end

    @property
    def label(self) -> str:
        return f"c{self.core}.{self.ordinal}"

    def __str__(self):
        return f"{self.label}[{self.start},{self.end}) {self.upper_barrier}->{self.lower_barrier}"

    def to_json(self):
        return {"core": self.core, "ordinal": self.ordinal, "start": self.start,
                "end": self.end, "upper_barrier": self.upper_barrier,
                "lower_barrier": self.lower_barrier}


def divide_into_regions(prog: Program, counter: Optional[StepCounter] = None) -> list:
    """One linear scan per core; SYNC and HALT close regions and belong to none."""
    regions = []
    for c, seq in enumerate(prog.cores):
        upper, start, ordinal = INITIAL, 0, 0
        for pc, ins in enumerate(seq):
            if counter is not None:
                counter.count += 1
            op = ins.opcode
            if op is Opcode.SYNC or op is Opcode.HALT:
                lower = ins.barrier_id if op is Opcode.SYNC else FINAL
                regions.append(SyncRegion(c, ordinal, start, pc, upper, lower))
                ordinal += 1
                upper, start = lower, pc + 1
    return regions


def _bits(mask: int):
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


class RegionGraph:
    """Directed region graph (edge = executes-before) with reachability closure.

    Parallel sets are materialized once at construction; lookups are O(1).
    Immutable after construction.
    """

    def __init__(self, regions, edges, reach, back, parallel_sets):
        self.regions = tuple(regions)
        self.edges = tuple(edges)
        self._index = {r: i for i, r in enumerate(self.regions)}
        self._reach = reach
        self._back = back
        self.parallel_sets = parallel_sets
        self._table = None
        self._by_core = {}
        for r in self.regions:
            self._by_core.setdefault(r.core, []).append(r)
        for rs in self._by_core.values():
            rs.sort(key=lambda r: r.ordinal)
        self._closing = {}
        self._opening = {}
        for r in self.regions:
            self._closing.setdefault(r.lower_barrier, []).append(r)
            self._opening.setdefault(r.upper_barrier, []).append(r)

    def __contains__(self, region):
        return region in self._index

    def _i(self, region) -> int:
        try:
            return self._index[region]
        except KeyError:
            raise UnknownRegion(f"{region} is not part of this graph") from None

    def region_of(self, core: int, pc: int) -> Optional[SyncRegion]:
        """Region holding ``pc`` on ``core``; None for SYNC/HALT positions."""
        return self.region_lookup().get((core, pc))

    def region_lookup(self) -> dict:
        """Dense ``{(core, pc): region}`` table, built on first use."""
        if self._table is None:
            table = {}
            for r in self.regions:
                for pc in r.pc_range:
                    table[(r.core, pc)] = r
            self._table = table
        return self._table

    def core_regions(self, core: int) -> list:
        return list(self._by_core.get(core, ()))

    def closing(self, barrier) -> list:
        return list(self._closing.get(barrier, ()))

    def opening(self, barrier) -> list:
        return list(self._opening.get(barrier, ()))

    def reachable(self, a: SyncRegion, b: SyncRegion) -> bool:
        """True if ``b`` is reachable from ``a`` (``a`` executes before ``b``)."""
        return bool(self._reach[self._i(a)] >> self._i(b) & 1)

    def is_parallel(self, a: SyncRegion, b: SyncRegion) -> bool:
        return b in self.parallel_sets[self.regions[self._i(a)]]

    def ancestors(self, r: SyncRegion) -> frozenset:
        return frozenset(self.regions[i] for i in _bits(self._back[self._i(r)]))

    def descendants(self, r: SyncRegion) -> frozenset:
        return frozenset(self.regions[i] for i in _bits(self._reach[self._i(r)]))

    @property
    def s(self) -> int:
        """Number of synchronization points, INITIAL and FINAL included."""
        keys = {r.upper_barrier for r in self.regions} | {r.lower_barrier for r in self.regions}
        return len(keys)


def build_region_graph(regions, counter: Optional[StepCounter] = None) -> RegionGraph:
    regions = list(regions)
    tick = counter.tick if counter is not None else (lambda n=1: None)
    index = {r: i for i, r in enumerate(regions)}
    closing, opening = {}, {}
    for r in regions:
        tick()
        closing.setdefault(r.lower_barrier, []).append(r)
        opening.setdefault(r.upper_barrier, []).append(r)
    edges = set()
    for barrier, closers in closing.items():
        if barrier == FINAL:
            continue
        for a in closers:
            for b in opening.get(barrier, ()):
                tick()
                edges.add((a, b))
    by_core = {}
    for r in regions:
        by_core.setdefault(r.core, []).append(r)
    for rs in by_core.values():
        rs.sort(key=lambda r: r.ordinal)
        for a, b in zip(rs, rs[1:]):
            tick()
            edges.add((a, b))
    edges = sorted(edges, key=lambda e: (e[0].id, e[1].id))

    n = len(regions)
    succ = [[] for _ in range(n)]
    pred = [[] for _ in range(n)]
    indeg = [0] * n
    for a, b in edges:
        succ[index[a]].append(index[b])
        pred[index[b]].append(index[a])
        indeg[index[b]] += 1
    order = []
    ready = [i for i in range(n) if indeg[i] == 0]
    while ready:
        i = ready.pop()
        tick()
        order.append(i)
        for j in succ[i]:
            tick()
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(j)
    if len(order) != n:
        stuck = [regions[i].label for i in range(n) if indeg[i] > 0]
        raise CycleDetected(f"region graph has a cycle through {stuck}")

    reach = [0] * n
    for i in reversed(order):
        acc = 0
        for j in succ[i]:
            tick()
            acc |= reach[j] | (1 << j)
        reach[i] = acc
    back = [0] * n
    for i in order:
        acc = 0
        for j in pred[i]:
            tick()
            acc |= back[j] | (1 << j)
        back[i] = acc

    full = (1 << n) - 1
    parallel_sets = {}
    for i, r in enumerate(regions):
        members = full & ~(reach[i] | back[i] | (1 << i))
        group = []
        for j in _bits(members):
            tick()
            group.append(regions[j])
        parallel_sets[r] = frozenset(group)
    return RegionGraph(regions, edges, reach, back, parallel_sets)


def parallel_regions(graph: RegionGraph, region: SyncRegion) -> frozenset:
    if region not in graph:
        raise UnknownRegion(f"{region} is not part of this graph")
    return graph.parallel_sets[region]


def analyze(prog: Program) -> RegionGraph:
    return build_region_graph(divide_into_regions(prog))


def to_dot(graph: RegionGraph) -> str:
    lines = ["digraph regions {", "  rankdir=TB;"]
    for r in graph.regions:
        lines.append(f'  "{r.label}" [label="{r.label}\\n[{r.start},{r.end})\\n'
                     f'{r.upper_barrier}->{r.lower_barrier}"];')
    for a, b in graph.edges:
        lines.append(f'  "{a.label}" -> "{b.label}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Synchronization point insertion
# ---------------------------------------------------------------------------

def _split_points(seq, start: int, end: int, limit: int) -> list:
    """Positions q (insert SYNC before seq[q]) cutting [start, end) into chunks
    of at most ``limit`` without landing inside a branch span."""
    blocked = set()
    for p in range(start, end):
        ins = seq[p]
        if ins.opcode is Opcode.BEQZ:
            blocked.update(range(p + 1, p + ins.branch_offset))
    cuts = []
    s = start
    while end - s > limit:
        q = next((q for q in range(s + limit, s, -1) if q not in blocked), None)
        if q is None:
            q = next((q for q in range(s + limit + 1, end) if q not in blocked), None)
            if q is None:
                break
        cuts.append(q)
        s = q
    return cuts


def _rebuild(prog: Program, inserts) -> Program:
    """``inserts[c]`` maps old position -> list of barrier ids placed before it."""
    cores = []
    for c, seq in enumerate(prog.cores):
        ins_before = inserts[c]
        new_pos = {}
        layout = []
        for p, ins in enumerate(seq):
            # a branch to p lands on the first barrier inserted before p
            new_pos[p] = len(layout)
            for b in ins_before.get(p, ()):
                layout.append(("sync", b))
            layout.append(("old", ins))
        out = []
        for npc, (tag, item) in enumerate(layout):
            if tag == "sync":
                out.append(Instruction(c, npc, Opcode.SYNC, barrier_id=item))
                continue
            ins = item
            kwargs = dict(dest=ins.dest, srcs=ins.srcs, imm=ins.imm, barrier_id=ins.barrier_id,
                          branch_offset=ins.branch_offset, check_class=ins.check_class)
            if ins.opcode is Opcode.BEQZ:
                kwargs["branch_offset"] = new_pos[ins.pc + ins.branch_offset] - npc
            out.append(Instruction(c, npc, ins.opcode, **kwargs))
        cores.append(out)
    return Program(cores, prog.shape)


def insert_sync_points(prog: Program, max_len: int) -> Program:
    """Insert fresh barriers so that no region is longer than ``max_len``.

    When every barrier spans all cores the new barriers do too, placed phase
    by phase (shorter cores get empty regions). Otherwise each over-long
    region is split with barriers private to its core. Cuts never fall inside
    a branch span, so a region may stay longer only if one span exceeds
    ``max_len``.
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    regions = divide_into_regions(prog)
    if all(len(r) <= max_len for r in regions):
        return prog
    next_id = max(prog.barrier_ids(), default=0) + 1
    inserts = [dict() for _ in range(prog.core_count)]
    all_ids = prog.barrier_ids()
    full = all(prog.participants(b) == frozenset(range(prog.core_count)) for b in all_ids)
    if full:
        by_core = {}
        for r in regions:
            by_core.setdefault(r.core, []).append(r)
        phases = len(next(iter(by_core.values())))
        for k in range(phases):
            cuts = {c: _split_points(prog[c], by_core[c][k].start, by_core[c][k].end, max_len)
                    for c in by_core}
            m = max(len(v) for v in cuts.values())
            if m == 0:
                continue
            ids = list(range(next_id, next_id + m))
            next_id += m
            for c, cs in cuts.items():
                # padding barriers reuse a legal cut, or the region start
                pad = cs[-1] if cs else by_core[c][k].start
                for j, b in enumerate(ids):
                    pos = cs[j] if j < len(cs) else pad
                    inserts[c].setdefault(pos, []).append(b)
    else:
        for r in regions:
            for q in _split_points(prog[r.core], r.start, r.end, max_len):
                inserts[r.core].setdefault(q, []).append(next_id)
                next_id += 1
    return _rebuild(prog, inserts)

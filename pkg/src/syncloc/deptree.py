"""Instruction dependency trees and race classification.

A node holds one location and the in-scope trace instructions whose write
can reach the point where the parent reads it: the reading core's most
recent writer, plus every in-scope writer on other cores (those are
exactly the racy candidates). Scope is the current region(s) plus their
parallel regions; predecessor regions were already checked, so a branch
whose reaching writer lies there stops.

Nodes are memoized on (location, readers), so a tree is stored as a rooted
DAG: a shared subtree is built and expanded once no matter how many parents
reach it, and a node already on a path is never expanded again.
"""

from __future__ import annotations

import enum
from bisect import bisect_left
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .errors import RootNotWritten
from .isa import Instruction, Kind, Location, global_pc_key


@dataclass(eq=False)
class DepTreeNode:
    location: Optional[Location]      # None only for a BEQZ root
    writers: tuple = ()
    steps: tuple = ()                 # trace positions, aligned with writers
    children: list = field(default_factory=list)
    stopped: bool = False

    def __repr__(self):
        pcs = ",".join(f"c{w.core}@{w.pc}" for w in self.writers)
        return f"<DepTreeNode {self.location} writers=[{pcs}] stopped={self.stopped}>"


def iter_nodes(tree: DepTreeNode):
    """Breadth-first over distinct nodes."""
    seen = {id(tree)}
    queue = deque([tree])
    while queue:
        node = queue.popleft()
        yield node
        for ch in node.children:
            if id(ch) not in seen:
                seen.add(id(ch))
                queue.append(ch)


def tree_instructions(tree: DepTreeNode) -> set:
    out = set()
    for node in iter_nodes(tree):
        out.update(node.writers)
    return out


def format_tree(tree: DepTreeNode) -> str:
    """Indented text form: location, writer sites, one node per line."""
    lines = []
    printed = set()
    stack = [(tree, 0)]
    while stack:
        node, depth = stack.pop()
        label = str(node.location) if node.location is not None else "(branch)"
        pcs = " ".join(f"c{w.core}@{w.pc}" for w in node.writers) or "-"
        if id(node) in printed:
            lines.append(f"{'  ' * depth}{label}: {pcs} (shared, see above)")
            continue
        printed.add(id(node))
        lines.append(f"{'  ' * depth}{label}: {pcs}{' [stopped]' if node.stopped else ''}")
        stack.extend((ch, depth + 1) for ch in reversed(node.children))
    return "\n".join(lines) + "\n"


class TraceIndex:
    """Per-(location, core) positions of writers in a trace prefix."""

    def __init__(self, entries):
        self.entries = entries
        self.end = 0
        self.by_loc_core = {}
        self.cores_of = {}
        self.pos_of = {}

    def extend(self, end: int):
        entries = self.entries
        by = self.by_loc_core
        cores_of = self.cores_of
        for pos in range(self.end, end):
            e = entries[pos]
            self.pos_of[(e.core, e.pc)] = pos
            for loc in e.instr.writes:
                key = (loc, e.core)
                lst = by.get(key)
                if lst is None:
                    by[key] = [pos]
                    cores_of.setdefault(loc, set()).add(e.core)
                else:
                    lst.append(pos)
        self.end = max(self.end, end)
        return self


def scope_for(graph, current) -> frozenset:
    """Current region(s) plus parallel regions, minus anything that precedes a current region."""
    currents = _as_set(current)
    scope = set(currents)
    for c in currents:
        scope |= graph.parallel_sets[c]
    for c in currents:
        scope -= graph.ancestors(c)
    return frozenset(scope)


def _as_set(current) -> frozenset:
    if current is None:
        return frozenset()
    if hasattr(current, "lower_barrier"):
        return frozenset((current,))
    return frozenset(current)


class TreeBuilder:
    """Builds trees against one trace prefix and one scope; nodes are shared
    between trees built by the same builder."""

    def __init__(self, trace, graph, current, end: Optional[int] = None, index=None):
        entries = trace.entries if hasattr(trace, "entries") else trace
        self.entries = entries
        self.graph = graph
        self.currents = _as_set(current)
        self.scope = scope_for(graph, self.currents)
        self.end = len(entries) if end is None else end
        self.index = index if index is not None else TraceIndex(entries)
        if self.index.end < self.end:
            self.index.extend(self.end)
        self.lookup = graph.region_lookup()
        self._nodes = {}
        self._expanded = set()

    def region_at(self, pos: int):
        e = self.entries[pos]
        return self.lookup.get((e.core, e.pc))

    def in_scope(self, pos: int) -> bool:
        return pos < self.end and self.region_at(pos) in self.scope

    def _positions(self, loc, core):
        lst = self.index.by_loc_core.get((loc, core), ())
        if lst and lst[-1] >= self.end:
            return lst[:bisect_left(lst, self.end)]
        return lst

    def _root_writers(self, loc):
        steps, stopped, seen_any = [], False, False
        for core in sorted(self.index.cores_of.get(loc, ())):
            lst = self._positions(loc, core)
            if not lst:
                continue
            seen_any = True
            last = lst[-1]
            if self.in_scope(last):
                steps.append(last)
            else:
                stopped = True
        return steps, stopped, seen_any

    def _child_writers(self, loc, readers):
        found = set()
        stopped = False
        other_cores = self.index.cores_of.get(loc, ())
        for rpos in readers:
            rcore = self.entries[rpos].core
            lst = self._positions(loc, rcore)
            i = bisect_left(lst, rpos)
            if i == 0:
                stopped = True          # value comes from the initial state
            elif self.in_scope(lst[i - 1]):
                found.add(lst[i - 1])
            else:
                stopped = True
            if loc.kind is Kind.SHARED_MEM:
                for core in other_cores:
                    if core == rcore:
                        continue
                    for pos in self._positions(loc, core):
                        if self.in_scope(pos):
                            found.add(pos)
        return sorted(found), stopped

    def _make(self, location, steps, stopped):
        steps = tuple(sorted(steps))
        writers = tuple(self.entries[p].instr for p in steps)
        return DepTreeNode(location, writers, steps, [], stopped and not steps)

    def build(self, root) -> DepTreeNode:
        """``root`` is a Location, an error-reported Instruction, or a trace position."""
        if isinstance(root, Location):
            key = ("root", root)
            if key in self._nodes:
                return self._nodes[key]
            steps, stopped, seen_any = self._root_writers(root)
            if not seen_any:
                raise RootNotWritten(f"{root} was never written before this barrier")
            node = self._make(root, steps, stopped)
        else:
            pos = root if isinstance(root, int) else self.index.pos_of.get((root.core, root.pc))
            if pos is None or pos >= self.end:
                raise RootNotWritten(f"{root} did not retire in this trace prefix")
            key = ("instr", pos)
            if key in self._nodes:
                return self._nodes[key]
            ins = self.entries[pos].instr
            node = DepTreeNode(ins.dest, (ins,), (pos,), [], False)
        self._nodes[key] = node
        self._expand(node)
        return node

    def _expand(self, root: DepTreeNode):
        expanded = self._expanded
        if id(root) in expanded:
            return
        expanded.add(id(root))
        work = [root]
        while work:
            node = work.pop()
            operands = {}
            for ins, pos in zip(node.writers, node.steps):
                for loc in ins.reads:
                    operands.setdefault(loc, []).append(pos)
            for loc in sorted(operands):
                readers = frozenset(operands[loc])
                key = (loc, readers)
                child = self._nodes.get(key)
                if child is None:
                    steps, stopped = self._child_writers(loc, readers)
                    child = self._make(loc, steps, stopped)
                    self._nodes[key] = child
                node.children.append(child)
                if id(child) not in expanded:
                    expanded.add(id(child))
                    work.append(child)


def build_tree(root, trace, graph, current, end: Optional[int] = None) -> DepTreeNode:
    """Backward data-dependence tree from a differing location or an
    error-reported instruction, scoped to ``current`` and its parallel regions."""
    return TreeBuilder(trace, graph, current, end).build(root)


# ---------------------------------------------------------------------------
# Races
# ---------------------------------------------------------------------------

class RaceKind(str, enum.Enum):
    WAW = "WAW"
    RAW = "RAW"
    WAR = "WAR"


@dataclass(frozen=True)
class RaceFinding:
    kind: RaceKind
    first: Instruction
    second: Instruction
    location: Location
    regions: tuple

    def pair(self) -> frozenset:
        return frozenset((self.first.key, self.second.key))

    def to_json(self):
        return {"kind": self.kind.value, "first": self.first.to_json(),
                "second": self.second.to_json(), "location": self.location.to_json(),
                "regions": [r.label for r in self.regions]}


def detect_races(tree: DepTreeNode, graph) -> list:
    """WAW inside a node, RAW/WAR between a parent writer and the child
    writers it reads from, whenever the two regions are parallel."""
    lookup = graph.region_lookup()
    found = {}

    def region(ins):
        return lookup.get((ins.core, ins.pc))

    def add(kind, a, b, loc):
        ra, rb = region(a), region(b)
        finding = RaceFinding(kind, a, b, loc, (ra, rb))
        found.setdefault((kind, a.key, b.key, loc), finding)

    for node in iter_nodes(tree):
        ws = list(zip(node.steps, node.writers))
        for i in range(len(ws)):
            for j in range(i + 1, len(ws)):
                (pa, a), (pb, b) = ws[i], ws[j]
                ra, rb = region(a), region(b)
                if ra != rb and graph.is_parallel(ra, rb):
                    first, second = (a, b) if pa < pb else (b, a)
                    add(RaceKind.WAW, first, second, node.location)
        for child in node.children:
            for pp, wp in ws:
                if child.location not in wp.reads:
                    continue
                rp = region(wp)
                for pc_, wc in zip(child.steps, child.writers):
                    rc = region(wc)
                    if rp != rc and graph.is_parallel(rp, rc):
                        if pc_ < pp:
                            add(RaceKind.RAW, wc, wp, child.location)
                        else:
                            add(RaceKind.WAR, wp, wc, child.location)
    return sorted(found.values(), key=lambda f: (global_pc_key(f.first),
                                                 global_pc_key(f.second), f.kind.value))


def all_writers_parallel(tree: DepTreeNode, current, graph) -> bool:
    """True iff the root has writers and every one lies in a region parallel
    to the current region(s); false as soon as one is in a current region."""
    currents = _as_set(current)
    if not tree.writers:
        return False
    lookup = graph.region_lookup()
    for w in tree.writers:
        r = lookup.get((w.core, w.pc))
        if r in currents or not any(graph.is_parallel(r, c) for c in currents):
            return False
    return True

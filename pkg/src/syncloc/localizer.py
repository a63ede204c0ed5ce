"""The localization pipeline.

1. divide the program into synchronization regions and build the region graph;
2. run the reference model once and commit a model snapshot per barrier;
3. run the DUT barrier to barrier, committing and diffing machine snapshots;
   on a mismatch build dependency trees, report a race if one shows up, let
   benign divergence from still-running parallel regions pass, otherwise
4. bisect the offending region by re-simulation from its opening snapshot.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .deptree import (DepTreeNode, RaceFinding, TraceIndex, TreeBuilder, all_writers_parallel,
                      detect_races, iter_nodes, tree_instructions)
from .errors import MissingModelSnapshot, NoCurrentRegionTree, RootNotWritten
from .isa import FINAL, CheckClass, Instruction, Location, Opcode, Program, global_pc_key
from .machine import NO_FAULT, FaultSpec, SchedulerConfig, Simulator
from .regions import RegionGraph, SyncRegion, analyze
from .store import Branch, Snapshot, SnapshotStore, StoreRef, diff_snapshots

log = logging.getLogger(__name__)


class VerdictKind(str, enum.Enum):
    CLEAN = "CLEAN"
    DATA_RACE = "DATA_RACE"
    ERROR_TRIGGERED = "ERROR_TRIGGERED"
    BENIGN_DIVERGENCE = "BENIGN_DIVERGENCE"


@dataclass
class CheckRecord:
    """One step-4 re-simulation with ``instr`` as the finish instruction."""
    instr: Instruction
    dut_value: object
    ref_value: object
    failed: bool
    executed: int
    branch_pc: Optional[int] = None    # first BEQZ whose decision differed, if any


@dataclass
class Verdict:
    kind: VerdictKind
    race: Optional[RaceFinding] = None
    culprit: Optional[Instruction] = None
    region: Optional[SyncRegion] = None
    executed_instruction_count: int = 0
    barrier: object = None
    control_suspect: bool = False
    checks: list = field(default_factory=list)
    benign: list = field(default_factory=list)
    narrative: list = field(default_factory=list)

    def to_json(self):
        out = {"kind": self.kind.value,
               "culprit": ({"core": self.culprit.core, "pc": self.culprit.pc,
                            "text": self.culprit.to_json()["text"]}
                           if self.culprit is not None else None),
               "race": None,
               "region": self.region.label if self.region is not None else None,
               "barrier": self.barrier,
               "executed_instructions": self.executed_instruction_count,
               "control_suspect": self.control_suspect,
               "narrative": list(self.narrative)}
        if self.race is not None:
            r = self.race
            out["race"] = {"kind": r.kind.value,
                           "first": {"core": r.first.core, "pc": r.first.pc},
                           "second": {"core": r.second.core, "pc": r.second.pc},
                           "location": str(r.location),
                           "regions": [x.label for x in r.regions]}
        return out


@dataclass
class SuspectTree:
    tree: DepTreeNode
    region: SyncRegion
    origin: str
    reference_only: bool = False   # no DUT writer in scope; only the reference wrote it


@dataclass
class Escalation:
    """Step 3 found a mismatch attributable to the current region(s)."""
    barrier: object
    suspects: list
    builder: TreeBuilder
    executed: int
    narrative: list
    benign: list


@dataclass
class ModelRun:
    refs: list
    snapshots: dict
    trace: object
    values: dict
    positions: dict


def _run_model(prog: Program, store: SnapshotStore) -> ModelRun:
    sim = Simulator(prog, NO_FAULT, None)
    refs, snaps, positions = [], {}, {}
    for rel in sim.events():
        snap = Snapshot.from_state(sim.state)
        refs.append(store.commit(Branch.MODEL, rel.barrier, snap))
        snaps[rel.barrier] = snap
        positions[rel.barrier] = rel.position
    values = {(e.core, e.pc): e.writes for e in sim.trace.entries}
    return ModelRun(refs, snaps, sim.trace, values, positions)


def pregenerate_model_snapshots(prog: Program, store: SnapshotStore) -> list:
    """Run the reference model once; one MODEL commit per synchronization
    point, INITIAL and FINAL included, in release order."""
    return _run_model(prog, store).refs


def _model_snapshot(store, model: ModelRun, key) -> Snapshot:
    ref = store.latest(Branch.MODEL, key)
    snap = model.snapshots.get(key)
    if ref is None or snap is None:
        raise MissingModelSnapshot(f"no model snapshot for barrier {key}")
    if store.resolve(ref) != snap.root_hash:
        return store.checkout(ref)
    return snap


def run_step3(prog: Program, fault: FaultSpec, sched: SchedulerConfig, store: SnapshotStore,
              graph: Optional[RegionGraph] = None, model: Optional[ModelRun] = None):
    """Run the DUT barrier to barrier against the model snapshots.

    Returns a :class:`Verdict` (CLEAN, DATA_RACE or BENIGN_DIVERGENCE) or an
    :class:`Escalation` for step 4.
    """
    graph = graph or analyze(prog)
    model = model or _run_model(prog, store)
    sim = Simulator(prog, fault, sched)
    entries = sim.trace.entries
    lookup = graph.region_lookup()
    index = TraceIndex(entries)
    ref_index = TraceIndex(model.trace.entries)
    narrative, benign = [], []
    pending = []
    checked = 0

    for rel in sim.events():
        key = rel.barrier
        snap = Snapshot.from_state(sim.state)
        store.commit(Branch.MACHINE, key, snap)
        model_snap = _model_snapshot(store, model, key)

        # scoreboard checks on immediately checked instructions retired since the last barrier
        for pos in range(checked, rel.position):
            e = entries[pos]
            if e.instr.check_class is CheckClass.IMMEDIATE and \
                    model.values.get((e.core, e.pc)) != e.writes:
                pending.append(pos)
        checked = rel.position

        diff = diff_snapshots(snap, model_snap)
        currents = graph.closing(key)
        current_set = set(currents)
        reported = [p for p in pending if lookup.get((entries[p].core, entries[p].pc)) in current_set]
        pending = [p for p in pending if p not in reported]
        if diff.empty and not reported:
            if key == FINAL:
                narrative.append(f"FINAL: snapshots equal after {sim.retired} instructions")
                kind = VerdictKind.BENIGN_DIVERGENCE if benign else VerdictKind.CLEAN
                return Verdict(kind, executed_instruction_count=sim.retired, barrier=key,
                               benign=benign, narrative=narrative)
            continue

        narrative.append(f"barrier {key}: {len(diff)} differing interval(s), "
                         f"{len(reported)} error-reported instruction(s)")
        index.extend(rel.position)
        builder = TreeBuilder(sim.trace, graph, currents, end=rel.position, index=index)
        ref_builder = None
        trees = []          # (origin, dut tree, reference tree or None)
        for pos in sorted(reported, key=lambda p: global_pc_key(entries[p].instr)):
            trees.append((f"error-reported {entries[pos].instr}", builder.build(pos), None))
        for loc in diff.locations():
            try:
                tree = builder.build(loc)
            except RootNotWritten:
                tree = DepTreeNode(loc, stopped=True)
            rtree = None
            if not tree.writers:
                if ref_builder is None:
                    end = model.positions.get(key, len(model.trace.entries))
                    ref_builder = TreeBuilder(model.trace, graph, currents, end=end, index=ref_index)
                try:
                    rtree = ref_builder.build(loc)
                except RootNotWritten:
                    rtree = None
                if rtree is None or not rtree.writers:
                    raise RootNotWritten(f"{loc} differs at barrier {key} but no in-scope "
                                         "instruction wrote it in either execution")
            trees.append((f"differing {loc}", tree, rtree))

        races = []
        for _, tree, _ in trees:
            races.extend(detect_races(tree, graph))
        if races:
            race = min(races, key=lambda f: (global_pc_key(f.first), global_pc_key(f.second)))
            narrative.append(f"barrier {key}: {race.kind.value} race on {race.location} between "
                             f"{race.first} and {race.second}")
            return Verdict(VerdictKind.DATA_RACE, race=race, region=race.regions[0],
                           executed_instruction_count=sim.retired, barrier=key,
                           benign=benign, narrative=narrative)

        suspects = []
        for origin, tree, rtree in trees:
            probe = rtree if rtree is not None else tree
            if all_writers_parallel(probe, currents, graph):
                benign.append((key, probe.location))
                continue
            region = _current_region(probe, current_set, lookup)
            if region is None:
                raise NoCurrentRegionTree(f"{origin} at barrier {key} has writers outside the "
                                          "current and parallel regions")
            suspects.append(SuspectTree(tree, region, origin, reference_only=rtree is not None))
        if not suspects:
            narrative.append(f"barrier {key}: all differences come from parallel regions; continuing")
            if key == FINAL:
                return Verdict(VerdictKind.BENIGN_DIVERGENCE,
                               executed_instruction_count=sim.retired, barrier=key,
                               benign=benign, narrative=narrative)
            continue
        narrative.append(f"barrier {key}: escalating {len(suspects)} tree(s) to bisection")
        return Escalation(key, suspects, builder, sim.retired, narrative, benign)
    raise AssertionError("DUT run ended without a FINAL release")


def _current_region(tree, current_set, lookup):
    regions = [lookup.get((w.core, w.pc)) for w in sorted(tree.writers, key=global_pc_key)]
    for r in regions:
        if r in current_set:
            return r
    return None


class _Bisector:
    def __init__(self, prog, fault, sched, region, snap, builder):
        self.prog = prog
        self.fault = fault
        self.sched = sched
        self.region = region
        self.snap = snap
        self.builder = builder
        self.records = {}
        self.executed = 0
        self.control_seen = False

    def _resume(self):
        return (self.snap, self.region.upper_barrier, (self.region.core,))

    def check(self, ins: Instruction) -> CheckRecord:
        rec = self.records.get(ins.key)
        if rec is not None:
            return rec
        until = ins.key
        dut = Simulator(self.prog, self.fault, self.sched, resume=self._resume(), until=until)
        dut.run()
        ref = Simulator(self.prog, NO_FAULT, None, resume=self._resume(), until=until)
        ref.run()
        self.executed += dut.retired
        dv = _observed(dut, ins)
        rv = _observed(ref, ins)
        failed = not (dut.finish_retired and ref.finish_retired) or dv != rv
        branch_pc = _first_branch_divergence(dut.branch_log(ins.core), ref.branch_log(ins.core))
        rec = CheckRecord(ins, dv, rv, failed, dut.retired, branch_pc)
        self.records[ins.key] = rec
        return rec

    def probe_control(self) -> Optional[int]:
        """Run the whole region on both sides and return the first diverging branch pc."""
        dut = Simulator(self.prog, self.fault, self.sched, resume=self._resume())
        dut.run()
        ref = Simulator(self.prog, NO_FAULT, None, resume=self._resume())
        ref.run()
        self.executed += dut.retired
        return _first_branch_divergence(dut.branch_log(self.region.core),
                                        ref.branch_log(self.region.core))

    def search(self, roots) -> list:
        """Top-down breadth-first; children are visited only below failing nodes."""
        failing = []
        queue = deque(roots)
        visited = set()
        while queue:
            node = queue.popleft()
            if id(node) in visited:
                continue
            visited.add(id(node))
            node_failed = False
            for w in sorted(node.writers, key=global_pc_key):
                if (w.core, w.pc) not in self.region_keys:
                    continue
                rec = self.check(w)
                if not rec.failed:
                    continue
                node_failed = True
                if w not in failing:
                    failing.append(w)
                if rec.branch_pc is not None:
                    self.control_seen = True
                    queue.append(self._branch_tree(rec.branch_pc))
            if node_failed:
                queue.extend(node.children)
        return failing

    def _branch_tree(self, pc: int) -> DepTreeNode:
        ins = self.prog[self.region.core][pc]
        if self.builder is not None:
            try:
                return self.builder.build(ins)
            except RootNotWritten:
                pass
        return DepTreeNode(None, (ins,), (-1,))

    @property
    def region_keys(self):
        keys = getattr(self, "_region_keys", None)
        if keys is None:
            keys = self._region_keys = {(self.region.core, pc) for pc in self.region.pc_range}
        return keys


def _observed(sim: Simulator, ins: Instruction):
    if not sim.finish_retired:
        return None
    if ins.opcode is Opcode.BEQZ:
        return sim.branch_log(ins.core)[-1][1]
    return sim.state.read(ins.dest)


def _first_branch_divergence(a, b) -> Optional[int]:
    for (pa, ta), (pb, tb) in zip(a, b):
        if pa != pb or ta != tb:
            return min(pa, pb)
    return None


def bisect_region(trees, region: SyncRegion, lower_ref: StoreRef, prog: Program,
                  fault: FaultSpec, sched: SchedulerConfig, store: SnapshotStore,
                  builder: Optional[TreeBuilder] = None) -> Verdict:
    """Locate the error-triggered instruction inside ``region``.

    ``lower_ref`` is the machine snapshot at the barrier opening the region.
    Every candidate writer is made the finish instruction of a resumed DUT
    run and a resumed reference run; nodes whose writers all match are
    pruned. The culprit is the smallest-pc failing candidate. A differing
    branch decision seen along the way pulls the branch's own tree in.
    """
    snap = store.checkout(lower_ref)
    bis = _Bisector(prog, fault, sched, region, snap, builder)
    roots = []
    for t in trees:
        tree = t.tree if isinstance(t, SuspectTree) else t
        if isinstance(t, SuspectTree) and t.reference_only:
            continue
        if all((w.core, w.pc) in bis.region_keys for w in tree_instructions(tree)):
            roots.append(tree)
    failing = bis.search(roots) if roots else []
    if not failing:
        pc = bis.probe_control()
        if pc is not None:
            bis.control_seen = True
            failing = bis.search([bis._branch_tree(pc)])
    if not failing:
        raise NoCurrentRegionTree(f"every candidate in {region.label} re-executes correctly")
    culprit = min(failing, key=global_pc_key)
    verdict = Verdict(VerdictKind.ERROR_TRIGGERED, culprit=culprit, region=region,
                      executed_instruction_count=bis.executed,
                      control_suspect=bis.control_seen,
                      checks=sorted(bis.records.values(), key=lambda r: global_pc_key(r.instr)))
    verdict.narrative.append(
        f"bisection of {region.label}: {len(bis.records)} candidate(s) re-simulated, "
        f"{len(failing)} failing, culprit {culprit}")
    return verdict


def locate(prog: Program, fault: FaultSpec = NO_FAULT, sched: SchedulerConfig = SchedulerConfig(),
           store: Optional[SnapshotStore] = None) -> Verdict:
    """Full pipeline: regions, graph, model snapshots, step 3, step 4 if escalated."""
    store = store if store is not None else SnapshotStore()
    graph = analyze(prog)
    model = _run_model(prog, store)
    outcome = run_step3(prog, fault, sched, store, graph, model)
    if isinstance(outcome, Verdict):
        return outcome
    groups = {}
    for s in outcome.suspects:
        groups.setdefault(s.region, []).append(s)
    executed = outcome.executed
    last_error = None
    for region, suspects in groups.items():
        lower_ref = store.latest(Branch.MACHINE, region.upper_barrier)
        try:
            verdict = bisect_region(suspects, region, lower_ref, prog, fault, sched, store,
                                    builder=outcome.builder)
        except NoCurrentRegionTree as exc:
            last_error = exc
            continue
        verdict.executed_instruction_count += executed
        verdict.barrier = outcome.barrier
        verdict.benign = outcome.benign
        verdict.narrative = outcome.narrative + verdict.narrative
        return verdict
    raise last_error or NoCurrentRegionTree("escalation produced no bisectable tree")

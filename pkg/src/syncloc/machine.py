"""Multicore executors: the fault-injecting DUT and the golden reference model.

Both share the ISA semantics in :mod:`syncloc.isa`; they differ only in the
schedule (seeded round-robin vs. canonical lowest-core-first) and in fault
injection. A run can start from a committed snapshot at a barrier and stop
right after a chosen *finish* instruction, which is what bisection uses.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from .errors import Deadlock, FaultTargetMismatch, NotAtBarrier
from .isa import (DEST_OPS, FINAL, INITIAL, MachineState, Opcode, Program, StepResult,
                  apply_step, evaluate, wrap)
from .store import Snapshot


class FaultKind(str, enum.Enum):
    NONE = "NONE"
    WRONG_RESULT = "WRONG_RESULT"
    DROPPED_STORE = "DROPPED_STORE"
    BRANCH_FLIP = "BRANCH_FLIP"


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind = FaultKind.NONE
    core: int = 0
    pc: int = 0
    delta: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", FaultKind(self.kind))

    @property
    def site(self):
        return (self.core, self.pc)

    def validate(self, prog: Program) -> None:
        if self.kind is FaultKind.NONE:
            return
        if not 0 <= self.core < prog.core_count or not 0 <= self.pc < len(prog[self.core]):
            raise FaultTargetMismatch(f"no instruction at core {self.core} pc {self.pc}")
        op = prog[self.core][self.pc].opcode
        wanted = {FaultKind.WRONG_RESULT: DEST_OPS,
                  FaultKind.DROPPED_STORE: {Opcode.ST},
                  FaultKind.BRANCH_FLIP: {Opcode.BEQZ}}[self.kind]
        if op not in wanted:
            raise FaultTargetMismatch(f"{self.kind.value} cannot target {op.value}")
        if self.kind is FaultKind.WRONG_RESULT and wrap(self.delta) == 0:
            raise FaultTargetMismatch("WRONG_RESULT needs a nonzero delta")

    def to_json(self):
        return {"kind": self.kind.value, "core": self.core, "pc": self.pc, "delta": self.delta}


NO_FAULT = FaultSpec()


@dataclass(frozen=True)
class SchedulerConfig:
    seed: int = 0
    quantum_max: int = 8

    def __post_init__(self):
        if self.quantum_max < 1:
            raise ValueError("quantum_max must be at least 1")


class TraceEntry(NamedTuple):
    step: int
    core: int
    pc: int
    instr: object
    writes: tuple
    taken: bool

    @property
    def opcode(self):
        return self.instr.opcode


class Release(NamedTuple):
    position: int      # number of trace entries retired before the release
    barrier: object    # barrier id, or INITIAL / FINAL
    cores: tuple


@dataclass
class ExecTrace:
    entries: list = field(default_factory=list)
    releases: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def release_position(self, barrier) -> Optional[int]:
        for rel in self.releases:
            if rel.barrier == barrier:
                return rel.position
        return None

    def writes_by_instr(self) -> dict:
        return {(e.core, e.pc): e.writes for e in self.entries}


class Simulator:
    """One executor run.

    ``sched=None`` selects the reference model's canonical schedule: the
    lowest-numbered runnable core runs until it blocks at a barrier or halts.
    Otherwise ready cores are visited round-robin with quanta drawn uniformly
    from ``[1, quantum_max]`` by a generator seeded from ``sched.seed``.

    ``resume=(snapshot, barrier, cores)`` restores memories and registers from
    the snapshot and runs only the regions opened by ``barrier`` on ``cores``
    (default: every participant); each resumed core stops at its region's
    closing synchronization point without executing it. ``until=(core, pc)``
    stops that core right after the instruction retires.
    """

    def __init__(self, prog: Program, fault: FaultSpec = NO_FAULT,
                 sched: Optional[SchedulerConfig] = None, resume=None, until=None):
        fault.validate(prog)
        self.prog = prog
        self.fault = fault
        self.sched = sched
        self.trace = ExecTrace()
        self.until = tuple(until) if until is not None else None
        self.finish_retired = False
        self.resumed = resume is not None
        n = prog.core_count
        self.stop_pc = [None] * n
        self.active = [True] * n
        if resume is None:
            self.state = MachineState(n, prog.shape)
        else:
            snap, barrier, cores = (tuple(resume) + (None,))[:3]
            self.state = snap.to_state()
            if snap.core_count != n:
                raise NotAtBarrier("snapshot core count does not match the program")
            participants = prog.participants(barrier)
            cores = participants if cores is None else frozenset(cores)
            if not cores <= participants:
                raise NotAtBarrier(f"cores {sorted(cores - participants)} do not meet "
                                   f"barrier {barrier}")
            for c in range(n):
                self.active[c] = c in cores
                start = 0 if barrier == INITIAL else prog.sync_pc(c, barrier)
                if barrier != INITIAL and start is not None:
                    start += 1
                if start is not None:
                    self.state.pc[c] = start
                    self.stop_pc[c] = _region_end(prog[c], start)
        if self.until is not None:
            core, pc = self.until
            if not self.active[core]:
                raise NotAtBarrier(f"finish instruction core {core} is not resumed")
            if pc < self.state.pc[core] or (self.stop_pc[core] is not None
                                             and pc >= self.stop_pc[core]):
                raise NotAtBarrier(f"finish instruction c{core}@{pc} is outside the resumed region")
        self.stopped = [not a for a in self.active]
        self._rng = random.Random(sched.seed) if sched is not None else None
        self._ptr = 0
        self._branch_log = [[] for _ in range(n)]

    # -- queries ------------------------------------------------------------

    @property
    def retired(self) -> int:
        return len(self.trace.entries)

    def branch_log(self, core: int) -> list:
        """(pc, taken) for every BEQZ the core retired, in order."""
        return self._branch_log[core]

    def _runnable(self, c: int) -> bool:
        st = self.state
        return not (self.stopped[c] or st.halted[c] or st.waiting[c] is not None)

    # -- execution ----------------------------------------------------------

    def _step(self, c: int) -> None:
        st = self.state
        pc = st.pc[c]
        stop = self.stop_pc[c]
        if stop is not None and pc >= stop:
            self.stopped[c] = True
            return
        ins = self.prog.cores[c][pc]
        result = evaluate(st, ins)
        f = self.fault
        if f.kind is not FaultKind.NONE and f.core == c and f.pc == pc:
            if f.kind is FaultKind.WRONG_RESULT:
                result = StepResult([(loc, wrap(v + f.delta)) for loc, v in result.writes],
                                    result.branch_taken)
            elif f.kind is FaultKind.DROPPED_STORE:
                result = StepResult([], result.branch_taken)
            elif f.kind is FaultKind.BRANCH_FLIP:
                result = StepResult(result.writes, not result.branch_taken)
        apply_step(st, ins, result)
        if ins.opcode is Opcode.BEQZ:
            self._branch_log[c].append((pc, result.branch_taken))
        self.trace.entries.append(TraceEntry(len(self.trace.entries), c, pc, ins,
                                             tuple(result.writes), result.branch_taken))
        if self.until is not None and self.until == (c, pc):
            self.finish_retired = True
            self.stopped[c] = True

    def _releasable(self, barrier) -> bool:
        st = self.state
        return all(st.waiting[p] == barrier for p in self.prog.participants(barrier))

    def _release(self, barrier) -> Release:
        cores = tuple(sorted(self.prog.participants(barrier)))
        rel = Release(len(self.trace.entries), barrier, cores)
        self.trace.releases.append(rel)
        return rel

    def _pick(self) -> Optional[int]:
        n = self.prog.core_count
        if self._rng is None:
            for c in range(n):
                if self._runnable(c):
                    return c
            return None
        for i in range(n):
            c = (self._ptr + i) % n
            if self._runnable(c):
                return c
        return None

    def events(self):
        """Run, yielding a :class:`Release` each time a barrier opens.

        The yield happens while the participants are still parked, so
        ``self.state`` is the barrier state; a final release with key FINAL is
        yielded when every core of a full run has halted.
        """
        st = self.state
        if not self.resumed and self.until is None:
            yield self._release(INITIAL)
        while True:
            c = self._pick()
            if c is None:
                if all(st.halted[p] or self.stopped[p] for p in range(self.prog.core_count)):
                    if not self.resumed and self.until is None:
                        yield self._release(FINAL)
                    return
                if self.until is not None and self.finish_retired:
                    return
                blocked = {p: st.waiting[p] for p in range(self.prog.core_count)
                           if st.waiting[p] is not None}
                raise Deadlock(f"no core can progress; waiting cores: {blocked}")
            quantum = (1 << 62) if self._rng is None else self._rng.randint(1, self.sched.quantum_max)
            for _ in range(quantum):
                if not self._runnable(c):
                    break
                self._step(c)
                b = st.waiting[c]
                if b is not None:
                    if self._releasable(b):
                        yield self._release(b)
                        for p in self.prog.participants(b):
                            st.waiting[p] = None
                    break
            self._ptr = c + 1

    def run(self):
        for _ in self.events():
            pass
        return self.trace, self.state


def _region_end(seq, start: int) -> int:
    pc = start
    while seq[pc].opcode not in (Opcode.SYNC, Opcode.HALT):
        pc += 1
    return pc


def run_dut(prog: Program, fault: FaultSpec = NO_FAULT, sched: SchedulerConfig = SchedulerConfig(),
            from_=None, until=None):
    """Run the fault-injecting DUT; returns ``(ExecTrace, final MachineState)``."""
    return Simulator(prog, fault, sched, resume=from_, until=until).run()


def run_reference(prog: Program, from_=None, until=None):
    """Run the golden reference model under the canonical schedule."""
    return Simulator(prog, NO_FAULT, None, resume=from_, until=until).run()


def snapshot_at_barrier(state: MachineState, barrier=None, participants=None) -> Snapshot:
    """Capture ``state`` as a snapshot.

    Without ``barrier`` every core must be halted or parked at some barrier.
    With ``barrier`` and ``participants`` only those cores must be parked there.
    """
    if barrier is None:
        for c in range(state.core_count):
            if not state.halted[c] and state.waiting[c] is None:
                raise NotAtBarrier(f"core {c} is neither halted nor parked at a barrier")
    elif barrier not in (INITIAL, FINAL):
        for c in participants or ():
            if state.waiting[c] != barrier:
                raise NotAtBarrier(f"core {c} is not parked at barrier {barrier}")
    elif barrier == FINAL and not all(state.halted):
        raise NotAtBarrier("final snapshot requires every core halted")
    return Snapshot.from_state(state)

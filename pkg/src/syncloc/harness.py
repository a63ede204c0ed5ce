"""Program generation, fault placement and the executed-instruction sweep."""

from __future__ import annotations

import json
import random
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

from .errors import NoObservableTarget, SynclocError
from .isa import (DEST_OPS, Instruction, MachineShape, Opcode, Program, priv, reg, shared)
from .localizer import VerdictKind, locate
from .machine import FaultKind, FaultSpec, SchedulerConfig, Simulator
from .regions import analyze
from .store import SnapshotStore

PUBLISHED_MEAN_5_CORES_500 = 1340
PUBLISHED_MEAN_30_CORES_1500 = 22923

RACE_SLOTS = 8          # top shared words, never touched by generated bodies
SCRATCH_REG = 15        # reserved for injected race code
SCRATCH_PRIV = 255
_ALU = (Opcode.ADD, Opcode.MUL, Opcode.XOR)


class _Op(NamedTuple):
    opcode: Opcode
    dest: object = None
    srcs: tuple = ()
    imm: Optional[int] = None
    offset: Optional[int] = None
    tag: Optional[str] = None


def _bank(core: int, parity: int, size: int) -> range:
    base = (2 * core + parity) * size
    return range(base, base + size)


def _bank_size(cores: int, shape: MachineShape) -> int:
    size = min(32, (shape.shared_words - RACE_SLOTS) // (2 * cores))
    if size < 1:
        raise ValueError(f"{cores} cores do not fit in {shape.shared_words} shared words")
    return size


def _split(total: int, parts: int, rng: random.Random) -> list:
    """``total`` split into ``parts`` jittered non-negative lengths."""
    weights = [rng.uniform(0.6, 1.4) for _ in range(parts)]
    scale = total / sum(weights)
    raw = [w * scale for w in weights]
    out = [int(x) for x in raw]
    rest = total - sum(out)
    for i in sorted(range(parts), key=lambda i: raw[i] - out[i], reverse=True)[:rest]:
        out[i] += 1
    return out


class _CoreGen:
    """Random straight-line code for one core, one phase at a time."""

    def __init__(self, core, cores, bank_size, rng, shape):
        self.core = core
        self.cores = cores
        self.bank_size = bank_size
        self.rng = rng
        self.n_regs = min(shape.n_regs, SCRATCH_REG)
        self.n_priv = min(shape.priv_words, SCRATCH_PRIV)
        self.priv_written = []

    def _reg(self):
        return reg(self.core, self.rng.randrange(self.n_regs))

    def _simple(self, phase: int) -> _Op:
        rng, c = self.rng, self.core
        roll = rng.random()
        if roll < 0.15:
            return _Op(Opcode.LI, self._reg(), imm=rng.randint(-1000, 1000))
        if roll < 0.50:
            return _Op(rng.choice(_ALU), self._reg(), (self._reg(), self._reg()))
        if roll < 0.62:
            if self.priv_written:
                src = priv(c, rng.choice(self.priv_written))
            else:
                src = priv(c, rng.randrange(self.n_priv))
            return _Op(Opcode.LD, self._reg(), (src,))
        if roll < 0.75:
            # written by another core in the previous phase, or by this core
            other = rng.randrange(self.cores)
            parity = (phase - 1) % 2 if other != c else rng.randrange(2)
            word = rng.choice(_bank(other, parity, self.bank_size))
            return _Op(Opcode.LD, self._reg(), (shared(word),))
        if roll < 0.87:
            idx = rng.randrange(self.n_priv)
            self.priv_written.append(idx)
            return _Op(Opcode.ST, priv(c, idx), (self._reg(),))
        word = rng.choice(_bank(c, phase % 2, self.bank_size))
        return _Op(Opcode.ST, shared(word), (self._reg(),))

    def phase_blocks(self, phase: int, length: int) -> list:
        """Blocks of ops; a branch and the ops it may skip form one block."""
        blocks = []
        left = length
        while left > 0:
            if left >= 2 and self.rng.random() < 0.08:
                span = self.rng.randint(1, min(3, left - 1))
                block = [_Op(Opcode.BEQZ, None, (self._reg(),), offset=span + 1)]
                block.extend(self._simple(phase) for _ in range(span))
                left -= span + 1
            else:
                block = [self._simple(phase)]
                left -= 1
            blocks.append(block)
        return blocks


def _prologue(core: int, rng: random.Random, n_regs: int) -> list:
    return [[_Op(Opcode.LI, reg(core, r), imm=rng.randint(1, 1000))] for r in range(n_regs)]


def _phase_count(instrs_per_core: int, region_length_target: int) -> int:
    return max(1, round(instrs_per_core / region_length_target))


def _layout(cores, instrs_per_core, region_length_target, seed, shape):
    """Per-core, per-phase block lists for a full-barrier program."""
    if cores < 1 or instrs_per_core < 1 or region_length_target < 1:
        raise ValueError("cores, instrs_per_core and region_length_target must be positive")
    rng = random.Random(seed)
    bank_size = _bank_size(cores, shape)
    phases = _phase_count(instrs_per_core, region_length_target)
    gens = [_CoreGen(c, cores, bank_size, rng, shape) for c in range(cores)]
    layout = []
    for c, gen in enumerate(gens):
        pro = _prologue(c, rng, min(gen.n_regs, 4, instrs_per_core))
        lengths = _split(instrs_per_core - len(pro), phases, rng)
        per_phase = [gen.phase_blocks(k, n) for k, n in enumerate(lengths)]
        per_phase[0] = pro + per_phase[0]
        layout.append(per_phase)
    return layout, phases


def _materialize(layout, phases, shape) -> tuple:
    """Instructions from block lists; returns (program, {tag: (core, pc)})."""
    tags = {}
    cores = []
    for c, per_phase in enumerate(layout):
        seq = []
        for k, blocks in enumerate(per_phase):
            for block in blocks:
                for op in block:
                    pc = len(seq)
                    if op.tag is not None:
                        tags[op.tag] = (c, pc)
                    seq.append(Instruction(c, pc, op.opcode, dest=op.dest, srcs=op.srcs,
                                           imm=op.imm, branch_offset=op.offset))
            if k < phases - 1:
                seq.append(Instruction(c, len(seq), Opcode.SYNC, barrier_id=k + 1))
        seq.append(Instruction(c, len(seq), Opcode.HALT))
        cores.append(seq)
    return Program(cores, shape), tags


def generate_program(cores: int, instrs_per_core: int, region_length_target: int = 50,
                     seed: int = 0, shape: MachineShape = MachineShape()) -> Program:
    """A race-free program with ``instrs_per_core`` body instructions per core.

    All barriers span every core and split each core into the same number of
    phases, sized around ``region_length_target`` with jitter. Shared memory
    is double-banked per core: in phase k a core writes only its own bank
    k % 2 and reads other cores' banks from phase k - 1, so every cross-core
    read is ordered by a barrier.
    """
    layout, phases = _layout(cores, instrs_per_core, region_length_target, seed, shape)
    return _materialize(layout, phases, shape)[0]


class InjectedRace(NamedTuple):
    program: Program
    access: str                 # "WW" or "WR" (store on first, load on second)
    first: tuple                # (core, pc) of the store
    second: tuple               # (core, pc) of the other access
    location: object
    phase: int


def generate_racy_program(cores: int, instrs_per_core: int, region_length_target: int = 50,
                          seed: int = 0, shape: MachineShape = MachineShape()) -> InjectedRace:
    """A generated program plus exactly one conflicting pair on a reserved
    shared word, placed in the same phase on two different cores."""
    if cores < 2:
        raise ValueError("a race needs at least two cores")
    layout, phases = _layout(cores, instrs_per_core, region_length_target, seed, shape)
    rng = random.Random(f"race-{seed}")
    a, b = sorted(rng.sample(range(cores), 2))
    phase = rng.randrange(phases)
    slot = shared(shape.shared_words - 1 - rng.randrange(RACE_SLOTS))
    access = rng.choice(("WW", "WR"))
    v1 = rng.randint(1, 1 << 20)
    v2 = v1 + rng.randint(1, 1000)
    ra, rb = reg(a, SCRATCH_REG), reg(b, SCRATCH_REG)
    store_a = [_Op(Opcode.LI, ra, imm=v1), _Op(Opcode.ST, slot, (ra,), tag="first")]
    if access == "WW":
        other = [_Op(Opcode.LI, rb, imm=v2), _Op(Opcode.ST, slot, (rb,), tag="second")]
    else:
        other = [_Op(Opcode.LD, rb, (slot,), tag="second"),
                 _Op(Opcode.ST, priv(b, SCRATCH_PRIV), (rb,))]
    # the lower core's access goes late and the higher one's early, so that
    # some interleavings order them opposite to the canonical schedule
    blocks_a = layout[a][phase]
    blocks_a.insert(rng.randint(len(blocks_a) // 2, len(blocks_a)), store_a)
    blocks_b = layout[b][phase]
    blocks_b.insert(rng.randint(0, len(blocks_b) // 2), other)
    prog, tags = _materialize(layout, phases, shape)
    return InjectedRace(prog, access, tags["first"], tags["second"], slot, phase)


def final_state_differs(prog: Program, fault: FaultSpec) -> bool:
    clean = Simulator(prog)
    clean.run()
    faulty = Simulator(prog, fault)
    faulty.run()
    return not clean.state.same_values(faulty.state)


def place_fault(prog: Program, seed: int = 0) -> FaultSpec:
    """WRONG_RESULT on a randomly chosen dest-bearing instruction whose
    corruption changes the final state; candidates are tried in seeded
    random order until one is observable."""
    rng = random.Random(seed)
    candidates = [ins for ins in prog.instructions() if ins.opcode in DEST_OPS]
    rng.shuffle(candidates)
    clean = Simulator(prog)
    clean.run()
    for ins in candidates:
        delta = rng.randint(1, 1000) * rng.choice((1, -1))
        fault = FaultSpec(FaultKind.WRONG_RESULT, ins.core, ins.pc, delta)
        faulty = Simulator(prog, fault)
        faulty.run()
        if not clean.state.same_values(faulty.state):
            return fault
    raise NoObservableTarget("no dest-bearing instruction has an observable effect")


# ---------------------------------------------------------------------------
# Experiment sweep
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    core_counts: list = field(default_factory=lambda: [5, 10, 20, 30])
    instructions_per_core: list = field(default_factory=lambda: [500, 1000, 1500])
    trials: int = 30
    region_length_target: int = 50
    rng_seed: int = 0
    quantum_max: int = 8

    def __post_init__(self):
        if not self.core_counts or not self.instructions_per_core:
            raise ValueError("empty sweep")
        if min(self.core_counts) < 1 or min(self.instructions_per_core) < 1:
            raise ValueError("core and instruction counts must be at least 1")
        if self.trials < 1 or self.region_length_target < 1 or self.quantum_max < 1:
            raise ValueError("trials, region_length_target and quantum_max must be at least 1")

    def to_json(self):
        return {"core_counts": list(self.core_counts),
                "instructions_per_core": list(self.instructions_per_core),
                "trials": self.trials, "region_length_target": self.region_length_target,
                "rng_seed": self.rng_seed, "quantum_max": self.quantum_max}


@dataclass
class TrialResult:
    trial: int
    n: int
    s: int
    executed: Optional[int]
    verdict: Optional[str]
    fault: Optional[dict]
    culprit: Optional[tuple]
    error: Optional[str] = None

    @property
    def hit(self) -> bool:
        return (self.verdict == VerdictKind.ERROR_TRIGGERED.value and self.fault is not None
                and self.culprit == (self.fault["core"], self.fault["pc"]))

    def to_json(self):
        return {"trial": self.trial, "n": self.n, "s": self.s, "executed": self.executed,
                "verdict": self.verdict, "fault": self.fault,
                "culprit": list(self.culprit) if self.culprit else None,
                "hit": self.hit, "error": self.error}


@dataclass
class CellStats:
    cores: int
    instrs_per_core: int
    trials: list

    @property
    def counts(self) -> list:
        return [t.executed for t in self.trials if t.error is None]

    @property
    def mean(self) -> Optional[float]:
        counts = self.counts
        return statistics.fmean(counts) if counts else None

    @property
    def hits(self) -> int:
        return sum(t.hit for t in self.trials)

    def to_json(self):
        return {"cores": self.cores, "instrs_per_core": self.instrs_per_core,
                "mean_executed": self.mean, "hits": self.hits,
                "errors": sum(t.error is not None for t in self.trials),
                "trials": [t.to_json() for t in self.trials]}


@dataclass
class ExperimentStats:
    config: ExperimentConfig
    cells: dict

    def mean(self, cores: int, instrs: int) -> Optional[float]:
        return self.cells[(cores, instrs)].mean

    def to_json(self):
        return {"config": self.config.to_json(),
                "cells": [self.cells[k].to_json() for k in sorted(self.cells)]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    def table(self) -> str:
        instrs = sorted(self.config.instructions_per_core)
        head = "cores " + "".join(f"{i:>12}" for i in instrs)
        lines = [head, "-" * len(head)]
        for c in sorted(self.config.core_counts):
            row = []
            for i in instrs:
                m = self.cells[(c, i)].mean
                row.append(f"{m:>12.1f}" if m is not None else f"{'-':>12}")
            lines.append(f"{c:<6}" + "".join(row))
        return "\n".join(lines) + "\n"


def trial_seeds(rng_seed, cores: int, instrs: int, trial: int) -> tuple:
    """(program seed, fault seed, scheduler seed) for one trial."""
    rng = random.Random(f"{rng_seed}-{cores}-{instrs}-{trial}")
    return rng.getrandbits(32), rng.getrandbits(32), rng.getrandbits(32)


def run_trial(cores: int, instrs: int, trial: int, config: ExperimentConfig,
              store: Optional[SnapshotStore] = None) -> TrialResult:
    pseed, fseed, sseed = trial_seeds(config.rng_seed, cores, instrs, trial)
    n = s = 0
    fault = None
    try:
        prog = generate_program(cores, instrs, config.region_length_target, pseed)
        n = prog.n
        s = analyze(prog).s
        fault = place_fault(prog, fseed)
        verdict = locate(prog, fault, SchedulerConfig(sseed, config.quantum_max),
                         store if store is not None else SnapshotStore())
    except SynclocError as exc:
        return TrialResult(trial, n, s, None, None, fault.to_json() if fault else None, None,
                           f"{exc.code}: {exc}")
    culprit = verdict.culprit.key if verdict.culprit is not None else None
    return TrialResult(trial, n, s, verdict.executed_instruction_count, verdict.kind.value,
                       fault.to_json(), culprit)


def run_experiment(config: ExperimentConfig, store_root=None, progress=None) -> ExperimentStats:
    """Every (cores, instrs) cell runs ``config.trials`` independent trials.

    With ``store_root`` each trial commits into its own directory below it;
    otherwise stores are in memory. ``progress`` is called after each trial.
    """
    cells = {}
    for cores in config.core_counts:
        for instrs in config.instructions_per_core:
            results = []
            for t in range(config.trials):
                store = None
                if store_root is not None:
                    store = SnapshotStore(Path(store_root) / f"c{cores}-i{instrs}-t{t}")
                results.append(run_trial(cores, instrs, t, config, store))
                if progress is not None:
                    progress(cores, instrs, results[-1])
            cells[(cores, instrs)] = CellStats(cores, instrs, results)
    return ExperimentStats(config, cells)

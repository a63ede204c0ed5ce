"""Toy multicore ISA: locations, instructions, programs, machine state and the
deterministic single-instruction semantics used by both executors.

Program text looks like::

    core 0:
        LI r1, 7
        ST SHARED[5], r1    # comments start with '#'
        SYNC 1
        HALT
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

from .errors import MalformedInstruction, OutOfBounds, ProgramError

_MASK = (1 << 64) - 1
_SIGN = 1 << 63

# Pseudo barrier keys for the pre-execution and all-halted synchronization points.
INITIAL = "INITIAL"
FINAL = "FINAL"


def wrap(value: int) -> int:
    """Reduce an integer to a signed 64-bit word."""
    value &= _MASK
    return value - (1 << 64) if value & _SIGN else value


class Kind(enum.IntEnum):
    REG = 0
    PRIV_MEM = 1
    SHARED_MEM = 2


class Location(NamedTuple):
    kind: Kind
    core: Optional[int]
    index: int

    def __str__(self):
        if self.kind is Kind.REG:
            return f"c{self.core}.r{self.index}"
        if self.kind is Kind.PRIV_MEM:
            return f"c{self.core}.PRIV[{self.index}]"
        return f"SHARED[{self.index}]"

    def to_json(self):
        return {"kind": self.kind.name, "core": self.core, "index": self.index}


def reg(core: int, index: int) -> Location:
    return Location(Kind.REG, core, index)


def priv(core: int, index: int) -> Location:
    return Location(Kind.PRIV_MEM, core, index)


def shared(index: int) -> Location:
    return Location(Kind.SHARED_MEM, None, index)


class Opcode(str, enum.Enum):
    LI = "LI"
    ADD = "ADD"
    MUL = "MUL"
    XOR = "XOR"
    LD = "LD"
    ST = "ST"
    BEQZ = "BEQZ"
    SYNC = "SYNC"
    HALT = "HALT"


class CheckClass(str, enum.Enum):
    IMMEDIATE = "IMMEDIATE"
    LAZY = "LAZY"


ALU_OPS = frozenset({Opcode.ADD, Opcode.MUL, Opcode.XOR})
DEST_OPS = frozenset({Opcode.LI, Opcode.ADD, Opcode.MUL, Opcode.XOR, Opcode.LD, Opcode.ST})
SYNC_OPS = frozenset({Opcode.SYNC, Opcode.HALT})

_DEFAULT_CHECK = {
    Opcode.ADD: CheckClass.IMMEDIATE,
    Opcode.MUL: CheckClass.IMMEDIATE,
    Opcode.XOR: CheckClass.IMMEDIATE,
    Opcode.LD: CheckClass.IMMEDIATE,
}


@dataclass(frozen=True, slots=True)
class Instruction:
    core: int
    pc: int
    opcode: Opcode
    dest: Optional[Location] = None
    srcs: tuple = ()
    imm: Optional[int] = None
    barrier_id: Optional[int] = None
    branch_offset: Optional[int] = None
    check_class: Optional[CheckClass] = None
    reads: frozenset = field(init=False, repr=False, compare=False)
    writes: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "srcs", tuple(self.srcs))
        if self.check_class is None:
            object.__setattr__(self, "check_class",
                               _DEFAULT_CHECK.get(self.opcode, CheckClass.LAZY))
        check_well_formed(self)
        object.__setattr__(self, "reads", frozenset(self.srcs))
        object.__setattr__(self, "writes",
                           frozenset((self.dest,)) if self.dest is not None else frozenset())

    @property
    def key(self):
        return (self.core, self.pc)

    def __str__(self):
        return f"c{self.core}@{self.pc}: {format_instruction(self)}"

    def to_json(self):
        return {"core": self.core, "pc": self.pc, "text": format_instruction(self)}


def check_well_formed(ins: Instruction) -> None:
    op = ins.opcode

    def bad(why):
        raise MalformedInstruction(f"{op.value} at core {ins.core} pc {ins.pc}: {why}")

    if not isinstance(op, Opcode):
        bad("unknown opcode")
    n_src = len(ins.srcs)
    kinds = [s.kind for s in ins.srcs]
    if op in SYNC_OPS:
        if ins.dest is not None or n_src:
            bad("takes no operands")
        if op is Opcode.SYNC and (ins.barrier_id is None or ins.barrier_id < 0):
            bad("needs a non-negative barrier id")
        if op is Opcode.HALT and ins.barrier_id is not None:
            bad("takes no barrier id")
    elif op is Opcode.BEQZ:
        if ins.dest is not None or n_src != 1 or kinds[0] is not Kind.REG:
            bad("needs exactly one register source and no destination")
        if ins.branch_offset is None or ins.branch_offset < 1:
            bad("needs a positive forward offset")
    elif op is Opcode.LI:
        if ins.dest is None or ins.dest.kind is not Kind.REG or n_src or ins.imm is None:
            bad("needs a register destination and an immediate")
    elif op in ALU_OPS:
        if ins.dest is None or ins.dest.kind is not Kind.REG or n_src != 2 \
                or any(k is not Kind.REG for k in kinds):
            bad("needs a register destination and two register sources")
    elif op is Opcode.LD:
        if ins.dest is None or ins.dest.kind is not Kind.REG or n_src != 1 \
                or kinds[0] is Kind.REG:
            bad("needs a register destination and one memory source")
    elif op is Opcode.ST:
        if ins.dest is None or ins.dest.kind is Kind.REG or n_src != 1 \
                or kinds[0] is not Kind.REG:
            bad("needs a memory destination and one register source")
    if op is not Opcode.SYNC and ins.barrier_id is not None:
        bad("only SYNC carries a barrier id")
    if op is not Opcode.BEQZ and ins.branch_offset is not None:
        bad("only BEQZ carries a branch offset")
    for loc in (ins.dest, *ins.srcs):
        if loc is not None and loc.kind is not Kind.SHARED_MEM and loc.core != ins.core:
            bad(f"{loc} belongs to another core")


def reads_of(ins: Instruction) -> frozenset:
    return ins.reads


def writes_of(ins: Instruction) -> frozenset:
    return ins.writes


def global_pc_key(ins: Instruction):
    """Total order used for the smallest-pc rule: pc first, core breaks ties."""
    return (ins.pc, ins.core)


@dataclass(frozen=True)
class MachineShape:
    n_regs: int = 16
    priv_words: int = 256
    shared_words: int = 1024

    def check(self, loc: Location) -> None:
        limit = (self.n_regs, self.priv_words, self.shared_words)[loc.kind]
        if not 0 <= loc.index < limit:
            raise OutOfBounds(f"{loc} outside {loc.kind.name} size {limit}")


@dataclass
class Program:
    cores: list
    shape: MachineShape = field(default_factory=MachineShape)

    def __post_init__(self):
        self.cores = [list(seq) for seq in self.cores]
        self.validate()

    @property
    def core_count(self) -> int:
        return len(self.cores)

    @property
    def n(self) -> int:
        return sum(len(seq) for seq in self.cores)

    def __getitem__(self, core):
        return self.cores[core]

    def instructions(self):
        for seq in self.cores:
            yield from seq

    def barrier_ids(self):
        ids = set()
        for ins in self.instructions():
            if ins.opcode is Opcode.SYNC:
                ids.add(ins.barrier_id)
        return ids

    def participants(self, barrier) -> frozenset:
        if barrier in (INITIAL, FINAL):
            return frozenset(range(self.core_count))
        return self._participants.get(barrier, frozenset())

    def sync_pc(self, core, barrier) -> Optional[int]:
        return self._sync_pcs[core].get(barrier)

    def validate(self) -> None:
        self._participants = {}
        self._sync_pcs = []
        for c, seq in enumerate(self.cores):
            if not seq or seq[-1].opcode is not Opcode.HALT:
                raise ProgramError(f"core {c} does not end with HALT")
            syncs = {}
            for pc, ins in enumerate(seq):
                if ins.core != c or ins.pc != pc:
                    raise ProgramError(f"instruction {ins} stored at core {c} pc {pc}")
                if ins.opcode is Opcode.HALT and pc != len(seq) - 1:
                    raise ProgramError(f"core {c} has HALT before its end (pc {pc})")
                for loc in (ins.dest, *ins.srcs):
                    if loc is not None:
                        self.shape.check(loc)
                if ins.opcode is Opcode.SYNC:
                    if ins.barrier_id in syncs:
                        raise ProgramError(f"core {c} repeats barrier {ins.barrier_id}")
                    syncs[ins.barrier_id] = pc
                    self._participants.setdefault(ins.barrier_id, set()).add(c)
            for pc, ins in enumerate(seq):
                if ins.opcode is Opcode.BEQZ:
                    target = pc + ins.branch_offset
                    if target >= len(seq):
                        raise ProgramError(f"branch at core {c} pc {pc} leaves the program")
                    if any(seq[p].opcode in SYNC_OPS for p in range(pc + 1, target)):
                        raise ProgramError(
                            f"branch at core {c} pc {pc} skips a synchronization point")
            self._sync_pcs.append(syncs)
        self._participants = {b: frozenset(cs) for b, cs in self._participants.items()}
        self._check_barrier_order()

    def _check_barrier_order(self):
        # Barriers shared between cores must appear in a mutually consistent order.
        succ = {b: set() for b in self._participants}
        for syncs in self._sync_pcs:
            order = sorted(syncs, key=syncs.get)
            for a, b in zip(order, order[1:]):
                succ[a].add(b)
        indeg = {b: 0 for b in succ}
        for b in succ:
            for t in succ[b]:
                indeg[t] += 1
        ready = [b for b, d in indeg.items() if d == 0]
        seen = 0
        while ready:
            b = ready.pop()
            seen += 1
            for t in succ[b]:
                indeg[t] -= 1
                if indeg[t] == 0:
                    ready.append(t)
        if seen != len(succ):
            raise ProgramError("barrier order differs between cores (would deadlock)")


class MachineState:
    """Architectural state: shared memory plus per-core memory, registers, pc."""

    __slots__ = ("shape", "shared_mem", "priv_mem", "regs", "pc", "halted", "waiting")

    def __init__(self, core_count: int, shape: MachineShape = MachineShape()):
        self.shape = shape
        self.shared_mem = [0] * shape.shared_words
        self.priv_mem = [[0] * shape.priv_words for _ in range(core_count)]
        self.regs = [[0] * shape.n_regs for _ in range(core_count)]
        self.pc = [0] * core_count
        self.halted = [False] * core_count
        self.waiting = [None] * core_count

    @property
    def core_count(self) -> int:
        return len(self.regs)

    def copy(self) -> "MachineState":
        new = MachineState.__new__(MachineState)
        new.shape = self.shape
        new.shared_mem = list(self.shared_mem)
        new.priv_mem = [list(m) for m in self.priv_mem]
        new.regs = [list(r) for r in self.regs]
        new.pc = list(self.pc)
        new.halted = list(self.halted)
        new.waiting = list(self.waiting)
        return new

    def read(self, loc: Location) -> int:
        if loc.kind is Kind.REG:
            return self.regs[loc.core][loc.index]
        if loc.kind is Kind.PRIV_MEM:
            return self.priv_mem[loc.core][loc.index]
        return self.shared_mem[loc.index]

    def write(self, loc: Location, value: int) -> None:
        if loc.kind is Kind.REG:
            self.regs[loc.core][loc.index] = value
        elif loc.kind is Kind.PRIV_MEM:
            self.priv_mem[loc.core][loc.index] = value
        else:
            self.shared_mem[loc.index] = value

    def same_values(self, other: "MachineState") -> bool:
        return (self.shared_mem == other.shared_mem and self.priv_mem == other.priv_mem
                and self.regs == other.regs)


class StepResult(NamedTuple):
    writes: list
    branch_taken: bool


def evaluate(state: MachineState, ins: Instruction) -> StepResult:
    """Compute an instruction's effects without applying them."""
    op = ins.opcode
    if op is Opcode.LI:
        return StepResult([(ins.dest, wrap(ins.imm))], False)
    if op is Opcode.ADD:
        a, b = ins.srcs
        return StepResult([(ins.dest, wrap(state.read(a) + state.read(b)))], False)
    if op is Opcode.MUL:
        a, b = ins.srcs
        return StepResult([(ins.dest, wrap(state.read(a) * state.read(b)))], False)
    if op is Opcode.XOR:
        a, b = ins.srcs
        return StepResult([(ins.dest, wrap(state.read(a) ^ state.read(b)))], False)
    if op is Opcode.LD or op is Opcode.ST:
        return StepResult([(ins.dest, state.read(ins.srcs[0]))], False)
    if op is Opcode.BEQZ:
        return StepResult([], state.read(ins.srcs[0]) == 0)
    return StepResult([], False)


def apply_step(state: MachineState, ins: Instruction, result: StepResult) -> None:
    core = ins.core
    for loc, value in result.writes:
        state.write(loc, value)
    if result.branch_taken:
        state.pc[core] += ins.branch_offset
    else:
        state.pc[core] += 1
    if ins.opcode is Opcode.SYNC:
        state.waiting[core] = ins.barrier_id
    elif ins.opcode is Opcode.HALT:
        state.halted[core] = True


def execute_one(state: MachineState, ins: Instruction) -> StepResult:
    """Execute one instruction on ``state`` in place and report what it wrote."""
    check_well_formed(ins)
    for loc in (ins.dest, *ins.srcs):
        if loc is not None:
            state.shape.check(loc)
    if not 0 <= ins.core < state.core_count:
        raise OutOfBounds(f"core {ins.core} outside machine of {state.core_count} cores")
    result = evaluate(state, ins)
    apply_step(state, ins, result)
    return result


# ---------------------------------------------------------------------------
# Program text
# ---------------------------------------------------------------------------

_REG_RE = re.compile(r"^r(\d+)$", re.I)
_MEM_RE = re.compile(r"^(SHARED|PRIV)\[\s*(-?\d+)\s*\]$", re.I)
_CORE_RE = re.compile(r"^core\s+(\d+)\s*:$", re.I)


def _operand(text: str, core: int, lineno: int) -> Location:
    text = text.strip()
    m = _REG_RE.match(text)
    if m:
        return reg(core, int(m.group(1)))
    m = _MEM_RE.match(text)
    if m:
        idx = int(m.group(2))
        return shared(idx) if m.group(1).upper() == "SHARED" else priv(core, idx)
    raise MalformedInstruction(f"line {lineno}: cannot parse operand {text!r}")


def parse_instruction(text: str, core: int, pc: int, lineno: int = 0) -> Instruction:
    parts = text.strip().split(None, 1)
    try:
        op = Opcode(parts[0].upper())
    except ValueError:
        raise MalformedInstruction(f"line {lineno}: unknown opcode {parts[0]!r}") from None
    args = [a.strip() for a in parts[1].split(",")] if len(parts) > 1 else []

    def need(k):
        if len(args) != k:
            raise MalformedInstruction(f"line {lineno}: {op.value} takes {k} operands")

    try:
        if op is Opcode.LI:
            need(2)
            return Instruction(core, pc, op, dest=_operand(args[0], core, lineno),
                               imm=int(args[1], 0))
        if op in ALU_OPS:
            need(3)
            return Instruction(core, pc, op, dest=_operand(args[0], core, lineno),
                               srcs=(_operand(args[1], core, lineno),
                                     _operand(args[2], core, lineno)))
        if op is Opcode.LD or op is Opcode.ST:
            need(2)
            return Instruction(core, pc, op, dest=_operand(args[0], core, lineno),
                               srcs=(_operand(args[1], core, lineno),))
        if op is Opcode.BEQZ:
            need(2)
            return Instruction(core, pc, op, srcs=(_operand(args[0], core, lineno),),
                               branch_offset=int(args[1].lstrip("+"), 0))
        if op is Opcode.SYNC:
            need(1)
            return Instruction(core, pc, op, barrier_id=int(args[0], 0))
        need(0)
        return Instruction(core, pc, op)
    except ValueError as exc:
        raise MalformedInstruction(f"line {lineno}: {exc}") from None


def parse_program(text: str, shape: MachineShape = MachineShape()) -> Program:
    cores: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _CORE_RE.match(line)
        if m:
            current = int(m.group(1))
            if current in cores:
                raise ProgramError(f"line {lineno}: core {current} declared twice")
            cores[current] = []
            continue
        if current is None:
            raise ProgramError(f"line {lineno}: instruction before any 'core <k>:' header")
        seq = cores[current]
        seq.append(parse_instruction(line, current, len(seq), lineno))
    if sorted(cores) != list(range(len(cores))):
        raise ProgramError(f"core sections must be numbered 0..k-1, got {sorted(cores)}")
    return Program([cores[c] for c in range(len(cores))], shape)


def _fmt_loc(loc: Location) -> str:
    if loc.kind is Kind.REG:
        return f"r{loc.index}"
    if loc.kind is Kind.PRIV_MEM:
        return f"PRIV[{loc.index}]"
    return f"SHARED[{loc.index}]"


def format_instruction(ins: Instruction) -> str:
    op = ins.opcode
    if op is Opcode.LI:
        return f"LI {_fmt_loc(ins.dest)}, {ins.imm}"
    if op in ALU_OPS:
        a, b = ins.srcs
        return f"{op.value} {_fmt_loc(ins.dest)}, {_fmt_loc(a)}, {_fmt_loc(b)}"
    if op is Opcode.LD or op is Opcode.ST:
        return f"{op.value} {_fmt_loc(ins.dest)}, {_fmt_loc(ins.srcs[0])}"
    if op is Opcode.BEQZ:
        return f"BEQZ {_fmt_loc(ins.srcs[0])}, +{ins.branch_offset}"
    if op is Opcode.SYNC:
        return f"SYNC {ins.barrier_id}"
    return "HALT"


def format_program(prog: Program) -> str:
    lines = []
    for c, seq in enumerate(prog.cores):
        lines.append(f"core {c}:")
        lines.extend("    " + format_instruction(ins) for ins in seq)
    return "\n".join(lines) + "\n"


def build_program(bodies: Sequence[Sequence[str]], shape: MachineShape = MachineShape()) -> Program:
    """Assemble a program from per-core lists of instruction text (HALT appended if absent)."""
    cores = []
    for c, body in enumerate(bodies):
        lines = list(body)
        if not lines or lines[-1].strip().upper() != "HALT":
            lines.append("HALT")
        cores.append([parse_instruction(t, c, pc) for pc, t in enumerate(lines)])
    return Program(cores, shape)

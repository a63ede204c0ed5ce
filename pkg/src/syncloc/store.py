"""Tree-structured state snapshots, a content-addressed versioned store for
them, and the scoreboard diff that pinpoints differing word intervals.

On-disk layout of a store rooted at ``<root>``::

    <root>/meta.json                 hash algorithm and machine shape
    <root>/objects/<hex digest>      blob and tree objects, named by digest
    <root>/refs/<branch>/<barrier>   version log, one "<version> <digest>" per line
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import sys
from array import array
from dataclasses import dataclass
from typing import Optional

from .errors import CorruptObject, ShapeMismatch, StoreIOError, UnknownRef
from .isa import Kind, Location, MachineShape, MachineState

HASH_NAME = "sha256"

SHARED_LEAF = "shared_mem"
PRIV_LEAF = "priv_mem"
REG_LEAF = "reg_file"


def _pack(values) -> bytes:
    arr = array("q", values)
    if sys.byteorder != "little":
        arr.byteswap()
    return arr.tobytes()


def _unpack(data: bytes) -> tuple:
    arr = array("q")
    arr.frombytes(data)
    if sys.byteorder != "little":
        arr.byteswap()
    return tuple(arr)


def _blob_object(values) -> bytes:
    return b"blob\n" + _pack(values)


def _tree_object(entries) -> bytes:
    # entries: iterable of (name, kind, digest)
    lines = "".join(f"{kind} {digest} {name}\n" for name, kind, digest in sorted(entries))
    return b"tree\n" + lines.encode()


def _digest(data: bytes, hash_name: str = HASH_NAME) -> str:
    return hashlib.new(hash_name, data).hexdigest()


class Snapshot:
    """Value capture of shared memory, private memories and register files.

    The tree is ``root -> {shared_mem, core<k> -> {priv_mem, reg_file}}``;
    every node has a digest computed from its children, so equal values give
    equal digests and the diff can skip identical subtrees.
    """

    __slots__ = ("shared_mem", "priv_mem", "regs", "_digests")

    def __init__(self, shared_mem, priv_mem, regs):
        self.shared_mem = tuple(shared_mem)
        self.priv_mem = tuple(tuple(m) for m in priv_mem)
        self.regs = tuple(tuple(r) for r in regs)
        if len(self.priv_mem) != len(self.regs):
            raise ShapeMismatch("private memories and register files disagree on core count")
        self._digests = None

    @classmethod
    def from_state(cls, state: MachineState) -> "Snapshot":
        return cls(state.shared_mem, state.priv_mem, state.regs)

    @classmethod
    def zeroed(cls, core_count: int, shape: MachineShape = MachineShape()) -> "Snapshot":
        return cls.from_state(MachineState(core_count, shape))

    @property
    def core_count(self) -> int:
        return len(self.regs)

    @property
    def shape(self):
        return (self.core_count, len(self.regs[0]) if self.regs else 0,
                len(self.priv_mem[0]) if self.priv_mem else 0, len(self.shared_mem))

    def machine_shape(self) -> MachineShape:
        _, n_regs, priv_words, shared_words = self.shape
        return MachineShape(n_regs, priv_words, shared_words)

    def to_state(self) -> MachineState:
        state = MachineState(self.core_count, self.machine_shape())
        state.shared_mem = list(self.shared_mem)
        state.priv_mem = [list(m) for m in self.priv_mem]
        state.regs = [list(r) for r in self.regs]
        return state

    def leaves(self):
        """Yield ``(path, kind, core, values)`` in diff-report order."""
        yield SHARED_LEAF, Kind.SHARED_MEM, None, self.shared_mem
        for c in range(self.core_count):
            yield f"core{c}/{PRIV_LEAF}", Kind.PRIV_MEM, c, self.priv_mem[c]
            yield f"core{c}/{REG_LEAF}", Kind.REG, c, self.regs[c]

    def read(self, loc: Location) -> int:
        if loc.kind is Kind.REG:
            return self.regs[loc.core][loc.index]
        if loc.kind is Kind.PRIV_MEM:
            return self.priv_mem[loc.core][loc.index]
        return self.shared_mem[loc.index]

    def objects(self):
        """Return ``(root digest, {digest: object bytes})`` for the whole tree."""
        objs = {}

        def blob(values):
            data = _blob_object(values)
            d = _digest(data)
            objs[d] = data
            return d

        core_digests = []
        root_entries = [(SHARED_LEAF, "blob", blob(self.shared_mem))]
        for c in range(self.core_count):
            data = _tree_object([(PRIV_LEAF, "blob", blob(self.priv_mem[c])),
                                 (REG_LEAF, "blob", blob(self.regs[c]))])
            d = _digest(data)
            objs[d] = data
            core_digests.append(d)
            root_entries.append((f"core{c}", "tree", d))
        data = _tree_object(root_entries)
        root = _digest(data)
        objs[root] = data
        self._digests = (root, core_digests)
        return root, objs

    def _ensure_digests(self):
        if self._digests is None:
            self.objects()
        return self._digests

    @property
    def root_hash(self) -> str:
        return self._ensure_digests()[0]

    def core_hash(self, core: int) -> str:
        return self._ensure_digests()[1][core]

    def __eq__(self, other):
        if not isinstance(other, Snapshot):
            return NotImplemented
        return (self.shared_mem == other.shared_mem and self.priv_mem == other.priv_mem
                and self.regs == other.regs)

    def __hash__(self):
        return hash(self.root_hash)

    def __repr__(self):
        return f"<Snapshot cores={self.core_count} root={self.root_hash[:12]}>"


# ---------------------------------------------------------------------------
# Diff
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffEntry:
    kind: Kind
    core: Optional[int]
    start: int
    end: int
    machine: tuple
    model: tuple

    def locations(self):
        return [Location(self.kind, self.core, i) for i in range(self.start, self.end)]

    def label(self) -> str:
        name = {Kind.REG: "r", Kind.PRIV_MEM: "PRIV", Kind.SHARED_MEM: "SHARED"}[self.kind]
        where = "" if self.core is None else f"c{self.core}."
        return f"{where}{name}[{self.start}:{self.end})"

    def to_json(self):
        return {"kind": self.kind.name, "core": self.core, "start": self.start,
                "end": self.end, "machine": list(self.machine), "model": list(self.model)}


class DiffReport:
    """Maximal runs of differing words, in (leaf, index) order. Empty means equal."""

    def __init__(self, entries=()):
        self.entries = list(entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __bool__(self):
        return bool(self.entries)

    @property
    def empty(self) -> bool:
        return not self.entries

    def locations(self):
        out = []
        for e in self.entries:
            out.extend(e.locations())
        return out

    def to_text(self) -> str:
        if not self.entries:
            return "snapshots are equal\n"
        lines = []
        for e in self.entries:
            lines.append(f"{e.label()} machine={list(e.machine)} model={list(e.model)}")
        return "\n".join(lines) + "\n"

    def to_json(self):
        return [e.to_json() for e in self.entries]


def _check_compatible(a: Snapshot, b: Snapshot):
    if a.shape != b.shape:
        raise ShapeMismatch(f"snapshot shapes differ: {a.shape} vs {b.shape}")


def _diff_leaf(kind, core, xs, ys, out):
    i, n = 0, len(xs)
    while i < n:
        if xs[i] != ys[i]:
            j = i + 1
            while j < n and xs[j] != ys[j]:
                j += 1
            out.append(DiffEntry(kind, core, i, j, tuple(xs[i:j]), tuple(ys[i:j])))
            i = j
        else:
            i += 1


def diff_snapshots(machine: Snapshot, model: Snapshot) -> DiffReport:
    """Scoreboard comparison; subtrees with equal digests are skipped."""
    _check_compatible(machine, model)
    out = []
    if machine.root_hash == model.root_hash:
        return DiffReport()
    if machine.shared_mem != model.shared_mem:
        _diff_leaf(Kind.SHARED_MEM, None, machine.shared_mem, model.shared_mem, out)
    for c in range(machine.core_count):
        if machine.core_hash(c) == model.core_hash(c):
            continue
        if machine.priv_mem[c] != model.priv_mem[c]:
            _diff_leaf(Kind.PRIV_MEM, c, machine.priv_mem[c], model.priv_mem[c], out)
        if machine.regs[c] != model.regs[c]:
            _diff_leaf(Kind.REG, c, machine.regs[c], model.regs[c], out)
    return DiffReport(out)


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------

class Branch(str, enum.Enum):
    MACHINE = "MACHINE"
    MODEL = "MODEL"


@dataclass(frozen=True, order=True)
class StoreRef:
    branch: Branch
    barrier_key: str
    version: int

    def __str__(self):
        return f"{self.branch.value}:{self.barrier_key}:{self.version}"

    @classmethod
    def parse(cls, text: str) -> "StoreRef":
        try:
            branch, key, version = text.rsplit(":", 2)
            return cls(Branch(branch.upper()), key, int(version))
        except ValueError:
            raise UnknownRef(f"cannot parse store ref {text!r} (want BRANCH:BARRIER:VERSION)") from None


class SnapshotStore:
    """Append-only content-addressed snapshot store with MACHINE and MODEL branches.

    ``root=None`` keeps everything in memory with identical semantics; this is
    what the experiment sweep uses when no store directory is given.
    Single writer; readers may share the instance.
    """

    def __init__(self, root=None, hash_name: str = HASH_NAME):
        self.root = os.fspath(root) if root is not None else None
        self.hash_name = hash_name
        self.shape = None
        self._objects = {}  # in-memory objects, or digests known to exist on disk
        self._logs = {}     # (branch, key) -> list of digests, index = version - 1
        if self.root is not None:
            self._open_dir()

    # -- disk helpers -------------------------------------------------------

    def _open_dir(self):
        meta_path = os.path.join(self.root, "meta.json")
        try:
            os.makedirs(os.path.join(self.root, "objects"), exist_ok=True)
            os.makedirs(os.path.join(self.root, "refs"), exist_ok=True)
            if os.path.exists(meta_path):
                with open(meta_path) as f:
                    meta = json.load(f)
                self.hash_name = meta["hash"]
                self.shape = tuple(meta["shape"]) if meta.get("shape") else None
            else:
                self._write_meta()
        except (OSError, ValueError, KeyError) as exc:
            raise StoreIOError(f"cannot open store at {self.root}: {exc}") from exc

    def _write_meta(self):
        meta = {"hash": self.hash_name, "shape": list(self.shape) if self.shape else None}
        with open(os.path.join(self.root, "meta.json"), "w") as f:
            json.dump(meta, f)

    def _put(self, digest: str, data: bytes):
        if digest in self._objects:
            return
        if self.root is None:
            self._objects[digest] = data
            return
        path = os.path.join(self.root, "objects", digest)
        try:
            if not os.path.exists(path):
                tmp = path + ".tmp"
                with open(tmp, "wb") as f:
                    f.write(data)
                os.replace(tmp, path)
        except OSError as exc:
            raise StoreIOError(f"cannot write object {digest}: {exc}") from exc
        self._objects[digest] = None

    def _get(self, digest: str) -> bytes:
        if self.root is None:
            try:
                data = self._objects[digest]
            except KeyError:
                raise CorruptObject(f"missing object {digest}") from None
        else:
            path = os.path.join(self.root, "objects", digest)
            try:
                with open(path, "rb") as f:
                    data = f.read()
            except FileNotFoundError:
                raise CorruptObject(f"missing object {digest}") from None
            except OSError as exc:
                raise StoreIOError(f"cannot read object {digest}: {exc}") from exc
        if _digest(data, self.hash_name) != digest:
            raise CorruptObject(f"object {digest} does not match its digest")
        return data

    def _log_path(self, branch: Branch, key: str) -> str:
        return os.path.join(self.root, "refs", branch.value, str(key))

    def _log(self, branch: Branch, key: str) -> list:
        key = str(key)
        log = self._logs.get((branch, key))
        if log is None:
            log = []
            if self.root is not None:
                path = self._log_path(branch, key)
                try:
                    with open(path) as f:
                        for line in f:
                            version, digest = line.split()
                            if int(version) != len(log) + 1:
                                raise CorruptObject(f"ref log {path} is out of sequence")
                            log.append(digest)
                except FileNotFoundError:
                    pass
                except OSError as exc:
                    raise StoreIOError(f"cannot read ref log {path}: {exc}") from exc
            self._logs[(branch, key)] = log
        return log

    # -- public API ---------------------------------------------------------

    def commit(self, branch: Branch, barrier_key, snap: Snapshot) -> StoreRef:
        branch = Branch(branch)
        key = str(barrier_key)
        if self.shape is None:
            self.shape = snap.shape
            if self.root is not None:
                self._write_meta()
        elif tuple(self.shape) != snap.shape:
            raise ShapeMismatch(f"store holds shape {self.shape}, snapshot is {snap.shape}")
        root, objs = snap.objects()
        for digest, data in objs.items():
            if data[:4] == b"blob":
                self._put(digest, data)
        for digest, data in objs.items():
            if data[:4] == b"tree" and digest != root:
                self._put(digest, data)
        self._put(root, objs[root])
        log = self._log(branch, key)
        log.append(root)
        if self.root is not None:
            path = self._log_path(branch, key)
            try:
                os.makedirs(os.path.dirname(path), exist_ok=True)
                with open(path, "a") as f:
                    f.write(f"{len(log)} {root}\n")
            except OSError as exc:
                log.pop()
                raise StoreIOError(f"cannot append to ref log {path}: {exc}") from exc
        return StoreRef(branch, key, len(log))

    def resolve(self, ref: StoreRef) -> str:
        log = self._log(Branch(ref.branch), ref.barrier_key)
        if not 1 <= ref.version <= len(log):
            raise UnknownRef(f"no commit {ref}")
        return log[ref.version - 1]

    def latest(self, branch: Branch, barrier_key) -> Optional[StoreRef]:
        log = self._log(Branch(branch), str(barrier_key))
        return StoreRef(Branch(branch), str(barrier_key), len(log)) if log else None

    def checkout(self, ref: StoreRef) -> Snapshot:
        root = self._get(self.resolve(ref))
        entries = self._parse_tree(root)
        shared_mem = self._blob(entries, SHARED_LEAF)
        priv_mem, regs = [], []
        c = 0
        while f"core{c}" in entries:
            kind, digest = entries[f"core{c}"]
            if kind != "tree":
                raise CorruptObject(f"core{c} is not a tree")
            sub = self._parse_tree(self._get(digest))
            priv_mem.append(self._blob(sub, PRIV_LEAF))
            regs.append(self._blob(sub, REG_LEAF))
            c += 1
        return Snapshot(shared_mem, priv_mem, regs)

    def _parse_tree(self, data: bytes) -> dict:
        if not data.startswith(b"tree\n"):
            raise CorruptObject("expected a tree object")
        out = {}
        for line in data[5:].decode().splitlines():
            kind, digest, name = line.split(" ", 2)
            out[name] = (kind, digest)
        return out

    def _blob(self, entries: dict, name: str) -> tuple:
        try:
            kind, digest = entries[name]
        except KeyError:
            raise CorruptObject(f"tree lacks entry {name}") from None
        data = self._get(digest)
        if kind != "blob" or not data.startswith(b"blob\n"):
            raise CorruptObject(f"{name} is not a blob")
        return _unpack(data[5:])

    def object_count(self) -> int:
        if self.root is None:
            return len(self._objects)
        return len(os.listdir(os.path.join(self.root, "objects")))

    def refs(self, branch: Branch):
        """All (barrier_key, version count) pairs on a branch."""
        branch = Branch(branch)
        keys = {k for (b, k) in self._logs if b is branch}
        if self.root is not None:
            d = os.path.join(self.root, "refs", branch.value)
            if os.path.isdir(d):
                keys.update(os.listdir(d))
        return sorted((k, len(self._log(branch, k))) for k in keys)

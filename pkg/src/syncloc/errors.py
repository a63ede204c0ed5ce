"""Exception hierarchy. Every error carries a stable ``code`` string."""


class SynclocError(Exception):
    code = "INTERNAL"


class MalformedInstruction(SynclocError):
    code = "MALFORMED_INSTRUCTION"


class OutOfBounds(SynclocError):
    code = "OUT_OF_BOUNDS"


class ProgramError(SynclocError):
    code = "MALFORMED_PROGRAM"


class Deadlock(SynclocError):
    code = "DEADLOCK"


class FaultTargetMismatch(SynclocError):
    code = "FAULT_TARGET_MISMATCH"


class NotAtBarrier(SynclocError):
    code = "NOT_AT_BARRIER"


class CycleDetected(SynclocError):
    code = "CYCLE_DETECTED"


class UnknownRegion(SynclocError):
    code = "UNKNOWN_REGION"


class ShapeMismatch(SynclocError):
    code = "SHAPE_MISMATCH"


class StoreIOError(SynclocError):
    code = "IO_FAILURE"


class UnknownRef(SynclocError):
    code = "UNKNOWN_REF"


class CorruptObject(SynclocError):
    code = "CORRUPT_OBJECT"


class RootNotWritten(SynclocError):
    code = "ROOT_NOT_WRITTEN"


class MissingModelSnapshot(SynclocError):
    code = "MISSING_MODEL_SNAPSHOT"


class NoCurrentRegionTree(SynclocError):
    code = "NO_CURRENT_REGION_TREE"


class NoObservableTarget(SynclocError):
    code = "NO_OBSERVABLE_TARGET"

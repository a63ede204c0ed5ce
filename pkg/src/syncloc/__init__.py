"""Fault and data-race localization for multicore programs with barrier synchronization."""

from .deptree import (DepTreeNode, RaceFinding, RaceKind, all_writers_parallel, build_tree,
                      detect_races, format_tree)
from .errors import SynclocError
from .harness import (ExperimentConfig, ExperimentStats, generate_program, generate_racy_program,
                      place_fault, run_experiment)
from .isa import (FINAL, INITIAL, CheckClass, Instruction, Kind, Location, MachineShape,
                  MachineState, Opcode, Program, execute_one, global_pc_key, parse_program,
                  reads_of, writes_of)
from .localizer import (Verdict, VerdictKind, bisect_region, locate, pregenerate_model_snapshots,
                        run_step3)
from .machine import (FaultKind, FaultSpec, SchedulerConfig, Simulator, run_dut, run_reference,
                      snapshot_at_barrier)
from .regions import (RegionGraph, SyncRegion, build_region_graph, divide_into_regions,
                      insert_sync_points, parallel_regions)
from .store import DiffReport, Snapshot, SnapshotStore, StoreRef, diff_snapshots

__version__ = "0.1.0"

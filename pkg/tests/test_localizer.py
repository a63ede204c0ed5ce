import random

import pytest
from hypothesis import given, settings, strategies as st

from oracles import hb_races
from syncloc.deptree import tree_instructions
from syncloc.errors import MissingModelSnapshot, NoCurrentRegionTree
from syncloc.harness import (final_state_differs, generate_program, generate_racy_program,
                             place_fault)
from syncloc.isa import FINAL, INITIAL, build_program
from syncloc.localizer import (Escalation, Verdict, VerdictKind, _run_model, bisect_region, locate,
                               pregenerate_model_snapshots, run_step3)
from syncloc.machine import NO_FAULT, FaultKind, FaultSpec, SchedulerConfig, Simulator
from syncloc.store import Branch, Snapshot, SnapshotStore

SCHED = SchedulerConfig(7, 3)


def wrong(core, pc, delta=1):
    return FaultSpec(FaultKind.WRONG_RESULT, core, pc, delta)


def test_model_commit_count():
    prog = build_program([["SYNC 1", "SYNC 2", "SYNC 3"]] * 2)
    store = SnapshotStore()
    refs = pregenerate_model_snapshots(prog, store)
    assert len(refs) == 5
    assert [r.barrier_key for r in refs] == [INITIAL, "1", "2", "3", FINAL]
    assert all(r.branch is Branch.MODEL for r in refs)


def test_empty_program_initial_equals_final():
    store = SnapshotStore()
    first, last = pregenerate_model_snapshots(build_program([["HALT"], ["HALT"]]), store)
    assert store.checkout(first) == store.checkout(last)


def test_model_snapshots_round_trip_through_pipeline(tmp_path):
    prog = generate_program(3, 60, 20, seed=3)
    store = SnapshotStore(tmp_path)
    refs = pregenerate_model_snapshots(prog, store)
    verdict = locate(prog, place_fault(prog, 1), SCHED, store)
    assert verdict.kind is VerdictKind.ERROR_TRIGGERED
    sim = Simulator(prog)
    expected = {}
    for rel in sim.events():
        expected[str(rel.barrier)] = Snapshot.from_state(sim.state)
    for ref in refs:
        assert store.checkout(ref) == expected[ref.barrier_key]


def test_step3_clean_without_fault():
    prog = generate_program(3, 80, 20, seed=1)
    out = run_step3(prog, NO_FAULT, SCHED, SnapshotStore())
    assert isinstance(out, Verdict) and out.kind is VerdictKind.CLEAN


def test_step3_missing_model_snapshot():
    prog = build_program([["LI r1, 1"]])
    model = _run_model(prog, SnapshotStore())
    with pytest.raises(MissingModelSnapshot):
        run_step3(prog, NO_FAULT, SCHED, SnapshotStore(), model=model)


def test_step3_escalates_with_faulty_lazy_store():
    prog = build_program([["LI r1, 3", "ST SHARED[0], r1", "SYNC 1", "LD r2, SHARED[0]",
                           "ST PRIV[0], r2"],
                          ["SYNC 1", "LD r2, SHARED[0]", "ST PRIV[1], r2"]])
    out = run_step3(prog, wrong(0, 1, 5), SCHED, SnapshotStore())
    assert isinstance(out, Escalation) and out.barrier == 1
    assert any((0, 1) in {i.key for i in tree_instructions(s.tree)} for s in out.suspects)


def test_bisect_single_candidate():
    prog = build_program([["LI r1, 3", "SYNC 1"], ["SYNC 1"]])
    store = SnapshotStore()
    fault = wrong(0, 0, 4)
    out = run_step3(prog, fault, SCHED, store)
    region = out.suspects[0].region
    verdict = bisect_region(out.suspects, region, store.latest(Branch.MACHINE, INITIAL),
                            prog, fault, SCHED, store)
    assert verdict.culprit.key == (0, 0) and verdict.region == region


def test_bisect_descends_to_deepest_failing_node():
    prog = build_program([["LI r1, 1", "ADD r2, r1, r1", "ST SHARED[0], r2", "SYNC 1"], ["SYNC 1"]])
    verdict = locate(prog, wrong(0, 0, 2), SCHED)
    assert verdict.kind is VerdictKind.ERROR_TRIGGERED and verdict.culprit.key == (0, 0)
    failing = {r.instr.key for r in verdict.checks if r.failed}
    assert failing == {(0, 0), (0, 1), (0, 2)}


def test_bisect_contradiction_is_internal_error():
    prog = build_program([["LI r1, 1", "ST SHARED[0], r1", "SYNC 1"], ["SYNC 1"]])
    store = SnapshotStore()
    out = run_step3(prog, wrong(0, 0, 2), SCHED, store)
    region = out.suspects[0].region
    with pytest.raises(NoCurrentRegionTree):
        bisect_region(out.suspects, region, store.latest(Branch.MACHINE, INITIAL),
                      prog, NO_FAULT, SCHED, store)


def test_clean_count_is_one_full_run():
    prog = generate_program(4, 100, 25, seed=2)
    verdict = locate(prog, NO_FAULT, SCHED)
    assert verdict.kind is VerdictKind.CLEAN
    trace, _ = Simulator(prog).run()
    assert verdict.executed_instruction_count == len(trace)


def test_unobservable_dropped_store_is_clean():
    prog = build_program([["ST SHARED[3], r0", "LI r1, 1", "ST PRIV[0], r1"]])
    fault = FaultSpec(FaultKind.DROPPED_STORE, 0, 0)
    clean = Simulator(prog)
    clean.run()
    faulty = Simulator(prog, fault)
    faulty.run()
    assert clean.state.same_values(faulty.state)
    assert locate(prog, fault, SCHED).kind is VerdictKind.CLEAN


def test_dropped_store_located():
    prog = build_program([["LI r1, 4", "ST SHARED[3], r1", "SYNC 1"], ["SYNC 1", "LD r2, SHARED[3]"]])
    verdict = locate(prog, FaultSpec(FaultKind.DROPPED_STORE, 0, 1), SCHED)
    assert verdict.culprit.key == (0, 1)


def test_branch_flip_reports_the_branch():
    prog = build_program([["LI r1, 0", "BEQZ r1, +3", "LI r2, 5", "ST SHARED[0], r2",
                           "LI r3, 1", "SYNC 1"], ["SYNC 1"]])
    verdict = locate(prog, FaultSpec(FaultKind.BRANCH_FLIP, 0, 1), SCHED)
    assert verdict.kind is VerdictKind.ERROR_TRIGGERED
    assert verdict.culprit.key == (0, 1) and verdict.control_suspect


def test_wrong_condition_value_located_through_branch():
    prog = build_program([["LI r1, 0", "LI r4, 2", "BEQZ r1, +3", "LI r2, 5", "ST SHARED[0], r2",
                           "LI r3, 1", "ST PRIV[0], r4", "SYNC 1"], ["SYNC 1"]])
    # r1 is read only by the branch; the fault shows up as the skipped writes
    verdict = locate(prog, wrong(0, 0, 1), SCHED)
    assert verdict.culprit.key == (0, 0) and verdict.control_suspect


def test_early_fault_costs_less_than_a_full_run():
    prog = generate_program(4, 300, 30, seed=5)
    first_sync = next(i.pc for i in prog[0] if i.barrier_id is not None)
    fault = next(f for f in (wrong(0, i.pc, 9) for i in prog[0][:first_sync] if i.dest is not None)
                 if final_state_differs(prog, f))
    verdict = locate(prog, fault, SCHED)
    assert verdict.culprit.key == fault.site
    trace, _ = Simulator(prog).run()
    assert verdict.executed_instruction_count < len(trace)


def test_verdict_json_fields():
    prog = build_program([["LI r1, 1", "ST SHARED[0], r1"]])
    record = locate(prog, wrong(0, 0, 1), SCHED).to_json()
    assert record["kind"] == "ERROR_TRIGGERED"
    assert record["culprit"]["core"] == 0 and record["culprit"]["pc"] == 0
    assert {"race", "region", "executed_instructions", "narrative"} <= set(record)


def test_three_core_race_reported():
    bodies = [["LI r1, 1", "SYNC 1", "LI r1, 2"],
              ["LI r1, 1", "SYNC 1", "LI r2, 5", "LI r4, 1", "LI r4, 2", "ST SHARED[0], r2",
               "SYNC 2", "LI r1, 3"],
              ["LI r3, 9", "ST SHARED[0], r3", "SYNC 2", "LI r1, 2"]]
    prog = build_program(bodies)
    kinds = set()
    for seed in range(20):
        v = locate(prog, NO_FAULT, SchedulerConfig(seed, 2))
        kinds.add(v.kind)
        if v.kind is VerdictKind.DATA_RACE:
            assert v.race.pair() == {(1, 5), (2, 1)} and v.race.kind.value == "WAW"
    assert VerdictKind.DATA_RACE in kinds and VerdictKind.ERROR_TRIGGERED not in kinds


def test_benign_divergence_from_unsynchronized_core():
    # core 2 joins no barrier, so its store may or may not precede barrier 1
    prog = build_program([["LI r1, 1", "SYNC 1", "LI r1, 2"], ["LI r1, 1", "SYNC 1"],
                          ["LI r3, 9", "ST SHARED[9], r3"]])
    kinds = {locate(prog, NO_FAULT, SchedulerConfig(s, 1)).kind for s in range(10)}
    assert VerdictKind.BENIGN_DIVERGENCE in kinds
    assert kinds <= {VerdictKind.CLEAN, VerdictKind.BENIGN_DIVERGENCE}


def manifested_race(seed):
    rng = random.Random(seed)
    inj = generate_racy_program(rng.randint(2, 5), rng.randint(40, 150), 40, seed)
    for s in range(40):
        sched = SchedulerConfig(s, 8)
        verdict = locate(inj.program, NO_FAULT, sched)
        if verdict.kind is not VerdictKind.CLEAN:
            return inj, sched, verdict
    return inj, None, None


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_race_verdict_matches_happens_before(seed):
    inj, sched, verdict = manifested_race(seed)
    if sched is None:
        return
    assert verdict.kind is VerdictKind.DATA_RACE
    trace, _ = Simulator(inj.program, NO_FAULT, sched).run()
    oracle = hb_races(trace.entries, trace.releases, inj.program.core_count)
    assert set(oracle) == {frozenset((inj.first, inj.second))}
    kind, loc = oracle[verdict.race.pair()]
    assert verdict.race.kind.value == kind and verdict.race.location == loc


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_soundness_of_culprit(seed):
    rng = random.Random(seed)
    prog = generate_program(rng.randint(2, 4), rng.randint(40, 120), 30, seed)
    fault = place_fault(prog, seed)
    verdict = locate(prog, fault, SchedulerConfig(seed, rng.randint(1, 8)))
    assert verdict.culprit.key == fault.site
    rec = next(r for r in verdict.checks if r.instr.key == verdict.culprit.key)
    assert rec.failed and rec.dut_value != rec.ref_value

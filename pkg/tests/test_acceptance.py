"""Acceptance suite: one test per criterion, each prints a PASS/FAIL line."""

import os
import random
import subprocess
import sys
import time

import numpy as np

import conftest
from oracles import backward_slice, bfs_parallel, hb_races, naive_diff, random_topology
from syncloc.deptree import build_tree, scope_for, tree_instructions
from syncloc.errors import CorruptObject
from syncloc.harness import (PUBLISHED_MEAN_5_CORES_500, ExperimentConfig, generate_program,
                             generate_racy_program, place_fault, run_experiment)
from syncloc.isa import build_program, wrap
from syncloc.localizer import VerdictKind, locate
from syncloc.machine import NO_FAULT, SchedulerConfig, Simulator
from syncloc.regions import StepCounter, analyze, build_region_graph, divide_into_regions
from syncloc.store import Branch, Snapshot, SnapshotStore, diff_snapshots

from test_store import SMALL, random_snapshot


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def r_squared(x, y, degree):
    coeffs = np.polyfit(x, y, degree)
    fit = np.polyval(coeffs, x)
    ss_res = float(np.sum((np.asarray(y) - fit) ** 2))
    ss_tot = float(np.sum((np.asarray(y) - np.mean(y)) ** 2))
    return 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot


def test_ac1_ground_truth_localization():
    start = time.perf_counter()
    trials = misses = 0
    first_miss = None
    for seed in range(300):
        rng = random.Random(f"ac1-{seed}")
        prog = generate_program(rng.randint(2, 8), rng.randint(100, 500), 50, seed)
        fault = place_fault(prog, seed)
        verdict = locate(prog, fault, SchedulerConfig(rng.getrandbits(32), 8))
        trials += 1
        hit = (verdict.kind is VerdictKind.ERROR_TRIGGERED
               and verdict.culprit is not None and verdict.culprit.key == fault.site)
        if not hit:
            misses += 1
            first_miss = first_miss or (seed, verdict.kind.value, fault.site)
    elapsed = time.perf_counter() - start
    ok = misses == 0 and elapsed < 120
    record("AC1 ground-truth localization", ok,
           f"{trials - misses}/{trials} hits in {elapsed:.1f}s (limit 120s)"
           + (f", first miss {first_miss}" if first_miss else ""))
    assert ok


def _manifested(seed):
    rng = random.Random(f"ac2-{seed}")
    inj = generate_racy_program(rng.randint(2, 6), rng.randint(60, 200), 40, seed)
    for s in range(200):
        sched = SchedulerConfig(s, 8)
        verdict = locate(inj.program, NO_FAULT, sched)
        if verdict.kind is not VerdictKind.CLEAN:
            trace, _ = Simulator(inj.program, NO_FAULT, sched).run()
            return inj, hb_races(trace.entries, trace.releases, inj.program.core_count), verdict
    return inj, None, None


def test_ac2_race_detection():
    bad = []
    for seed in range(100):
        inj, races, verdict = _manifested(seed)
        if verdict is None:
            bad.append((seed, "never manifested"))
            continue
        expected = frozenset((inj.first, inj.second))
        if verdict.kind is not VerdictKind.DATA_RACE:
            bad.append((seed, verdict.kind.value))
        elif set(races) != {expected} or verdict.race.pair() != expected:
            bad.append((seed, "pair mismatch"))
        else:
            kind, loc = races[expected]
            consistent = kind in ("WAW", "RAW", "WAR") and (kind == "WAW") == (inj.access == "WW")
            if verdict.race.kind.value != kind or verdict.race.location != loc or not consistent:
                bad.append((seed, f"kind {verdict.race.kind.value} vs {kind}"))
    false_races = 0
    for seed in range(100):
        rng = random.Random(f"ac2-free-{seed}")
        prog = generate_program(rng.randint(2, 6), rng.randint(60, 200), 40, seed)
        if locate(prog, NO_FAULT, SchedulerConfig(seed, rng.randint(1, 8))).kind \
                is VerdictKind.DATA_RACE:
            false_races += 1
    ok = not bad and false_races == 0
    record("AC2 race detection", ok,
           f"{100 - len(bad)}/100 injected races reported with the oracle pair, "
           f"{false_races} false DATA_RACE on 100 race-free programs"
           + (f", first failure {bad[0]}" if bad else ""))
    assert ok


def test_ac3_executed_instruction_magnitudes():
    start = time.perf_counter()
    config = ExperimentConfig()
    stats = run_experiment(config)
    elapsed = time.perf_counter() - start
    problems = []
    for cores in config.core_counts:
        for instrs in config.instructions_per_core:
            mean = stats.mean(cores, instrs)
            if mean is None or not mean < cores * instrs * 2:
                problems.append(f"{cores}x{instrs} mean {mean}")
    for cores in config.core_counts:
        row = [stats.mean(cores, i) for i in config.instructions_per_core]
        if any(b < a for a, b in zip(row, row[1:])):
            problems.append(f"row {cores} not monotone: {row}")
    for instrs in config.instructions_per_core:
        col = [stats.mean(c, instrs) for c in config.core_counts]
        if any(b < a for a, b in zip(col, col[1:])):
            problems.append(f"column {instrs} not monotone: {col}")
    anchor = stats.mean(5, 500)
    if anchor is None or not PUBLISHED_MEAN_5_CORES_500 / 5 <= anchor <= PUBLISHED_MEAN_5_CORES_500 * 5:
        problems.append(f"5x500 mean {anchor} outside factor 5 of {PUBLISHED_MEAN_5_CORES_500}")
    if elapsed >= 900:
        problems.append(f"took {elapsed:.0f}s")
    print(stats.table())
    ok = not problems
    record("AC3 executed-instruction magnitudes", ok,
           f"5x500 mean {anchor:.0f}, 30x1500 mean {stats.mean(30, 1500):.0f}, "
           f"{elapsed:.0f}s (limit 900s)" + (f"; {problems}" if problems else ""))
    assert ok


def test_ac4_oracle_equivalences():
    topo_bad = 0
    for seed in range(200):
        prog = random_topology(random.Random(f"ac4a-{seed}"))
        graph = analyze(prog)
        oracle = bfs_parallel(prog)
        if any({q.id for q in graph.parallel_sets[r]} != oracle[r.id] for r in graph.regions):
            topo_bad += 1

    slice_bad = slices = 0
    seed = 0
    while slices < 200:
        rng = random.Random(f"ac4b-{seed}")
        seed += 1
        prog = generate_program(rng.randint(2, 4), rng.randint(30, 90),
                                rng.choice((10, 15, 30)), seed)
        graph = analyze(prog)
        sim = Simulator(prog, sched=SchedulerConfig(seed, rng.randint(1, 6)))
        sim.run()
        rel = rng.choice(sim.trace.releases[1:])
        currents = graph.closing(rel.barrier)
        scope = scope_for(graph, currents)
        lookup = graph.region_lookup()
        written = sorted({e.instr.dest for e in sim.trace.entries[:rel.position]
                          if e.instr.dest is not None and lookup.get(e.instr.key) in scope})
        if not written:
            continue
        root = rng.choice(written)
        tree = build_tree(root, sim.trace, graph, currents, rel.position)
        oracle = backward_slice(sim.trace.entries, rel.position, root,
                                lambda c, pc: lookup.get((c, pc)) in scope)
        slices += 1
        if {i.key for i in tree_instructions(tree)} != oracle:
            slice_bad += 1

    diff_bad = 0
    for seed in range(100):
        rng = random.Random(f"ac4c-{seed}")
        a = random_snapshot(rng, cores=3)
        b = a.to_state()
        for _ in range(rng.randint(0, 12)):
            c = rng.randrange(3)
            which = rng.randrange(3)
            if which == 0:
                i = rng.randrange(SMALL.shared_words)
                b.shared_mem[i] = wrap(b.shared_mem[i] + rng.randint(1, 9))
            elif which == 1:
                i = rng.randrange(SMALL.priv_words)
                b.priv_mem[c][i] = wrap(b.priv_mem[c][i] + 1)
            else:
                i = rng.randrange(SMALL.n_regs)
                b.regs[c][i] = wrap(b.regs[c][i] - 1)
        b = Snapshot.from_state(b)
        if [(e.kind, e.core, e.start, e.end) for e in diff_snapshots(a, b)] != naive_diff(a, b):
            diff_bad += 1

    ok = topo_bad == slice_bad == diff_bad == 0
    record("AC4 oracle equivalences", ok,
           f"parallel sets {200 - topo_bad}/200, slices {slices - slice_bad}/{slices}, "
           f"diffs {100 - diff_bad}/100")
    assert ok


def test_ac5_store_semantics(tmp_path):
    rng = random.Random("ac5")
    store = SnapshotStore(tmp_path / "store")
    round_trip_bad = 0
    for i in range(100):
        snap = random_snapshot(rng, cores=3)
        ref = store.commit(Branch.MACHINE, f"rt{i}", snap)
        back = store.checkout(ref)
        if back != snap or back.root_hash != snap.root_hash:
            round_trip_bad += 1

    versions = [random_snapshot(rng, cores=3) for _ in range(4)]
    refs = [store.commit(Branch.MODEL, 1, s) for s in versions]
    history_ok = all(store.checkout(r) == s for r, s in zip(refs, versions))
    history_ok = history_ok and [r.version for r in refs] == [1, 2, 3, 4]

    tamper_caught = 0
    for i in range(10):
        root = tmp_path / f"tamper{i}"
        victim_store = SnapshotStore(root)
        ref = victim_store.commit(Branch.MACHINE, 1, random_snapshot(rng))
        objects = sorted((root / "objects").iterdir())
        victim = objects[rng.randrange(len(objects))]
        data = bytearray(victim.read_bytes())
        data[rng.randrange(len(data))] ^= 1 << rng.randrange(8)
        victim.write_bytes(bytes(data))
        try:
            SnapshotStore(root).checkout(ref)
        except CorruptObject:
            tamper_caught += 1

    ok = round_trip_bad == 0 and history_ok and tamper_caught == 10
    record("AC5 store semantics", ok,
           f"round trips {100 - round_trip_bad}/100, history after 3 later versions "
           f"{'kept' if history_ok else 'lost'}, tamper detected {tamper_caught}/10")
    assert ok


def _full_barrier_program(cores, barriers, body):
    rows = []
    for _ in range(cores):
        lines = []
        for b in range(1, barriers + 1):
            lines += ["ADD r1, r1, r2"] * body + [f"SYNC {b}"]
        rows.append(lines + ["ADD r1, r1, r2"] * body)
    return build_program(rows)


def test_ac6_complexity_witnesses():
    ns, divide_steps = [], []
    for n in (10 ** 3, 10 ** 4, 10 ** 5):
        prog = _full_barrier_program(4, n // 400, 99)
        counter = StepCounter()
        divide_into_regions(prog, counter)
        ns.append(prog.n)
        divide_steps.append(counter.count)
    linear_r2 = r_squared(ns, divide_steps, 1)

    ss, graph_steps = [], []
    for s in (10, 50, 100, 200):
        prog = _full_barrier_program(5, s // 5 - 1, 2)
        regions = divide_into_regions(prog)
        counter = StepCounter()
        build_region_graph(regions, counter)
        ss.append(len(regions))
        graph_steps.append(counter.count)
    quad_r2 = r_squared(ss, graph_steps, 2)
    # at most quadratic: doubling s from 100 to 200 may not cost more than ~4x
    growth = graph_steps[-1] / graph_steps[-2]

    ok = linear_r2 >= 0.99 and quad_r2 >= 0.99 and growth <= 4.5 and ss == [10, 50, 100, 200]
    record("AC6 complexity witnesses", ok,
           f"divide R^2 linear {linear_r2:.5f} over n={ns}; graph R^2 quadratic {quad_r2:.5f} "
           f"over s={ss}, steps {graph_steps}, growth 100->200 {growth:.2f}x")
    assert ok


def test_ac7_experiment_determinism(tmp_path):
    outputs = []
    for name in ("a.json", "b.json"):
        out = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "syncloc.cli", "experiment", "--cores", "2,3",
                               "--instrs", "100,200", "--trials", "3", "--seed", "11",
                               "-o", str(out)], capture_output=True, text=True,
                              env={**os.environ, "PYTHONHASHSEED": str(len(outputs) + 1)})
        assert proc.returncode == 0, proc.stderr
        outputs.append(out.read_bytes())
    ok = outputs[0] == outputs[1]
    record("AC7 experiment determinism", ok,
           f"two runs {'byte-identical' if ok else 'differ'} ({len(outputs[0])} bytes)")
    assert ok

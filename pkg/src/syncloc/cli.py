"""Command-line front end: ``syncloc gen|locate|experiment|dump-graph|diff``."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

from .errors import SynclocError
from .harness import (ExperimentConfig, generate_program, generate_racy_program, place_fault,
                      run_experiment)
from .isa import format_program, parse_program
from .localizer import VerdictKind, locate
from .machine import FaultKind, FaultSpec, SchedulerConfig
from .regions import analyze, insert_sync_points, to_dot
from .store import SnapshotStore, StoreRef, diff_snapshots

EXIT_CODES = {VerdictKind.CLEAN: 0, VerdictKind.BENIGN_DIVERGENCE: 0,
              VerdictKind.DATA_RACE: 2, VerdictKind.ERROR_TRIGGERED: 3}


def read_config(path) -> dict:
    """``key = value`` lines, ``#`` comments; returns a flat dict of strings."""
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[config]\n" + Path(path).read_text())
    return dict(parser["config"])


def _int(text: str) -> int:
    return int(text, 0)


def _int_list(text: str) -> list:
    return [_int(x) for x in text.replace(",", " ").split()]


def _fault_from(cfg: dict, fault_arg, prog, seed) -> FaultSpec:
    if fault_arg == "auto":
        return place_fault(prog, seed)
    if fault_arg:
        parts = fault_arg.split(":")
        kind = parts[0].upper()
        nums = [_int(x) for x in parts[1:]] + [0] * (3 - len(parts[1:]))
        return FaultSpec(FaultKind(kind), *nums[:3])
    if "fault.kind" not in cfg:
        return FaultSpec()
    return FaultSpec(FaultKind(cfg["fault.kind"].upper()), _int(cfg.get("fault.core", "0")),
                     _int(cfg.get("fault.pc", "0")), _int(cfg.get("fault.delta", "0")))


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen(args) -> int:
    if args.racy:
        inj = generate_racy_program(args.cores, args.instrs, args.region_length, args.seed)
        prog = inj.program
        header = (f"# injected {inj.access} pair on {inj.location}: "
                  f"c{inj.first[0]}@{inj.first[1]} and c{inj.second[0]}@{inj.second[1]}\n")
    else:
        prog = generate_program(args.cores, args.instrs, args.region_length, args.seed)
        header = ""
    _emit(header + format_program(prog), args.output)
    return 0


def _load_program(path, max_region):
    prog = parse_program(Path(path).read_text())
    if max_region:
        prog = insert_sync_points(prog, max_region)
    return prog


def cmd_locate(args) -> int:
    cfg = read_config(args.config) if args.config else {}
    prog = _load_program(args.program, args.max_region or _int(cfg.get("region.max_len", "0")))
    seed = args.seed if args.seed is not None else _int(cfg.get("sched.seed", "0"))
    sched = SchedulerConfig(seed, _int(cfg.get("sched.quantum_max", str(args.quantum_max))))
    fault = _fault_from(cfg, args.fault, prog, seed)
    store = SnapshotStore(args.store) if args.store else SnapshotStore()
    verdict = locate(prog, fault, sched, store)
    if args.json:
        record = verdict.to_json()
        record["fault"] = fault.to_json()
        sys.stdout.write(json.dumps(record, indent=2, sort_keys=True) + "\n")
    else:
        print(f"verdict: {verdict.kind.value}")
        if verdict.culprit is not None:
            print(f"culprit: {verdict.culprit} in region {verdict.region.label}")
        if verdict.race is not None:
            r = verdict.race
            print(f"race: {r.kind.value} on {r.location}: {r.first} / {r.second}")
        print(f"executed instructions: {verdict.executed_instruction_count}")
        for line in verdict.narrative:
            print(f"  {line}")
    return EXIT_CODES[verdict.kind]


def cmd_experiment(args) -> int:
    cfg = read_config(args.config) if args.config else {}
    kwargs = {}
    for key in ("core_counts", "instructions_per_core"):
        if key in cfg:
            kwargs[key] = _int_list(cfg[key])
    for key in ("trials", "region_length_target", "rng_seed", "quantum_max"):
        if key in cfg:
            kwargs[key] = _int(cfg[key])
    if args.cores:
        kwargs["core_counts"] = _int_list(args.cores)
    if args.instrs:
        kwargs["instructions_per_core"] = _int_list(args.instrs)
    if args.trials is not None:
        kwargs["trials"] = args.trials
    if args.seed is not None:
        kwargs["rng_seed"] = args.seed
    config = ExperimentConfig(**kwargs)

    def progress(cores, instrs, result):
        logging.info("cores=%d instrs=%d trial=%d executed=%s verdict=%s", cores, instrs,
                     result.trial, result.executed, result.verdict)

    stats = run_experiment(config, args.store, progress)
    if args.output:
        Path(args.output).write_text(stats.dumps())
    if args.json:
        sys.stdout.write(stats.dumps())
    else:
        sys.stdout.write(stats.table())
    return 0


def cmd_dump_graph(args) -> int:
    prog = _load_program(args.program, args.max_region)
    _emit(to_dot(analyze(prog)), args.output)
    return 0


def cmd_diff(args) -> int:
    store = SnapshotStore(args.store)
    a = store.checkout(StoreRef.parse(args.machine))
    b = store.checkout(StoreRef.parse(args.model))
    report = diff_snapshots(a, b)
    if args.json:
        sys.stdout.write(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="syncloc",
                                description="Locate error-triggered instructions and data races "
                                            "in multicore programs with barriers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="emit a generated program")
    g.add_argument("--cores", type=int, default=4)
    g.add_argument("--instrs", type=int, default=200, help="body instructions per core")
    g.add_argument("--region-length", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--racy", action="store_true", help="inject one conflicting shared-memory pair")
    g.add_argument("-o", "--output")
    g.set_defaults(func=cmd_gen)

    loc = sub.add_parser("locate", help="run the localization pipeline on a program file")
    loc.add_argument("program")
    loc.add_argument("--store", help="snapshot store directory (default: in memory)")
    loc.add_argument("--seed", type=int, help="DUT scheduler seed")
    loc.add_argument("--quantum-max", type=int, default=8)
    loc.add_argument("--config", help="key=value file (fault.*, sched.*, region.max_len)")
    loc.add_argument("--fault", help="KIND:core:pc[:delta], or 'auto' to place one")
    loc.add_argument("--max-region", type=int, default=0,
                     help="insert barriers so no region is longer than this")
    loc.add_argument("--json", action="store_true")
    loc.set_defaults(func=cmd_locate)

    ex = sub.add_parser("experiment", help="executed-instruction sweep")
    ex.add_argument("--cores", help="comma-separated core counts")
    ex.add_argument("--instrs", help="comma-separated instructions per core")
    ex.add_argument("--trials", type=int)
    ex.add_argument("--seed", type=int)
    ex.add_argument("--config")
    ex.add_argument("--store", help="root directory for per-trial stores (default: in memory)")
    ex.add_argument("-o", "--output", help="write stats JSON here")
    ex.add_argument("--json", action="store_true")
    ex.set_defaults(func=cmd_experiment)

    dg = sub.add_parser("dump-graph", help="region graph in DOT form")
    dg.add_argument("program")
    dg.add_argument("--max-region", type=int, default=0)
    dg.add_argument("-o", "--output")
    dg.set_defaults(func=cmd_dump_graph)

    df = sub.add_parser("diff", help="diff two committed snapshots, e.g. MACHINE:3:1 MODEL:3:1")
    df.add_argument("machine")
    df.add_argument("model")
    df.add_argument("--store", required=True)
    df.add_argument("--json", action="store_true")
    df.set_defaults(func=cmd_diff)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SynclocError, OSError, ValueError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        print(f"syncloc: {code}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

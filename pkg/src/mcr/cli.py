"""Command-line entry point.

    mcr run      --net <option> --np <N> --tasks-per-proc <T>
                 --bench heatdis|comm --ckpt-mode none|transparent|l1|l2|l3|l4
                 --ckpt-every <steps> --seed <u64> --out <dir>
    mcr restart  --manifest <path> [--out <dir>]
    mcr recover  --level <1-4> [--from <dir>] [--out <dir>]
    mcr inject   --step <s> --ranks <list> [run flags]
    mcr budget   --tc <sec> --overhead <fraction>

Reports land in --out as CSV files with rendered PNG companions; checkpoint
data goes under <out>/ckpt unless --ckpt-dir points elsewhere.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import reports
from .ckpt_multilevel import GroupConfig
from .ckpt_transparent import checkpoint_period, config_digest, epoch_dir
from .commbench import CommBenchConfig, resume_comm_bench, run_comm_bench
from .config import DEFAULT_CONFIG
from .errors import McrError
from .faults import FaultPlan
from .heatdis import HeatdisConfig, resume_heatdis, run_heatdis
from .runtime import RuntimeOptions


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcr",
                                description="message-passing checkpoint/restart runtime")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a benchmark")
    _add_run_flags(run)

    restart = sub.add_parser("restart", help="restart from a manifest")
    restart.add_argument("--manifest", required=True)
    restart.add_argument("--out", default="mcr-out")
    restart.add_argument("--io-yield", action="store_true")

    recover = sub.add_parser("recover", help="recover an app-level checkpointed run")
    recover.add_argument("--level", type=int, required=True, choices=(1, 2, 3, 4))
    recover.add_argument("--from", dest="from_dir", default="mcr-out",
                         help="output dir of the original run (reads run.json)")
    recover.add_argument("--out", default=None)

    inject = sub.add_parser("inject", help="run with an injected fault")
    _add_run_flags(inject)
    inject.add_argument("--step", type=int, required=True)
    inject.add_argument("--ranks", required=True,
                        help="comma-separated victim process ids")

    budget = sub.add_parser("budget", help="checkpoint frequency budgeting")
    budget.add_argument("--tc", type=float, required=True,
                        help="checkpoint duration in seconds")
    budget.add_argument("--overhead", type=float, required=True,
                        help="target overhead fraction, e.g. 0.01")
    return p


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--net", default=None, help="net option name from the config")
    p.add_argument("--np", type=int, default=4, dest="nprocs")
    p.add_argument("--tasks-per-proc", type=int, default=1)
    p.add_argument("--bench", choices=("heatdis", "comm"), default="heatdis")
    p.add_argument("--ckpt-mode", default="none",
                   choices=("none", "transparent", "l1", "l2", "l3", "l4"))
    p.add_argument("--ckpt-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="mcr-out")
    p.add_argument("--ckpt-dir", default=None)
    p.add_argument("--config", default=None, help="rail config file")
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--cols", type=int, default=64)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--sizes", default="64,1024,65536",
                   help="comm bench message sizes, comma separated")
    p.add_argument("--rounds", type=int, default=4)
    p.add_argument("--io-yield", action="store_true",
                   help="insert yield points inside storage transfers")
    p.add_argument("--helper-mode", choices=("inline", "helper_task"),
                   default="helper_task")
    p.add_argument("--group-k", type=int, default=4)
    p.add_argument("--group-m", type=int, default=2)
    p.add_argument("--trace", action="store_true", help="write trace.csv")
    p.add_argument("--no-reference", action="store_true",
                   help="skip the reference run used for the overhead report")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "budget":
            tau = checkpoint_period(args.tc, args.overhead)
            print(f"tau_seconds={tau:g}")
            return 0
        if args.command == "run":
            return _cmd_run(args, fault=None)
        if args.command == "inject":
            victims = {int(r) for r in args.ranks.split(",") if r != ""}
            fault = FaultPlan(step=args.step, victims=victims)
            return _cmd_run(args, fault=fault)
        if args.command == "restart":
            return _cmd_restart(args)
        if args.command == "recover":
            return _cmd_recover(args)
    except McrError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 2


def _options(args) -> RuntimeOptions:
    return RuntimeOptions(io_yield=args.io_yield)


def _net_for(args) -> str:
    if args.net:
        return args.net
    return "fti_mix" if args.ckpt_mode.startswith("l") else "mixed"


def _config_text(args) -> str:
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            return f.read()
    return DEFAULT_CONFIG


def _cmd_run(args, fault) -> int:
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = args.ckpt_dir or os.path.join(out_dir, "ckpt")
    net = _net_for(args)
    descriptor = {
        "bench": args.bench, "net": net, "np": args.nprocs,
        "tasks_per_proc": args.tasks_per_proc, "ckpt_mode": args.ckpt_mode,
        "ckpt_every": args.ckpt_every, "seed": args.seed,
        "rows": args.rows, "cols": args.cols, "iterations": args.iterations,
        "sizes": args.sizes, "rounds": args.rounds,
        "io_yield": args.io_yield, "helper_mode": args.helper_mode,
        "group_k": args.group_k, "group_m": args.group_m,
        "ckpt_dir": ckpt_dir,
    }
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump(descriptor, f, sort_keys=True, indent=1)

    if args.bench == "heatdis":
        rc = _run_heatdis(args, out_dir, ckpt_dir, net, fault)
    else:
        rc = _run_comm(args, out_dir, ckpt_dir, net, fault)
    return rc


def _heatdis_cfg(args) -> HeatdisConfig:
    return HeatdisConfig(rows=args.rows, cols=args.cols,
                         iterations=args.iterations,
                         ranks=args.nprocs * args.tasks_per_proc,
                         ckpt_every=args.ckpt_every, ckpt_mode=args.ckpt_mode)


def _group(args, ranks) -> GroupConfig:
    k = min(args.group_k, ranks)
    m = args.group_m if ranks > k else 0
    return GroupConfig(k, m)


def _run_heatdis(args, out_dir, ckpt_dir, net, fault) -> int:
    cfg = _heatdis_cfg(args)
    result, rt = run_heatdis(cfg, seed=args.seed, ckpt_dir=ckpt_dir,
                             net_option=net, options=_options(args),
                             fault_plan=fault, helper_mode=args.helper_mode,
                             tasks_per_process=args.tasks_per_proc,
                             group=_group(args, cfg.ranks))
    record = reports.RunRecord(
        seed=args.seed, config_sha=config_digest(rt.config_text, rt.jobspec),
        with_ckpt=args.ckpt_mode != "none",
        total_ticks=result.virtual_walltime,
        ckpt_ticks=result.counters.get("ckpt_ticks", 0.0),
        reconnects=result.counters.get("reconnects", 0))
    grid = result.grid(cfg) if result.grid_bytes else None
    reports.write_heatdis_report(out_dir, result, grid)
    if args.trace:
        reports.write_trace(out_dir, rt.trace)
    if args.ckpt_mode != "none" and not args.no_reference \
            and result.outcome.status == "completed":
        _heatdis_overhead(args, out_dir, record)
    print(f"status={result.outcome.status}")
    print(f"digest={result.digest}")
    print(f"residual={result.residual:g}")
    print(f"virtual_walltime={result.virtual_walltime:g}")
    if result.outcome.status == "killed" and args.ckpt_mode == "transparent":
        epoch = rt.coordinator.last_epoch if rt.coordinator else None
        if epoch:
            print(f"manifest={os.path.join(epoch_dir(ckpt_dir, rt.job_id, epoch), 'manifest.txt')}")
    rt.close()
    return 0


def _heatdis_overhead(args, out_dir, record) -> None:
    ref_cfg = HeatdisConfig(rows=args.rows, cols=args.cols,
                            iterations=args.iterations,
                            ranks=args.nprocs * args.tasks_per_proc)
    ref_result, ref_rt = run_heatdis(
        ref_cfg, seed=args.seed, net_option=_net_for(args),
        options=_options(args), tasks_per_process=args.tasks_per_proc)
    ref_record = reports.RunRecord(
        seed=args.seed,
        config_sha=config_digest(ref_rt.config_text, ref_rt.jobspec),
        with_ckpt=False, total_ticks=ref_result.virtual_walltime)
    ref_rt.close()
    breakdown = reports.report_overhead_breakdown([ref_record, record])
    reports.write_overhead_report(out_dir, breakdown)


def _run_comm(args, out_dir, ckpt_dir, net, fault) -> int:
    sizes = tuple(int(s) for s in args.sizes.split(","))
    cfg = CommBenchConfig(sizes=sizes, ranks=args.nprocs, rounds=args.rounds,
                          with_checkpoint=args.ckpt_mode == "transparent")
    result, rt = run_comm_bench(cfg, seed=args.seed, ckpt_dir=ckpt_dir,
                                net_option=net, options=_options(args),
                                fault_plan=fault)
    reports.write_comm_report(out_dir, result)
    if args.trace:
        reports.write_trace(out_dir, rt.trace)
    print(f"status={result.outcome.status}")
    print(f"census_pre={result.census_pre}")
    print(f"reconnects={result.reconnects}")
    print(f"virtual_walltime={result.virtual_walltime:g}")
    if result.outcome.status == "killed" and cfg.with_checkpoint \
            and rt.coordinator and rt.coordinator.last_epoch:
        manifest = os.path.join(
            epoch_dir(ckpt_dir, rt.job_id, rt.coordinator.last_epoch),
            "manifest.txt")
        print(f"manifest={manifest}")
    rt.close()
    return 0


def _cmd_restart(args) -> int:
    from .ckpt_transparent import read_snapshot

    snap = read_snapshot(args.manifest)
    bench = snap.get("app", {}).get("bench", "")
    os.makedirs(args.out, exist_ok=True)
    options = RuntimeOptions(io_yield=args.io_yield)
    if bench == "heatdis":
        result, rt = resume_heatdis(args.manifest, options=options)
        cfg = HeatdisConfig(**rt.coordinator.app_meta["cfg"])
        grid = result.grid(cfg) if result.grid_bytes else None
        reports.write_heatdis_report(args.out, result, grid)
        print(f"status={result.outcome.status}")
        print(f"digest={result.digest}")
    elif bench == "comm":
        result, rt = resume_comm_bench(args.manifest, options=options)
        reports.write_comm_report(args.out, result)
        print(f"status={result.outcome.status}")
        print(f"reconnects={result.reconnects}")
    else:
        raise McrError(f"manifest does not describe a known bench: {bench!r}")
    print(f"virtual_walltime={result.virtual_walltime:g}")
    rt.close()
    return 0


def _cmd_recover(args) -> int:
    run_json = os.path.join(args.from_dir, "run.json")
    if not os.path.exists(run_json):
        raise McrError(f"no run.json under {args.from_dir}")
    with open(run_json, encoding="utf-8") as f:
        d = json.load(f)
    if d["bench"] != "heatdis":
        raise McrError("recover supports the heatdis bench")
    cfg = HeatdisConfig(rows=d["rows"], cols=d["cols"],
                        iterations=d["iterations"],
                        ranks=d["np"] * d["tasks_per_proc"],
                        ckpt_every=d["ckpt_every"], ckpt_mode=d["ckpt_mode"])
    group = GroupConfig(min(d["group_k"], cfg.ranks),
                        d["group_m"] if cfg.ranks > d["group_k"] else 0)
    out_dir = args.out or args.from_dir
    os.makedirs(out_dir, exist_ok=True)
    result, rt = run_heatdis(cfg, seed=d["seed"], ckpt_dir=d["ckpt_dir"],
                             net_option=d["net"],
                             options=RuntimeOptions(io_yield=d["io_yield"]),
                             recover_level=args.level,
                             helper_mode=d["helper_mode"],
                             tasks_per_process=d["tasks_per_proc"],
                             group=group)
    grid = result.grid(cfg) if result.grid_bytes else None
    reports.write_heatdis_report(out_dir, result, grid)
    print(f"status={result.outcome.status}")
    print(f"digest={result.digest}")
    print(f"residual={result.residual:g}")
    rt.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())

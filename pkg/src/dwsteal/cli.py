"""Command line: ``dwsteal run ...`` for experiments, ``dwsteal node ...``
for one socket-backend node process (normally started by ``run``)."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import metrics as ev
from .config import RunConfig
from .harness import audit, run_inproc, run_node_process, run_socket
from .bench import build_program
from .bench.cholesky import factor_from_results, reconstruction_error


def _on_off(s: str) -> bool:
    if s not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return s == "on"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dwsteal", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment and audit it")
    r.add_argument("--benchmark", choices=["cholesky", "uts", "bag"], default="cholesky")
    g = r.add_argument_group("cholesky")
    g.add_argument("--tiles", type=int, default=8, help="tiles per dimension")
    g.add_argument("--tile", type=int, default=16, help="elements per tile dimension")
    g.add_argument("--density", type=float, default=0.5)
    g.add_argument("--distribution", default="cyclic", help="cyclic | skewed:RANK")
    g = r.add_argument_group("uts")
    g.add_argument("--preset", default="desk", help="tiny | desk | large")
    g.add_argument("--uts-b0", type=int)
    g.add_argument("--uts-m", type=int)
    g.add_argument("--uts-q", type=float)
    g.add_argument("--uts-g", type=int)
    g.add_argument("--uts-g-mode", choices=["size", "work"], default="size",
                   help="read g as expected tree size or as per-node work repetitions")
    g.add_argument("--uts-no-affinity", action="store_true")
    g = r.add_argument_group("bag")
    g.add_argument("--bag-tasks", type=int, default=400)
    g.add_argument("--bag-pinned", type=float, default=0.5)

    g = r.add_argument_group("runtime")
    g.add_argument("--nodes", type=int, default=2)
    g.add_argument("--workers", type=int, default=2)
    g.add_argument("--backend", choices=["inproc", "socket"], default="inproc")
    g.add_argument("--hostfile", help="'rank host:port' per line (socket backend)")
    g.add_argument("--scheduler", choices=["ap", "2q"], default="2q")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--task-delay", type=float, default=0.0,
                   help="seconds of sleep per unit of kernel cost")
    g.add_argument("--timeout", type=float, default=60.0)
    g = r.add_argument_group("stealing")
    g.add_argument("--steal", type=_on_off, default=True, metavar="{on,off}")
    g.add_argument("--thief-policy", choices=["ready", "ready+succ"], default="ready+succ")
    g.add_argument("--victim-policy", choices=["single", "chunk", "half"], default="single")
    g.add_argument("--chunk-size", type=int, help="default: workers / 2")
    g.add_argument("--waiting-time-gate", type=_on_off, default=True, metavar="{on,off}")
    g = r.add_argument_group("metrics")
    g.add_argument("--interval-ms", type=float, default=ev.DEFAULT_INTERVAL_MS)
    g.add_argument("--out", default="dwsteal-out")
    r.add_argument("-v", "--verbose", action="store_true")

    n = sub.add_parser("node", help="run one socket-backend node (internal)")
    n.add_argument("--rank", type=int, required=True)
    n.add_argument("--hostfile", required=True)
    n.add_argument("--spec", required=True, help="benchmark description as JSON")
    n.add_argument("--config", required=True, help="RunConfig as JSON")
    n.add_argument("--origin-ns", type=int, required=True)
    n.add_argument("--out", required=True)
    return p


def spec_from_args(a) -> dict:
    if a.benchmark == "cholesky":
        return {"benchmark": "cholesky", "T": a.tiles, "tile": a.tile, "density": a.density,
                "distribution": a.distribution, "seed": a.seed}
    if a.benchmark == "uts":
        spec = {"benchmark": "uts", "preset": a.preset, "seed": a.seed,
                "g_mode": a.uts_g_mode, "affinity": not a.uts_no_affinity}
        for flag, name in (("uts_b0", "b0"), ("uts_m", "m"), ("uts_q", "q"), ("uts_g", "g")):
            if getattr(a, flag) is not None:
                spec[name] = getattr(a, flag)
        return spec
    return {"benchmark": "bag", "n_tasks": a.bag_tasks, "pinned_fraction": a.bag_pinned}


def config_from_args(a) -> RunConfig:
    return RunConfig(nodes=a.nodes, workers=a.workers, scheduler=a.scheduler, steal=a.steal,
                     thief_policy=a.thief_policy, victim_policy=a.victim_policy,
                     chunk_size=a.chunk_size, waiting_time_gate=a.waiting_time_gate,
                     seed=a.seed, task_delay=a.task_delay, interval_ms=a.interval_ms,
                     timeout=a.timeout,
                     migration_prior=5e-3 if a.backend == "socket" else 1e-3)


def run_experiment(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    if a.command == "node":
        cfg = RunConfig(**json.loads(a.config))
        return run_node_process(a.rank, json.loads(a.spec), cfg, a.hostfile, a.origin_ns, a.out)

    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        spec = spec_from_args(a)
        cfg = config_from_args(a)
        if cfg.nodes < 1 or cfg.workers < 1:
            raise ValueError("need --nodes >= 1 and --workers >= 1")
        # building the program validates the benchmark parameters
        program = build_program(spec)
    except ValueError as exc:
        parser.error(str(exc))
    os.makedirs(a.out, exist_ok=True)
    if a.backend == "inproc":
        result = run_inproc(program, cfg)
        for rank in range(cfg.nodes):
            log = ev.EventLog(rank, 0)
            log.records = [r for r in result.events if r[1] == rank]
            log.write(os.path.join(a.out, f"events.{rank}.ndjson"))
    else:
        result = run_socket(spec, cfg, hostfile=a.hostfile, out_dir=a.out)

    problems = audit(result)
    extra = {"benchmark": spec, "audit": problems,
             "tasks_done": sum(result.done_counter().values()),
             "per_node": [{"rank": n.rank, "done": len(n.done_keys), **n.ledger,
                           "scheduled_total": n.scheduled_total,
                           "rescheduled_total": n.rescheduled_total} for n in result.nodes]}
    if spec["benchmark"] == "cholesky":
        prob = result.program.meta["problem"]
        L = factor_from_results(result.results, prob.cfg.T, prob.cfg.tile)
        extra["reconstruction_error"] = reconstruction_error(prob.matrix, L)
        np.save(os.path.join(a.out, "factor.npy"), L)
    elif spec["benchmark"] == "uts":
        extra["tree_size"] = result.program.meta["tree_size"]
    summary = ev.export(a.out, cfg.to_dict(), result.intervals(), result.steal_stats,
                        result.makespan_ns, extra)
    print(json.dumps({"makespan_ms": summary["makespan_ns"] / 1e6,
                      "tasks_done": summary["tasks_done"],
                      "steal_success_pct": summary["steal"]["steal_success_pct"],
                      "audit_violations": len(problems), "out": a.out}))
    for msg in problems:
        print("AUDIT:", msg, file=sys.stderr)
    return 1 if problems else 0


def main():
    sys.exit(run_experiment())

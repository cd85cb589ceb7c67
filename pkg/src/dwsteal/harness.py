"""Run programs on a set of nodes and audit the result."""

from __future__ import annotations

import collections
import json
import os
import pickle
import socket
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field

from . import metrics as ev
from .bench import build_program
from .config import RunConfig, VictimKind
from .migrate import victim_bound
from .runtime import NodeRuntime, RunAborted
from .taskgraph import TaskGraphProgram
from .transport import BASIC_KINDS, InProcNetwork, Kind


@dataclass
class NodeReport:
    rank: int
    done_keys: list
    results: dict
    ledger: dict
    scheduled_total: int
    rescheduled_total: int
    leftover: dict
    sent: dict
    received: dict
    started_at_ns: int
    terminated_at_ns: int | None
    error: str | None = None


@dataclass
class RunResult:
    config: RunConfig
    program: TaskGraphProgram
    nodes: list
    events: list = field(repr=False)

    @property
    def makespan_ns(self) -> int:
        ends = [n.terminated_at_ns for n in self.nodes if n.terminated_at_ns is not None]
        if not ends:
            return 0
        return max(ends) - min(n.started_at_ns for n in self.nodes)

    @property
    def results(self) -> dict:
        merged = {}
        for n in self.nodes:
            merged.update(n.results)
        return merged

    def done_counter(self) -> collections.Counter:
        return collections.Counter(k for n in self.nodes for k in n.done_keys)

    @property
    def steal_stats(self) -> ev.StealStats:
        return ev.steal_stats(self.events)

    def intervals(self, interval_ms: float | None = None):
        ms = self.config.interval_ms if interval_ms is None else interval_ms
        return ev.interval_stats(self.events, self.config.nodes, ms)


def _report(node: NodeRuntime, started_at_ns: int) -> NodeReport:
    lg = node.migration.ledger
    return NodeReport(
        rank=node.rank,
        done_keys=list(node.done_keys),
        results=dict(node.results),
        ledger={"requests_sent": lg.requests_sent, "requests_granted": lg.requests_granted,
                "requests_denied": lg.requests_denied, "tasks_stolen_in": lg.tasks_stolen_in,
                "tasks_stolen_out": lg.tasks_stolen_out, "outstanding": lg.outstanding},
        scheduled_total=node.scheduler.stats.scheduled_total,
        rescheduled_total=node.scheduler.stats.rescheduled_total,
        leftover=node.leftover(),
        sent={k.name: v for k, v in node.endpoint.sent.items()},
        received={k.name: v for k, v in node.endpoint.received.items()},
        started_at_ns=started_at_ns,
        terminated_at_ns=node.terminated_at_ns,
        error=node.error,
    )


def _wait(nodes, timeout: float):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if all(n.stopping.is_set() for n in nodes):
            break
        if any(n.error for n in nodes):
            for n in nodes:
                n.stopping.set()
            break
        time.sleep(2e-3)
    else:
        for n in nodes:
            n.fail("run timed out")
        for n in nodes:
            n.join(5.0)
        raise RunAborted(f"run did not terminate within {timeout} s")
    for n in nodes:
        if not n.join(10.0):
            raise RunAborted(f"rank {n.rank} did not shut down")
    errors = [n.error for n in nodes if n.error]
    if errors:
        first = next(n for n in nodes if n.error)
        raise RunAborted("; ".join(errors)) from first.exc


def run_inproc(program: TaskGraphProgram, config: RunConfig, timeout: float | None = None,
               setup=None) -> RunResult:
    """Run every node as threads of this process.

    ``setup(nodes)`` is called after seeding and before the agents start.
    """
    n_nodes = config.nodes
    net = InProcNetwork(n_nodes)
    origin = time.time_ns()
    nodes = [NodeRuntime(r, program, net.endpoint(r), config, origin_ns=origin) for r in range(n_nodes)]
    for n in nodes:
        n.seed()
    if setup is not None:
        setup(nodes)
    started = nodes[0].events.now()
    for n in nodes:
        n.start()
    _wait(nodes, config.timeout if timeout is None else timeout)
    reports = [_report(n, started) for n in nodes]
    events = ev.merge_events(*(n.events for n in nodes))
    return RunResult(config, program, reports, events)


# socket backend: one OS process per node


def free_ports(n: int) -> list[int]:
    socks = []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def write_hostfile(path, n_nodes: int, host: str = "127.0.0.1") -> str:
    with open(path, "w") as fh:
        for r, port in enumerate(free_ports(n_nodes)):
            fh.write(f"{r} {host}:{port}\n")
    return path


def run_node_process(rank: int, spec: dict, config: RunConfig, hostfile: str,
                     origin_ns: int, out_dir: str) -> int:
    """Body of one socket-backend node process; writes its report to out_dir."""
    from .transport import SocketEndpoint, read_hostfile

    program = build_program(spec)
    endpoint = SocketEndpoint(rank, read_hostfile(hostfile))
    node = NodeRuntime(rank, program, endpoint, config, origin_ns=origin_ns)
    node.seed()
    started = node.events.now()
    node.start()
    deadline = time.monotonic() + config.timeout
    while not node.stopping.is_set() and time.monotonic() < deadline:
        time.sleep(2e-3)
    if not node.stopping.is_set():
        node.fail("run timed out")
    node.join(10.0)
    # let TERMINATE broadcasts drain before closing sockets
    time.sleep(0.2)
    endpoint.close()
    os.makedirs(out_dir, exist_ok=True)
    node.events.write(os.path.join(out_dir, f"events.{rank}.ndjson"))
    with open(os.path.join(out_dir, f"node.{rank}.pkl"), "wb") as fh:
        pickle.dump(_report(node, started), fh)
    return 0 if node.error is None else 1


def run_socket(spec: dict, config: RunConfig, hostfile: str | None = None,
               out_dir: str | None = None, timeout: float | None = None) -> RunResult:
    n_nodes = config.nodes
    out_dir = out_dir or tempfile.mkdtemp(prefix="dwsteal-")
    os.makedirs(out_dir, exist_ok=True)
    if hostfile is None:
        hostfile = write_hostfile(os.path.join(out_dir, "hostfile"), n_nodes)
    origin = time.time_ns()
    cfg_json = json.dumps(config.to_dict())
    procs = []
    for r in range(n_nodes):
        cmd = [sys.executable, "-m", "dwsteal", "node", "--rank", str(r),
               "--hostfile", hostfile, "--spec", json.dumps(spec), "--config", cfg_json,
               "--origin-ns", str(origin), "--out", out_dir]
        procs.append(subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.STDOUT))
    limit = (config.timeout if timeout is None else timeout) + 30
    outputs = []
    for p in procs:
        try:
            out, _ = p.communicate(timeout=limit)
        except subprocess.TimeoutExpired:
            for q in procs:
                q.kill()
            raise RunAborted("socket run timed out")
        outputs.append(out.decode(errors="replace"))
    bad = [(r, p.returncode) for r, p in enumerate(procs) if p.returncode != 0]
    if bad:
        raise RunAborted(f"node processes failed {bad}:\n" + "\n".join(outputs))
    reports, logs = [], []
    for r in range(n_nodes):
        with open(os.path.join(out_dir, f"node.{r}.pkl"), "rb") as fh:
            reports.append(pickle.load(fh))
        logs.append(ev.read_events(os.path.join(out_dir, f"events.{r}.ndjson")))
    return RunResult(config, build_program(spec), reports, ev.merge_events(*logs))


def run(spec: dict, config: RunConfig, backend: str = "inproc", **kw) -> RunResult:
    if backend == "inproc":
        return run_inproc(build_program(spec), config, timeout=kw.get("timeout"))
    if backend == "socket":
        return run_socket(spec, config, **kw)
    raise ValueError(f"unknown backend {backend!r}")


# audits


def audit(result: RunResult) -> list[str]:
    """Post-run invariant checks; returns human-readable violations."""
    problems = []
    cfg = result.config
    done = result.done_counter()
    dup = [k for k, c in done.items() if c != 1]
    if dup:
        problems.append(f"{len(dup)} keys DONE more than once, e.g. {dup[:3]}")
    created = {rec[3] for rec in result.events if rec[2] == ev.CREATE}
    never = created - set(done)
    if never:
        problems.append(f"{len(never)} created keys never DONE, e.g. {sorted(never)[:3]}")
    expected = result.program.meta.get("expected_keys")
    if expected is not None and set(expected) != set(done):
        problems.append(f"DONE set differs from the expected key set "
                        f"({len(set(done))} vs {len(set(expected))})")
    tree_size = result.program.meta.get("tree_size")
    if tree_size is not None and sum(done.values()) != tree_size:
        problems.append(f"UTS executed {sum(done.values())} nodes, tree has {tree_size}")
    for n in result.nodes:
        if n.leftover:
            problems.append(f"rank {n.rank} has leftover tasks {n.leftover}")
        if n.error:
            problems.append(f"rank {n.rank} error: {n.error}")
    for kind in BASIC_KINDS:
        s = sum(n.sent[kind.name] for n in result.nodes)
        r = sum(n.received[kind.name] for n in result.nodes)
        if s != r:
            problems.append(f"{kind.name}: sent {s} != received {r}")
    migrated_done = _migrated_then_done_locally(result.events)
    if migrated_done:
        problems.append(f"migrated tasks DONE on their victim: {migrated_done[:3]}")
    problems += audit_grants(result.events, cfg)
    problems += audit_outstanding(result.events)
    return problems


def _migrated_then_done_locally(events) -> list:
    migrated = collections.defaultdict(int)
    bad = []
    for _t, rank, kind, key, _d in events:
        if kind == ev.MIGRATED:
            migrated[(rank, key)] += 1
        elif kind == ev.STOLEN_IN:
            migrated[(rank, key)] -= 1
        elif kind == ev.DONE and migrated.get((rank, key), 0) > 0:
            bad.append((rank, key))
    return bad


def audit_grants(events, cfg: RunConfig) -> list[str]:
    problems = []
    for _t, rank, kind, _key, d in events:
        if kind != ev.GRANT_SENT:
            continue
        bound = victim_bound(VictimKind(d["policy"]), d["stealable"], cfg.effective_chunk)
        if d["count"] > bound or d["count"] > d["bound"]:
            problems.append(f"rank {rank} granted {d['count']} > bound {bound} "
                            f"({d['policy']}, stealable={d['stealable']})")
        if d["gate"] and d["wait_estimate"] is not None and not d["cost_estimate"] < d["wait_estimate"]:
            problems.append(f"rank {rank} granted with cost {d['cost_estimate']} "
                            f">= wait {d['wait_estimate']}")
    return problems


def audit_outstanding(events) -> list[str]:
    open_req: dict = {}
    problems = []
    for _t, rank, kind, _key, d in events:
        if kind == ev.STEAL_SENT:
            if open_req.get(rank) is not None:
                problems.append(f"rank {rank} sent request {d['request_id']} while "
                                f"{open_req[rank]} was unresolved")
            open_req[rank] = d["request_id"]
        elif kind in (ev.GRANT_RECV, ev.DENY_RECV):
            open_req[rank] = None
    return problems

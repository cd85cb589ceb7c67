import itertools
import math
import queue
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwsteal import metrics as ev
from dwsteal.bench import build_program
from dwsteal.bench.cholesky import (
    CholeskyConfig,
    build_cholesky,
    factor_from_results,
    reconstruction_error,
    successors,
)
from dwsteal.bench.synthetic import BagConfig, build_bag
from dwsteal.config import RunConfig
from dwsteal.harness import audit, run_inproc
from dwsteal.migrate import NO_ESTIMATE, waiting_time
from dwsteal.runtime import RunAborted
from dwsteal.taskgraph import (
    DataItem,
    DataKind,
    Output,
    TaskGraphProgram,
    TaskKey,
    TaskTemplate,
    topological_order,
)
from dwsteal.transport import Kind, decode


def scalar(v):
    return DataItem(DataKind.SCALAR, (v,))


def join_program():
    """Two producers (homed on ranks 1 and 2) feed one arity-2 join on rank 0."""
    JOIN, SRC = 1, 2

    def src_body(inputs, key):
        return [Output(key.index[0], TaskKey(JOIN, (0,)), inputs[0])]

    def join_body(inputs, key):
        return [Output(0, None, scalar(inputs[0].payload[0] + inputs[1].payload[0]))]

    def initial(rank, n_nodes):
        if rank in (1, 2):
            return [(TaskKey(SRC, (rank - 1,)), 0, scalar(10 * rank))]
        return []

    templates = {JOIN: TaskTemplate(JOIN, "JOIN", 2, join_body),
                 SRC: TaskTemplate(SRC, "SRC", 1, src_body)}
    return TaskGraphProgram("join", templates, initial,
                            lambda key, n_nodes: 0 if key.template_id == JOIN else key.index[0] + 1)


def chain_program(n=10):
    LINK = 3

    def body(inputs, key):
        i = key.index[0]
        if i + 1 < n:
            return [Output(0, TaskKey(LINK, (i + 1,)), scalar(i + 1))]
        return [Output(0, None, scalar(i))]

    tmpl = TaskTemplate(LINK, "LINK", 1, body, local_successors=lambda key, n_nodes: int(key.index[0] + 1 < n))
    return TaskGraphProgram("chain", {LINK: tmpl},
                            lambda rank, n_nodes: [(TaskKey(LINK, (0,)), 0, scalar(0))] if rank == 0 else [],
                            lambda key, n_nodes: 0)


def inserts(node):
    return [r for r in node.events if r[2] == ev.INSERT]


@pytest.mark.parametrize("order", [(0, 1), (1, 0)])
def test_arity_two_ready_after_second_fill(make_nodes, order):
    (node,) = make_nodes(join_program(), nodes=1)
    key = TaskKey(1, (0,))
    node.on_activate(key, order[0], scalar(1))
    assert inserts(node) == []
    node.on_activate(key, order[1], scalar(2))
    assert [r[3] for r in inserts(node)] == [key]
    assert node.scheduler.ready_count == 1


def test_join_from_two_nodes_runs_once():
    res = run_inproc(join_program(), RunConfig(nodes=3, workers=1, steal=False), timeout=20)
    assert audit(res) == []
    assert res.results[(TaskKey(1, (0,)), 0)] == scalar(30)
    joins = [r for r in res.events if r[2] == ev.INSERT and r[3] == TaskKey(1, (0,))]
    assert len(joins) == 1 and joins[0][1] == 0


def test_chain_single_worker_order():
    res = run_inproc(chain_program(10), RunConfig(nodes=1, workers=1), timeout=20)
    done = [r[3].index[0] for r in res.events if r[2] == ev.DONE]
    assert done == list(range(10))


def test_successor_counter_trace(chol8, make_nodes):
    (node,) = make_nodes(chol8, nodes=1, workers=1)
    node.successor_trace = []
    node.seed()
    node.start()
    deadline = time.monotonic() + 30
    while not node.stopping.is_set() and time.monotonic() < deadline:
        time.sleep(0.01)
    assert node.join(5)
    trace = node.successor_trace
    assert len(trace) == 2 * len(node.done_keys)
    level = 0
    saw_gemm_one = False
    # one worker: each +est is immediately followed by the matching -est
    for (k1, up, after_up), (k2, down, after_down) in zip(trace[::2], trace[1::2]):
        assert k1 == k2 and down == -up
        assert after_up == level + up
        assert after_down == level
        saw_gemm_one |= k1.template_id == 4 and up == 1
    assert saw_gemm_one
    assert node.in_exec_successors == 0


def test_waiting_time_cases():
    assert waiting_time(80, 40, 0.100, 10) == pytest.approx(0.030)
    assert waiting_time(0, 40, 0.100, 10) == pytest.approx(0.010)
    assert waiting_time(3, 2, 1.0, 0) == NO_ESTIMATE
    assert waiting_time(1, 4, 1.0, 1) == pytest.approx(1.25)  # ready / workers is real-valued


def test_waiting_time_estimate_reads_node_state(make_nodes, monkeypatch):
    (node,) = make_nodes(chain_program(), nodes=1, workers=40)
    assert node.waiting_time_estimate() == NO_ESTIMATE
    monkeypatch.setattr(node, "exec_stats", lambda: (10, 0.100))
    monkeypatch.setattr(type(node.scheduler), "ready_count", property(lambda s: 80))
    assert node.waiting_time_estimate() == pytest.approx(0.030)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000), st.integers(1, 64),
       st.floats(1e-6, 1e3), st.integers(1, 10**6))
def test_waiting_time_monotone_in_ready(r1, r2, n_workers, elapsed, n):
    lo, hi = sorted((r1, r2))
    assert waiting_time(lo, n_workers, elapsed, n) <= waiting_time(hi, n_workers, elapsed, n)


def test_empty_program_terminates():
    prog = TaskGraphProgram("empty", {}, lambda r, n_nodes: [], lambda k, n_nodes: 0)
    t0 = time.monotonic()
    res = run_inproc(prog, RunConfig(nodes=1, workers=2), timeout=5)
    assert time.monotonic() - t0 < 2
    assert audit(res) == [] and res.done_counter() == {}


def test_empty_program_terminates_multi_node():
    prog = TaskGraphProgram("empty", {}, lambda r, n_nodes: [], lambda k, n_nodes: 0)
    res = run_inproc(prog, RunConfig(nodes=4, workers=1), timeout=10)
    assert audit(res) == []


def test_four_nodes_with_stealing_terminate_clean():
    prog = build_cholesky(CholeskyConfig(T=8, tile=16, seed=2, distribution="skewed:0"))
    res = run_inproc(prog, RunConfig(nodes=4, workers=2, seed=3, task_delay=5e-4), timeout=60)
    assert audit(res) == []
    for n in res.nodes:
        assert n.leftover == {}
    sent = sum(n.sent[k.name] for n in res.nodes for k in (Kind.ACTIVATE, Kind.STEAL_GRANT))
    recv = sum(n.received[k.name] for n in res.nodes for k in (Kind.ACTIVATE, Kind.STEAL_GRANT))
    assert sent == recv


def _delay_grants(endpoint, delay, delayed):
    """Route every frame of ``endpoint`` through one ordered forwarding
    thread that holds STEAL_GRANT frames for ``delay`` seconds."""
    original = endpoint._deliver
    pipe = queue.Queue()

    def forward():
        while True:
            dst, frame = pipe.get()
            if decode(frame).kind == Kind.STEAL_GRANT:
                delayed.append(dst)
                time.sleep(delay)
            original(dst, frame)

    threading.Thread(target=forward, daemon=True).start()
    endpoint._deliver = lambda dst, frame: pipe.put((dst, frame))


def test_delayed_grant_forces_second_token_round():
    prog = build_bag(BagConfig(n_tasks=80, pinned_fraction=0.0))
    delayed = []
    holder = {}

    def setup(nodes):
        holder["nodes"] = nodes
        _delay_grants(nodes[0].endpoint, 0.05, delayed)

    cfg = RunConfig(nodes=2, workers=1, task_delay=2e-3, waiting_time_gate=False)
    res = run_inproc(prog, cfg, timeout=60, setup=setup)
    assert delayed, "no grant was sent, the scenario did not happen"
    assert audit(res) == []
    assert holder["nodes"][0].safra_rounds >= 2
    assert sum(res.done_counter().values()) == 80


def test_single_node_four_workers_factor(chol8):
    res = run_inproc(chol8, RunConfig(nodes=1, workers=4), timeout=60)
    assert audit(res) == []
    prob = chol8.meta["problem"]
    L = factor_from_results(res.results, prob.cfg.T, prob.cfg.tile)
    assert reconstruction_error(prob.matrix, L) <= 1e-8


def test_traced_run_respects_dependences():
    T = 6
    prog = build_cholesky(CholeskyConfig(T=T, tile=8, seed=4))
    res = run_inproc(prog, RunConfig(nodes=3, workers=2, seed=1), timeout=60)
    assert audit(res) == []
    done_at = {r[3]: r[0] for r in res.events if r[2] == ev.DONE}
    exec_at = {r[3]: r[0] for r in res.events if r[2] == ev.EXEC}
    edges = [(k, s) for k in done_at for _slot, s in successors(k, T)]
    topological_order(edges, done_at)
    # timestamps share one clock in-process: a successor starts after its producer ended
    for a, b in edges:
        assert exec_at[b] >= done_at[a]


def test_body_failure_aborts_with_key():
    BAD = 9

    def body(inputs, key):
        raise ZeroDivisionError("boom")

    prog = TaskGraphProgram("bad", {BAD: TaskTemplate(BAD, "BAD", 1, body)},
                            lambda r, n_nodes: [(TaskKey(BAD, (7,)), 0, scalar(0))] if r == 0 else [],
                            lambda k, n_nodes: 0)
    with pytest.raises(RunAborted, match=r"9\(7,\)"):
        run_inproc(prog, RunConfig(nodes=2, workers=1), timeout=10)


POLICIES = list(itertools.product(["ap", "2q"], ["ready", "ready+succ"],
                                  ["single", "chunk", "half"], [True, False]))


@pytest.mark.parametrize("sched,thief,victim,gate", POLICIES)
def test_liveness_all_policy_combinations(sched, thief, victim, gate):
    spec = {"benchmark": "cholesky", "T": 5, "tile": 8, "seed": 1, "distribution": "skewed:1"}
    cfg = RunConfig(nodes=3, workers=2, scheduler=sched, thief_policy=thief,
                    victim_policy=victim, waiting_time_gate=gate, seed=7, task_delay=2e-4)
    res = run_inproc(build_program(spec), cfg, timeout=30)
    assert audit(res) == []


def test_exec_counter_matches_done(chol8, make_nodes):
    (node,) = make_nodes(chol8, nodes=1, workers=3)
    node.seed()
    node.start()
    deadline = time.monotonic() + 30
    while not node.stopping.is_set() and time.monotonic() < deadline:
        time.sleep(0.01)
    assert node.join(5)
    n, elapsed = node.exec_stats()
    assert n == len(node.done_keys) == len(chol8.meta["expected_keys"])
    assert elapsed > 0 and not math.isinf(elapsed)

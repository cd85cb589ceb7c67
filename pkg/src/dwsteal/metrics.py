"""Select-time polling, interval imbalance metrics, steal statistics, export."""

from __future__ import annotations

import csv
import json
import math
import os
import threading
import time
from dataclasses import asdict, dataclass, field

from .taskgraph import TaskKey

DEFAULT_INTERVAL_MS = 10_000

# event kinds
CREATE = "CREATE"
INSERT = "INSERT"
SELECT = "SELECT"
EXEC = "EXEC"
DONE = "DONE"
MIGRATED = "MIGRATED"
STOLEN_IN = "STOLEN_IN"
STEAL_SENT = "STEAL_SENT"
GRANT_SENT = "GRANT_SENT"
DENY_SENT = "DENY_SENT"
GRANT_RECV = "GRANT_RECV"
DENY_RECV = "DENY_RECV"
TERMINATED = "TERMINATED"

NO_FLAG = ""
EMPTY_INTERVAL = "EMPTY_INTERVAL"
ALL_ZERO = "ALL_ZERO"


class EventLog:
    """Append-only per-node log of ``(t_ns, rank, kind, key, detail)``.

    Timestamps are nanoseconds since ``origin_ns`` (a ``time.time_ns``
    value shared by all nodes of a run).
    """

    def __init__(self, rank: int, origin_ns: int | None = None):
        self.rank = rank
        self.origin_ns = time.time_ns() if origin_ns is None else origin_ns
        self.records: list = []
        self._lock = threading.Lock()

    def now(self) -> int:
        return time.time_ns() - self.origin_ns

    def record(self, kind: str, key: TaskKey | None = None, **detail):
        rec = (self.now(), self.rank, kind, key, detail)
        with self._lock:
            self.records.append(rec)
        return rec

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def write(self, path):
        with open(path, "w") as fh:
            for t, rank, kind, key, detail in self.records:
                k = None if key is None else [key.template_id, list(key.index)]
                fh.write(json.dumps([t, rank, kind, k, detail]) + "\n")


def read_events(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            t, rank, kind, k, detail = json.loads(line)
            key = None if k is None else TaskKey(k[0], tuple(k[1]))
            out.append((t, rank, kind, key, detail))
    return out


def merge_events(*logs) -> list:
    merged = [rec for lg in logs for rec in lg]
    merged.sort(key=lambda r: (r[0], r[1]))
    return merged


def workload(samples) -> tuple[float, str]:
    """Mean of the polled ready counts over their maximum.

    Empty or all-zero intervals have no defined ratio; they report 0 with a
    flag because a process with nothing ready has no workload.
    """
    n = len(samples)
    if n == 0:
        return 0.0, EMPTY_INTERVAL
    peak = max(samples)
    if peak <= 0:
        return 0.0, ALL_ZERO
    return (sum(samples) / n) / peak, NO_FLAG


def imbalance(workloads) -> float:
    """Largest workload minus the mean workload."""
    workloads = list(workloads)
    if not workloads:
        raise ValueError("imbalance needs at least one process")
    return max(workloads) - sum(workloads) / len(workloads)


def potential(spread: float, n_nodes: int) -> float:
    """Imbalance scaled by the process count."""
    return spread * n_nodes


@dataclass
class IntervalStats:
    index: int
    n_nodes: int
    counts: list
    workloads: list
    flags: list
    imbalance: float
    potential: float


def poll_samples(events, interval_ns: int) -> dict:
    """Group SELECT polls into ``{(interval, rank): [ready counts...]}``."""
    grouped: dict = {}
    for t, rank, kind, _key, detail in events:
        if kind != SELECT:
            continue
        grouped.setdefault((max(t, 0) // interval_ns, rank), []).append(detail["ready"])
    return grouped


def interval_stats(events, n_nodes: int, interval_ms: float = DEFAULT_INTERVAL_MS) -> list[IntervalStats]:
    interval_ns = max(1, int(interval_ms * 1e6))
    grouped = poll_samples(events, interval_ns)
    if not grouped:
        return []
    last = max(idx for idx, _ in grouped)
    out = []
    for idx in range(last + 1):
        counts, loads, flags = [], [], []
        for rank in range(n_nodes):
            samples = grouped.get((idx, rank), [])
            load, flag = workload(samples)
            counts.append(len(samples))
            loads.append(load)
            flags.append(flag)
        spread = imbalance(loads)
        out.append(IntervalStats(idx, n_nodes, counts, loads, flags, spread,
                                 potential(spread, n_nodes)))
    return out


@dataclass
class StealStats:
    requests_sent: int = 0
    requests_granted: int = 0
    tasks_stolen: int = 0
    scheduled_total: int = 0
    rescheduled_total: int = 0
    steal_success_pct: float = 0.0
    avg_tasks_per_successful_steal: float = 0.0
    rescheduled_pct: float = 0.0


def steal_stats(events) -> StealStats:
    """Derive the steal and scheduler-effectiveness statistics from a
    complete event log."""
    st = StealStats()
    for _t, _rank, kind, _key, detail in events:
        if kind == STEAL_SENT:
            st.requests_sent += 1
        elif kind == GRANT_SENT:
            st.requests_granted += 1
            st.tasks_stolen += detail["count"]
        elif kind == INSERT:
            st.scheduled_total += 1
            if detail["origin"] == "reschedule":
                st.rescheduled_total += 1
    if st.requests_sent:
        st.steal_success_pct = 100.0 * st.requests_granted / st.requests_sent
    if st.requests_granted:
        st.avg_tasks_per_successful_steal = st.tasks_stolen / st.requests_granted
    if st.scheduled_total:
        st.rescheduled_pct = 100.0 * st.rescheduled_total / st.scheduled_total
    return st


INTERVAL_COLUMNS = ["interval", "rank", "n_samples", "workload", "flag", "imbalance", "potential"]


def export(out_dir, meta: dict, intervals, stats: StealStats, makespan_ns: int,
           extra: dict | None = None):
    """Write ``intervals.csv`` and ``summary.json`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "intervals.csv"), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(INTERVAL_COLUMNS)
        for iv in intervals:
            for rank in range(iv.n_nodes):
                out.writerow([iv.index, rank, iv.counts[rank], repr(iv.workloads[rank]),
                              iv.flags[rank], repr(iv.imbalance), repr(iv.potential)])
    summary = {
        "config": meta,
        "makespan_ns": int(makespan_ns),
        "steal": asdict(stats),
        "intervals": len(intervals),
        "max_potential": max((iv.potential for iv in intervals), default=0.0),
    }
    if extra:
        summary.update(extra)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
    return summary


def _json_default(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return None
    if hasattr(obj, "value"):
        return obj.value
    return str(obj)

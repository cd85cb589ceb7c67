import collections
import statistics
import time

import numpy as np
import pytest

from dwsteal import metrics as ev
from dwsteal.bench import build_program
from dwsteal.bench import cholesky as chol
from dwsteal.bench.cholesky import (
    GEMM,
    POTRF,
    SYRK,
    TRSM,
    CholeskyConfig,
    NotSPD,
    build_cholesky,
    dense_mask,
    factor_from_results,
    generate,
    reconstruction_error,
    tile_kernel,
)
from dwsteal.bench.synthetic import BagConfig
from dwsteal.bench.uts import (
    PRESETS,
    TreeTooLarge,
    UtsConfig,
    build_uts,
    child_hash,
    coin,
    count_nodes,
    root_hash,
)
from dwsteal.config import RunConfig
from dwsteal.harness import audit, run_inproc
from dwsteal.taskgraph import DataItem, TaskKey


def reference_cholesky(a):
    """Textbook element-wise Cholesky-Banachiewicz."""
    n = a.shape[0]
    L = np.zeros_like(a)
    for i in range(n):
        for j in range(i + 1):
            s = sum(L[i, k] * L[j, k] for k in range(j))
            if i == j:
                L[i, j] = (a[i, i] - s) ** 0.5
            else:
                L[i, j] = (a[i, j] - s) / L[j, j]
    return L


def test_single_tile_matches_reference():
    prog = build_cholesky(CholeskyConfig(T=1, tile=12, seed=3))
    res = run_inproc(prog, RunConfig(nodes=1, workers=1), timeout=20)
    assert [r[3] for r in res.events if r[2] == ev.DONE] == [TaskKey(POTRF, (0,))]
    A = prog.meta["problem"].matrix
    L = factor_from_results(res.results, 1, 12)
    assert np.max(np.abs(L - reference_cholesky(A))) <= 1e-10


def test_small_multi_tile_matches_reference():
    prog = build_cholesky(CholeskyConfig(T=3, tile=4, seed=8, density=0.5))
    res = run_inproc(prog, RunConfig(nodes=2, workers=2), timeout=20)
    A = prog.meta["problem"].matrix
    L = factor_from_results(res.results, 3, 4)
    assert np.max(np.abs(L - reference_cholesky(A))) <= 1e-10


def test_task_counts_closed_form():
    T = 4
    prog = build_cholesky(CholeskyConfig(T=T, tile=4, density=1.0))
    res = run_inproc(prog, RunConfig(nodes=1, workers=2), timeout=20)
    counts = collections.Counter(r[3].template_id for r in res.events if r[2] == ev.DONE)
    assert counts == {POTRF: T, TRSM: T * (T - 1) // 2, SYRK: T * (T - 1) // 2,
                      GEMM: T * (T - 1) * (T - 2) // 6}
    assert len(chol.all_keys(T)) == sum(counts.values())


def test_exactly_half_dense():
    mask = dense_mask(CholeskyConfig(T=20, density=0.5, seed=9))
    lower = np.tril(np.ones((20, 20), dtype=bool))
    assert lower.sum() == 210
    assert mask[lower].sum() == 105
    assert not mask[~lower].any()
    assert mask.diagonal().all()


def test_generated_matrix_is_spd_and_symmetric():
    A = generate(CholeskyConfig(T=6, tile=8, seed=2)).matrix
    assert np.array_equal(A, A.T)
    assert np.linalg.eigvalsh(A).min() > 0


def test_not_spd_detected(monkeypatch):
    real = chol.generate

    def broken(cfg):
        p = real(cfg)
        p.tiles[(0, 0)] = -np.eye(cfg.tile)
        return p

    monkeypatch.setattr(chol, "generate", broken)
    with pytest.raises(NotSPD):
        build_cholesky(CholeskyConfig(T=2, tile=4))


def test_sparse_tiles_not_stealable_and_free():
    prog = build_cholesky(CholeskyConfig(T=6, tile=4, seed=1))
    res = run_inproc(prog, RunConfig(nodes=1, workers=1, task_delay=0.0), timeout=20)
    mask = prog.meta["problem"].mask
    for t, _r, kind, key, d in res.events:
        if kind == ev.INSERT and key.template_id == GEMM:
            k, m, n = key.index
            if not (mask[m, k] and mask[n, k]):
                assert d["stealable"] is False


def test_bad_configs():
    with pytest.raises(ValueError):
        CholeskyConfig(T=0)
    with pytest.raises(ValueError):
        CholeskyConfig(distribution="blocky")
    with pytest.raises(ValueError):
        UtsConfig(q=1.5)
    with pytest.raises(ValueError):
        build_program({"benchmark": "nbody"})


def walk(cfg, depth, h):
    """Recursive tree size using only the RNG primitives."""
    if depth == 0:
        width = cfg.b0
        live = range(width)
    elif cfg.max_depth is not None and depth >= cfg.max_depth:
        return 1
    else:
        live = [j for j in range(cfg.m) if coin(cfg.seed, h, j) < cfg.q]
    return 1 + sum(walk(cfg, depth + 1, child_hash(h, j)) for j in live)


def test_uts_no_grandchildren():
    cfg = UtsConfig(b0=7, m=5, q=0.0)
    assert count_nodes(cfg) == 8
    res = run_inproc(build_uts(cfg), RunConfig(nodes=2, workers=1), timeout=20)
    assert sum(res.done_counter().values()) == 8


@pytest.mark.parametrize("seed", range(5))
def test_uts_matches_recursive_walk(seed):
    cfg = UtsConfig(b0=8, m=5, q=0.19, seed=seed)
    expected = walk(cfg, 0, root_hash(seed))
    assert count_nodes(cfg) == expected
    res = run_inproc(build_uts(cfg), RunConfig(nodes=2, workers=2, seed=seed), timeout=30)
    assert audit(res) == []
    assert sum(res.done_counter().values()) == expected


@pytest.mark.parametrize("d", [1, 2, 5])
def test_uts_full_binary_depth_cap(d):
    cfg = UtsConfig(b0=3, m=2, q=1.0, max_depth=d)
    assert count_nodes(cfg) == 1 + 3 * (2**d - 1)


def test_uts_too_large():
    cfg = UtsConfig(b0=3, m=2, q=1.0, max_depth=40, cap=10_000)
    with pytest.raises(TreeTooLarge):
        count_nodes(cfg)
    with pytest.raises(TreeTooLarge):
        build_uts(cfg)


def test_uts_presets():
    assert PRESETS["large"] == dict(b0=120, m=5, q=0.200014, g=12_000_000)
    desk = UtsConfig.preset("desk")
    assert desk.expected_size < 1e5
    assert UtsConfig.preset("desk", g_mode="work").work_reps == desk.g
    assert desk.work_reps == 0


def test_uts_affinity_keeps_subtrees_home():
    cfg = UtsConfig.preset("tiny", seed=3)
    res = run_inproc(build_uts(cfg), RunConfig(nodes=4, workers=1, steal=False), timeout=30)
    for n in res.nodes:
        for key in n.done_keys:
            if key.index[2] >= 1:
                assert key.index[1] % 4 == n.rank


def test_bag_pinned_fraction():
    cfg = BagConfig(n_tasks=400, pinned_fraction=0.5)
    assert sum(cfg.pinned(i) for i in range(400)) == 200
    assert sum(BagConfig(pinned_fraction=0.25).pinned(i) for i in range(400)) == 100


def _median_gemm_seconds(sizes, reps=41, batch=200):
    """Median per-call GEMM kernel time for each tile size.

    Sizes are timed round-robin so that load drift on the machine hits
    every size alike instead of biasing whichever block ran during it.
    """
    rng = np.random.default_rng(0)
    key = TaskKey(GEMM, (0, 2, 1))
    inputs = {bs: tuple(DataItem.dense(rng.standard_normal((bs, bs))) for _ in range(3))
              for bs in sizes}
    times = {bs: [] for bs in sizes}
    for _ in range(reps):
        for bs in sizes:
            ins = inputs[bs]
            t0 = time.perf_counter()
            for _ in range(batch):
                tile_kernel(ins, key)
            times[bs].append((time.perf_counter() - t0) / batch)
    return [statistics.median(times[bs]) for bs in sizes]


def test_gemm_time_grows_with_tile():
    meds = _median_gemm_seconds((16, 32, 64))
    assert meds[0] <= meds[1] <= meds[2], meds


def test_reconstruction_error_detects_wrong_factor():
    A = generate(CholeskyConfig(T=2, tile=4, seed=0)).matrix
    L = np.linalg.cholesky(A)
    assert reconstruction_error(A, L) < 1e-14
    L[3, 0] += 1e-3
    assert reconstruction_error(A, L) > 1e-8


def test_skewed_puts_dense_tiles_on_one_rank():
    prog = build_cholesky(CholeskyConfig(T=8, tile=4, distribution="skewed:2", seed=1))
    mask = prog.meta["problem"].mask
    for m in range(8):
        for n in range(m + 1):
            home = prog.home_node(chol.first_task(m, n), 4)
            if mask[m, n]:
                assert home == 2

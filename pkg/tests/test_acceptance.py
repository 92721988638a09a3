"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import math
import random
import time

import pytest

from conftest import (brute_force_feasible, cycle_is_real, free_comm_cluster, oracle_mismatch,
                      random_schedule_case)
from rvd_oracle import bfs_min_cost, descriptors, reachable
from parplan.commplan import collective_count
from parplan.compiler import compile_plan
from parplan.corpus import check_case, random_case
from parplan.graph import ClusterSpec, Device, load_graph
from parplan.models import (coshard_block, embed_transformer, mlp, pipeline_model,
                            three_pass_model)
from parplan.rvd import RVDDescriptor as D
from parplan.rvd import inter_group_bytes, intra_cost, search_inter, search_intra
from parplan.schedule import op_order, validate
from parplan.simulate import simulate
from parplan.strategies import StrategyConfig

CORPUS_SIZE = 220
CORPUS_BUDGET_S = 120.0


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return emit


@pytest.fixture(scope="module")
def corpus():
    start = time.perf_counter()
    results = [check_case(*random_case(seed)) for seed in range(CORPUS_SIZE)]
    return results, time.perf_counter() - start


def test_oracle_equivalence_corpus(corpus, report):
    results, elapsed = corpus
    bad = [i for i, r in enumerate(results) if r.mismatch is not None]
    strategies = sorted({r.strategy for r in results})
    ok = len(results) >= 200 and not bad and elapsed < CORPUS_BUDGET_S
    report(1, ok, f"{len(results) - len(bad)}/{len(results)} cases bit-exact "
                  f"({', '.join(strategies)}) in {elapsed:.1f} s; failing seeds {bad[:10]}")
    assert ok


def test_value_to_rows_intra_path(report):
    c = ClusterSpec.uniform(4)
    shape = (4, 4)
    plan = search_intra(D(1, 2, (1, 2)), D(2, 1, (2, 1)), c, shape)
    n = 4 * math.prod(shape) / 2
    want = intra_cost("all-reduce", 2, n, c.intra) + intra_cost("all-to-all", 2, n, c.intra)
    steps = [(s.primitive, s.k) for s in plan.steps]
    exact = steps == [("all-reduce", 2), ("all-to-all", 2)]
    ok = math.isclose(plan.cost, want, rel_tol=1e-12)
    report(2, ok, f"plan {steps} cost {plan.cost:.6g} s vs closed form {want:.6g} s "
                  f"({'exact steps' if exact else 'cost tie'})")
    assert ok


def test_inter_group_plans(report):
    cluster = ClusterSpec([Device(i, 0 if i < 4 else 1) for i in range(12)])
    src, dst = [0, 1, 2, 3], list(range(4, 12))
    n = 1 << 20
    cases = [
        ("4 replicated -> 8 replicated", D(4, 1, (1,)), D(8, 1, (1,)), 8 * 4 * n,
         ["local-split", "rd-scatter", "all-gather"]),
        ("4 value parts -> 8 row blocks", D(1, 4, (1,)), D(1, 1, (8,)), 4 * 4 * n,
         ["reduce-scatter", "rd-scatter"]),
    ]
    lines, ok = [], True
    for label, a, b, naive_bytes, expected in cases:
        plan = search_inter(a, src, b, dst, cluster, (n,))
        crossed = inter_group_bytes(plan, cluster)
        good = crossed <= naive_bytes and plan.primitives == expected
        ok &= good
        lines.append(f"{label}: {plan.primitives} crosses {crossed / 4 / n:.2f}N "
                     f"(naive {naive_bytes / 4 / n:.0f}N)")
    report(3, ok, "; ".join(lines))
    assert ok


def test_rvd_search_is_optimal(report):
    pairs = violations = 0
    worst = []
    for n in (2, 4, 8):
        cluster = ClusterSpec.uniform(n)
        for ndims in (1, 2):
            extents = (8,) * ndims
            for s in descriptors(n, ndims):
                best = reachable(s, extents, 4, cluster.intra)
                for d in descriptors(n, ndims):
                    plan = search_intra(D(s[0], s[1], s[2:]), D(d[0], d[1], d[2:]),
                                        cluster, extents)
                    bfs = bfs_min_cost(best, d, extents, 4, cluster.intra)
                    short = sum(1 for st in plan.steps if not st.relabel) <= 4
                    pairs += 1
                    if bfs < plan.cost * (1 - 1e-9) or \
                            (short and not math.isclose(bfs, plan.cost, rel_tol=1e-9)):
                        violations += 1
                        worst.append((s, d))
    ok = violations == 0
    report(4, ok, f"{pairs} descriptor pairs on groups of 2/4/8, {violations} violations "
                  f"{worst[:3]}")
    assert ok


def test_validation_matches_brute_force(report):
    disagree, infeasible, fake = 0, 0, 0
    rng = random.Random(2024)
    for _ in range(1000):
        g = random_schedule_case(rng)
        r = validate(g)
        if r.ok != brute_force_feasible(g):
            disagree += 1
        if not r.ok:
            infeasible += 1
            fake += not cycle_is_real(g, r)
    injected = 0
    for seed in range(200):
        g = random_schedule_case(random.Random(seed))
        a, b = random.Random(seed).sample(sorted(g.ops), 2)
        op_order(g, a, b)
        op_order(g, b, a)
        r = validate(g)
        injected += 1
        if r.ok or not cycle_is_real(g, r):
            fake += 1
    ok = disagree == 0 and fake == 0
    report(5, ok, f"1000 graphs ({infeasible} infeasible): {disagree} disagreements; "
                  f"{injected} injected cycles; {fake} reports without a true cycle")
    assert ok


def test_pipeline_bubble_and_memory(report):
    lines, ok = [], True
    for S, K in [(2, 4), (4, 8), (4, 16)]:
        c = free_comm_cluster(S)
        doc = pipeline_model(layers=S, batch=4 * K)
        one = simulate(compile_plan(doc, c, StrategyConfig("1f1b", S, K=K, S=S)).plan)
        gp = simulate(compile_plan(doc, c, StrategyConfig("gpipe", S, K=K, S=S)).plan)
        want = (S - 1) / (S + K - 1)
        err = max(abs(one.bubble_fraction(d) - want) / want for d in range(S))
        mem = all(one.devices[d].peak_by_kind.get("activation", 0)
                  <= gp.devices[d].peak_by_kind.get("activation", 0) for d in range(S))
        ok &= err <= 0.02 and mem
        lines.append(f"(S={S},K={K}) bubble {want:.4f} err {err:.2%} act 1F1B "
                     f"{one.peak_kind('activation')} <= GPipe {gp.peak_kind('activation')}")
    report(6, ok, "; ".join(lines))
    assert ok


def test_coshard_memory(report):
    doc = coshard_block()
    base = simulate(compile_plan(doc, ClusterSpec.uniform(1), StrategyConfig("single", 1)).plan)
    res = compile_plan(doc, ClusterSpec.uniform(1), StrategyConfig("coshard", 1, shards=4))
    sharded = simulate(res.plan)
    before, after = base.peak_ptensor("a"), sharded.peak_ptensor("a")
    ratio = after / before
    ok = ratio <= 0.30 and oracle_mismatch(doc, res.graph) is None
    report(7, ok, f"4-way co-shard peak of 'a' {after} B vs {before} B unsharded ({ratio:.0%})")
    assert ok


def test_collectives_never_cost_more(corpus, report):
    results, _ = corpus
    worse = [i for i, r in enumerate(results) if r.cost_after > r.cost_before * (1 + 1e-12)]
    replaced = sum(1 for r in results if r.cost_after < r.cost_before)
    dp = []
    for n in (2, 4):
        doc = mlp(dims=(4, 8, 8, 4))
        g = compile_plan(doc, ClusterSpec.uniform(n), StrategyConfig("dp", n)).graph
        src = load_graph(doc)
        weights = [p for p in src.input_ptensors() if src.ptensors[p].kind == "weight"]
        dp.append((n, collective_count(g, "all-reduce"), len(weights)))
    ok = not worse and all(got == want for _, got, want in dp)
    report(8, ok, f"{len(results)} cases, {len(worse)} cost increases, {replaced} cheaper; "
                  "dp all-reduces per weight " +
                  ", ".join(f"n={n}: {got}/{want}" for n, got, want in dp))
    assert ok


def test_three_forward_and_interlaced(report):
    lines, ok = [], True
    for K in (2, 3, 4):
        doc = three_pass_model(layers=2, batch=4 * K)
        res = compile_plan(doc, ClusterSpec.uniform(2), StrategyConfig("3f1b", 2, K=K, S=2))
        tasks = [len(res.graph.meta["stage_tasks"][str(s)]) for s in range(2)]
        good = (validate(res.graph).ok and oracle_mismatch(doc, res.graph) is None
                and tasks == [4 * K, 4 * K] and simulate(res.plan).makespan > 0)
        ok &= good
        lines.append(f"3F1B K={K} tasks {tasks} {'ok' if good else 'bad'}")
        doc = embed_transformer(layers=2, batch=4 * K)
        res = compile_plan(doc, ClusterSpec.uniform(2), StrategyConfig("interlaced", 2, K=K, S=2))
        good = (validate(res.graph).ok and oracle_mismatch(doc, res.graph) is None
                and simulate(res.plan).makespan > 0)
        ok &= good
        lines.append(f"interlaced K={K} {'ok' if good else 'bad'}")
    report(9, ok, "; ".join(lines))
    assert ok

"""End-to-end acceptance suite: one test per criterion, each within its time
budget, each recording a PASS/FAIL line (see ``verdict`` in conftest.py)."""

from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

import reference_metricq as ref
from fixtures import WORKED, WORKED_EMBEDDINGS, WORKED_LOGPROBS, TableProvider
from test_pdsim import WORKED as WORKED_CHAIN
from test_pdsim import agent, check_against_oracle, to_scenario
from treemoa.cli import main
from treemoa.metricq import DEFAULT_TAU, frob_cos_sim, gram, metric_q, sim_matrix
from treemoa.orchestrator import (
    ACCURACY_MARKER,
    SETTINGS,
    RunConfig,
    SecondLayerStudy,
    max_mean_reduction,
    run_ablation,
    run_query,
    run_second_layer_study,
)
from treemoa.pdsim import SCHEDULE_MODES, run
from treemoa.topology import build_all_to_all, build_tree, critical_path, layer_latency_all, layer_latency_tree


def test_1_quality_score_fidelity(verdict):
    with verdict("1. quality-score fidelity on the worked fixture", 1.0) as note:
        score, _ = metric_q([0, 1], WORKED_LOGPROBS, DEFAULT_TAU, TableProvider(WORKED_EMBEDDINGS))
        oracle = ref.reference_from_embeddings([m.tolist() for m in WORKED_EMBEDDINGS], WORKED_LOGPROBS)
        got = {"Cbar": score.cbar, "W": score.w, "P": score.p, "B": score.b, "Q": score.q}
        for key, value in got.items():
            assert value == pytest.approx(WORKED[key], abs=1e-6), key
            assert value == pytest.approx(oracle[key], abs=1e-6), key
        note(" ".join(f"{k}={v:.6f}" for k, v in got.items()))


def test_2_fcs_algebra(verdict):
    with verdict("2. FCS algebra over 1000 random pairs", 10.0) as note:
        rng = np.random.default_rng(2024)
        worst = {"self": 0.0, "sym": 0.0, "scale": 0.0, "bound": 0.0}
        for _ in range(1000):
            h = int(rng.integers(2, 9))
            t1 = rng.standard_normal((int(rng.integers(1, 12)), h))
            t2 = rng.standard_normal((int(rng.integers(1, 12)), h))
            u, v = gram(t1), gram(t2)
            alpha, beta = 10.0 ** rng.uniform(-3, 3, size=2)
            s = frob_cos_sim(u, v)
            worst["self"] = max(worst["self"], abs(frob_cos_sim(u, u) - 1))
            worst["sym"] = max(worst["sym"], abs(s - frob_cos_sim(v, u)))
            worst["scale"] = max(worst["scale"], abs(frob_cos_sim(alpha * u, beta * v) - s))
            worst["bound"] = max(worst["bound"], abs(s) - 1)
            # the full pipeline (correlation-normalised) obeys the same bound
            assert np.all(np.abs(sim_matrix([t1, t2])) <= 1 + 1e-9)
        assert worst["self"] <= 1e-9 and worst["sym"] <= 1e-12
        assert worst["scale"] <= 1e-9 and worst["bound"] <= 1e-9
        note(" ".join(f"{k}={v:.1e}" for k, v in worst.items()))


def _random_tree(rng):
    depth = int(rng.integers(2, 5))
    branching = [int(rng.integers(1, 5)) for _ in range(depth - 1)]
    widths = [1]
    for b in reversed(branching):
        widths.insert(0, widths[0] * b)
    return widths, branching


def test_3_latency_laws(verdict):
    with verdict("3. latency laws over 1000 random trees", 10.0) as note:
        rng = np.random.default_rng(7)
        equal_cases = 0
        for _ in range(1000):
            widths, branching = _random_tree(rng)
            tree, full = build_tree(widths, branching), build_all_to_all(widths)
            times = {a: float(rng.exponential(1.0)) for a in tree.agents()}
            for layer in range(2, len(widths) + 1):
                prev = {a: times[a] for a in tree.layer(layer - 1)}
                t_tree, _ = layer_latency_tree(prev, tree.clusters(layer))
                t_all = layer_latency_all(prev.values())
                assert t_tree <= t_all
                if len(tree.clusters(layer)) == 1:
                    assert t_tree == t_all
            assert critical_path(tree, times) <= critical_path(full, times) + 1e-12
            if all(w == 1 for w in widths[1:]):
                equal_cases += 1
                assert critical_path(tree, times) == critical_path(full, times)
        # single-cluster case by construction as well
        for n in range(1, 10):
            t = build_tree([n, 1], [n])
            times = {a: float(rng.exponential()) for a in t.agents()}
            assert critical_path(t, times) == critical_path(build_all_to_all([n, 1]), times)
        note(f"{equal_cases} random single-cluster trees hit equality")


def _random_chain(rng):
    n = int(rng.integers(1, 4))
    o = float(rng.choice([0.0, 0.003, 0.02]))
    k = float(rng.choice([0.0, 0.0005]))
    agents = []
    for i in range(n):
        agents.append(agent(
            f"{i + 1}.0", [f"{i}.0"] if i else [],
            prefix=int(rng.integers(0, 301)), suffix=int(rng.integers(0, 41)) if i else 0,
            sep=int(rng.integers(0, 4)) if i else 0, out=int(rng.integers(0, 121)),
            rp=float(rng.choice([100.0, 1000.0, 5000.0])), rd=float(rng.choice([10.0, 50.0, 80.0])),
            o=o, k=k, blk=int(rng.choice([1, 16])),
        ))
    return agents, int(rng.integers(1, 65))


def test_4_event_loop_matches_closed_form(verdict):
    with verdict("4. event loop equals closed-form pipeline timings", 30.0) as note:
        seq = check_against_oracle(WORKED_CHAIN, 25, "sequential-PD").agents["2.0"]
        ovl = check_against_oracle(WORKED_CHAIN, 25, "incremental-overlap").agents["2.0"]
        assert seq.decode_start == pytest.approx(2.3, abs=1e-9)
        assert ovl.decode_start == pytest.approx(2.025, abs=1e-9)
        assert seq.exposed_prefill == pytest.approx(0.3, abs=1e-9)
        assert ovl.exposed_prefill == pytest.approx(0.025, abs=1e-9)
        rng = np.random.default_rng(4)
        n = 500
        for _ in range(n):
            agents, chunk = _random_chain(rng)
            for mode in SCHEDULE_MODES:
                check_against_oracle(agents, chunk, mode)
        note(f"worked 2.3s -> 2.025s, exposed 0.3s -> 0.025s; {n} chains x {len(SCHEDULE_MODES)} modes")


def _check_contiguous(rec):
    cursor = 0
    for c in rec.calls:
        if c["call"] == "prefill_only":
            assert c["start"] == cursor, (rec.agent, c)
            cursor += c["n"]
        elif c["call"] == "release":
            cursor = c["upto"]


def _random_fan_in(rng):
    k = int(rng.integers(1, 5))
    leaves = [agent(f"1.{i}", prefix=int(rng.integers(0, 200)), out=int(rng.integers(0, 100)),
                    rd=float(rng.choice([10.0, 50.0, 80.0]))) for i in range(k)]
    order = [a["id"] for a in leaves]
    rng.shuffle(order)
    root = agent("2.0", order, prefix=int(rng.integers(0, 200)), suffix=int(rng.integers(0, 30)),
                 sep=int(rng.integers(0, 3)), out=int(rng.integers(0, 30)), o=float(rng.choice([0.0, 0.004])),
                 k=float(rng.choice([0.0, 0.0002])))
    return leaves + [root], int(rng.integers(1, 41))


def test_5_outputs_and_kv_conservation(verdict):
    with verdict("5. mode-invariant outputs, KV conservation, slot contiguity", 30.0) as note:
        rng = np.random.default_rng(5)
        scenarios = [to_scenario(*_random_fan_in(rng)) for _ in range(150)]
        scenarios += [to_scenario(*_random_chain(rng)) for _ in range(150)]
        n_tree = 0
        for sample in range(4):
            cfg = RunConfig(seed=sample)
            traces = {m: run_query(replace(cfg, mode=m, overlap=m == "incremental-overlap"), sample)
                      for m in SCHEDULE_MODES}
            scenarios.append(traces)
            n_tree += 1
        for sc in scenarios:
            traces = sc if isinstance(sc, dict) else {m: run(m, sc) for m in SCHEDULE_MODES}
            for aid in traces["sequential-PD"].agents:
                outs = {tuple(t.agents[aid].output_tokens) for t in traces.values()}
                assert len(outs) == 1, aid
            for rec in traces["incremental-overlap"].agents.values():
                assert rec.recomputed_tokens == 0
                assert rec.prefilled_tokens == rec.prompt_len
                _check_contiguous(rec)
        note(f"{len(scenarios) - n_tree} random scenarios + {n_tree} default 9-3-1 queries, 4 modes each")


def test_6_ablation_shape(verdict):
    with verdict("6. ablation shape on the default 9-3-1 calibration", 120.0) as note:
        res = run_ablation(RunConfig(seed=0), samples=20)
        rows = {r["setting"]: r for r in res.summary}
        means = [rows[s]["normalized_mean"] for s in SETTINGS]
        assert all(x >= y for x, y in zip(means, means[1:])), means
        base_share = rows["all-to-all"]["prefill_share"]
        assert 0.10 <= base_share <= 0.30
        full_red = rows["full"]["reduction_mean"]
        assert full_red >= 0.50 and 0.55 <= full_red <= 0.92
        act = rows["full"]["activation"]
        assert act["32B"] < 0.2 and act["4B"] > 0.5
        assert all(r["accuracy"] == ACCURACY_MARKER for r in res.summary)
        second = max_mean_reduction(run_second_layer_study(RunConfig(seed=0), SecondLayerStudy()))
        assert 0.15 <= second <= 0.35
        note(f"normalized {' / '.join(f'{m:.3f}' for m in means)}; full -{full_red:.1%}; "
             f"baseline prefill share {base_share:.1%}; activation 4B={act['4B']:.2f} 32B={act['32B']:.2f}; "
             f"second-layer incremental -{second:.1%}")


def test_7_determinism(verdict, tmp_path):
    with verdict("7. byte-identical reruns", 60.0) as note:
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"early_exit": True, "overlap": True, "repetitions": 3}))
        outs = []
        for run_idx in range(2):
            out = tmp_path / f"run{run_idx}"
            assert main(["simulate", "--config", str(cfg), "--seed", "7", "--out", str(out)]) == 0
            assert main(["ablate", "--config", str(cfg), "--seed", "7", "--samples", "3", "--out", str(out)]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        assert outs[0] == outs[1] and len(outs[0]) >= 7
        note(f"{len(outs[0])} files identical across two runs")


def test_8_accuracy_left_out_and_plumbing_neutral(verdict):
    with verdict("8. accuracy out of scope; Q=0 keeps the no-exit agent set", 30.0) as note:
        checked = 0
        for topology in ("tree-9-3-1", "all-to-all-9-9-1"):
            for overlap in (False, True):
                base = RunConfig(topology=topology, overlap=overlap, seed=13)
                topo = base.build_topology()
                for sample in range(5):
                    off = run_query(base, sample, topo)
                    on = run_query(replace(base, early_exit=True, ee_force_q=0.0), sample, topo)
                    assert {k for k, r in on.agents.items() if r.status == "completed"} == set(off.agents)
                    for k, r in off.agents.items():
                        assert on.agents[k].output_tokens == r.output_tokens
                    checked += 1
        res = run_ablation(RunConfig(seed=0), samples=1)
        assert {r["accuracy"] for r in res.summary} == {ACCURACY_MARKER}
        note(f"{checked} runs; accuracy column reads '{ACCURACY_MARKER}'")

from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treemoa.presets import all_to_all_9_9_1, tree_9_3_1
from treemoa.topology import (
    AgentId,
    AgentProfile,
    OutputLenDist,
    TopologyError,
    build_all_to_all,
    build_tree,
    critical_path,
    critical_path_agents,
    layer_latency_all,
    layer_latency_tree,
    loads,
    topology_from_dict,
)


def A(layer: int, pos: int) -> AgentId:
    return AgentId(layer, pos)


# -- construction --------------------------------------------------------------


def test_nine_three_one_shape():
    t = build_tree([9, 3, 1], [3, 3])
    assert len(t.agents()) == 13
    assert [len(c) for c in t.clusters(2)] == [3, 3, 3]
    assert t.clusters(3) == [(A(2, 0), A(2, 1), A(2, 2))]
    assert t.root == A(3, 0)


def test_single_agent_tree():
    t = build_tree([1], [])
    assert t.agents() == [A(1, 0)]
    assert t.edges() == []


def test_contiguous_clusters():
    t = build_tree([4, 2, 1], [2, 2])
    assert t.precursors[A(2, 0)] == (A(1, 0), A(1, 1))
    assert t.precursors[A(2, 1)] == (A(1, 2), A(1, 3))


def test_explicit_cluster_sizes():
    t = build_tree([5, 2, 1], [[2, 3], 2])
    assert t.precursors[A(2, 1)] == (A(1, 2), A(1, 3), A(1, 4))


def test_mismatch_names_layer():
    with pytest.raises(TopologyError, match="layer 2"):
        build_tree([9, 4, 1], [3, 3])


@pytest.mark.parametrize("widths,branching", [([], []), ([3, 2], [1]), ([4, 2, 1], [2]), ([0, 1], [1])])
def test_invalid_shapes(widths, branching):
    with pytest.raises(TopologyError):
        build_tree(widths, branching)


def test_all_to_all_edges_complete():
    t = build_all_to_all([3, 2, 1])
    for a in t.layer(2):
        assert t.precursors[a] == t.layer(1)
    assert len(t.edges()) == 3 * 2 + 2


def test_agent_id_rules():
    with pytest.raises(TopologyError):
        AgentId(0, 0)
    with pytest.raises(TopologyError):
        AgentId(1, -1)
    assert AgentId.parse("2.5") == A(2, 5)
    with pytest.raises(TopologyError):
        AgentId.parse("nope")


def test_profile_invariants():
    with pytest.raises(TopologyError):
        AgentProfile("x", 0.0, 10.0)
    with pytest.raises(TopologyError):
        OutputLenDist("uniform", min=0, max=4)
    with pytest.raises(TopologyError):
        OutputLenDist("uniform", min=5, max=4)


def test_presets_place_one_tier_per_cluster():
    t = tree_9_3_1()
    for cluster in t.clusters(2):
        assert sorted(t.profile(a).model_tag for a in cluster) == ["32B", "4B", "8B"]
    b = all_to_all_9_9_1()
    assert b.kind == "all-to-all" and b.widths == [9, 9, 1]


def test_dump_roundtrip_and_stable_keys():
    t = tree_9_3_1()
    text = t.dumps()
    assert loads(text) == t
    assert loads(text).dumps() == text
    assert list(json.loads(text)) == sorted(json.loads(text))


def test_config_form_loads():
    t = topology_from_dict({"widths": [4, 2, 1], "branching": [2, 2],
                            "models": {"m": {"prefill_rate": 10, "decode_rate": 5}},
                            "layer_models": [["m"], ["m"], ["m"]]})
    assert t.profile(A(1, 3)).model_tag == "m"
    assert t.validate() is t


# -- latency laws --------------------------------------------------------------


def test_layer_latency_all_examples():
    assert layer_latency_all([2.0, 5.0, 9.0]) == 9.0
    assert layer_latency_all([7.0]) == 7.0
    assert layer_latency_all([0.0, 0.0]) == 0.0
    with pytest.raises(ValueError):
        layer_latency_all([])


def test_layer_latency_tree_examples():
    times = {"a": 2.0, "b": 5.0, "c": 9.0}
    assert layer_latency_tree(times, [["a", "b"], ["c"]]) == (9.0, [5.0, 9.0])
    assert layer_latency_tree(times, [["a", "b", "c"]]) == (9.0, [9.0])
    assert layer_latency_tree({"a": 4.0, "b": 4.0}, [["a"], ["b"]]) == (4.0, [4.0, 4.0])
    with pytest.raises(ValueError):
        layer_latency_tree({"a": 1.0}, [["a", "z"]])


def test_critical_path_examples():
    a2a = build_all_to_all([2, 1])
    times = {A(1, 0): 2.0, A(1, 1): 5.0, A(2, 0): 3.0}
    assert critical_path(a2a, times) == 8.0
    assert critical_path(build_tree([2, 1], [2]), times) == 8.0

    t = build_tree([4, 2, 1], [2, 2])
    times = {A(1, 0): 1.0, A(1, 1): 9.0, A(1, 2): 1.0, A(1, 3): 1.0, A(2, 0): 2.0, A(2, 1): 2.0, A(3, 0): 1.0}
    assert critical_path(t, times) == 12.0
    assert critical_path_agents(t, times) == [A(1, 1), A(2, 0), A(3, 0)]
    with pytest.raises(ValueError):
        critical_path(t, {A(1, 0): 1.0})


@st.composite
def partitioned_times(draw):
    n = draw(st.integers(1, 12))
    times = draw(st.lists(st.floats(0, 100, allow_nan=False), min_size=n, max_size=n))
    cuts = sorted(draw(st.sets(st.integers(1, n - 1), max_size=n - 1))) if n > 1 else []
    bounds = [0, *cuts, n]
    clusters = [list(range(bounds[i], bounds[i + 1])) for i in range(len(bounds) - 1)]
    return dict(enumerate(times)), clusters


@settings(max_examples=200, deadline=None)
@given(partitioned_times())
def test_tree_layer_never_exceeds_all(case):
    times, clusters = case
    value, readiness = layer_latency_tree(times, clusters)
    assert value <= layer_latency_all(list(times.values()))
    assert len(readiness) == len(clusters)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 50, allow_nan=False), min_size=13, max_size=13))
def test_tree_critical_path_bounded_by_all_to_all(values):
    tree = build_tree([9, 3, 1], [3, 3])
    a2a = build_all_to_all([9, 3, 1])
    times = dict(zip(tree.agents(), values))
    assert critical_path(tree, times) <= critical_path(a2a, times) + 1e-12
    layer_sum = sum(max(times[a] for a in a2a.layer(i)) for i in range(1, 4))
    assert critical_path(a2a, times) == pytest.approx(layer_sum, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 50, allow_nan=False), min_size=9, max_size=9), st.floats(0, 100))
def test_straggler_isolated_to_its_cluster(values, bump):
    t = build_tree([9, 3, 1], [3, 3])
    times = {a: 1.0 for a in t.agents()}
    times.update(zip(t.layer(1), values))
    _, before = layer_latency_tree(times, t.clusters(2))
    times[A(1, 0)] += bump
    _, after = layer_latency_tree(times, t.clusters(2))
    assert before[1:] == after[1:]

import logging
from itertools import combinations

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from graphprune.engine import ParamStore
from graphprune.fixtures import load_fixture
from graphprune.search_space import (build_segment_graph, discover_removal_structures, group_indices,
                                     max_feasible_sparsity, reachable, removal_validity, report,
                                     trace_validity_oracle)
from graphprune.shapes import count_params

from _graphs import random_dag

# group names used for the demo network: gA, gB, gC are the three Concat
# branches, g7 and g8 the two Add branches
DEMO = {"gA": "Conv2", "gB": "MaxPool", "gC": "AvgPool", "g7": "Conv7", "g8": "Conv8"}


def _space(name):
    g = load_fixture(name)
    sg = build_segment_graph(g)
    return g, sg, discover_removal_structures(sg, g)


def test_demonet_segments():
    g, sg, _ = _space("demonet_s")
    assert {s.id: s.members for s in sg.segments.values()} == {
        "Conv1": ["Conv1", "BN1"],
        "Conv2": ["Conv2", "BN2"],
        "MaxPool": ["MaxPool", "Conv3", "BN3"],
        "AvgPool": ["AvgPool", "Conv4", "BN4", "Conv5", "BN5"],
        "Concat": ["Concat"],
        "Conv6": ["Conv6", "BN6"],
        "Conv7": ["Conv7", "BN7"],
        "Conv8": ["Conv8", "BN8"],
        "Add": ["Add"],
        "GAP": ["GAP", "Linear1"],
    }
    assert sg.inputs == ["Conv1"] and sg.outputs == ["GAP"]
    assert sg.segments["Conv1"].endpoint == "multi-outgoing"
    assert sg.segments["Conv2"].endpoint == "joint-boundary"
    assert sg.segments["GAP"].endpoint == "output-boundary"
    assert len(sg.edges) == 12


def test_demonet_removal_structures():
    g, sg, part = _space("demonet_s")
    assert set(part.ids) == set(DEMO.values())
    assert "Conv1.weight" in part.complement.tensors
    assert part.by_id["AvgPool"].tensors == ["Conv4.weight", "Conv4.bias", "BN4.weight", "BN4.bias",
                                              "Conv5.weight", "Conv5.bias", "BN5.weight", "BN5.bias"]
    rep = report(sg, part, g)
    assert sum(x["dim"] for x in rep["G_s"]) + rep["G_s_complement_dim"] == count_params(g)


def test_demonet_brute_force_deletability():
    g, sg, part = _space("demonet_s")
    deletable = {sid for sid, s in sg.segments.items()
                 if s.has_params and trace_validity_oracle(g, s.members)}
    assert deletable == set(part.ids)


def test_other_fixtures():
    _, _, part = _space("diamond_net")
    assert part.ids == ["b", "c"]
    _, sg, part = _space("stacked_unets_mini")
    assert set(part.ids) == {"u1_dec1", "u1_down2", "u1_dec2", "u2_dec1", "u2_down2", "u2_dec2"}
    assert max_feasible_sparsity(sg, part) == 5


def test_chain_has_no_structures(caplog):
    g = load_fixture("chain_net")
    sg = build_segment_graph(g)
    with caplog.at_level(logging.WARNING):
        part = discover_removal_structures(sg, g)
    assert part.groups == [] and "no removal structures" in caplog.text
    assert len(sg.segments) == 1
    assert max_feasible_sparsity(sg, part) == 0


def test_validity_examples():
    _, sg, _ = _space("demonet_s")
    assert removal_validity(sg, [])
    assert removal_validity(sg, ["Conv8", "Conv2", "MaxPool"])
    assert not removal_validity(sg, ["Conv7", "Conv8"])
    assert not removal_validity(sg, ["Conv2", "MaxPool", "AvgPool"])
    assert not removal_validity(sg, ["GAP"])


def test_max_feasible_exhaustive():
    _, sg, part = _space("demonet_s")
    best = max(k for k in range(6) for c in combinations(part.ids, k) if removal_validity(sg, c))
    assert best == max_feasible_sparsity(sg, part) == 3
    assert max_feasible_sparsity(sg, part, limit=2) is None


def test_group_indices_cover_group_tensors():
    g, sg, part = _space("demonet_s")
    store = ParamStore.for_graph(g)
    idx = group_indices(part, store.offsets)
    assert idx["Conv2"].size == 16 * 16 * 9 + 16 + 32
    all_idx = np.concatenate(list(idx.values()))
    assert len(np.unique(all_idx)) == all_idx.size


def test_reachable_counts_visits():
    _, sg, _ = _space("demonet_s")
    c = [0]
    seen = reachable(sg, {"Conv8"}, c)
    assert "Conv8" not in seen and "GAP" in seen
    assert 0 < c[0] <= len(sg.segments) + len(sg.edges)


def test_segments_partition_operator_vertices():
    g, sg, _ = _space("stacked_unets_mini")
    members = [m for s in sg.segments.values() for m in s.members]
    ops = [v for v, x in g.vertices.items() if x.op not in ("Input", "Output")]
    assert sorted(members) == sorted(ops)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 10**6), n=st.integers(2, 40))
def test_structures_match_single_deletion_oracle(seed, n):
    g = random_dag(n, seed)
    sg = build_segment_graph(g)
    part = discover_removal_structures(sg, g)
    for sid, s in sg.segments.items():
        if not s.has_params or sid in sg.outputs:
            continue
        assert (sid in part.ids) == trace_validity_oracle(g, s.members), sid


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 10**6), n=st.integers(2, 40), data=st.data())
def test_validity_matches_trace_oracle(seed, n, data):
    g = random_dag(n, seed)
    sg = build_segment_graph(g)
    part = discover_removal_structures(sg, g)
    if not part.ids:
        return
    subset = data.draw(st.lists(st.sampled_from(part.ids), unique=True))
    deleted = [m for sid in subset for m in sg.segments[sid].members]
    assert removal_validity(sg, subset) == trace_validity_oracle(g, deleted)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 300))
def test_visit_bound(seed, n):
    g = random_dag(n, seed)
    sg = build_segment_graph(g)
    assert sg.visits <= 3 * (len(g.vertices) + len(g.edges))

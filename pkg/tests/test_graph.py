import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelalign.errors import InvalidGraphError, PartitionError, UnsupportedPartitionError
from skelalign.graph import (PARTITION_NAMES, build_partition, build_skeleton,
                             load_skeleton_json, make_partition,
                             make_skeleton_graph, normalize_adjacency,
                             parent_map_problems, skeleton_names,
                             validate_parent_map)


def test_single_joint_self_loop_identity():
    np.testing.assert_allclose(normalize_adjacency([], 1), [[1.0]])


def test_two_joint_edge_hand_computed():
    # A+I is all-ones, degrees (2,2) -> every entry 1/2.
    np.testing.assert_allclose(normalize_adjacency([(0, 1)], 2),
                               [[0.5, 0.5], [0.5, 0.5]])


def test_three_joint_path_hand_computed():
    # Degrees with self-loops: (2, 3, 2).
    a = normalize_adjacency([(0, 1), (1, 2)], 3)
    np.testing.assert_allclose(np.diag(a), [0.5, 1 / 3, 0.5])
    np.testing.assert_allclose(a[0, 1], 1 / np.sqrt(6))
    np.testing.assert_allclose(a[1, 2], 1 / np.sqrt(6))
    assert a[0, 2] == 0


def test_edge_out_of_range_rejected():
    with pytest.raises(InvalidGraphError):
        normalize_adjacency([(0, 5)], 3)


def test_zero_joints_rejected():
    with pytest.raises(InvalidGraphError):
        normalize_adjacency([], 0)


@st.composite
def connected_graphs(draw):
    n = draw(st.integers(min_value=1, max_value=12))
    edges = [(i, draw(st.integers(min_value=0, max_value=i - 1))) for i in range(1, n)]
    extra = draw(st.lists(
        st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)).filter(lambda e: e[0] != e[1]),
        max_size=6))
    return n, edges + extra


@settings(max_examples=60, deadline=None)
@given(connected_graphs())
def test_normalized_adjacency_symmetric_bounded_spectrum(graph):
    n, edges = graph
    a = normalize_adjacency(edges, n)
    assert np.abs(a - a.T).max() < 1e-12
    eigs = np.linalg.eigvalsh(a)
    assert eigs.min() >= -1 - 1e-9
    assert eigs.max() <= 1 + 1e-9


@settings(max_examples=30, deadline=None)
@given(connected_graphs())
def test_sqrt_degree_vector_is_unit_eigenvector(graph):
    n, edges = graph
    a_bin = np.eye(n)
    for i, j in edges:
        a_bin[i, j] = a_bin[j, i] = 1.0
    x = np.sqrt(a_bin.sum(axis=1))
    a = normalize_adjacency(edges, n)
    np.testing.assert_allclose(a @ x, x, atol=1e-9)


def test_shipped_skeletons_valid():
    for name in skeleton_names():
        g = build_skeleton(name)
        assert validate_parent_map(g), parent_map_problems(g)
        eigs = np.linalg.eigvalsh(g.adjacency_norm)
        assert eigs.min() >= -1 - 1e-9 and eigs.max() <= 1 + 1e-9


def test_shipped_partition_tables_disjoint_and_in_range():
    for skel in skeleton_names():
        g = build_skeleton(skel)
        for pname in PARTITION_NAMES:
            try:
                p = build_partition(pname, g)
            except UnsupportedPartitionError:
                continue
            seen = set()
            for group in p.groups:
                assert group, f"{skel}/{pname} has an empty group"
                for j in group:
                    assert 0 <= j < g.num_joints
                    assert j not in seen
                    seen.add(j)


def test_global_partition_covers_all_joints():
    g = build_skeleton("toy10")
    p = build_partition("global", g)
    assert p.num_parts == 1
    assert not p.include_global
    assert sorted(p.groups[0]) == list(range(10))


def test_toy_two_part_table():
    p = build_partition("two_part", build_skeleton("toy10"))
    assert p.group_names == ("upper", "lower")
    assert sorted(p.groups[0]) == [0, 1, 2, 3, 4]
    assert sorted(p.groups[1]) == [5, 6, 7, 8, 9]


def test_ucla_four_part_names():
    p = build_partition("four_part", build_skeleton("ucla20"))
    assert p.group_names == ("head", "hands", "hip", "legs")
    assert p.num_slots == 5  # four parts plus the global slot


def test_unknown_partition_and_skeleton_rejected():
    g = build_skeleton("toy10")
    with pytest.raises(UnsupportedPartitionError):
        build_partition("nine_part", g)
    with pytest.raises(UnsupportedPartitionError):
        build_partition("six_part", g)  # no shipped 6-way split of 10 joints
    with pytest.raises(InvalidGraphError):
        build_skeleton("ntu99")


def test_partition_validation_rejects_overlap_and_empty():
    with pytest.raises(PartitionError):
        make_partition("p", ("a", "b"), ((0, 1), (1, 2)), 4, include_global=True)
    with pytest.raises(PartitionError):
        make_partition("p", ("a",), ((),), 4, include_global=True)
    with pytest.raises(PartitionError):
        make_partition("p", ("a",), ((7,),), 4, include_global=True)


def test_parent_chain_is_valid():
    g = make_skeleton_graph("chain", 3, [(0, 1), (1, 2)], [0, 0, 1])
    assert validate_parent_map(g)


def test_parent_cycle_without_root_invalid():
    g = make_skeleton_graph("cycle", 2, [(0, 1)], [1, 0])
    assert not validate_parent_map(g)
    assert any("root" in p for p in parent_map_problems(g))


def test_parent_pair_not_an_edge_invalid():
    g = make_skeleton_graph("bad", 3, [(0, 1), (1, 2)], [0, 0, 0])
    assert not validate_parent_map(g)
    assert any("not an edge" in p for p in parent_map_problems(g))


def test_skeleton_json_round_trip(tmp_path):
    doc = {
        "name": "mini",
        "num_joints": 4,
        "edges": [[0, 1], [1, 2], [1, 3]],
        "parent": [0, 0, 1, 1],
        "partitions": {"halves": [[0, 1], [2, 3]]},
    }
    path = tmp_path / "skeleton.json"
    path.write_text(json.dumps(doc))
    g, partitions = load_skeleton_json(path)
    assert g.num_joints == 4
    assert validate_parent_map(g)
    assert partitions["halves"].groups == ((0, 1), (2, 3))
    assert partitions["halves"].group_names == ("part0", "part1")


def test_skeleton_json_disconnected_rejected(tmp_path):
    doc = {"num_joints": 4, "edges": [[0, 1]], "parent": [0, 0, 2, 3]}
    path = tmp_path / "skeleton.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(InvalidGraphError):
        load_skeleton_json(path)

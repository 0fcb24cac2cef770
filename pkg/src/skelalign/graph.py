"""Skeleton graphs, symmetric adjacency normalization, and body-part tables.

Three skeletons ship with the package:

``toy10`` (10 joints, the desk-scale default)
    0 head, 1 chest (root), 2 left hand, 3 right hand, 4 waist,
    5 hip, 6 left knee, 7 right knee, 8 left foot, 9 right foot.

``ntu25`` (25 joints, Kinect V2 ordering)
    0 spine base (root), 1 spine mid, 2 neck, 3 head, 4-7 left arm chain
    (shoulder, elbow, wrist, hand), 8-11 right arm chain, 12-15 left leg
    chain (hip, knee, ankle, foot), 16-19 right leg chain,
    20 spine shoulder, 21/22 left hand tip/thumb, 23/24 right tip/thumb.

``ucla20`` (20 joints, Kinect V1 ordering)
    0 hip center (root), 1 spine, 2 shoulder center, 3 head, 4-7 left arm,
    8-11 right arm, 12-15 left leg, 16-19 right leg.

Partition tables (joint groups per scheme) are spelled out in
``_PARTITION_TABLES`` below; trunk joints may be left out of the 2/4/6-part
groups and then contribute only to the global feature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidGraphError, PartitionError, UnsupportedPartitionError


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    """Connected joint graph with a spanning-tree parent map.

    ``adjacency_norm`` is the symmetrically normalized adjacency with
    self-loops added; it is symmetric and its spectrum lies in [-1, 1].
    """

    name: str
    num_joints: int
    edges: tuple[tuple[int, int], ...]
    parent: tuple[int, ...]
    adjacency_norm: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class PartPartition:
    """Ordered, named, pairwise-disjoint joint groups of one skeleton."""

    name: str
    group_names: tuple[str, ...]
    groups: tuple[tuple[int, ...], ...]
    include_global: bool

    @property
    def num_parts(self) -> int:
        return len(self.groups)

    @property
    def num_slots(self) -> int:
        """Contrast slots: one per part plus an optional global slot."""
        return len(self.groups) + int(self.include_global)


def normalize_adjacency(edges, num_joints: int) -> np.ndarray:
    """Symmetrically normalized adjacency with self-loops.

    Builds the binary symmetric adjacency A from ``edges``, adds the
    identity, and returns D^{-1/2} (A+I) D^{-1/2} where D is the degree
    matrix of A+I.
    """
    if num_joints < 1:
        raise InvalidGraphError("skeleton needs at least one joint")
    a = np.eye(num_joints, dtype=np.float64)
    for i, j in edges:
        if not (0 <= i < num_joints and 0 <= j < num_joints):
            raise InvalidGraphError(f"edge ({i},{j}) out of range for {num_joints} joints")
        a[i, j] = 1.0
        a[j, i] = 1.0
    d_inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def _assert_connected(edges, num_joints: int) -> None:
    seen = {0}
    frontier = [0]
    neighbors: list[list[int]] = [[] for _ in range(num_joints)]
    for i, j in edges:
        neighbors[i].append(j)
        neighbors[j].append(i)
    while frontier:
        v = frontier.pop()
        for u in neighbors[v]:
            if u not in seen:
                seen.add(u)
                frontier.append(u)
    if len(seen) != num_joints:
        missing = sorted(set(range(num_joints)) - seen)
        raise InvalidGraphError(f"graph is disconnected; unreachable joints {missing}")


def make_skeleton_graph(name: str, num_joints: int, edges, parent) -> SkeletonGraph:
    """Validate structure, normalize the adjacency, and freeze the result."""
    edges = tuple((int(i), int(j)) for i, j in edges)
    parent = tuple(int(p) for p in parent)
    if len(parent) != num_joints:
        raise InvalidGraphError(f"parent map has {len(parent)} entries for {num_joints} joints")
    adjacency = normalize_adjacency(edges, num_joints)
    _assert_connected(edges, num_joints)
    adjacency.setflags(write=False)
    return SkeletonGraph(name, num_joints, edges, parent, adjacency)


def parent_map_problems(graph: SkeletonGraph) -> list[str]:
    """Diagnostics for a broken parent map; empty list means valid."""
    problems = []
    roots = [j for j in range(graph.num_joints) if graph.parent[j] == j]
    if len(roots) != 1:
        problems.append(f"expected exactly one self-parented root, found {roots}")
    edge_set = {frozenset(e) for e in graph.edges}
    for j in range(graph.num_joints):
        p = graph.parent[j]
        if not 0 <= p < graph.num_joints:
            problems.append(f"parent of joint {j} is out of range: {p}")
        elif j != p and frozenset((j, p)) not in edge_set:
            problems.append(f"parent pair ({j},{p}) is not an edge")
    # Walking parents from every joint must reach the root without cycles.
    if len(roots) == 1:
        root = roots[0]
        for j in range(graph.num_joints):
            seen = set()
            v = j
            while v != root and v not in seen:
                seen.add(v)
                v = graph.parent[v]
                if not 0 <= v < graph.num_joints:
                    break
            if v != root:
                problems.append(f"joint {j} does not reach root {root} via parents")
    return problems


def validate_parent_map(graph: SkeletonGraph) -> bool:
    """True iff the parent map is a spanning tree consistent with the edges."""
    return not parent_map_problems(graph)


_SKELETON_TABLES = {
    "toy10": dict(
        num_joints=10,
        edges=[(0, 1), (1, 2), (1, 3), (1, 4), (4, 5), (5, 6), (5, 7), (6, 8), (7, 9)],
        parent=[1, 1, 1, 1, 1, 4, 5, 5, 6, 7],
    ),
    "ntu25": dict(
        num_joints=25,
        edges=[
            (0, 1), (1, 20), (20, 2), (2, 3),
            (20, 4), (4, 5), (5, 6), (6, 7),
            (20, 8), (8, 9), (9, 10), (10, 11),
            (0, 12), (12, 13), (13, 14), (14, 15),
            (0, 16), (16, 17), (17, 18), (18, 19),
            (7, 21), (7, 22), (11, 23), (11, 24),
        ],
        parent=[0, 0, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10,
                0, 12, 13, 14, 0, 16, 17, 18, 1, 7, 7, 11, 11],
    ),
    "ucla20": dict(
        num_joints=20,
        edges=[
            (0, 1), (1, 2), (2, 3),
            (2, 4), (4, 5), (5, 6), (6, 7),
            (2, 8), (8, 9), (9, 10), (10, 11),
            (0, 12), (12, 13), (13, 14), (14, 15),
            (0, 16), (16, 17), (17, 18), (18, 19),
        ],
        parent=[0, 0, 1, 2, 2, 4, 5, 6, 2, 8, 9, 10,
                0, 12, 13, 14, 0, 16, 17, 18],
    ),
}

# Joint groups per scheme.  Keys are (partition name, skeleton name).
_PARTITION_TABLES = {
    ("two_part", "toy10"): (
        ("upper", "lower"),
        ((0, 1, 2, 3, 4), (5, 6, 7, 8, 9)),
    ),
    ("four_part", "toy10"): (
        ("head", "hands", "hip", "legs"),
        ((0,), (2, 3), (4, 5), (6, 7, 8, 9)),
    ),
    ("two_part", "ntu25"): (
        ("upper", "lower"),
        ((1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 20, 21, 22, 23, 24),
         (0, 12, 13, 14, 15, 16, 17, 18, 19)),
    ),
    ("four_part", "ntu25"): (
        ("head", "hands", "hip", "legs"),
        ((2, 3),
         (4, 5, 6, 7, 8, 9, 10, 11, 21, 22, 23, 24),
         (0, 12, 16),
         (13, 14, 15, 17, 18, 19)),
    ),
    ("six_part", "ntu25"): (
        ("head", "arm", "hand", "hip", "leg", "foot"),
        ((2, 3),
         (4, 5, 6, 8, 9, 10),
         (7, 11, 21, 22, 23, 24),
         (0, 12, 16),
         (13, 14, 17, 18),
         (15, 19)),
    ),
    ("two_part", "ucla20"): (
        ("upper", "lower"),
        ((1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11),
         (0, 12, 13, 14, 15, 16, 17, 18, 19)),
    ),
    ("four_part", "ucla20"): (
        ("head", "hands", "hip", "legs"),
        ((3,),
         (4, 5, 6, 7, 8, 9, 10, 11),
         (0, 12, 16),
         (13, 14, 15, 17, 18, 19)),
    ),
    ("six_part", "ucla20"): (
        ("head", "arm", "hand", "hip", "leg", "foot"),
        ((3,),
         (4, 5, 6, 8, 9, 10),
         (7, 11),
         (0, 12, 16),
         (13, 14, 17, 18),
         (15, 19)),
    ),
}

PARTITION_NAMES = ("global", "two_part", "four_part", "six_part")


def skeleton_names() -> tuple[str, ...]:
    return tuple(_SKELETON_TABLES)


def build_skeleton(name: str) -> SkeletonGraph:
    """One of the shipped skeletons by name."""
    try:
        table = _SKELETON_TABLES[name]
    except KeyError:
        raise InvalidGraphError(f"unknown skeleton {name!r}; shipped: {sorted(_SKELETON_TABLES)}") from None
    return make_skeleton_graph(name, **table)


def make_partition(name: str, group_names, groups, num_joints: int,
                   include_global: bool) -> PartPartition:
    """Validate disjointness/coverage and freeze a partition."""
    group_names = tuple(str(n) for n in group_names)
    groups = tuple(tuple(int(j) for j in g) for g in groups)
    if len(group_names) != len(groups):
        raise PartitionError("group_names and groups length mismatch")
    seen: set[int] = set()
    for gname, g in zip(group_names, groups):
        if not g:
            raise PartitionError(f"group {gname!r} is empty")
        for j in g:
            if not 0 <= j < num_joints:
                raise PartitionError(f"group {gname!r} references joint {j} outside [0,{num_joints})")
            if j in seen:
                raise PartitionError(f"joint {j} appears in more than one group")
            seen.add(j)
    return PartPartition(name, group_names, groups, include_global)


def build_partition(name: str, graph: SkeletonGraph,
                    include_global: bool | None = None) -> PartPartition:
    """Shipped partition table for (scheme name, skeleton).

    ``global`` is a single group covering all joints and never carries an
    extra global slot.  For the other schemes ``include_global`` defaults
    to True.
    """
    if name == "global":
        return make_partition(
            "global", ("body",), (tuple(range(graph.num_joints)),),
            graph.num_joints, include_global=False)
    if name not in PARTITION_NAMES:
        raise UnsupportedPartitionError(f"unknown partition {name!r}; supported: {PARTITION_NAMES}")
    try:
        group_names, groups = _PARTITION_TABLES[(name, graph.name)]
    except KeyError:
        raise UnsupportedPartitionError(
            f"no shipped {name!r} table for skeleton {graph.name!r}") from None
    if include_global is None:
        include_global = True
    return make_partition(name, group_names, groups, graph.num_joints, include_global)


def load_skeleton_json(path) -> tuple[SkeletonGraph, dict[str, PartPartition]]:
    """Load a skeleton plus optional partition tables from JSON.

    Schema: {"num_joints", "edges": [[i,j],...], "parent": [...],
    "partitions": {name: [[joint,...],...]}}.  Partition groups loaded this
    way get positional names ``part0``, ``part1``, ...
    """
    with open(path) as f:
        doc = json.load(f)
    try:
        graph = make_skeleton_graph(
            doc.get("name", "custom"), int(doc["num_joints"]),
            doc["edges"], doc["parent"])
    except KeyError as exc:
        raise InvalidGraphError(f"skeleton JSON missing field {exc}") from None
    partitions = {}
    for pname, groups in doc.get("partitions", {}).items():
        names = tuple(f"part{i}" for i in range(len(groups)))
        partitions[pname] = make_partition(pname, names, groups, graph.num_joints,
                                           include_global=pname != "global")
    return graph, partitions

"""Calibration graph: relative scales by loop closure, MST, absolute poses.

Each graph edge stores the relative transform of a camera pair up to an
unknown positive scale on its translation. Every camera triplet whose
three edges survive contributes one loop-closure constraint: composing
the three scaled transforms around the cycle must return to the start,
which is linear in the three scales. Stacking all triplets gives a
homogeneous system; rows are weighted by the inverse of the loop's
reliability score (the geometric mean of its edge scores, lower Sampson
distance meaning more trustworthy) and a small regularizer keeps the
solution away from zero. The solve runs in log-scale space so scales
stay positive.

Absolute extrinsics then come from composing scaled relative transforms
along the minimum spanning tree from the origin camera.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .camgeom import Pose, quat_to_matrix
from .errors import DisconnectedGraph, MissingScale
from .pairwise import PairCalibration

logger = logging.getLogger(__name__)

__all__ = [
    "CalibrationGraph",
    "ScaleSolution",
    "build_graph",
    "solve_relative_scales",
    "extract_mst",
    "compose_absolute_extrinsics",
]


@dataclass
class CalibrationGraph:
    nodes: list[str]
    edges: list[PairCalibration]

    def edge_index(self) -> dict[frozenset, int]:
        return {frozenset((e.cam_i, e.cam_j)): k for k, e in enumerate(self.edges)}


@dataclass
class ScaleSolution:
    scales: np.ndarray      # one positive scale per edge, edge order of the graph
    residual: float         # final weighted objective value
    n_triplets: int


def build_graph(camera_ids: list[str], edges: list[PairCalibration]) -> CalibrationGraph:
    """Assemble the graph and verify connectivity over surviving edges."""
    nodes = sorted(camera_ids)
    seen = set()
    kept = []
    for e in edges:
        if e.cam_i == e.cam_j:
            raise ValueError(f"self loop on camera {e.cam_i}")
        key = frozenset((e.cam_i, e.cam_j))
        if key in seen:
            raise ValueError(f"duplicate edge {sorted(key)}")
        seen.add(key)
        kept.append(e)
    components = _components(nodes, kept)
    if len(components) > 1:
        listing = "; ".join(",".join(sorted(c)) for c in components)
        raise DisconnectedGraph(
            f"calibration graph has {len(components)} components: {listing}"
        )
    return CalibrationGraph(nodes, kept)


def _components(nodes: list[str], edges: list[PairCalibration]) -> list[set[str]]:
    parent = {n: n for n in nodes}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in edges:
        ra, rb = find(e.cam_i), find(e.cam_j)
        if ra != rb:
            parent[ra] = rb
    groups: dict[str, set[str]] = {}
    for n in nodes:
        groups.setdefault(find(n), set()).add(n)
    return list(groups.values())


def _edge_transform(edge: PairCalibration, source: str) -> tuple[np.ndarray, np.ndarray]:
    """(R, t-hat) taking source-camera coordinates to the other endpoint's.

    Stored direction is cam_i -> cam_j; traversing cam_j -> cam_i uses the
    inverse transform, whose translation direction is -R^T t-hat (same
    scale, still unit norm).
    """
    rot = quat_to_matrix(edge.rotation_q)
    if source == edge.cam_i:
        return rot, edge.translation_dir
    if source == edge.cam_j:
        return rot.T, -(rot.T @ edge.translation_dir)
    raise KeyError(f"camera {source} not on edge ({edge.cam_i}, {edge.cam_j})")


def solve_relative_scales(graph: CalibrationGraph, mu: float = 1e-3) -> ScaleSolution:
    """Solve per-edge translation scales from triplet loop closures.

    With no triplets (trees, two-camera rigs) the regularizer alone keeps
    every scale at 1. Otherwise the weighted homogeneous system is solved
    in closed form and polished with L-BFGS over log-scales, which also
    guarantees positivity.
    """
    n_edges = len(graph.edges)
    index = graph.edge_index()
    triplets = [
        (a, b, c)
        for a, b, c in itertools.combinations(graph.nodes, 3)
        if frozenset((a, b)) in index
        and frozenset((b, c)) in index
        and frozenset((c, a)) in index
    ]
    if not triplets:
        return ScaleSolution(np.ones(n_edges), 0.0, 0)

    rows = np.zeros((3 * len(triplets), n_edges))
    weights = np.empty(len(triplets))
    for li, (a, b, c) in enumerate(triplets):
        e_ab = graph.edges[index[frozenset((a, b))]]
        e_bc = graph.edges[index[frozenset((b, c))]]
        e_ca = graph.edges[index[frozenset((c, a))]]
        r_ab, t_ab = _edge_transform(e_ab, a)
        r_bc, t_bc = _edge_transform(e_bc, b)
        r_ca, t_ca = _edge_transform(e_ca, c)
        # composing a->b->c->a: translation must cancel for the true scales
        block = rows[3 * li : 3 * li + 3]
        block[:, index[frozenset((a, b))]] = r_ca @ r_bc @ t_ab
        block[:, index[frozenset((b, c))]] = r_ca @ t_bc
        block[:, index[frozenset((c, a))]] = t_ca
        loop_score = (e_ab.score * e_bc.score * e_ca.score) ** (1.0 / 3.0)
        weights[li] = 1.0 / (loop_score + 1e-12)

    w_sqrt = np.repeat(np.sqrt(weights), 3)
    a_mat = rows * w_sqrt[:, None]

    # closed-form minimizer of |A s|^2 + mu |s - 1|^2 as the starting point;
    # the augmented (stacked) form keeps the regularizer's precision even
    # when reliability weights span many orders of magnitude
    stacked = np.vstack([a_mat, np.sqrt(mu) * np.eye(n_edges)])
    target = np.concatenate([np.zeros(a_mat.shape[0]), np.sqrt(mu) * np.ones(n_edges)])
    s0 = np.linalg.lstsq(stacked, target, rcond=None)[0]
    if np.any(s0 <= 0) or not np.all(np.isfinite(s0)):
        s0 = np.ones(n_edges)

    # a constant normalization keeps the minimizer unchanged but makes the
    # gradient tolerance meaningful for huge weights
    norm = max(1.0, float(weights.max()))

    def objective(u):
        s = np.exp(u)
        r = a_mat @ s
        reg = s - 1.0
        value = (r @ r + mu * (reg @ reg)) / norm
        grad = (2.0 * (a_mat.T @ r) + 2.0 * mu * reg) * s / norm
        return value, grad

    result = minimize(
        objective,
        np.log(s0),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 500, "gtol": 1e-10, "ftol": 1e-15},
    )
    scales = np.exp(result.x)
    residual = float(objective(result.x)[0] * norm)
    logger.debug(
        "scale solve: %d edges, %d triplets, residual %.3g", n_edges, len(triplets), residual
    )
    return ScaleSolution(scales, residual, len(triplets))


def extract_mst(graph: CalibrationGraph) -> list[PairCalibration]:
    """Kruskal spanning tree minimizing total edge score.

    Ties break on (score, cam_i, cam_j) so the result is deterministic.
    """
    order = sorted(graph.edges, key=lambda e: (e.score, e.cam_i, e.cam_j))
    parent = {n: n for n in graph.nodes}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    tree = []
    for e in order:
        ra, rb = find(e.cam_i), find(e.cam_j)
        if ra != rb:
            parent[ra] = rb
            tree.append(e)
    if len(tree) != len(graph.nodes) - 1:
        raise DisconnectedGraph("spanning tree does not cover all cameras")
    return tree


def compose_absolute_extrinsics(
    graph: CalibrationGraph,
    mst: list[PairCalibration],
    solution: ScaleSolution,
    root: str | None = None,
) -> dict[str, Pose]:
    """World-to-camera poses by walking the MST from the origin camera.

    The origin (lexicographically first camera unless `root` overrides it)
    is fixed at identity. Crossing an edge from camera a to its neighbor b
    applies the scaled relative transform on the left: pose_b = T_ab o pose_a.
    """
    index = graph.edge_index()
    adjacency: dict[str, list[PairCalibration]] = {n: [] for n in graph.nodes}
    for e in mst:
        key = frozenset((e.cam_i, e.cam_j))
        if key not in index:
            raise MissingScale(f"MST edge {sorted(key)} missing from graph")
        adjacency[e.cam_i].append(e)
        adjacency[e.cam_j].append(e)

    origin = root if root is not None else graph.nodes[0]
    if origin not in adjacency:
        raise KeyError(f"root camera {origin!r} not in graph")
    poses: dict[str, Pose] = {origin: Pose.identity()}
    stack = [origin]
    while stack:
        current = stack.pop()
        for e in adjacency[current]:
            other = e.cam_j if e.cam_i == current else e.cam_i
            if other in poses:
                continue
            scale = solution.scales[index[frozenset((e.cam_i, e.cam_j))]]
            rot, tdir = _edge_transform(e, current)
            step = Pose.from_rt(rot, scale * tdir)
            poses[other] = step.compose(poses[current])
            stack.append(other)
    missing = set(graph.nodes) - set(poses)
    if missing:
        raise MissingScale(f"MST does not reach cameras {sorted(missing)}")
    return poses

import itertools

import numpy as np
import pytest

from camocap.camgeom import Pose, quat_from_axis_angle, quat_from_matrix, quat_to_matrix
from camocap.errors import DisconnectedGraph
from camocap.pairwise import PairCalibration, essential_from_rt
from camocap.scalegraph import (
    build_graph,
    compose_absolute_extrinsics,
    extract_mst,
    solve_relative_scales,
)

from conftest import relative_pose, ring_cameras


def edge_from_cameras(cam_i, cam_j, name_i, name_j, score=1e-9):
    """Ground-truth pairwise edge: unit translation direction, true rotation."""
    rot, t, tdir = relative_pose(cam_i, cam_j)
    return PairCalibration(
        cam_i=name_i,
        cam_j=name_j,
        essential=essential_from_rt(rot, tdir),
        rotation_q=quat_from_matrix(rot),
        translation_dir=tdir,
        inliers=np.arange(10),
        score=score,
    ), np.linalg.norm(t)


def complete_graph(cams, names, score=1e-9):
    edges, norms = [], {}
    for a, b in itertools.combinations(range(len(cams)), 2):
        e, norm = edge_from_cameras(cams[a], cams[b], names[a], names[b], score)
        edges.append(e)
        norms[frozenset((names[a], names[b]))] = norm
    return build_graph(list(names), edges), norms


class TestSolveRelativeScales:
    def test_three_cameras_recover_baseline_ratios(self):
        # centers at distances giving baselines 2, 3, 4 (scaled triangle)
        from camocap.camgeom import CameraModel, Distortion, Intrinsics
        from conftest import lookat_pose

        centers = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.6912, 2.919, 0.0]])
        # |c0-c1| = 2, |c0-c2| = 3, |c1-c2| ~ 4 approx; solve exact below
        d01 = np.linalg.norm(centers[0] - centers[1])
        intr = Intrinsics(1000, 1000, 640, 360, 1280, 720)
        cams = [
            CameraModel(intr, Distortion(), lookat_pose(c, (1, 1, 6))) for c in centers
        ]
        names = ["a", "b", "c"]
        graph, norms = complete_graph(cams, names)
        sol = solve_relative_scales(graph, mu=1e-3)
        index = graph.edge_index()
        ratio = None
        for key, true_norm in norms.items():
            r = sol.scales[index[key]] / true_norm
            if ratio is None:
                ratio = r
            assert r == pytest.approx(ratio, rel=1e-4)

    def test_two_camera_graph_returns_unit_scale(self):
        cams = ring_cameras(2)
        e, _ = edge_from_cameras(cams[0], cams[1], "a", "b")
        graph = build_graph(["a", "b"], [e])
        sol = solve_relative_scales(graph)
        assert sol.n_triplets == 0
        assert np.array_equal(sol.scales, [1.0])

    def test_complete_graph_loops_close(self):
        cams = ring_cameras(4, radius=2.5)
        names = [f"c{i}" for i in range(4)]
        graph, norms = complete_graph(cams, names)
        sol = solve_relative_scales(graph)
        index = graph.edge_index()
        # scales proportional to true norms makes |A s| vanish
        keys = list(norms)
        base = sol.scales[index[keys[0]]] / norms[keys[0]]
        lam = np.array([sol.scales[index[k]] for k in keys])
        expected = base * np.array([norms[k] for k in keys])
        assert np.allclose(lam, expected, rtol=1e-6)
        # explicit loop closure: compose scaled transforms around each triplet
        for a, b, c in itertools.combinations(range(4), 3):
            t_ab = _scaled_transform(graph, sol, names[a], names[b])
            t_bc = _scaled_transform(graph, sol, names[b], names[c])
            t_ca = _scaled_transform(graph, sol, names[c], names[a])
            loop = t_ca.compose(t_bc.compose(t_ab))
            angle = 2 * np.arccos(np.clip(abs(loop.q[0]), -1, 1))
            assert angle < 1e-6
            assert np.linalg.norm(loop.t) < 1e-6 * base

    def test_disconnected_graph_raises(self):
        cams = ring_cameras(4)
        e1, _ = edge_from_cameras(cams[0], cams[1], "a", "b")
        e2, _ = edge_from_cameras(cams[2], cams[3], "c", "d")
        with pytest.raises(DisconnectedGraph) as exc:
            build_graph(["a", "b", "c", "d"], [e1, e2])
        assert "a,b" in str(exc.value) or "c,d" in str(exc.value)

    def test_scales_positive_under_noise(self, rng):
        cams = ring_cameras(5, radius=3.0)
        names = [f"c{i}" for i in range(5)]
        edges = []
        for a, b in itertools.combinations(range(5), 2):
            e, _ = edge_from_cameras(cams[a], cams[b], names[a], names[b],
                                     score=float(rng.uniform(1e-9, 1e-6)))
            # perturb the stored direction a little
            noisy_dir = e.translation_dir + rng.normal(0, 0.02, 3)
            noisy_dir /= np.linalg.norm(noisy_dir)
            e.translation_dir = noisy_dir
            edges.append(e)
        graph = build_graph(names, edges)
        sol = solve_relative_scales(graph)
        assert np.all(sol.scales > 0)


def _scaled_transform(graph, sol, src, dst):
    from camocap.scalegraph import _edge_transform

    index = graph.edge_index()
    e = graph.edges[index[frozenset((src, dst))]]
    rot, tdir = _edge_transform(e, src)
    return Pose.from_rt(rot, sol.scales[index[frozenset((src, dst))]] * tdir)


class TestMst:
    def _edge(self, a, b, score):
        return PairCalibration(
            cam_i=a, cam_j=b,
            essential=np.eye(3) / np.sqrt(2),
            rotation_q=np.array([1.0, 0, 0, 0]),
            translation_dir=np.array([1.0, 0, 0]),
            inliers=np.arange(5),
            score=score,
        )

    def test_triangle_keeps_two_smallest(self):
        graph = build_graph(
            ["a", "b", "c"],
            [self._edge("a", "b", 1.0), self._edge("b", "c", 2.0), self._edge("a", "c", 3.0)],
        )
        tree = extract_mst(graph)
        assert sorted(e.score for e in tree) == [1.0, 2.0]

    def test_tree_input_unchanged(self):
        edges = [self._edge("a", "b", 5.0), self._edge("b", "c", 1.0)]
        graph = build_graph(["a", "b", "c"], edges)
        tree = extract_mst(graph)
        assert {frozenset((e.cam_i, e.cam_j)) for e in tree} == {
            frozenset(("a", "b")),
            frozenset(("b", "c")),
        }

    def test_matches_exhaustive_minimum(self, rng):
        # brute force over all spanning trees of random graphs
        for trial in range(30):
            r = np.random.default_rng(trial)
            n = int(r.integers(3, 7))
            names = [f"n{i}" for i in range(n)]
            all_pairs = list(itertools.combinations(names, 2))
            keep = [p for p in all_pairs if r.uniform() < 0.7]
            # ensure connectivity with a random chain
            order = list(r.permutation(names))
            keep += [tuple(sorted((order[i], order[i + 1]))) for i in range(n - 1)]
            keep = sorted(set(keep))
            edges = [self._edge(a, b, float(r.uniform(0.1, 10))) for a, b in keep]
            graph = build_graph(names, edges)
            tree_cost = sum(e.score for e in extract_mst(graph))
            best = min(
                sum(e.score for e in subset)
                for subset in itertools.combinations(edges, n - 1)
                if len(_spanning(names, subset)) == 1
            )
            assert tree_cost == pytest.approx(best, abs=1e-12)


def _spanning(nodes, edges):
    from camocap.scalegraph import _components

    return _components(list(nodes), list(edges))


class TestComposeAbsolute:
    def test_single_edge_scaled(self):
        rot = quat_to_matrix(quat_from_axis_angle([0, 0, 1], np.deg2rad(30)))
        edge = PairCalibration(
            cam_i="a", cam_j="b",
            essential=essential_from_rt(rot, [1, 0, 0]),
            rotation_q=quat_from_matrix(rot),
            translation_dir=np.array([1.0, 0, 0]),
            inliers=np.arange(5),
            score=1e-9,
        )
        graph = build_graph(["a", "b"], [edge])
        from camocap.scalegraph import ScaleSolution

        poses = compose_absolute_extrinsics(graph, [edge], ScaleSolution(np.array([2.0]), 0.0, 0))
        assert np.allclose(poses["a"].t, 0)
        assert np.allclose(poses["a"].rotation, np.eye(3))
        assert np.linalg.norm(poses["b"].t) == pytest.approx(2.0, abs=1e-12)

    def test_chain_matches_direct_composition(self):
        cams = ring_cameras(3, radius=2.0)
        names = ["a", "b", "c"]
        e01, n01 = edge_from_cameras(cams[0], cams[1], "a", "b")
        e12, n12 = edge_from_cameras(cams[1], cams[2], "b", "c")
        graph = build_graph(names, [e01, e12])
        from camocap.scalegraph import ScaleSolution

        index = graph.edge_index()
        scales = np.empty(2)
        scales[index[frozenset(("a", "b"))]] = n01
        scales[index[frozenset(("b", "c"))]] = n12
        poses = compose_absolute_extrinsics(graph, [e01, e12], ScaleSolution(scales, 0.0, 0))
        # compare against ground truth re-rooted at camera a
        root_inv = cams[0].pose.inverse()
        for name, cam in zip(names, cams):
            expected = cam.pose.compose(root_inv)
            assert np.allclose(poses[name].rotation, expected.rotation, atol=1e-9)
            assert np.allclose(poses[name].t, expected.t, atol=1e-9)

    def test_reversed_edge_direction_equivalent(self):
        cams = ring_cameras(3, radius=2.0)
        e_fwd, norm = edge_from_cameras(cams[0], cams[1], "a", "b")
        e_rev, _ = edge_from_cameras(cams[1], cams[0], "b", "a")
        from camocap.scalegraph import ScaleSolution

        sol = ScaleSolution(np.array([norm]), 0.0, 0)
        g1 = build_graph(["a", "b"], [e_fwd])
        g2 = build_graph(["a", "b"], [e_rev])
        p1 = compose_absolute_extrinsics(g1, [e_fwd], sol)
        p2 = compose_absolute_extrinsics(g2, [e_rev], sol)
        assert np.allclose(p1["b"].rotation, p2["b"].rotation, atol=1e-12)
        assert np.allclose(p1["b"].t, p2["b"].t, atol=1e-12)

    def test_root_invariance(self):
        # relative geometry is independent of which camera anchors the tree
        cams = ring_cameras(4, radius=2.0)
        names = ["a", "b", "c", "d"]
        graph, norms = complete_graph(cams, names)
        sol = solve_relative_scales(graph)
        mst = extract_mst(graph)
        poses = compose_absolute_extrinsics(graph, mst, sol)
        poses2 = compose_absolute_extrinsics(graph, mst, sol, root="c")

        def rel(p, a, b):
            return p[b].compose(p[a].inverse())

        for a, b in [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")]:
            r1 = rel(poses, a, b)
            r2 = rel(poses2, a, b)
            assert np.allclose(r1.rotation, r2.rotation, atol=1e-9)
            assert np.allclose(r1.t, r2.t, atol=1e-9)

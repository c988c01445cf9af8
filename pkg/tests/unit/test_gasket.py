from fractions import Fraction
import math

import numpy as np
import pytest

from coalflow.core.config import settings
from coalflow.core.exceptions import GeometryError, LatticeError, ResourceGuardError
from coalflow.core.gasket import (
    MSD_EXPONENT, DownTriangle, MsdCurve, Triangle, TriPrism, apex_exit_violations, build_gasket,
    contains_downward, exit_points, export_graph, extent_sensitivity, gasket_flow_starts, gasket_walk, load_tri_tube,
    msd_curve, n_triangles, pair_meeting_probability, scaling_collapse, simulate_coalescing_gasket,
    survivor_count_gasket, survivor_history_gasket, to_euclidean, tri_tube, tri_tube_crosses,
)
from coalflow.core.geometry import SampledPath
from coalflow.core.stats import ks_distance


def walk_until_exit(g, tri, walks, rng):
    """Apex index (0 corner, 1 right, 2 top) and step count at which walks from
    the midpoint of the bottom edge first leave ``tri``"""
    apices = tri.lattice_apices(g.n)
    pos = np.full(walks, g.vertex(*((apices[0] + apices[1]) // 2)))
    apex = np.full(walks, -1)
    steps = np.zeros(walks, dtype=np.int64)
    active = np.ones(walks, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        nxt = g.step(pos[idx], rng.random(len(idx)))
        steps[idx] += 1
        left = ~tri.contains_lattice(g.coords[nxt], g.n)
        gone = idx[left]
        at = np.all(g.coords[pos[gone]][:, None, :] == apices[None, :, :], axis=2)
        assert at.any(axis=1).all()
        apex[gone] = at.argmax(axis=1)
        active[gone] = False
        pos[idx] = nxt
    return apex, steps


@pytest.mark.unit
class TestBuildGasket:
    @pytest.mark.parametrize("n", [0, 1, 2, 3])
    def test_vertex_and_edge_counts(self, n):
        g = build_gasket(n)
        assert g.size == 3 * (3 ** n + 1) // 2
        assert g.graph.number_of_edges() == 3 ** (n + 1)

    def test_small_levels(self):
        assert (build_gasket(0).size, build_gasket(0).graph.number_of_edges()) == (3, 3)
        assert (build_gasket(1).size, build_gasket(1).graph.number_of_edges()) == (6, 9)
        assert build_gasket(2).size == 15

    @pytest.mark.parametrize("n,m", [(0, 0), (2, 0), (3, 2)])
    def test_degree_profile(self, n, m):
        g = build_gasket(n, m)
        assert sorted(set(g.degree.tolist())) == [2, 4]
        assert int((g.degree == 2).sum()) == 3

    def test_every_edge_has_length_two_to_minus_n(self, gasket3_wide):
        g = gasket3_wide
        edges = np.array(list(g.graph.edges()))
        pts = to_euclidean(g.lattice_frame(edges.ravel())).reshape(-1, 2, 2)
        lengths = np.linalg.norm(pts[:, 0] - pts[:, 1], axis=1)
        assert np.allclose(lengths, 2.0 ** -3)

    def test_canonical_order(self, gasket2):
        x2 = 2 * gasket2.coords[:, 0] + gasket2.coords[:, 1]
        assert np.all(np.diff(x2) >= 0)
        assert tuple(gasket2.coords[0]) == (0, 0)

    def test_export(self, gasket2):
        data = export_graph(gasket2)
        assert set(data) == {"n", "m", "vertices", "edges"}
        assert len(data["vertices"]) == 15 and len(data["edges"]) == 27
        assert all(i < j for i, j in data["edges"])

    def test_off_graph_vertex(self, gasket2):
        with pytest.raises(LatticeError):
            gasket2.vertex(3, 3)

    def test_negative_level(self):
        with pytest.raises(LatticeError):
            build_gasket(-1)

    def test_guard(self, monkeypatch):
        monkeypatch.setattr(settings, "MAX_GASKET_TRIANGLES", 8)
        with pytest.raises(ResourceGuardError):
            build_gasket(2, 0)


@pytest.mark.unit
class TestTriangles:
    def test_family_membership(self):
        assert Triangle(1, 1, 0).in_family
        assert not Triangle(1, 1, 0, grid=2).in_family
        assert Triangle(1, 2, 0, grid=2).in_family

    def test_apices_are_exact(self):
        assert Triangle(2, 1, 1).apices() == (
            (Fraction(1, 4), Fraction(1, 4)), (Fraction(1, 2), Fraction(1, 4)), (Fraction(1, 4), Fraction(1, 2)),
        )

    def test_lattice_apices_need_a_fine_enough_level(self):
        with pytest.raises(LatticeError):
            Triangle(2, 1, 1).lattice_apices(1)

    def test_downward_triangle_in_upward_of_twice_the_size(self):
        down = DownTriangle(2, 1, 0)
        up = contains_downward(down)
        assert up == Triangle(1, 1, 0, grid=2)
        assert up.side == 2 * Fraction(1, 4)
        apices = np.array([[2, 0], [1, 1], [2, 1]])
        assert up.contains_lattice(apices, 2).all()

    def test_levels_of_triangles(self, gasket3_wide):
        assert len(n_triangles(gasket3_wide, 1)) == 3 ** 3
        with pytest.raises(LatticeError):
            n_triangles(gasket3_wide, 4)

    def test_exit_points_are_apices(self, gasket3_wide):
        tri = Triangle(1, 0, 0)
        apices = {tuple(p) for p in tri.lattice_apices(3)}
        exits = {tuple(gasket3_wide.coords[v]) for v in exit_points(tri, gasket3_wide)}
        # the corner of the extent has no outside neighbour
        assert exits == apices - {(0, 0)}


@pytest.mark.unit
class TestTriTube:
    def test_constant_path_inside(self):
        tube = tri_tube([TriPrism(Triangle(0, 0, 0), 0.0, 1.0)])
        assert tri_tube_crosses(SampledPath.constant([0.125, 0.125]), tube)

    def test_constant_path_outside(self):
        prisms = [TriPrism(Triangle(0, 0, 0), 0.0, 1.0)]
        assert not tri_tube_crosses(SampledPath.constant([0.75, 0.75]), prisms)

    def test_degenerate_prism(self):
        with pytest.raises(GeometryError):
            TriPrism(Triangle(0, 0, 0), 0.5, 0.5)

    def test_disconnected_prisms(self):
        with pytest.raises(GeometryError):
            tri_tube([TriPrism(Triangle(2, 0, 0), 0.0, 1.0), TriPrism(Triangle(2, 3, 0), 0.0, 1.0)])

    def test_load(self):
        tube = load_tri_tube({"id": "P", "prisms": [{"k": 1, "a": 0, "b": 1, "s": 0.05, "t": 0.2}]})
        assert tube.tube_id == "P" and tube.dim == 2
        assert tube.pieces[0].triangle == Triangle(1, 0, 1)

    def test_load_missing_field(self):
        with pytest.raises(GeometryError, match="missing field"):
            load_tri_tube({"prisms": [{"k": 1, "a": 0, "s": 0.0, "t": 1.0}]})


@pytest.mark.unit
class TestGasketWalk:
    def test_zero_steps(self, gasket2, seed):
        path = gasket_walk(gasket2, (1, 1), 0, seed)
        assert len(path.times) == 1
        assert path.positions[0].tolist() == [0.25, 0.25]

    def test_jumps_follow_edges(self, gasket3_wide, seed):
        g = gasket3_wide
        path = gasket_walk(g, (4, 4), 300, seed)
        assert np.allclose(np.diff(path.times), 5.0 ** -3)
        verts = [g.vertex(a, b) for a, b in np.rint(path.positions / g.edge_length).astype(int)]
        assert all(g.graph.has_edge(u, v) for u, v in zip(verts, verts[1:]))

    def test_off_graph_start(self, gasket2, seed):
        with pytest.raises(LatticeError):
            gasket_walk(gasket2, (2, 3), 5, seed)

    @pytest.mark.statistical
    def test_one_step_is_uniform(self, gasket3_wide, seed):
        g = gasket3_wide
        v = g.vertex(4, 4)
        draws = 100_000
        nxt = g.step(np.full(draws, v), np.random.default_rng(seed).random(draws))
        counts = np.array([(nxt == w).sum() for w in g.neighbors[v]])
        assert g.degree[v] == 4 and counts.sum() == draws
        assert np.all(np.abs(counts / draws - 0.25) < 4 * math.sqrt(0.25 * 0.75 / draws))

    def test_corner_reflects(self, gasket2):
        v = gasket2.vertex(0, 0)
        assert gasket2.degree[v] == 2
        assert set(gasket2.step(np.full(4, v), np.array([0.0, 0.3, 0.6, 0.99])).tolist()) == set(
            gasket2.neighbors[v, :2].tolist()
        )


@pytest.mark.unit
class TestApexExits:
    def test_walks_leave_only_through_apices(self, gasket3_wide, seed):
        g = gasket3_wide
        tri = Triangle(1, 0, 0)
        total = 0
        for r in range(200):
            path = gasket_walk(g, (1, 1), 150, seed, key=(r,))
            total += apex_exit_violations(path, tri, g)
        assert total == 0

    def test_counts_a_bad_exit(self, gasket3_wide):
        h = gasket3_wide.edge_length
        path = SampledPath(0.0, np.array([0.0, 1.0]), np.array([[2 * h, 2 * h], [3 * h, 2 * h]]))
        assert apex_exit_violations(path, Triangle(1, 0, 0), gasket3_wide) == 1


    @pytest.mark.statistical
    @pytest.mark.slow
    def test_exit_law_is_the_same_in_every_triangle(self, gasket3_wide, seed):
        g = gasket3_wide
        rng = np.random.default_rng(seed)
        extent_corners = {(0, 0), (g.side, 0), (0, g.side)}
        level = [t for t in n_triangles(g, 2)
                 if not {tuple(map(int, p)) for p in t.lattice_apices(g.n)} & extent_corners]
        chosen = [level[i] for i in rng.choice(len(level), size=20, replace=False)]
        laws = [walk_until_exit(g, tri, 10000, rng) for tri in chosen]
        for i in range(len(laws)):
            for j in range(i + 1, len(laws)):
                assert ks_distance(laws[i][0], laws[j][0]) < 0.05
                assert ks_distance(laws[i][1], laws[j][1]) < 0.05


@pytest.mark.unit
class TestCoalescingGasket:
    def test_same_vertex_time_merges(self, gasket2, seed):
        t = 2 * gasket2.time_step
        system = simulate_coalescing_gasket(gasket2, [((1, 1), t), ((1, 1), t)], 1.0, seed)
        assert system.merges[1].tau == pytest.approx(t)

    def test_off_grid_time(self, gasket2, seed):
        with pytest.raises(LatticeError):
            simulate_coalescing_gasket(gasket2, [((1, 1), 0.01)], 1.0, seed)

    def test_horizon_before_start(self, gasket2, seed):
        with pytest.raises(LatticeError):
            simulate_coalescing_gasket(gasket2, [((1, 1), 0.0)], 0.0, seed)

    def test_merged_walks_stay_together(self, gasket3_wide, seed):
        starts = [((a, b), 0.0) for a, b in [(0, 0), (1, 0), (0, 1), (2, 2), (4, 0)]]
        system = simulate_coalescing_gasket(gasket3_wide, starts, 0.5, seed)
        for path, m in zip(system.free_paths, system.merges):
            if m.merged:
                other = system.free_paths[m.target - 1]
                later = path.times >= m.tau
                assert np.array_equal(path.positions[later], other.evaluate(path.times[later]))

    def test_flow_starts_cover_the_face(self, gasket3_wide):
        tube = tri_tube([TriPrism(Triangle(1, 0, 0), 0.1, 0.5)])
        starts = gasket_flow_starts(gasket3_wide, [tube])
        verts = {v for v, _ in starts}
        assert {(0, 0), (4, 0), (0, 4), (2, 2)} <= verts
        assert (5, 0) in verts and (6, 0) not in verts
        times = {t for _, t in starts}
        assert len(times) == 1 and times.pop() == pytest.approx(12 / 125)

    def test_pair_from_one_vertex(self, gasket2, seed):
        assert pair_meeting_probability(gasket2, (1, 1), (1, 1), 3, 10, seed) == 1.0


@pytest.mark.unit
class TestGasketSurvivors:
    def test_history_nonincreasing(self, gasket3_wide, seed):
        region = [Triangle(0, 0, 0)]
        history = survivor_history_gasket(gasket3_wide, region, 0.2, seed)
        assert history[0] == 42
        assert len(history) == 26
        assert all(b <= a for a, b in zip(history, history[1:]))

    def test_long_run_leaves_at_most_one(self, gasket2, seed):
        assert survivor_count_gasket(gasket2, [Triangle(0, 0, 0)], 200.0, seed) <= 1

    def test_delta_must_be_positive(self, gasket2):
        with pytest.raises(ValueError):
            survivor_count_gasket(gasket2, [Triangle(0, 0, 0)], 0.0)


@pytest.mark.unit
class TestMsd:
    def test_collapse_of_exact_scaling(self):
        curve = MsdCurve(3, (1, 5, 25), (1.0, 5.0, 25.0), (1.0, 4.0, 16.0), 10)
        assert scaling_collapse(curve) == pytest.approx(0.0)
        assert curve.slope() == pytest.approx(math.log(4) / math.log(5))

    def test_slope_needs_two_points(self):
        with pytest.raises(ValueError):
            MsdCurve(3, (1,), (1.0,), (1.0,), 10).slope()

    @pytest.mark.slow
    def test_walk_dimension(self, seed):
        g = build_gasket(4, 3)
        curve = msd_curve(g, (0, 0), [25, 125, 625, 3125], 2000, seed)
        assert curve.slope() == pytest.approx(MSD_EXPONENT, abs=0.08)
        assert scaling_collapse(curve) < 0.1

    def test_short_walks_do_not_see_the_extent(self, seed):
        assert extent_sensitivity(2, 2, (0, 0), [1, 5], 200, seed) == 0.0

    @pytest.mark.statistical
    def test_extent_stability(self, seed):
        assert extent_sensitivity(2, 2, (0, 0), [1, 5, 25], 500, seed) < 0.02

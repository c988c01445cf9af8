import itertools
import math

import numpy as np
import pytest

from coalflow.core.config import settings
from coalflow.core.coalesce import crossing_set
from coalflow.core.exceptions import LatticeError, ResourceGuardError
from coalflow.core.geometry import box_tube
from coalflow.core.walk1d import (
    StepKind, StepLaw, WalkSpec, exact_meeting_tail, flow_starts, killed_survivor_count, pair_meeting_tail,
    red_blue_coupling, simulate_coalescing_walks,
)


def three_particle_law(law, steps):
    """Exact law of the number of distinct survivors from {-1, 0, 1}, killed outside [-1, 1]"""
    states = {frozenset({-1, 0, 1}): 1.0}
    for _ in range(steps):
        nxt = {}
        for occupied, p in states.items():
            sites = sorted(occupied)
            for jumps in itertools.product(range(len(law.values)), repeat=len(sites)):
                q = p * math.prod(law.probs[j] for j in jumps)
                if q == 0:
                    continue
                moved = frozenset(x + law.values[j] for x, j in zip(sites, jumps) if -1 <= x + law.values[j] <= 1)
                nxt[moved] = nxt.get(moved, 0.0) + q
        states = nxt
    dist = np.zeros(4)
    for occupied, p in states.items():
        dist[len(occupied)] += p
    return dist


@pytest.mark.unit
class TestStepLaw:
    def test_lazy(self):
        law = StepLaw.lazy()
        assert law.kind is StepKind.LAZY
        assert law.sigma2 == pytest.approx(0.5)

    def test_plain_pm_one_is_periodic(self):
        with pytest.raises(LatticeError, match="periodic"):
            StepLaw.two_point(1.0)

    def test_uncentred(self):
        with pytest.raises(LatticeError, match="centred"):
            StepLaw((0, 1), (0.5, 0.5))

    def test_not_a_distribution(self):
        with pytest.raises(LatticeError):
            StepLaw((-1, 0, 1), (0.3, 0.3, 0.3))

    def test_custom_values_are_sorted(self):
        law = StepLaw((2, 0, -2, 1, -1), (0.1, 0.4, 0.1, 0.2, 0.2))
        assert law.values == (-2, -1, 0, 1, 2)
        assert law.max_jump == 2

    def test_steps_from_uniforms(self):
        law = StepLaw.lazy()
        assert law.steps(np.array([0.0, 0.24, 0.25, 0.74, 0.75, 0.999])).tolist() == [-1, -1, 0, 0, 1, 1]

    def test_difference_law(self):
        offsets, probs = StepLaw.lazy().difference_law()
        assert probs.sum() == pytest.approx(1.0)
        assert probs[offsets == 0][0] == pytest.approx(0.25 ** 2 * 2 + 0.5 ** 2)


@pytest.mark.unit
class TestWalkSpec:
    def test_lattice_steps(self, lazy_spec):
        assert lazy_spec.space_step == pytest.approx(0.125 / math.sqrt(0.5))
        assert lazy_spec.time_step == pytest.approx(1 / 64)
        assert lazy_spec.last_row == 64

    @pytest.mark.parametrize("eta", [0.0, 1.5])
    def test_eta_range(self, eta):
        with pytest.raises(LatticeError):
            WalkSpec(eta=eta)

    def test_sigma2_must_match_law(self):
        with pytest.raises(LatticeError):
            WalkSpec(eta=0.5, sigma2=1.0)

    def test_off_lattice_start(self, lazy_spec, seed):
        with pytest.raises(LatticeError, match="off the lattice"):
            simulate_coalescing_walks(lazy_spec, [(0.1, 0.0)], seed)

    def test_start_at_horizon(self, lazy_spec, seed):
        with pytest.raises(LatticeError):
            simulate_coalescing_walks(lazy_spec, [(0.0, 1.0)], seed)

    def test_kill_sites(self):
        spec = WalkSpec(eta=0.5, step=StepLaw.two_point(0.5), kill_interval=(-1.0, 1.0))
        assert spec.kill_sites() == (-1, 1)


@pytest.mark.unit
class TestCoalescingWalks:
    def test_single_walk(self, lazy_spec, seed):
        system = simulate_coalescing_walks(lazy_spec, [(0.0, 0.0)], seed)
        (path,) = system.free_paths
        assert len(path.times) == lazy_spec.last_row + 1
        assert not system.merges[0].merged
        jumps = np.diff(path.x) / lazy_spec.space_step
        assert set(np.rint(jumps).astype(int).tolist()) <= {-1, 0, 1}

    def test_same_start_merges_immediately(self, lazy_spec, seed):
        system = simulate_coalescing_walks(lazy_spec, [(0.0, 0.25), (0.0, 0.25)], seed)
        assert system.merges[1].tau == pytest.approx(0.25)
        assert system.merges[1].target == 1

    def test_deterministic(self, lazy_spec, seed):
        h = lazy_spec.space_step
        a = simulate_coalescing_walks(lazy_spec, [(0.0, 0.0), (3 * h, 0.0)], seed, key=(4,))
        b = simulate_coalescing_walks(lazy_spec, [(0.0, 0.0), (3 * h, 0.0)], seed, key=(4,))
        assert np.array_equal(a.free_paths[1].x, b.free_paths[1].x)

    def test_equal_once_equal_forever(self, seed):
        spec = WalkSpec(eta=0.25)
        h = spec.space_step
        system = simulate_coalescing_walks(spec, [(i * h, 0.0) for i in range(8)], seed)
        for a, b in itertools.combinations(system.free_paths, 2):
            together = np.flatnonzero(a.x == b.x)
            if len(together):
                assert np.array_equal(a.x[together[0]:], b.x[together[0]:])

    def test_guard(self, lazy_spec, seed, monkeypatch):
        monkeypatch.setattr(settings, "MAX_PARTICLE_STEPS", 10)
        with pytest.raises(ResourceGuardError):
            simulate_coalescing_walks(lazy_spec, [(0.0, 0.0)], seed)

    @pytest.mark.statistical
    def test_pair_merge_matches_difference_chain(self, seed):
        spec = WalkSpec(eta=0.25)
        samples = 3000
        merged = np.array([
            simulate_coalescing_walks(spec, [(0.0, 0.0), (spec.space_step, 0.0)], seed, key=(r,)).merges[1].merged
            for r in range(samples)
        ])
        expected = 1.0 - exact_meeting_tail(spec.step, 0, 1, [spec.last_row])[0]
        assert abs(merged.mean() - expected) < 4 * math.sqrt(expected * (1 - expected) / samples)

    @pytest.mark.statistical
    def test_diffusive_variance(self, seed):
        spec = WalkSpec(eta=0.125)
        ends = np.array([
            simulate_coalescing_walks(spec, [(0.0, 0.0)], seed, key=(r,)).free_paths[0].x[-1]
            for r in range(2000)
        ])
        assert ends.var() == pytest.approx(1.0, abs=0.15)


@pytest.mark.unit
class TestFlowStarts:
    def test_covers_the_lower_face(self, lazy_spec, unit_tube):
        h = lazy_spec.space_step
        starts = flow_starts(lazy_spec, [unit_tube])
        xs = sorted(x for x, _ in starts)
        assert all(t == 0.0 for _, t in starts)
        assert xs[0] <= -h + 1e-12 and xs[-1] >= 1.0
        assert len(xs) == int(math.floor((1 + h) / h)) + 2

    def test_shared_starts_listed_once(self, lazy_spec, unit_tube):
        twice = flow_starts(lazy_spec, [unit_tube, box_tube((0.0, 0.0), (1.0, 0.5))])
        assert len(twice) == len(flow_starts(lazy_spec, [unit_tube]))

    def test_off_grid_face_rounds_down(self, lazy_spec):
        starts = flow_starts(lazy_spec, [box_tube((0.0, 0.3), (1.0, 1.0))])
        assert {t for _, t in starts} == {math.floor(0.3 * 64) / 64}

    def test_long_jumps_widen_the_window(self, seed):
        law = StepLaw((-3, -1, 0, 1, 3), (0.1, 0.2, 0.4, 0.2, 0.1))
        spec = WalkSpec(eta=0.125, step=law, horizon=0.5)
        h, dt = spec.space_step, spec.time_step
        # four fifths of the way from row 19 to row 20
        t0 = 19.8 * dt
        tube = box_tube((0.0, t0), (0.05, t0 + 0.0005))
        starts = flow_starts(spec, [tube])
        # a +3 jump from site -2 is at 0.4h at t0, inside the face
        assert any(x == pytest.approx(-2 * h) and t == pytest.approx(19 * dt) for x, t in starts)
        wide = [(s * h, 19 * dt) for s in range(-30, 31)]
        for r in range(20):
            flow = simulate_coalescing_walks(spec, starts, seed, key=(r,))
            every = simulate_coalescing_walks(spec, wide, seed, key=(r,))
            assert crossing_set(flow, [tube]).tolist() == crossing_set(every, [tube]).tolist()


@pytest.mark.unit
class TestKilledSurvivors:
    def test_history_nonincreasing(self, seed):
        count = killed_survivor_count(1.0, 8, 0.5, seed=seed)
        assert count.initial == 17
        assert len(count.history) == 33
        assert all(b <= a for a, b in zip(count.history, count.history[1:]))
        assert count.U == count.history[-1]

    def test_long_run_leaves_at_most_one(self, seed):
        assert killed_survivor_count(1.0, 4, 50.0, seed=seed).U <= 1

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            killed_survivor_count(1.0, 0, 0.5)

    @pytest.mark.statistical
    def test_three_particle_chain(self, seed):
        law = StepLaw.lazy()
        exact = three_particle_law(law, 2)
        samples = 4000
        counts = np.bincount(
            [killed_survivor_count(1.0, 1, 2.0, seed=seed, key=(r,)).U for r in range(samples)], minlength=4
        )
        for u in range(4):
            p = exact[u]
            assert abs(counts[u] / samples - p) <= 4 * math.sqrt(p * (1 - p) / samples) + 1e-12


@pytest.mark.unit
class TestPairTail:
    def test_same_point(self, seed):
        assert pair_meeting_tail(3, 3, [1, 10], 100, seed) == [0.0, 0.0]

    def test_exact_tail_same_point(self):
        assert exact_meeting_tail(StepLaw.lazy(), 2, 2, [0, 5]) == [0.0, 0.0]

    def test_exact_tail_one_step(self):
        # gap 1 closes in one step with P(xi - xi' = -1)
        law = StepLaw.lazy()
        offsets, probs = law.difference_law()
        assert exact_meeting_tail(law, 0, 1, [0, 1]) == pytest.approx([1.0, 1.0 - probs[offsets == -1][0]])

    def test_exact_tail_nonincreasing(self):
        tail = exact_meeting_tail(StepLaw.lazy(), 0, 4, [1, 4, 16, 64])
        assert all(b <= a for a, b in zip(tail, tail[1:]))

    @pytest.mark.statistical
    def test_monte_carlo_matches_exact(self, seed):
        samples = 20000
        (mc,) = pair_meeting_tail(0, 1, [4], samples, seed)
        (exact,) = exact_meeting_tail(StepLaw.lazy(), 0, 1, [4])
        assert abs(mc - exact) < 4 * math.sqrt(exact * (1 - exact) / samples)


@pytest.mark.unit
class TestRedBlue:
    def test_no_merges_inside_window(self, seed):
        spec = WalkSpec(eta=0.25, horizon=2.0)
        for r in range(10):
            coupling = red_blue_coupling(spec, 0.0, 0.5, 0.5, 1.0, seed, key=(r,))
            assert coupling.window_violations() == []
            assert coupling.shared_draws == ()
            assert all(m.time >= coupling.window[1] for m in coupling.cross_merges)

    def test_window_over_whole_horizon(self, seed):
        spec = WalkSpec(eta=0.25, horizon=1.0)
        coupling = red_blue_coupling(spec, 0.0, 0.25, 5.0, 1.0, seed)
        assert coupling.cross_merges == ()

    def test_empty_window_is_plain_shared_noise(self, seed):
        spec = WalkSpec(eta=0.25, horizon=1.0)
        coupling = red_blue_coupling(spec, 0.0, 0.25, 0.0, 1.0, seed)
        occupied = {
            float(p.evaluate(0.25)[0]) for p in coupling.blue.free_paths
            if np.isclose(p.times, 0.25).any()
        }
        merged_at_start = {m.red for m in coupling.cross_merges if m.time == pytest.approx(0.25)}
        for label, red in enumerate(coupling.red.free_paths, start=1):
            assert (label in merged_at_start) == (float(red.x[0]) in occupied)

    def test_shared_noise_in_window_is_reported(self, seed, monkeypatch):
        import coalflow.core.walk1d as walk1d

        monkeypatch.setattr(walk1d, "STREAM_AUX_FIELD", walk1d.STREAM_FIELD)
        spec = WalkSpec(eta=0.25, horizon=2.0)
        coupling = red_blue_coupling(spec, 0.0, 0.5, 0.5, 1.0, seed)
        assert all(m.time >= coupling.window[1] for m in coupling.cross_merges)
        violations = coupling.window_violations()
        assert len(violations) > 0
        assert all(coupling.window[0] <= v.time < coupling.window[1] for v in violations)

    def test_order_of_start_times(self, seed):
        with pytest.raises(ValueError):
            red_blue_coupling(WalkSpec(eta=0.25), 0.5, 0.5, 0.1, 1.0, seed)

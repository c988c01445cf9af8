import numpy as np
import pytest

from coalflow.core.config import settings
from coalflow.core.exceptions import ConfigError, LatticeError
from coalflow.core.gasket import Triangle
from coalflow.core.geometry import box_tube
from coalflow.models.schemas import Bm1dModel, GasketModel, StartsConfig, Walk1dModel, parse_config
from coalflow.services.estimate_service import EstimateService, count_ladder_violations, model_starts, run_replicas
from coalflow.services.study_service import StudyService


@pytest.fixture
def service():
    return EstimateService(workers=1)


@pytest.fixture
def walk_model():
    return Walk1dModel(eta=0.25, horizon=1.0)


@pytest.fixture
def bm_model():
    return Bm1dModel(dt=0.01, horizon=1.5,
                     starts=StartsConfig(kind="halton", count=12, x_range=(-2.0, 2.0), t_range=(0.0, 0.5)))


@pytest.fixture
def three_tubes():
    return [
        box_tube((0.0, 0.5), (1.0, 1.0), "A"),
        box_tube((-1.0, 0.6), (-0.2, 1.2), "B"),
        box_tube((-0.5, 0.7), (0.5, 1.0), "C"),
    ]


@pytest.mark.unit
class TestRunReplicas:
    def test_replica_order(self):
        assert run_replicas(abs, 10, workers=1, chunk=3) == list(range(10))

    def test_worker_count_does_not_matter(self):
        assert run_replicas(abs, 25, workers=3, chunk=4) == run_replicas(abs, 25, workers=1, chunk=4)

    def test_no_samples(self):
        with pytest.raises(ConfigError) as exc:
            run_replicas(abs, 0)
        assert exc.value.field == "samples"


@pytest.mark.unit
class TestStarts:
    def test_walk_flow_starts_sit_on_the_lattice(self, walk_model, unit_tube):
        spec = walk_model.walk_spec()
        for x, t in model_starts(walk_model, [unit_tube]):
            assert x / spec.space_step == pytest.approx(round(x / spec.space_step))
            assert t == 0.0

    def test_halton_starts_are_fixed(self, bm_model, unit_tube):
        assert model_starts(bm_model, [unit_tube]) == model_starts(bm_model, [unit_tube])
        assert len(model_starts(bm_model, [unit_tube])) == 12

    def test_permutation_relabels_the_same_set(self, bm_model, unit_tube):
        permuted = bm_model.model_copy(update={"starts": bm_model.starts.model_copy(update={"permute_seed": 3})})
        a, b = model_starts(bm_model, [unit_tube]), model_starts(permuted, [unit_tube])
        assert a != b and sorted(a) == sorted(b)


@pytest.mark.unit
class TestJointCrossing:
    def test_far_tube_is_never_crossed(self, service):
        model = Bm1dModel(dt=0.01, horizon=1.0, starts=StartsConfig(kind="points", points=[(0.0, 0.0)]))
        est = service.estimate_joint_crossing(model, [box_tube((50.0, 0.0), (51.0, 1.0))], 20, seed=3)
        assert est.p_hat == 0.0 and est.successes == 0
        assert est.ci[0] == 0.0 and est.ci[1] > 0.0

    def test_horizon_must_cover_tubes(self, service, walk_model):
        with pytest.raises(ConfigError, match="horizon"):
            service.estimate_joint_crossing(walk_model, [box_tube((0.0, 0.5), (1.0, 2.0))], 10)

    def test_deterministic(self, service, walk_model):
        tube = box_tube((0.0, 0.5), (1.0, 1.0))
        a = service.estimate_joint_crossing(walk_model, [tube], 30, seed=5)
        b = service.estimate_joint_crossing(walk_model, [tube], 30, seed=5)
        assert a == b

    def test_parallel_matches_serial(self, walk_model, monkeypatch):
        monkeypatch.setattr(settings, "REPLICA_CHUNK", 8)
        tube = box_tube((0.0, 0.5), (1.0, 1.0))
        serial = EstimateService(workers=1).estimate_joint_crossing(walk_model, [tube], 30, seed=5)
        parallel = EstimateService(workers=2).estimate_joint_crossing(walk_model, [tube], 30, seed=5)
        assert serial.successes == parallel.successes


@pytest.mark.unit
class TestLadders:
    def test_n_ladder_is_monotone(self, service, bm_model, three_tubes):
        report = service.n_ladder_study(bm_model, three_tubes, [3, 6, 12], 40, seed=2, strict=True)
        assert report.monotone_flag and report.violations == 0
        raw = np.array(report.raw)
        assert raw.shape == (40, 3, 3)
        assert np.all(raw[:, 1:, :] >= raw[:, :-1, :])
        assert np.array(report.extra["tube_p_hat"]).shape == (3, 3)
        assert all(b >= a for a, b in zip(report.p_hat, report.p_hat[1:]))

    def test_violation_in_one_tube_is_counted(self):
        # replica 0: joint indicator False on both rungs, yet tube 1 is lost
        sets = np.zeros((2, 2, 2), dtype=bool)
        sets[0, 0] = [False, True]
        sets[0, 1] = [True, False]
        sets[1, 0] = [True, False]
        sets[1, 1] = [True, True]
        assert not sets[0].all(axis=1).any()
        assert count_ladder_violations(sets) == 1

    def test_no_violation_when_sets_grow(self):
        sets = np.array([[[False, False], [True, False], [True, True]]])
        assert count_ladder_violations(sets) == 0

    def test_n_ladder_beyond_the_starts(self, service, bm_model, three_tubes):
        with pytest.raises(ConfigError, match="exceeds"):
            service.n_ladder_study(bm_model, three_tubes, [5, 50], 5)

    def test_sup_is_the_last_rung(self, service, bm_model, three_tubes):
        report = service.sup_characterization(bm_model, three_tubes, [3, 6, 12], 40, seed=2)
        assert report.extra["sup_equals_last"]
        assert report.extra["sup"] == report.p_hat[-1]
        assert all(d >= 0 for d in report.extra["increments"])

    def test_enlargement_is_monotone(self, service, walk_model, unit_tube):
        report = service.enlargement_stability(walk_model, unit_tube, [0.2, 0.1, 0.05], 40, seed=4, strict=True)
        assert report.monotone_flag
        assert report.reference is not None
        assert all(g >= 0 for g in report.extra["gaps"])
        assert len(report.estimates) == 3

    def test_eta_ladder_has_a_reference(self, service):
        model = Walk1dModel(eta=0.25, horizon=1.0)
        tubes = [box_tube((-0.5, 0.25), (0.5, 1.0), "S")]
        report = service.eta_ladder_study(model, tubes, [0.5, 0.25], 10, seed=8,
                                          reference_dt=1e-3, reference_spacing=0.125)
        assert report.parameter == "eta" and report.ladder == [0.5, 0.25]
        assert report.reference is not None and report.reference.samples == 10
        assert len(report.extra["gaps"]) == 2

    def test_gasket_levels(self, service):
        model = GasketModel(n=3, m=0, horizon=1.0)
        tube = parse_config({
            "model": {"kind": "gasket", "n": 3},
            "tubes": [{"prisms": [{"k": 1, "a": 0, "b": 0, "s": 0.1, "t": 0.5}]}],
            "study": {"kind": "single"},
        }).built_tubes()
        report = service.gasket_level_study(model, tube, [2, 3], 10, seed=8)
        assert report.ladder == [2, 3]
        assert len(report.extra["gaps"]) == 1


@pytest.mark.unit
class TestTailStudies:
    def test_killed_tail(self, service):
        report = service.killed_tail_study(1.0, [4, 8], 0.5, 50, seed=6)
        assert report.monotone_flag
        assert report.extra["C_hat"] >= 0
        table = report.extra["table"]
        assert {row["n"] for row in table} == {4, 8}
        assert all(row["ok"] for row in table if row["n"] == 4)
        assert all(e.event == "survivors>=2" and e.tubes == [] for e in report.estimates)

    def test_gasket_killed_tail(self, service):
        report = service.gasket_killed_tail_study([2, 3], 0, [Triangle(0, 0, 0)], 0.2, 20, seed=6)
        assert report.monotone_flag
        assert len(report.extra["ks_consecutive"]) == 1
        assert len(report.extra["geometric_decay"]) == 2
        assert {e.event for e in report.estimates} == {"survivors>=2"}

    def test_pair_tail(self, service):
        out = service.pair_tail_study([(0, 1), (0, 4)], [4, 16], 500, seed=6)
        assert len(out["table"]) == 4
        first = out["pairs"][0]
        assert first["exact_t"] == 4 and 0 < first["exact"] < 1

    def test_gasket_pair(self, service):
        out = service.gasket_pair_study(GasketModel(n=3), [1, 2], 3, 20, seed=6)
        assert len(out["table"]) == 6
        assert all(row["steps"] == 5 ** (3 - row["k"]) - 1 for row in out["table"])
        assert out["c_hat"] == min(row["p"] for row in out["table"])

    def test_gasket_pair_level_bound(self, service):
        with pytest.raises(ConfigError):
            service.gasket_pair_study(GasketModel(n=2), [2], 1, 5)

    def test_red_blue_has_no_window_merges(self, service):
        out = service.red_blue_study(Walk1dModel(eta=0.25, horizon=1.0), 0.0, 0.25, 0.25, 1.0, 20, seed=6)
        assert out["violations"] == 0
        assert len(out["raw"]) == 20

    def test_msd(self, service):
        out = service.msd_study(GasketModel(n=3, m=2), [1, 5, 25], 200, seed=6)
        assert len(out["table"]) == 3
        assert out["slope_error"] == abs(out["slope"] - out["expected_slope"])
        assert out["start"] == [0, 0] and out["extent_deviation"] is None

    def test_msd_from_an_inner_vertex(self, service):
        out = service.msd_study(GasketModel(n=3, m=2), [1, 5], 100, seed=6, start=(4, 4), extent_check=True)
        assert out["start"] == [4, 4]
        assert isinstance(out["extent_deviation"], float) and out["extent_deviation"] >= 0

    def test_msd_start_must_be_a_vertex(self, service):
        with pytest.raises(LatticeError):
            service.msd_study(GasketModel(n=3, m=2), [1, 5], 10, seed=6, start=(3, 3))


@pytest.mark.unit
class TestStudyService:
    def test_single_report(self, small_single_config):
        report, raw = StudyService(workers=1).run(parse_config(small_single_config))
        assert report.study == "single" and report.model == "walk1d"
        assert report.samples == 40 and report.seed == 7
        assert report.tubes == ["T"]
        assert len(report.p_hat) == 1
        assert [r.replica for r in raw] == list(range(40))
        assert all(len(r.values) == 1 for r in raw)
        assert report.extra["tube_p_hat"] == [report.p_hat[0]]
        assert report.config["samples"] == 40

    def test_report_carries_the_settings(self, small_single_config):
        report, _ = StudyService(workers=1).run(parse_config(small_single_config))
        assert report.settings["crossing_tol"] == settings.CROSSING_TOL
        assert "worker_processes" not in report.settings

    def test_single_without_tubes_summarizes_coalescence(self, small_single_config):
        config = dict(small_single_config, tubes=[])
        starts = {"kind": "points", "points": [[0.0, 0.0], [0.0, 0.0625], [0.0, 0.125]]}
        config["model"] = dict(config["model"], starts=starts)
        report, raw = StudyService(workers=1).run(parse_config(config))
        assert report.tubes == [] and report.p_hat == []
        assert report.extra["starts"] == 3
        assert 1 <= report.extra["mean_survivors"] <= 3
        assert len(raw) == 40
        assert all(1 <= r.values["survivors"] <= 3 for r in raw)
        assert all(r.values["survivors"] + r.values["merges"] == 3 for r in raw)

    def test_killed_report_table(self, small_killed_config):
        report, raw = StudyService(workers=1).run(parse_config(small_killed_config))
        assert report.parameter == "n" and report.ladder == [4, 8]
        assert {"n", "k", "tail", "bound"} <= set(report.table[0])
        assert report.extra["event"] == "survivors>=2"
        assert len(raw) == 30

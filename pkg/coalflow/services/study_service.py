from typing import Any, Dict, List, Optional, Tuple
import time

from loguru import logger

from coalflow.core.config import settings
from coalflow.core.gasket import Triangle
from coalflow.models.estimate_models import ConvergenceReport, CrossingEstimate, ReplicaRecord, StudyReport
from coalflow.models.schemas import ExperimentConfig, ModelKind
from coalflow.services.estimate_service import EstimateService


def _ladder_rows(report: ConvergenceReport) -> List[Dict[str, Any]]:
    rows = []
    for rung, e in zip(report.ladder, report.estimates):
        rows.append({
            report.parameter: rung, "p_hat": e.p_hat, "stderr": e.stderr,
            "ci_lo": e.ci[0], "ci_hi": e.ci[1], "monotone": report.monotone_flag,
        })
    if report.reference is not None:
        r = report.reference
        rows.append({report.parameter: "reference", "p_hat": r.p_hat, "stderr": r.stderr,
                     "ci_lo": r.ci[0], "ci_hi": r.ci[1], "monotone": report.monotone_flag})
    return rows


def _records(values) -> List[ReplicaRecord]:
    return [ReplicaRecord(replica=r, values=v) for r, v in enumerate(values)]


def _settings_snapshot() -> Dict[str, Any]:
    """Settings that shape results; the worker count does not"""
    snapshot = settings.describe()
    snapshot.pop("worker_processes", None)
    return snapshot


def _estimate_dict(e: Optional[CrossingEstimate]) -> Optional[Dict[str, Any]]:
    return None if e is None else e.model_dump(mode="json", exclude={"model"})


class StudyService:
    """Runs the study named by an experiment config and assembles its report"""

    def __init__(self, workers: Optional[int] = None, progress: bool = False):
        self.estimates = EstimateService(workers=workers, progress=progress)

    def run(self, config: ExperimentConfig) -> Tuple[StudyReport, List[ReplicaRecord]]:
        """Returns the report and the per-replica records for raw.jsonl"""
        started = time.perf_counter()
        kind = config.study_kind
        logger.info(f"Running study {kind.value} on {config.model_kind.value} "
                    f"({config.samples} samples, seed {config.seed})")
        try:
            fields, raw = getattr(self, f"_run_{kind.value}")(config)
        except Exception as e:
            logger.error(f"Study {kind.value} failed: {e}")
            raise
        tubes = config.built_tubes()
        report = StudyReport(
            study=kind.value,
            model=config.model_kind.value,
            config=config.model_dump(mode="json"),
            tubes=[t.label(i) for i, t in enumerate(tubes)],
            samples=config.samples,
            seed=config.seed,
            settings=_settings_snapshot(),
            wall_time=time.perf_counter() - started,
            **fields,
        )
        logger.info(f"Study {kind.value} finished in {report.wall_time:.1f}s")
        return report, raw

    # ------------------------------------------------------------ crossing studies

    def _from_ladder(self, report: ConvergenceReport) -> Tuple[Dict[str, Any], List[ReplicaRecord]]:
        extra = dict(report.extra)
        extra.setdefault("table", _ladder_rows(report))
        extra["violations"] = report.violations
        extra["ci_overlap"] = report.ci_overlap
        events = {e.event for e in report.estimates if e.event}
        if events:
            extra["event"] = events.pop()
        if report.reference is not None:
            extra["reference"] = _estimate_dict(report.reference)
        fields = {
            "parameter": report.parameter,
            "ladder": report.ladder,
            "p_hat": report.p_hat,
            "stderr": report.stderr,
            "monotone_flag": report.monotone_flag,
            "extra": extra,
        }
        return fields, _records(report.raw)

    def _run_single(self, config: ExperimentConfig):
        tubes = config.built_tubes()
        if not tubes:
            out = self.estimates.coalescence_summary(config.model, config.samples, config.seed)
            return {"extra": out}, _records(out.pop("raw"))
        e, sets = self.estimates.joint_crossing_sets(config.model, tubes, config.samples, config.seed)
        fields = {
            "parameter": "rung", "ladder": [0], "p_hat": [e.p_hat], "stderr": [e.stderr],
            "extra": {"successes": e.successes, "ci": list(e.ci), "tube_p_hat": sets.mean(axis=0).tolist()},
        }
        return fields, _records(sets.tolist())

    def _run_n_ladder(self, config: ExperimentConfig):
        return self._from_ladder(self.estimates.n_ladder_study(
            config.model, config.built_tubes(), config.study.n_values, config.samples, config.seed))

    def _run_sup_characterization(self, config: ExperimentConfig):
        return self._from_ladder(self.estimates.sup_characterization(
            config.model, config.built_tubes(), config.study.n_values, config.samples, config.seed))

    def _run_eta_ladder(self, config: ExperimentConfig):
        study = config.study
        if config.model_kind is ModelKind.GASKET:
            report = self.estimates.gasket_level_study(
                config.model, config.built_tubes(), study.levels, config.samples, config.seed)
        else:
            report = self.estimates.eta_ladder_study(
                config.model, config.built_tubes(), study.eta_values, config.samples, config.seed,
                study.reference_dt, study.reference_spacing, study.reference_margin)
        return self._from_ladder(report)

    def _run_enlargement(self, config: ExperimentConfig):
        tube = config.built_tubes()[config.study.tube]
        return self._from_ladder(self.estimates.enlargement_stability(
            config.model, tube, config.study.deltas, config.samples, config.seed))

    # ------------------------------------------------------------ tail and geometry studies

    def _run_killed_tail(self, config: ExperimentConfig):
        study = config.study
        if config.model_kind is ModelKind.GASKET:
            region = [Triangle(t.k, t.a, t.b) for t in study.region]
            report = self.estimates.gasket_killed_tail_study(
                study.levels, config.model.m, region, study.delta, config.samples, config.seed, study.k_values)
        else:
            report = self.estimates.killed_tail_study(
                study.K, study.n_values, study.delta, config.samples, config.seed,
                config.model.step.to_law(), study.k_values, study.bound_factor)
        return self._from_ladder(report)

    def _run_pair_tail(self, config: ExperimentConfig):
        study = config.study
        out = self.estimates.pair_tail_study(study.pairs, study.t_values, config.samples, config.seed,
                                             config.model.step.to_law(), study.exact_t)
        flag = all(p["nonincreasing"] for p in out["pairs"])
        return {"parameter": "t", "ladder": study.t_values, "monotone_flag": flag, "extra": out}, []

    def _run_gasket_pair(self, config: ExperimentConfig):
        study = config.study
        out = self.estimates.gasket_pair_study(config.model, study.k_values, study.pairs_per_k,
                                               config.samples, config.seed)
        return {"parameter": "k", "ladder": study.k_values, "extra": out}, []

    def _run_red_blue(self, config: ExperimentConfig):
        study = config.study
        out = self.estimates.red_blue_study(config.model, study.s, study.s_prime, study.delta, study.K,
                                            config.samples, config.seed)
        raw = _records(out.pop("raw"))
        return {"monotone_flag": out["violations"] == 0, "extra": out}, raw

    def _run_msd(self, config: ExperimentConfig):
        study = config.study
        out = self.estimates.msd_study(config.model, study.step_counts, study.walks, config.seed, study.fit_range,
                                       tuple(study.start), study.extent_check)
        return {"parameter": "steps", "ladder": study.step_counts, "extra": out}, []

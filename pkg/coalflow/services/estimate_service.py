from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache, partial
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import math

import numpy as np
from loguru import logger
from scipy.stats import qmc
from tqdm import tqdm

from coalflow.core.coalesce import CoalescingSystem, surviving_positions
from coalflow.core.config import settings
from coalflow.core.exceptions import ConfigError, SimulationError
from coalflow.core.gasket import (
    GasketGraph, MSD_EXPONENT, Triangle, build_gasket, extent_sensitivity, gasket_flow_starts, msd_curve,
    pair_meeting_probability, scaling_collapse, simulate_coalescing_gasket, survivor_history_gasket,
)
from coalflow.core.geometry import PolyTube, crosses_many, enlarge
from coalflow.core.noise import generator
from coalflow.core.stats import (
    binomial_stderr, block_consistency, joint_stderr, ks_distance, tail_probabilities, within_sigma,
)
from coalflow.core.walk1d import (
    StepLaw, WalkSpec, exact_meeting_tail, flow_starts, killed_survivor_count, pair_meeting_tail,
    red_blue_coupling, simulate_coalescing_bm, simulate_coalescing_walks,
)
from coalflow.models.estimate_models import ConvergenceReport, CrossingEstimate
from coalflow.models.schemas import Bm1dModel, GasketModel, StartsConfig, Walk1dModel

# seed stream of the Brownian reference in an eta ladder, apart from every rung
_REFERENCE_RUNG = 2 ** 20

# event estimated per rung of the survivor-tail studies
_TAIL_EVENT = "survivors>=2"


# ---------------------------------------------------------------- replicas

def _run_chunk(fn: Callable[[int], Any], replicas: Sequence[int]) -> List[Any]:
    return [fn(r) for r in replicas]


def run_replicas(fn: Callable[[int], Any], samples: int, workers: Optional[int] = None,
                 chunk: Optional[int] = None, progress: bool = False) -> List[Any]:
    """fn(r) for r in range(samples), in replica order.

    Every replica seeds itself from its index, so the result does not depend
    on the number of workers. ``fn`` must be picklable when workers > 1.
    """
    if samples < 1:
        raise ConfigError("must be >= 1", field="samples")
    workers = settings.WORKER_PROCESSES if workers is None else max(1, int(workers))
    chunk = chunk or settings.REPLICA_CHUNK
    chunks = [range(i, min(i + chunk, samples)) for i in range(0, samples, chunk)]
    bar = tqdm(total=samples, disable=not progress, unit="replica", leave=False)
    results: List[Any] = []
    try:
        if workers == 1 or len(chunks) == 1:
            for c in chunks:
                results.extend(_run_chunk(fn, c))
                bar.update(len(c))
        else:
            with ProcessPoolExecutor(max_workers=min(workers, len(chunks))) as pool:
                for c, out in zip(chunks, pool.map(partial(_run_chunk, fn), chunks)):
                    results.extend(out)
                    bar.update(len(c))
    finally:
        bar.close()
    return results


# ---------------------------------------------------------------- systems

@lru_cache(maxsize=8)
def _graph(n: int, m: int) -> GasketGraph:
    return build_gasket(n, m)


def _dense_points(cfg: StartsConfig) -> List[Tuple[float, float]]:
    (x_lo, x_hi), (t_lo, t_hi) = cfg.x_range, cfg.t_range
    if cfg.kind == "grid":
        return [(float(x), t_lo) for x in np.linspace(x_lo, x_hi, cfg.count)]
    timed = t_hi > t_lo
    u = qmc.Halton(d=2 if timed else 1, scramble=False).random(cfg.count)
    xs = x_lo + (x_hi - x_lo) * u[:, 0]
    ts = t_lo + (t_hi - t_lo) * u[:, 1] if timed else np.full(cfg.count, t_lo)
    return list(zip(xs.tolist(), ts.tolist()))


def _permute(starts: list, permute_seed: Optional[int]) -> list:
    if permute_seed is None:
        return starts
    order = generator(permute_seed).permutation(len(starts))
    return [starts[i] for i in order]


def model_starts(model, tubes: Sequence[PolyTube], eta: Optional[float] = None) -> list:
    """The ordered start set of a model for the given tubes"""
    cfg = model.starts
    if isinstance(model, GasketModel):
        g = _graph(model.n, model.m)
        if cfg.kind == "flow":
            starts = gasket_flow_starts(g, tubes)
        else:
            starts = [((int(p[0][0]), int(p[0][1])), float(p[1])) for p in cfg.points]
        return _permute(starts, cfg.permute_seed)
    if cfg.kind == "flow":
        starts = flow_starts(model.walk_spec(eta), tubes)
    elif cfg.kind == "points":
        starts = [(float(x), float(t)) for x, t in cfg.points]
    else:
        starts = _dense_points(cfg)
    if isinstance(model, Walk1dModel) and cfg.kind in ("halton", "grid"):
        spec = model.walk_spec(eta)
        starts = [(round(x / spec.space_step) * spec.space_step, round(t / spec.time_step) * spec.time_step)
                  for x, t in starts]
    return _permute(starts, cfg.permute_seed)


def simulate_model(model, starts: list, seed: int, key: tuple, eta: Optional[float] = None,
                   level: Optional[int] = None) -> CoalescingSystem:
    if isinstance(model, Walk1dModel):
        return simulate_coalescing_walks(model.walk_spec(eta), starts, seed, key=key)
    if isinstance(model, Bm1dModel):
        return simulate_coalescing_bm(starts, model.dt, model.horizon, seed, sigma2=model.sigma2, key=key)
    g = _graph(model.n if level is None else level, model.m)
    return simulate_coalescing_gasket(g, starts, model.horizon, seed, key=key)


def crossing_matrix(system: CoalescingSystem, tubes: Sequence[PolyTube]) -> np.ndarray:
    """(paths, tubes) crossing indicators of the coalesced paths"""
    if not len(system):
        return np.zeros((0, len(tubes)), dtype=bool)
    return np.stack([crosses_many(system.coalesced_paths, t) for t in tubes], axis=1)


def _joint(matrix: np.ndarray, n: Optional[int] = None) -> bool:
    """Every tube crossed by some path among the first n"""
    rows = matrix if n is None else matrix[:n]
    return bool(rows.any(axis=0).all())


def _model_key(model) -> Dict[str, Any]:
    return model.model_dump(mode="json")


def _check_horizon(model, tubes: Sequence[PolyTube]):
    if tubes and model.horizon < max(t.t1 for t in tubes):
        raise ConfigError(f"horizon {model.horizon} ends before the last tube end time "
                          f"{max(t.t1 for t in tubes)}", field="model.horizon")


# module-level replica bodies, so they pickle into worker processes

def _prefix_replica(model, tubes, n_values, seed, replica) -> List[List[bool]]:
    """crossing_set of the first n coalesced paths, per rung"""
    starts = model_starts(model, tubes)
    if n_values and n_values[-1] > len(starts):
        raise ConfigError(f"n={n_values[-1]} exceeds the {len(starts)} available starts", field="study.n_values")
    system = simulate_model(model, starts[:n_values[-1]] if n_values else starts, seed, (replica,))
    matrix = crossing_matrix(system, tubes)
    if not n_values:
        return [matrix.any(axis=0).tolist()]
    return [matrix[:n].any(axis=0).tolist() for n in n_values]


def _summary_replica(model, seed, replica) -> Tuple[int, int]:
    system = simulate_model(model, model_starts(model, []), seed, (replica,))
    return len(surviving_positions(system, model.horizon)), system.merge_count


def count_ladder_violations(sets: np.ndarray) -> int:
    """Replicas in which some tube entry of crossing_set drops from True to
    False along the ladder; ``sets`` is (replica, rung, tube)"""
    return int(np.sum(np.any(sets[:, 1:, :] < sets[:, :-1, :], axis=(1, 2))))


def _eta_replica(model, tubes, eta_values, reference, seed, replica) -> List[bool]:
    out = []
    for i, eta in enumerate(eta_values):
        system = simulate_model(model, model_starts(model, tubes, eta), seed, (replica, i), eta=eta)
        out.append(_joint(crossing_matrix(system, tubes)))
    if reference is not None:
        ref_model, ref_starts = reference
        system = simulate_model(ref_model, ref_starts, seed, (replica, _REFERENCE_RUNG))
        out.append(_joint(crossing_matrix(system, tubes)))
    return out


def _level_replica(model, tubes, levels, seed, replica) -> List[bool]:
    out = []
    for i, level in enumerate(levels):
        g = _graph(level, model.m)
        system = simulate_coalescing_gasket(g, gasket_flow_starts(g, tubes), model.horizon, seed, key=(replica, i))
        out.append(_joint(crossing_matrix(system, tubes)))
    return out


def _chain_replica(model, chain, seed, replica) -> List[bool]:
    system = simulate_model(model, model_starts(model, chain), seed, (replica,))
    return crossing_matrix(system, chain).any(axis=0).tolist()


def _killed_replica(K, n_values, delta, spec, seed, replica) -> Tuple[List[int], bool]:
    counts, monotone = [], True
    for i, n in enumerate(n_values):
        c = killed_survivor_count(K, n, delta, spec, seed, key=(replica, i))
        monotone &= all(b <= a for a, b in zip(c.history, c.history[1:]))
        counts.append(c.U)
    return counts, monotone


def _gasket_killed_replica(levels, m, region, delta, seed, replica) -> Tuple[List[int], bool]:
    counts, monotone = [], True
    for i, level in enumerate(levels):
        history = survivor_history_gasket(_graph(level, m), region, delta, seed, key=(replica, i))
        monotone &= all(b <= a for a, b in zip(history, history[1:]))
        counts.append(history[-1])
    return counts, monotone


def _red_blue_replica(spec, s, s_prime, delta, K, seed, replica) -> Tuple[int, int]:
    coupling = red_blue_coupling(spec, s, s_prime, delta, K, seed, key=(replica,))
    return len(coupling.window_violations()), len(coupling.cross_merges)


# ---------------------------------------------------------------- studies

class EstimateService:
    def __init__(self, workers: Optional[int] = None, progress: bool = False):
        self.workers = workers
        self.progress = progress

    def _replicas(self, fn, samples: int) -> List[Any]:
        return run_replicas(fn, samples, self.workers, progress=self.progress)

    def _estimates(self, indicators: np.ndarray, seed: int, tubes: Sequence[PolyTube], model) -> List[CrossingEstimate]:
        labels = [t.label(i) for i, t in enumerate(tubes)]
        samples = indicators.shape[0]
        return [
            CrossingEstimate.from_counts(int(col.sum()), samples, seed, labels, _model_key(model))
            for col in indicators.T
        ]

    def estimate_joint_crossing(self, model, tubes: Sequence[PolyTube], samples: int,
                                seed: Optional[int] = None, blocks: int = 10) -> CrossingEstimate:
        """P(every tube is crossed by some path of the coalescing system)"""
        return self.joint_crossing_sets(model, tubes, samples, seed, blocks)[0]

    def joint_crossing_sets(self, model, tubes: Sequence[PolyTube], samples: int, seed: Optional[int] = None,
                            blocks: int = 10) -> Tuple[CrossingEstimate, np.ndarray]:
        """The joint estimate and the (replica, tube) crossing sets behind it"""
        seed = settings.DEFAULT_SEED if seed is None else seed
        try:
            _check_horizon(model, tubes)
            values = self._replicas(partial(_prefix_replica, model, list(tubes), None, seed), samples)
            sets = np.array(values, dtype=bool).reshape(samples, len(tubes))
            indicators = sets.all(axis=1, keepdims=True)
            estimate = self._estimates(indicators, seed, tubes, model)[0]
            if samples >= blocks:
                check = block_consistency(indicators[:, 0], blocks)
                if not check.consistent:
                    logger.warning(f"Replica blocks disagree with the overall estimate (max z={check.max_z:.2f})")
            logger.info(f"Joint crossing estimate p={estimate.p_hat:.4f} +- {estimate.stderr:.4f} ({samples} samples)")
            return estimate, sets
        except Exception as e:
            logger.error(f"Error estimating joint crossing: {e}")
            raise

    def coalescence_summary(self, model, samples: int, seed: Optional[int] = None) -> Dict[str, Any]:
        """Distinct survivors at the horizon and merge counts of the configured
        starts, for runs without tubes"""
        seed = settings.DEFAULT_SEED if seed is None else seed
        try:
            starts = model_starts(model, [])
            values = self._replicas(partial(_summary_replica, model, seed), samples)
            survivors = np.array([v[0] for v in values])
            merges = np.array([v[1] for v in values])
            logger.info(f"{len(starts)} starts: {survivors.mean():.3f} survivors at the horizon on average")
            return {
                "starts": len(starts),
                "mean_survivors": float(survivors.mean()),
                "survivors_stderr": float(survivors.std(ddof=1) / np.sqrt(samples)) if samples > 1 else 0.0,
                "mean_merges": float(merges.mean()),
                "raw": [{"survivors": int(s), "merges": int(m)} for s, m in zip(survivors, merges)],
            }
        except Exception as e:
            logger.error(f"Error summarizing coalescence: {e}")
            raise

    def n_ladder_study(self, model, tubes: Sequence[PolyTube], n_values: Sequence[int], samples: int,
                       seed: Optional[int] = None, strict: bool = False) -> ConvergenceReport:
        """Estimates from the first n starts, all rungs driven by the same noise"""
        seed = settings.DEFAULT_SEED if seed is None else seed
        n_values = list(n_values)
        try:
            _check_horizon(model, tubes)
            values = self._replicas(partial(_prefix_replica, model, list(tubes), n_values, seed), samples)
            # (replica, rung, tube)
            sets = np.array(values, dtype=bool).reshape(samples, len(n_values), len(tubes))
            violations = count_ladder_violations(sets)
            if violations:
                logger.error(f"{violations} replicas lost a crossing when starts were added")
                if strict:
                    raise SimulationError(f"n-ladder monotonicity violated in {violations} replicas")
            indicators = sets.all(axis=2)
            report = ConvergenceReport(
                parameter="n", ladder=n_values, estimates=self._estimates(indicators, seed, tubes, model),
                monotone_flag=violations == 0, violations=violations, raw=sets.tolist(),
                extra={"tube_p_hat": sets.mean(axis=0).tolist()},
            )
            logger.info(f"n-ladder {n_values}: p={[round(p, 4) for p in report.p_hat]}")
            return report
        except Exception as e:
            logger.error(f"Error running n-ladder study: {e}")
            raise

    def sup_characterization(self, model, tubes: Sequence[PolyTube], n_values: Sequence[int], samples: int,
                             seed: Optional[int] = None) -> ConvergenceReport:
        """The finite-start probabilities and their supremum over the ladder.

        Under shared noise the sequence is nondecreasing, so the supremum is
        attained at the largest n; the report records whether it is.
        """
        report = self.n_ladder_study(model, tubes, n_values, samples, seed)
        p = report.p_hat
        best = int(np.argmax(p))
        report.extra.update({
            "sup": p[best],
            "attained_at": report.ladder[best],
            "sup_equals_last": p[best] == p[-1],
            "increments": [b - a for a, b in zip(p, p[1:])],
        })
        return report

    def _reference_starts(self, tubes: Sequence[PolyTube], spacing: float, margin: float):
        starts = []
        for tube in tubes:
            lo = min(p.lo[0] for p in tube.lower_face) - margin
            hi = max(p.hi[0] for p in tube.lower_face) + margin
            count = int(math.floor((hi - lo) / spacing)) + 1
            starts.extend((lo + i * spacing, tube.t0) for i in range(count))
        return starts

    def _ladder_report(self, parameter, ladder, indicators, reference_col, seed, tubes, model,
                       extra: Dict[str, Any]) -> ConvergenceReport:
        estimates = self._estimates(indicators[:, :len(ladder)], seed, tubes, model)
        reference = None
        if reference_col is not None:
            reference = CrossingEstimate.from_counts(
                int(reference_col.sum()), len(reference_col), seed, estimates[0].tubes, extra.get("reference_model", {})
            )
            target, rungs = reference, estimates
        else:
            # the finest rung is the reference of the others
            target, rungs = estimates[-1], estimates[:-1]
        gaps = [abs(e.p_hat - target.p_hat) for e in rungs]
        sigmas = [joint_stderr(e.stderr, target.stderr) for e in rungs]
        extra.update({
            "gaps": gaps,
            "joint_stderr": sigmas,
            "final_within_3sigma": within_sigma(rungs[-1].p_hat, target.p_hat, sigmas[-1]) if rungs else True,
            "gaps_shrinking": all(b <= a for a, b in zip(gaps, gaps[1:])),
        })
        return ConvergenceReport(parameter=parameter, ladder=list(ladder), estimates=estimates,
                                 monotone_flag=True, reference=reference, extra=extra, raw=indicators.tolist())

    def eta_ladder_study(self, model: Walk1dModel, tubes: Sequence[PolyTube], eta_values: Sequence[float],
                         samples: int, seed: Optional[int] = None, reference_dt: float = 1e-4,
                         reference_spacing: float = 1.0 / 64, reference_margin: float = 0.25) -> ConvergenceReport:
        """Rescaled walks at each eta against discretized coalescing Brownian motions
        started on a fine grid along every lower face"""
        seed = settings.DEFAULT_SEED if seed is None else seed
        eta_values = list(eta_values)
        try:
            _check_horizon(model, tubes)
            ref_model = Bm1dModel(dt=reference_dt, horizon=model.horizon, sigma2=1.0,
                                  starts=StartsConfig(kind="points", points=[(0.0, 0.0)]))
            ref_starts = self._reference_starts(tubes, reference_spacing, reference_margin)
            fn = partial(_eta_replica, model, list(tubes), eta_values, (ref_model, ref_starts), seed)
            indicators = np.array(self._replicas(fn, samples), dtype=bool)
            report = self._ladder_report("eta", eta_values, indicators, indicators[:, -1], seed, tubes, model,
                                         {"reference_model": {"kind": "bm1d", "dt": reference_dt,
                                                              "starts": len(ref_starts)}})
            logger.info(f"eta-ladder {eta_values}: p={[round(p, 4) for p in report.p_hat]}, "
                        f"reference {report.reference.p_hat:.4f}")
            return report
        except Exception as e:
            logger.error(f"Error running eta-ladder study: {e}")
            raise

    def gasket_level_study(self, model: GasketModel, tubes: Sequence[PolyTube], levels: Sequence[int],
                           samples: int, seed: Optional[int] = None) -> ConvergenceReport:
        """The eta ladder on the gasket: coarser levels against the finest one"""
        seed = settings.DEFAULT_SEED if seed is None else seed
        levels = list(levels)
        try:
            _check_horizon(model, tubes)
            indicators = np.array(self._replicas(partial(_level_replica, model, list(tubes), levels, seed), samples),
                                  dtype=bool)
            report = self._ladder_report("n", levels, indicators, None, seed, tubes, model, {})
            logger.info(f"gasket levels {levels}: p={[round(p, 4) for p in report.p_hat]}")
            return report
        except Exception as e:
            logger.error(f"Error running gasket level study: {e}")
            raise

    def enlargement_stability(self, model, tube: PolyTube, deltas: Sequence[float], samples: int,
                              seed: Optional[int] = None, strict: bool = False) -> ConvergenceReport:
        """p(T^delta) along decreasing delta, and the gap to p(T)"""
        seed = settings.DEFAULT_SEED if seed is None else seed
        deltas = list(deltas)
        try:
            chain = [enlarge(tube, d) for d in deltas] + [tube]
            _check_horizon(model, chain)
            indicators = np.array(self._replicas(partial(_chain_replica, model, chain, seed), samples), dtype=bool)
            violations = int(np.sum(np.any(indicators[:, 1:] > indicators[:, :-1], axis=1)))
            if violations:
                logger.error(f"{violations} replicas crossed a smaller enlargement but not a larger one")
                if strict:
                    raise SimulationError(f"enlargement monotonicity violated in {violations} replicas")
            estimates = self._estimates(indicators, seed, chain, model)
            base = estimates[-1]
            gaps = [e.p_hat - base.p_hat for e in estimates[:-1]]
            report = ConvergenceReport(
                parameter="delta", ladder=deltas, estimates=estimates[:-1], reference=base,
                monotone_flag=violations == 0, violations=violations, raw=indicators.tolist(),
                extra={"gaps": gaps, "gaps_shrinking": all(b <= a for a, b in zip(gaps, gaps[1:]))},
            )
            logger.info(f"Enlargement gaps {[round(g, 4) for g in gaps]} above p(T)={base.p_hat:.4f}")
            return report
        except Exception as e:
            logger.error(f"Error running enlargement study: {e}")
            raise

    def killed_tail_study(self, K: float, n_values: Sequence[int], delta: float, samples: int,
                          seed: Optional[int] = None, law: Optional[StepLaw] = None,
                          k_values: Optional[Sequence[int]] = None, bound_factor: float = 1.25) -> ConvergenceReport:
        """Survivor-count tails P(count >= k) per n. C is fitted at the first n as
        max_k k delta P(count >= k); the other n are checked against
        bound_factor * C / (delta k) for k >= 2"""
        seed = settings.DEFAULT_SEED if seed is None else seed
        n_values = list(n_values)
        try:
            spec = WalkSpec(1.0, law or StepLaw.lazy())
            values = self._replicas(partial(_killed_replica, K, n_values, delta, spec, seed), samples)
            counts = np.array([v[0] for v in values])
            monotone = all(v[1] for v in values)
            ks = list(k_values) if k_values else list(range(1, int(counts.max()) + 2))
            tails = np.stack([tail_probabilities(counts[:, i], ks) for i in range(len(n_values))])
            c_hat = float(max(k * delta * p for k, p in zip(ks, tails[0])))
            table, holds = [], True
            for i, n in enumerate(n_values):
                for k, p in zip(ks, tails[i]):
                    bound = c_hat / (delta * k)
                    ok = i == 0 or k < 2 or p <= bound_factor * bound
                    holds &= ok
                    table.append({"n": n, "k": k, "tail": float(p), "stderr": binomial_stderr(float(p), samples),
                                  "bound": bound, "ok": ok})
            estimates = [
                CrossingEstimate.from_counts(int(np.sum(counts[:, i] >= 2)), samples, seed, [],
                                             {"kind": "walk1d", "K": K, "delta": delta, "n": n}, event=_TAIL_EVENT)
                for i, n in enumerate(n_values)
            ]
            report = ConvergenceReport(
                parameter="n", ladder=n_values, estimates=estimates, monotone_flag=monotone,
                extra={"C_hat": c_hat, "bound_holds": holds, "bound_factor": bound_factor, "table": table},
                raw=counts.tolist(),
            )
            logger.info(f"Killed tail: C_hat={c_hat:.3f}, bound {'holds' if holds else 'FAILS'} for n={n_values[1:]}")
            return report
        except Exception as e:
            logger.error(f"Error running killed tail study: {e}")
            raise

    def gasket_killed_tail_study(self, levels: Sequence[int], m: int, region: Sequence[Triangle], delta: float,
                                 samples: int, seed: Optional[int] = None,
                                 k_values: Optional[Sequence[int]] = None) -> ConvergenceReport:
        """Survivor tails of killed coalescing gasket walks per level; KS distances
        between consecutive levels and the decay of P(N >= 3^M) in M"""
        seed = settings.DEFAULT_SEED if seed is None else seed
        levels = list(levels)
        try:
            values = self._replicas(partial(_gasket_killed_replica, levels, m, list(region), delta, seed), samples)
            counts = np.array([v[0] for v in values])
            monotone = all(v[1] for v in values)
            ks = list(k_values) if k_values else [3 ** M for M in range(0, 4)]
            table = []
            for i, level in enumerate(levels):
                for k, p in zip(ks, tail_probabilities(counts[:, i], ks)):
                    table.append({"n": level, "k": k, "tail": float(p), "stderr": binomial_stderr(float(p), samples)})
            ks_dist = [ks_distance(counts[:, i], counts[:, i + 1]) for i in range(len(levels) - 1)]
            decay = []
            for i in range(len(levels)):
                t = tail_probabilities(counts[:, i], [3 ** M for M in (1, 2, 3)])
                decay.append(bool(all(b <= a / 2 for a, b in zip(t, t[1:]))))
            estimates = [
                CrossingEstimate.from_counts(int(np.sum(counts[:, i] >= 2)), samples, seed, [],
                                             {"kind": "gasket", "n": level, "m": m, "delta": delta}, event=_TAIL_EVENT)
                for i, level in enumerate(levels)
            ]
            report = ConvergenceReport(
                parameter="n", ladder=levels, estimates=estimates, monotone_flag=monotone,
                extra={"ks_consecutive": ks_dist, "geometric_decay": decay, "table": table},
                raw=counts.tolist(),
            )
            logger.info(f"Gasket killed tail: KS between levels {[round(d, 3) for d in ks_dist]}")
            return report
        except Exception as e:
            logger.error(f"Error running gasket killed tail study: {e}")
            raise

    def pair_tail_study(self, pairs: Sequence[Tuple[int, int]], t_values: Sequence[int], samples: int,
                        seed: Optional[int] = None, law: Optional[StepLaw] = None,
                        exact_t: Optional[int] = 4) -> Dict[str, Any]:
        """P(tau_{x,y} > t) for independent walks; sqrt(t) P / |x - y| should be
        roughly flat and nonincreasing in t"""
        seed = settings.DEFAULT_SEED if seed is None else seed
        law = law or StepLaw.lazy()
        t_values = list(t_values)
        table, summary = [], []
        for i, (x, y) in enumerate(pairs):
            tails = pair_meeting_tail(x, y, t_values, samples, seed, law=law, key=(i,))
            scale = [math.sqrt(t) / abs(x - y) if x != y else 0.0 for t in t_values]
            norm = [p * c for p, c in zip(tails, scale)]
            norm_se = [binomial_stderr(p, samples) * c for p, c in zip(tails, scale)]
            for t, p, z in zip(t_values, tails, norm):
                table.append({"x": x, "y": y, "t": t, "tail": p, "stderr": binomial_stderr(p, samples),
                              "normalized": z})
            positive = [z for z in norm if z > 0]
            nonincreasing = all(
                b - a <= 3 * joint_stderr(sa, sb)
                for a, b, sa, sb in zip(norm, norm[1:], norm_se, norm_se[1:])
            )
            entry = {
                "x": x, "y": y,
                "variation": max(positive) / min(positive) if positive else 1.0,
                "nonincreasing": nonincreasing,
            }
            if exact_t is not None:
                exact = exact_meeting_tail(law, x, y, [exact_t])[0]
                est = pair_meeting_tail(x, y, [exact_t], samples, seed, law=law, key=(i, 1))[0]
                entry.update({"exact_t": exact_t, "exact": exact, "estimate": est,
                              "exact_agrees": within_sigma(est, exact, math.sqrt(exact * (1 - exact) / samples))})
            summary.append(entry)
        logger.info(f"Pair tails for {len(pairs)} pairs over t={t_values}")
        return {"table": table, "pairs": summary}

    def gasket_pair_study(self, model: GasketModel, k_values: Sequence[int], pairs_per_k: int, samples: int,
                          seed: Optional[int] = None) -> Dict[str, Any]:
        """P(tau < 5^-k) for random vertex pairs at Euclidean distance <= 2^-k"""
        seed = settings.DEFAULT_SEED if seed is None else seed
        g = _graph(model.n, model.m)
        rng = generator(seed, 0)
        positions = g.coords[:, 0] + 0.5 * g.coords[:, 1], g.coords[:, 1] * math.sqrt(3) / 2
        table = []
        for k in k_values:
            if k >= g.n:
                raise ConfigError(f"k={k} must be below the gasket level {g.n}", field="study.k_values")
            radius = 2.0 ** (g.n - k)
            steps = 5 ** (g.n - k) - 1
            for j in range(pairs_per_k):
                x = int(rng.integers(g.size))
                d = np.hypot(positions[0] - positions[0][x], positions[1] - positions[1][x])
                near = np.flatnonzero((d <= radius + 1e-9) & (d > 0))
                y = int(near[rng.integers(len(near))])
                p = pair_meeting_probability(g, g.coords[x], g.coords[y], steps, samples, seed, key=(k, j))
                table.append({"k": k, "x": g.coords[x].tolist(), "y": g.coords[y].tolist(), "steps": steps, "p": p})
        c_hat = min(r["p"] for r in table)
        logger.info(f"Gasket pair coalescence: c_hat={c_hat:.4f} over k={list(k_values)}")
        return {"table": table, "c_hat": c_hat, "positive": c_hat > 0}

    def red_blue_study(self, model: Walk1dModel, s: float, s_prime: float, delta: float, K: float,
                       samples: int, seed: Optional[int] = None) -> Dict[str, Any]:
        """Red/blue window violations (early merges or shared draws), over replicas"""
        seed = settings.DEFAULT_SEED if seed is None else seed
        values = self._replicas(partial(_red_blue_replica, model.walk_spec(), s, s_prime, delta, K, seed), samples)
        violations = sum(v[0] for v in values)
        if violations:
            logger.error(f"{violations} red/blue violations inside the decoupling window")
        return {"violations": violations, "mean_cross_merges": float(np.mean([v[1] for v in values])),
                "raw": [list(v) for v in values]}

    def msd_study(self, model: GasketModel, step_counts: Sequence[int], walks: int, seed: Optional[int] = None,
                  fit_range: Optional[Tuple[float, float]] = None, start: Tuple[int, int] = (0, 0),
                  extent_check: bool = False) -> Dict[str, Any]:
        """Walk-dimension regression and the (2, 5) rescaling collapse from the
        lattice vertex ``start``; ``extent_check`` also reruns at extent m + 1"""
        seed = settings.DEFAULT_SEED if seed is None else seed
        g = _graph(model.n, model.m)
        curve = msd_curve(g, start, step_counts, walks, seed)
        lo, hi = fit_range if fit_range else (None, None)
        slope = curve.slope(lo, hi)
        try:
            collapse = scaling_collapse(curve)
        except ValueError:
            collapse = None
        extent = None
        if extent_check:
            extent = extent_sensitivity(model.n, model.m, start, step_counts, walks, seed)
            if extent > 0.05:
                logger.warning(f"MSD moves by {extent:.3f} between extents m={model.m} and m={model.m + 1}")
        logger.info(f"MSD slope {slope:.4f} (expected {MSD_EXPONENT:.4f}), collapse deviation {collapse}")
        return {
            "start": list(start),
            "slope": slope,
            "expected_slope": MSD_EXPONENT,
            "slope_error": abs(slope - MSD_EXPONENT),
            "collapse_deviation": collapse,
            "extent_deviation": extent,
            "table": [{"steps": s, "t": t, "msd": v} for s, t, v in zip(curve.steps, curve.times, curve.msd)],
        }


estimate_service = EstimateService()

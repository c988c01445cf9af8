"""The countable coalescing rule.

Free paths are merged in label order: path j follows itself until the first
time tau_j it meets one of the already coalesced paths 1..j-1, then follows
the lowest-labelled one it met forever. Labels in merge records are 1-based,
list positions 0-based.
"""
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple
import math

import numpy as np
from loguru import logger

from coalflow.core.config import settings
from coalflow.core.exceptions import GeometryError, LatticeError
from coalflow.core.geometry import PolyTube, SampledPath, crosses
from coalflow.core.noise import STREAM_BRIDGE, generator


class MeetMode(str, Enum):
    GRID_EQUALITY = "grid_equality"
    BRIDGE_1D = "bridge_1d"


@dataclass(frozen=True)
class MergeRecord:
    path_index: int
    tau: float = math.inf
    target: Optional[int] = None

    def __post_init__(self):
        if self.path_index < 1:
            raise ValueError(f"path labels start at 1, got {self.path_index}")
        if math.isinf(self.tau) != (self.target is None):
            raise ValueError("tau is infinite exactly when there is no merge target")
        if self.target is not None and not 1 <= self.target < self.path_index:
            raise ValueError(f"path {self.path_index} cannot merge into {self.target}")

    @property
    def merged(self) -> bool:
        return self.target is not None


@dataclass(frozen=True, eq=False)
class CoalescingSystem:
    free_paths: Tuple[SampledPath, ...]
    coalesced_paths: Tuple[SampledPath, ...]
    merges: Tuple[MergeRecord, ...]

    def __post_init__(self):
        if not len(self.free_paths) == len(self.coalesced_paths) == len(self.merges):
            raise ValueError("free paths, coalesced paths and merge records must align")

    def __len__(self) -> int:
        return len(self.free_paths)

    def prefix(self, n: int) -> "CoalescingSystem":
        """The system of the first n paths; coalescing is prefix-stable"""
        return CoalescingSystem(self.free_paths[:n], self.coalesced_paths[:n], self.merges[:n])

    @property
    def merge_count(self) -> int:
        return sum(1 for m in self.merges if m.merged)


def _grid_indices(paths: Sequence[SampledPath]) -> Tuple[List[np.ndarray], float]:
    steps = [np.diff(p.times) for p in paths if len(p.times) > 1]
    if not steps:
        return [np.zeros(1, dtype=np.int64) for _ in paths], 1.0
    h = float(min(s.min() for s in steps))
    ref = paths[0].times[0]
    indices = []
    for j, p in enumerate(paths):
        raw = (p.times - ref) / h
        idx = np.rint(raw)
        if np.any(np.abs(raw - idx) > 1e-6):
            raise LatticeError(f"grid mismatch: path {j + 1} is not on the common grid of step {h:g}")
        indices.append(idx.astype(np.int64))
    return indices, h


def _coalesce_grid(paths: Sequence[SampledPath]):
    indices, _ = _grid_indices(paths)
    kmin = min(int(i[0]) for i in indices)
    kmax = max(int(i[-1]) for i in indices)
    width = kmax - kmin + 1
    d = paths[0].dim
    rows = np.full((len(paths), width, d), np.nan)
    coalesced: List[SampledPath] = []
    merges: List[MergeRecord] = []
    for j, (p, idx) in enumerate(zip(paths, indices)):
        free = np.full((width, d), np.nan)
        free[idx - kmin] = p.positions
        if j == 0:
            rows[0] = free
            coalesced.append(p)
            merges.append(MergeRecord(1))
            continue
        # NaN never compares equal, so undefined stretches never "meet"
        hit = np.all(rows[:j] == free[None, :, :], axis=2)
        cols = np.flatnonzero(hit.any(axis=0))
        if len(cols) == 0:
            rows[j] = free
            coalesced.append(p)
            merges.append(MergeRecord(j + 1))
            continue
        col = int(cols[0])
        target = int(np.flatnonzero(hit[:, col])[0])
        tau = float(p.times[np.searchsorted(idx - kmin, col)])
        rows[j, :col] = free[:col]
        rows[j, col:] = rows[target, col:]
        coalesced.append(p.splice(tau, coalesced[target]))
        merges.append(MergeRecord(j + 1, tau, target + 1))
    return coalesced, merges


def bridge_meeting_probability(gap_a, gap_b, dt, variance_rate):
    """P(a Brownian bridge of the given variance rate from gap_a to gap_b over dt hits 0)"""
    gap_a, gap_b = np.asarray(gap_a, dtype=float), np.asarray(gap_b, dtype=float)
    with np.errstate(over="ignore"):
        p = np.exp(-2.0 * gap_a * gap_b / (variance_rate * dt))
    return np.where(gap_a * gap_b <= 0, 1.0, p)


def _first_meeting_bridge(path: SampledPath, other: SampledPath, uniforms: np.ndarray,
                          variance_rate: float) -> float:
    """Earliest meeting time of ``path`` with ``other`` on path's own knots, inf if none"""
    start = max(path.start_time, other.start_time)
    end = other.end_time if other.end_time is not None else math.inf
    if path.end_time is not None:
        end = min(end, path.end_time)
    ts = path.times
    usable = (ts >= start) & (ts <= end)
    if not usable.any():
        return math.inf
    ts = ts[usable]
    gaps = path.x[usable] - other.evaluate(ts)[:, 0]
    if gaps[0] == 0.0:
        return float(ts[0])
    if len(ts) < 2:
        return math.inf
    u = uniforms[np.flatnonzero(usable)[:-1]]
    ga, gb, dt = gaps[:-1], gaps[1:], np.diff(ts)
    crossed = ga * gb <= 0
    bridged = ~crossed & (u < bridge_meeting_probability(ga, gb, dt, variance_rate))
    candidates = np.full(len(ga), math.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cross = ts[:-1] + dt * ga / (ga - gb)
    candidates[crossed] = t_cross[crossed]
    candidates[bridged] = (ts[:-1] + 0.5 * dt)[bridged]
    hits = np.flatnonzero(crossed | bridged)
    return float(candidates[hits[0]]) if len(hits) else math.inf


def _coalesce_bridge(paths: Sequence[SampledPath], sigma2: float, seed: int, key: tuple):
    if any(p.dim != 1 for p in paths):
        raise LatticeError("bridge_1d meeting detection needs one-dimensional paths")
    variance_rate = 2.0 * sigma2
    coalesced: List[SampledPath] = []
    merges: List[MergeRecord] = []
    for j, p in enumerate(paths):
        if j == 0:
            coalesced.append(p)
            merges.append(MergeRecord(1))
            continue
        uniforms = generator(seed, *key, STREAM_BRIDGE, j).random((j, max(len(p.times) - 1, 1)))
        taus = np.array([
            _first_meeting_bridge(p, coalesced[i], uniforms[i], variance_rate) for i in range(j)
        ])
        tau = float(taus.min())
        if math.isinf(tau):
            coalesced.append(p)
            merges.append(MergeRecord(j + 1))
            continue
        target = int(np.flatnonzero(taus == tau)[0])
        coalesced.append(p.splice(tau, coalesced[target]))
        merges.append(MergeRecord(j + 1, tau, target + 1))
    return coalesced, merges


def coalesce(free_paths: Sequence[SampledPath], meet_mode: MeetMode = MeetMode.GRID_EQUALITY, *,
             sigma2: float = 1.0, seed: Optional[int] = None, key: tuple = ()) -> CoalescingSystem:
    """Apply the coalescing rule to an ordered family of free paths.

    ``grid_equality`` declares a meeting at the first common grid time with
    equal positions (lattice models). ``bridge_1d`` also declares meetings
    between grid times: with certainty when the interpolants change order,
    otherwise with the Brownian-bridge hitting probability for the gap
    process of variance rate 2*sigma2, drawn from stream (seed, key, j).
    """
    free_paths = tuple(free_paths)
    if not free_paths:
        return CoalescingSystem((), (), ())
    if len({p.dim for p in free_paths}) != 1:
        raise GeometryError("free paths of mixed dimension")
    mode = MeetMode(meet_mode)
    if mode is MeetMode.GRID_EQUALITY:
        coalesced, merges = _coalesce_grid(free_paths)
    else:
        seed = settings.DEFAULT_SEED if seed is None else seed
        coalesced, merges = _coalesce_bridge(free_paths, sigma2, seed, key)
    system = CoalescingSystem(free_paths, tuple(coalesced), tuple(merges))
    logger.debug(f"Coalesced {len(system)} paths ({mode.value}): {system.merge_count} merges")
    return system


def crossing_set(system: CoalescingSystem, tubes: Sequence[PolyTube], tol: Optional[float] = None) -> np.ndarray:
    """Entry k is True iff some coalesced path crosses tubes[k]"""
    out = np.zeros(len(tubes), dtype=bool)
    for k, tube in enumerate(tubes):
        out[k] = any(crosses(p, tube, tol) for p in system.coalesced_paths)
    return out


def surviving_positions(system: CoalescingSystem, t: float) -> np.ndarray:
    """Distinct positions at time t of the coalesced paths alive at t"""
    alive = [p for p in system.coalesced_paths
             if p.start_time <= t and (p.end_time is None or p.end_time >= t)]
    if not alive:
        return np.empty((0, system.free_paths[0].dim if len(system) else 1))
    points = np.vstack([p.evaluate(t).reshape(1, -1) for p in alive])
    return np.unique(points, axis=0)

"""One-dimensional coalescing systems.

Lattice walks live on L_eta = (eta / sigma) Z x eta^2 Z. Internally a walk
is an integer site and an integer time row; the site-time noise field gives
every (row, site) one step, used by every walk standing there, so walks on
the same site move together forever and the whole flow is a function of the
seed.
"""
from dataclasses import dataclass, field
from enum import Enum
from functools import reduce
from typing import List, Optional, Sequence, Tuple
import math

import numpy as np
from loguru import logger

from coalflow.core.coalesce import CoalescingSystem, MeetMode, coalesce
from coalflow.core.config import settings
from coalflow.core.exceptions import LatticeError, ResourceGuardError
from coalflow.core.geometry import PolyTube, SampledPath
from coalflow.core.noise import (
    STREAM_AUX_FIELD, STREAM_FIELD, STREAM_PATH, STREAM_WALK, SiteField, generator,
)


class StepKind(str, Enum):
    LAZY = "lazy"
    TWO_POINT = "two_point"
    CUSTOM = "custom"


@dataclass(frozen=True)
class StepLaw:
    """Integer step distribution: P(xi = values[i]) = probs[i]"""

    values: Tuple[int, ...]
    probs: Tuple[float, ...]
    kind: StepKind = StepKind.CUSTOM

    def __post_init__(self):
        values = tuple(int(v) for v in self.values)
        probs = tuple(float(p) for p in self.probs)
        if len(values) != len(probs) or not values:
            raise LatticeError("step law needs matching, nonempty values and probabilities")
        if len(set(values)) != len(values):
            raise LatticeError(f"repeated step values {values}")
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-12:
            raise LatticeError(f"step probabilities must be a distribution, got {probs}")
        support = [v for v, p in zip(values, probs) if p > 0]
        mean = sum(v * p for v, p in zip(values, probs))
        if abs(mean) > 1e-12:
            raise LatticeError(f"step law must be centred, mean is {mean}")
        diffs = [abs(a - support[0]) for a in support[1:]]
        if not diffs or reduce(math.gcd, diffs) != 1:
            raise LatticeError(f"step law with support {support} is periodic")
        order = np.argsort(values)
        object.__setattr__(self, "values", tuple(values[i] for i in order))
        object.__setattr__(self, "probs", tuple(probs[i] for i in order))

    @classmethod
    def lazy(cls) -> "StepLaw":
        return cls((-1, 0, 1), (0.25, 0.5, 0.25), StepKind.LAZY)

    @classmethod
    def two_point(cls, p: float) -> "StepLaw":
        """A fair +-1 jump with total probability p, hold otherwise"""
        if not 0 < p <= 1:
            raise LatticeError(f"two_point jump probability must be in (0, 1], got {p}")
        return cls((-1, 0, 1), (p / 2, 1 - p, p / 2), StepKind.TWO_POINT)

    @property
    def sigma2(self) -> float:
        return float(sum(v * v * p for v, p in zip(self.values, self.probs)))

    @property
    def max_jump(self) -> int:
        return max(abs(v) for v, p in zip(self.values, self.probs) if p > 0)

    def steps(self, uniforms: np.ndarray) -> np.ndarray:
        cdf = np.cumsum(self.probs)
        cdf[-1] = 1.0
        idx = np.searchsorted(cdf, uniforms, side="right")
        return np.asarray(self.values, dtype=np.int64)[np.minimum(idx, len(self.values) - 1)]

    def difference_law(self) -> Tuple[np.ndarray, np.ndarray]:
        """Law of xi - xi' for independent copies, as (offsets, probs)"""
        m = max(abs(v) for v in self.values)
        p = np.zeros(2 * m + 1)
        for v, pv in zip(self.values, self.probs):
            p[v + m] += pv
        diff = np.convolve(p, p[::-1])
        return np.arange(-2 * m, 2 * m + 1), diff


@dataclass(frozen=True)
class WalkSpec:
    eta: float
    step: StepLaw = field(default_factory=StepLaw.lazy)
    horizon: float = 1.0
    kill_interval: Optional[Tuple[float, float]] = None
    sigma2: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise LatticeError(f"eta must lie in (0, 1], got {self.eta}")
        if self.sigma2 is not None and abs(self.sigma2 - self.step.sigma2) > 1e-12:
            raise LatticeError(f"sigma2={self.sigma2} disagrees with the step law variance {self.step.sigma2}")
        object.__setattr__(self, "sigma2", self.step.sigma2)
        if self.kill_interval is not None:
            lo, hi = self.kill_interval
            if not lo < hi:
                raise LatticeError(f"empty kill interval {self.kill_interval}")

    @property
    def space_step(self) -> float:
        return self.eta / math.sqrt(self.sigma2)

    @property
    def time_step(self) -> float:
        return self.eta ** 2

    def to_site(self, x: float) -> int:
        raw = x / self.space_step
        site = round(raw)
        if abs(raw - site) > 1e-9 * max(1.0, abs(raw)):
            raise LatticeError(f"start position {x} is off the lattice of step {self.space_step:g}")
        return int(site)

    def to_row(self, t: float) -> int:
        raw = t / self.time_step
        row = round(raw)
        if abs(raw - row) > 1e-9 * max(1.0, abs(raw)):
            raise LatticeError(f"start time {t} is off the lattice of step {self.time_step:g}")
        return int(row)

    def floor_row(self, t: float) -> int:
        return int(math.floor(t / self.time_step + 1e-9))

    def ceil_row(self, t: float) -> int:
        return int(math.ceil(t / self.time_step - 1e-9))

    @property
    def last_row(self) -> int:
        return self.floor_row(self.horizon)

    def kill_sites(self) -> Optional[Tuple[int, int]]:
        if self.kill_interval is None:
            return None
        lo, hi = self.kill_interval
        return int(math.ceil(lo / self.space_step - 1e-9)), int(math.floor(hi / self.space_step + 1e-9))


@dataclass(frozen=True)
class KilledCount:
    K: float
    n: int
    delta: float
    U: int
    initial: int
    history: Tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.U <= self.initial:
            raise ValueError(f"survivor count {self.U} outside [0, {self.initial}]")


def _guard(particles: int, steps: int):
    if particles * steps > settings.MAX_PARTICLE_STEPS:
        raise ResourceGuardError(
            f"{particles} particles x {steps} steps exceeds MAX_PARTICLE_STEPS={settings.MAX_PARTICLE_STEPS}"
        )


def _run_lattice(law: StepLaw, sites: np.ndarray, rows: np.ndarray, last_row: int, field: SiteField,
                 kill: Optional[Tuple[int, int]] = None, aux: Optional[SiteField] = None,
                 aux_mask: Optional[np.ndarray] = None, aux_rows: Tuple[int, int] = (0, 0),
                 record_draws: bool = False):
    """Move every particle by the field from its start row to ``last_row``.

    Returns (first_row, trajectory, on_aux, draws): trajectory[p, k - first_row] is
    the site of particle p at row k, NaN before its start and after its
    death. Particles in ``aux_mask`` read ``aux`` instead of ``field`` on rows
    in [aux_rows[0], aux_rows[1]); on_aux records which (particle, row) steps
    did, and is None without an auxiliary field. With ``record_draws``, draws
    holds the uniform each particle read on each row (NaN where it took no
    step); otherwise it is None.
    """
    first = int(rows.min())
    n_rows = last_row - first + 1
    _guard(len(sites), n_rows)
    traj = np.full((len(sites), n_rows), np.nan)
    on_aux = np.zeros(traj.shape, dtype=bool) if aux is not None else None
    draws = np.full(traj.shape, np.nan) if record_draws else None
    pos = sites.astype(np.int64).copy()
    alive = np.zeros(len(sites), dtype=bool)
    dead = np.zeros(len(sites), dtype=bool)
    for k in range(first, last_row + 1):
        starting = rows == k
        alive |= starting & ~dead
        if not alive.any():
            continue
        traj[alive, k - first] = pos[alive]
        if k == last_row:
            break
        idx = np.flatnonzero(alive)
        u = field.at(k, pos[idx])
        if aux is not None and aux_rows[0] <= k < aux_rows[1]:
            swap = idx[aux_mask[idx]]
            if len(swap):
                u[aux_mask[idx]] = aux.at(k, pos[swap])
                on_aux[swap, k - first] = True
        if draws is not None:
            draws[idx, k - first] = u
        pos[idx] = pos[idx] + law.steps(u)
        if kill is not None:
            out = (pos[idx] < kill[0]) | (pos[idx] > kill[1])
            if out.any():
                alive[idx[out]] = False
                dead[idx[out]] = True
    return first, traj, on_aux, draws


def _paths_from_trajectory(spec: WalkSpec, first: int, traj: np.ndarray) -> List[SampledPath]:
    paths = []
    rows = np.arange(first, first + traj.shape[1])
    for p in range(traj.shape[0]):
        defined = ~np.isnan(traj[p])
        ks = rows[defined]
        times = ks * spec.time_step
        killed = ks[-1] < first + traj.shape[1] - 1
        paths.append(SampledPath(
            float(times[0]), times, traj[p, defined] * spec.space_step,
            float(times[-1]) if killed else None,
        ))
    return paths


def _lattice_starts(spec: WalkSpec, starts: Sequence[Tuple[float, float]]) -> Tuple[np.ndarray, np.ndarray]:
    if not starts:
        raise LatticeError("at least one start point is needed")
    sites = np.array([spec.to_site(x) for x, _ in starts], dtype=np.int64)
    rows = np.array([spec.to_row(t) for _, t in starts], dtype=np.int64)
    if rows.max() >= spec.last_row:
        raise LatticeError(f"horizon {spec.horizon} must exceed every start time")
    kill = spec.kill_sites()
    if kill is not None and np.any((sites < kill[0]) | (sites > kill[1])):
        raise LatticeError("start points must lie inside the kill interval")
    return sites, rows


def simulate_coalescing_walks(spec: WalkSpec, starts: Sequence[Tuple[float, float]],
                              seed: Optional[int] = None, *, key: tuple = ()) -> CoalescingSystem:
    """Coalescing rescaled walks from the given space-time points of L_eta"""
    seed = settings.DEFAULT_SEED if seed is None else seed
    sites, rows = _lattice_starts(spec, starts)
    field = SiteField(seed, key + (STREAM_FIELD,))
    first, traj, _, _ = _run_lattice(spec.step, sites, rows, spec.last_row, field, spec.kill_sites())
    system = coalesce(_paths_from_trajectory(spec, first, traj), MeetMode.GRID_EQUALITY)
    logger.debug(f"Simulated {len(sites)} coalescing walks at eta={spec.eta:g}, {system.merge_count} merges")
    return system


def flow_starts(spec: WalkSpec, tubes: Sequence[PolyTube]) -> List[Tuple[float, float]]:
    """Every lattice site within reach of each tube's lower face, at the last row not after t0.

    Under the shared field every walk present at that row follows the walk
    started from its site, so these starts cross exactly the tubes crossed by
    the flow started from all of L_eta. Between rows a walk interpolates one
    jump, so a site up to max_jump steps outside the face can be on it at t0.
    """
    out: List[Tuple[float, float]] = []
    seen = set()
    h = spec.space_step
    reach = spec.step.max_jump * h
    for tube in tubes:
        if tube.dim != 1:
            raise LatticeError("walk1d tubes must be one-dimensional")
        lo = min(p.lo[0] for p in tube.lower_face) - reach
        hi = max(p.hi[0] for p in tube.lower_face) + reach
        row = spec.floor_row(tube.t0)
        kill = spec.kill_sites()
        for site in range(int(math.ceil(lo / h)), int(math.floor(hi / h)) + 1):
            if kill is not None and not kill[0] <= site <= kill[1]:
                continue
            if (site, row) not in seen:
                seen.add((site, row))
                out.append((site * h, row * spec.time_step))
    return out


def simulate_coalescing_bm(starts: Sequence[Tuple[float, float]], dt: float, horizon: float,
                           seed: Optional[int] = None, *, sigma2: float = 1.0,
                           key: tuple = ()) -> CoalescingSystem:
    """Independent Brownian motions on the dt grid, merged by the bridge rule.

    Path j draws its increments from stream (seed, key, j): the first n
    free paths do not depend on later starts.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    seed = settings.DEFAULT_SEED if seed is None else seed
    last = int(math.floor(horizon / dt + 1e-9))
    free = []
    for j, (x, s) in enumerate(starts):
        first = int(math.floor(s / dt + 1e-9)) + 1
        grid = np.arange(first, last + 1) * dt
        grid = grid[grid > s]
        times = np.concatenate([[s], grid])
        increments = generator(seed, *key, STREAM_PATH, j).normal(
            0.0, 1.0, len(times) - 1) * np.sqrt(sigma2 * np.diff(times))
        free.append(SampledPath(float(s), times, x + np.concatenate([[0.0], np.cumsum(increments)])))
    return coalesce(free, MeetMode.BRIDGE_1D, sigma2=sigma2, seed=seed, key=key)


def killed_survivor_count(K: float, n: int, delta: float, spec: Optional[WalkSpec] = None,
                          seed: Optional[int] = None, *, key: tuple = ()) -> KilledCount:
    """Distinct survivors at step ceil(delta n^2) of coalescing walks on Z started
    from every site of [-Kn, Kn] and killed on leaving it"""
    if n < 1 or delta <= 0:
        raise ValueError(f"need n >= 1 and delta > 0, got n={n}, delta={delta}")
    law = spec.step if spec is not None else StepLaw.lazy()
    seed = settings.DEFAULT_SEED if seed is None else seed
    half = int(math.floor(K * n + 1e-9))
    occupied = np.arange(-half, half + 1, dtype=np.int64)
    steps = int(math.ceil(delta * n * n - 1e-9))
    _guard(len(occupied), steps)
    field = SiteField(seed, key + (STREAM_FIELD,))
    history = [len(occupied)]
    for k in range(steps):
        if len(occupied) == 0:
            history.append(0)
            continue
        occupied = occupied + law.steps(field.at(k, occupied))
        occupied = np.unique(occupied[(occupied >= -half) & (occupied <= half)])
        history.append(len(occupied))
    return KilledCount(K, n, delta, int(len(occupied)), 2 * half + 1, tuple(history))


def pair_meeting_tail(x: int, y: int, t_values: Sequence[int], samples: int,
                      seed: Optional[int] = None, *, law: Optional[StepLaw] = None,
                      key: tuple = ()) -> List[float]:
    """Empirical P(tau_{x,y} > t): two independent walks on Z not yet on the same site"""
    law = law or StepLaw.lazy()
    seed = settings.DEFAULT_SEED if seed is None else seed
    t_values = [int(t) for t in t_values]
    if x == y:
        return [0.0 for _ in t_values]
    rng = generator(seed, *key, STREAM_WALK)
    a = np.full(samples, x, dtype=np.int64)
    b = np.full(samples, y, dtype=np.int64)
    met = np.zeros(samples, dtype=bool)
    tail = {}
    horizon = max(t_values) if t_values else 0
    for t in range(horizon + 1):
        if t in t_values:
            tail[t] = float(np.mean(~met))
        if t == horizon:
            break
        a += law.steps(rng.random(samples))
        b += law.steps(rng.random(samples))
        met |= a == b
    return [tail[t] for t in t_values]


def exact_meeting_tail(law: StepLaw, x: int, y: int, t_values: Sequence[int]) -> List[float]:
    """P(tau_{x,y} > t) exactly, by dynamic programming on the difference chain"""
    t_values = [int(t) for t in t_values]
    if x == y:
        return [0.0 for _ in t_values]
    offsets, probs = law.difference_law()
    horizon = max(t_values) if t_values else 0
    reach = abs(y - x) + horizon * int(offsets.max())
    dist = np.zeros(2 * reach + 1)
    dist[y - x + reach] = 1.0
    tail = {}
    for t in range(horizon + 1):
        if t in t_values:
            tail[t] = float(dist.sum())
        if t == horizon:
            break
        nxt = np.zeros_like(dist)
        for off, p in zip(offsets, probs):
            if p == 0:
                continue
            if off >= 0:
                nxt[off:] += p * dist[:len(dist) - off]
            else:
                nxt[:off] += p * dist[-off:]
        nxt[reach] = 0.0
        dist = nxt
    return [tail[t] for t in t_values]


@dataclass(frozen=True)
class CrossMerge:
    red: int
    blue: int
    time: float


@dataclass(frozen=True, eq=False)
class RedBlueCoupling:
    blue: CoalescingSystem
    red: CoalescingSystem
    window: Tuple[float, float]
    cross_merges: Tuple[CrossMerge, ...]
    shared_draws: Tuple[CrossMerge, ...] = ()

    def window_violations(self) -> List[CrossMerge]:
        """Cross-colour merges dated inside the decoupling window, plus every
        window row where a red and a blue walk on one site read the same draw"""
        early = [m for m in self.cross_merges if m.time < self.window[1] - 1e-12]
        return early + list(self.shared_draws)


def _cross_merges(first: int, traj_red: np.ndarray, traj_blue: np.ndarray, red_on_aux: np.ndarray,
                  time_step: float) -> List[CrossMerge]:
    """First row at which each red walk stands on a blue walk's site and both
    take their next step from the main field.

    A red walk reading the auxiliary field moves independently of a blue walk
    on its site, so such a visit is a coincidence, not a merge. Meetings at
    the final row have no step left to share and are not counted.
    """
    out = []
    last = traj_red.shape[1] - 1
    for r in range(traj_red.shape[0]):
        same = traj_red[r][None, :last] == traj_blue[:, :last]
        hits = np.argwhere(same & ~red_on_aux[r, :last][None, :])
        if len(hits) == 0:
            continue
        col = hits[:, 1].min()
        blue = int(hits[hits[:, 1] == col, 0].min())
        out.append(CrossMerge(r + 1, blue + 1, float((first + col) * time_step)))
    return out


def _shared_draws(first: int, traj_red: np.ndarray, traj_blue: np.ndarray, draws_red: np.ndarray,
                  draws_blue: np.ndarray, rows: Tuple[int, int], time_step: float) -> List[CrossMerge]:
    """First window row at which each red walk shares a site and a noise draw
    with a blue walk. Checks the draws themselves, not the aux bookkeeping."""
    lo, hi = rows[0] - first, rows[1] - first
    out = []
    for r in range(traj_red.shape[0]):
        same_site = traj_red[r][None, lo:hi] == traj_blue[:, lo:hi]
        same_draw = draws_red[r][None, lo:hi] == draws_blue[:, lo:hi]
        hits = np.argwhere(same_site & same_draw)
        if len(hits) == 0:
            continue
        col = hits[:, 1].min()
        blue = int(hits[hits[:, 1] == col, 0].min())
        out.append(CrossMerge(r + 1, blue + 1, float((first + lo + col) * time_step)))
    return out


def red_blue_coupling(spec: WalkSpec, s: float, s_prime: float, delta: float, K: float,
                      seed: Optional[int] = None, *, key: tuple = ()) -> RedBlueCoupling:
    """Blue walks from every site of [-K, K] at time s, red ones at s'; on rows
    of [s', s' + delta) red walks read an independent auxiliary field, so no
    red walk can coalesce with a blue one before s' + delta."""
    if not s < s_prime:
        raise ValueError(f"need s < s', got s={s}, s'={s_prime}")
    if delta < 0:
        raise ValueError(f"delta must be non-negative, got {delta}")
    seed = settings.DEFAULT_SEED if seed is None else seed
    h = spec.space_step
    half = int(math.floor(K / h + 1e-9))
    kill = (-half, half)
    site_range = np.arange(-half, half + 1, dtype=np.int64)
    row_s, row_sp = spec.floor_row(s), spec.floor_row(s_prime)
    row_end = spec.ceil_row(s_prime + delta)
    sites = np.concatenate([site_range, site_range])
    rows = np.concatenate([np.full(len(site_range), row_s), np.full(len(site_range), row_sp)])
    red_mask = np.concatenate([np.zeros(len(site_range), bool), np.ones(len(site_range), bool)])
    if row_sp >= spec.last_row:
        raise LatticeError(f"horizon {spec.horizon} must exceed s'={s_prime}")
    field = SiteField(seed, key + (STREAM_FIELD,))
    aux = SiteField(seed, key + (STREAM_AUX_FIELD,))
    first, traj, on_aux, draws = _run_lattice(spec.step, sites, rows, spec.last_row, field, kill,
                                              aux=aux, aux_mask=red_mask, aux_rows=(row_sp, row_end),
                                              record_draws=True)
    paths = _paths_from_trajectory(spec, first, traj)
    n = len(site_range)
    blue = coalesce(paths[:n], MeetMode.GRID_EQUALITY)
    red = coalesce(paths[n:], MeetMode.GRID_EQUALITY)
    merges = _cross_merges(first, traj[n:], traj[:n], on_aux[n:], spec.time_step)
    shared = _shared_draws(first, traj[n:], traj[:n], draws[n:], draws[:n], (row_sp, row_end), spec.time_step)
    window = (row_sp * spec.time_step, row_end * spec.time_step)
    logger.debug(f"Red/blue coupling: {len(merges)} cross-colour merges, window {window}")
    if shared:
        logger.warning(f"Red/blue coupling: {len(shared)} red walks shared a draw with a blue walk in the window")
    return RedBlueCoupling(blue, red, window, tuple(merges), tuple(shared))

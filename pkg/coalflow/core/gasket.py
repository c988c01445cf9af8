"""Sierpinski gasket graphs, walks on them and triangular tubes.

Vertices of G_n are stored as integer pairs (a, b) of the triangular
lattice with edge length 2^-n; the Euclidean point is
((a + b/2) 2^-n, b (sqrt(3)/2) 2^-n). Paths and prisms live in the affine
lattice frame (u, v) = (a 2^-n, b 2^-n), where every apex of a triangle of
E is an exact dyadic pair; ``to_euclidean`` converts for output, distances
and displacements. An upward triangle with corner (U, V) and side L is
{u >= U, v >= V, u + v <= U + V + L} in that frame.
"""
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple
import math

import networkx as nx
import numpy as np
from loguru import logger

from coalflow.core.coalesce import CoalescingSystem, MeetMode, coalesce
from coalflow.core.config import settings
from coalflow.core.exceptions import GeometryError, LatticeError, ResourceGuardError
from coalflow.core.geometry import PolyTube, SampledPath, crosses
from coalflow.core.noise import STREAM_FIELD, STREAM_WALK, SiteField, generator

SQRT3_2 = math.sqrt(3.0) / 2.0
# 2 / d_w with d_w = log 5 / log 2
MSD_EXPONENT = 2.0 * math.log(2.0) / math.log(5.0)


def to_euclidean(points: np.ndarray) -> np.ndarray:
    """Lattice-frame (u, v) points to planar Euclidean (x, y)"""
    points = np.asarray(points, dtype=float)
    out = np.empty_like(points)
    out[..., 0] = points[..., 0] + 0.5 * points[..., 1]
    out[..., 1] = SQRT3_2 * points[..., 1]
    return out


@dataclass(frozen=True)
class Triangle:
    """Upward triangle of side 2^-k with corner (a, b) 2^-grid; grid defaults to k.

    Members of E have their corner on the level-k lattice; ``in_family``
    tells whether this one does.
    """

    k: int
    a: int
    b: int
    grid: Optional[int] = None

    def __post_init__(self):
        grid = self.k if self.grid is None else int(self.grid)
        if grid < self.k:
            raise GeometryError(f"corner grid {grid} coarser than triangle level {self.k}")
        object.__setattr__(self, "grid", grid)

    @property
    def in_family(self) -> bool:
        step = 2 ** (self.grid - self.k)
        return self.a % step == 0 and self.b % step == 0

    @property
    def corner(self) -> Tuple[Fraction, Fraction]:
        return Fraction(self.a, 2 ** self.grid), Fraction(self.b, 2 ** self.grid)

    @property
    def side(self) -> Fraction:
        return Fraction(1, 2 ** self.k) if self.k >= 0 else Fraction(2 ** -self.k)

    def apices(self) -> Tuple[Tuple[Fraction, Fraction], ...]:
        u, v = self.corner
        return (u, v), (u + self.side, v), (u, v + self.side)

    def lattice_apices(self, n: int) -> np.ndarray:
        """Apices in level-n integer units; requires n >= grid"""
        if n < self.grid:
            raise LatticeError(f"triangle on grid {self.grid} has no level-{n} integer apices")
        s, side = 2 ** (n - self.grid), 2 ** (n - self.k)
        a, b = self.a * s, self.b * s
        return np.array([[a, b], [a + side, b], [a, b + side]], dtype=np.int64)

    def contains_lattice(self, points: np.ndarray, n: int) -> np.ndarray:
        """Exact closed membership of level-n integer points"""
        points = np.atleast_2d(np.asarray(points, dtype=np.int64))
        a, b = self.lattice_apices(n)[0]
        side = 2 ** (n - self.k)
        return (points[:, 0] >= a) & (points[:, 1] >= b) & (points[:, 0] + points[:, 1] <= a + b + side)

    def intersects(self, other: "Triangle") -> bool:
        (u1, v1), (u2, v2) = self.corner, other.corner
        reach = min(u1 + v1 + self.side, u2 + v2 + other.side)
        return max(u1, u2) + max(v1, v2) <= reach

    def halfspaces(self) -> Tuple[np.ndarray, np.ndarray]:
        u, v = (float(c) for c in self.corner)
        a = np.array([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]])
        return a, np.array([-u, -v, u + v + float(self.side)])

    def sample(self, mesh: float) -> np.ndarray:
        u0, v0 = (float(c) for c in self.corner)
        side = float(self.side)
        count = max(1, int(math.ceil(side / mesh)))
        i, j = np.meshgrid(np.arange(count + 1), np.arange(count + 1), indexing="ij")
        keep = i + j <= count
        return np.stack([u0 + side * i[keep] / count, v0 + side * j[keep] / count], axis=1)


@dataclass(frozen=True)
class DownTriangle:
    """Downward triangle with apices (a+1, b), (a, b+1), (a+1, b+1) in level-k units"""

    k: int
    a: int
    b: int


def contains_downward(down: DownTriangle) -> Triangle:
    """The upward triangle of twice the size containing a downward one"""
    return Triangle(down.k - 1, down.a, down.b, grid=down.k)


@dataclass(frozen=True)
class TriPrism:
    """triangle x [s, t] in (u, v, time)"""

    triangle: Triangle
    s: float
    t: float

    def __post_init__(self):
        if not float(self.s) < float(self.t):
            raise GeometryError(f"degenerate prism: s={self.s} t={self.t}")
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "t", float(self.t))

    @property
    def dim(self) -> int:
        return 2

    @property
    def t_lo(self) -> float:
        return self.s

    @property
    def t_hi(self) -> float:
        return self.t

    def halfspaces(self) -> Tuple[np.ndarray, np.ndarray]:
        a2, b2 = self.triangle.halfspaces()
        a = np.zeros((5, 3))
        a[:3, :2] = a2
        a[3, 2], a[4, 2] = -1.0, 1.0
        return a, np.concatenate([b2, [-self.s, self.t]])

    def touches(self, other) -> bool:
        if not isinstance(other, TriPrism):
            return False
        return self.s <= other.t and other.s <= self.t and self.triangle.intersects(other.triangle)

    def sample(self, mesh: float) -> np.ndarray:
        pts = self.triangle.sample(mesh)
        ts = np.linspace(self.s, self.t, max(1, int(math.ceil((self.t - self.s) / mesh))) + 1)
        return np.hstack([np.repeat(pts, len(ts), axis=0), np.tile(ts, len(pts))[:, None]])

    def slice_sample(self, t: float, mesh: float) -> np.ndarray:
        pts = self.triangle.sample(mesh)
        return np.hstack([pts, np.full((len(pts), 1), float(t))])

    def diameter(self) -> float:
        return math.hypot(float(self.triangle.side), self.t - self.s)


def tri_tube(prisms: Sequence[TriPrism], tube_id: Optional[str] = None) -> PolyTube:
    return PolyTube.from_pieces(list(prisms), tube_id)


def load_tri_tube(data: dict) -> PolyTube:
    """{"prisms": [{"k", "a", "b", "s", "t"}, ...], "id"?} to a tube"""
    try:
        prisms = [TriPrism(Triangle(int(p["k"]), int(p["a"]), int(p["b"]), p.get("grid")), p["s"], p["t"])
                  for p in data["prisms"]]
    except KeyError as e:
        raise GeometryError(f"triangular tube description is missing field {e}") from e
    return tri_tube(prisms, data.get("id"))


def tri_tube_crosses(path: SampledPath, prisms, tol: Optional[float] = None) -> bool:
    """crosses() for a union of triangular prisms"""
    tube = prisms if isinstance(prisms, PolyTube) else tri_tube(prisms)
    return crosses(path, tube, tol)


# ---------------------------------------------------------------- graph

def _subdivide(rounds: int) -> Tuple[np.ndarray, int]:
    """Corners of the upward triangles after ``rounds`` subdivisions of the
    triangle with corner 0 and side 2^rounds; the side left is 1"""
    corners = np.zeros((1, 2), dtype=np.int64)
    side = 2 ** rounds
    for _ in range(rounds):
        side //= 2
        corners = np.concatenate([corners, corners + [side, 0], corners + [0, side]])
    return corners, side


@dataclass(frozen=True, eq=False)
class GasketGraph:
    n: int
    m: int
    coords: np.ndarray
    neighbors: np.ndarray
    degree: np.ndarray
    graph: nx.Graph = field(repr=False)
    index: Dict[Tuple[int, int], int] = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.coords)

    @property
    def time_step(self) -> float:
        return 5.0 ** -self.n

    @property
    def edge_length(self) -> float:
        return 2.0 ** -self.n

    @property
    def side(self) -> int:
        """Extent side in level-n edges"""
        return 2 ** (self.n + self.m)

    def vertex(self, a: int, b: int) -> int:
        try:
            return self.index[(int(a), int(b))]
        except KeyError:
            raise LatticeError(f"({a}, {b}) is not a vertex of the level-{self.n} gasket") from None

    def lattice_frame(self, vertices) -> np.ndarray:
        return self.coords[np.asarray(vertices)] * self.edge_length

    def vertices_in(self, triangles: Sequence[Triangle]) -> np.ndarray:
        inside = np.zeros(self.size, dtype=bool)
        for tri in triangles:
            inside |= tri.contains_lattice(self.coords, self.n)
        return np.flatnonzero(inside)

    def step(self, vertices: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
        """Uniform neighbour choice: neighbour floor(u * degree)"""
        deg = self.degree[vertices]
        choice = np.minimum((uniforms * deg).astype(np.int64), deg - 1)
        return self.neighbors[vertices, choice]


def build_gasket(n: int, m: int = 0) -> GasketGraph:
    """G_n within the extent triangle of side 2^m, by n + m rounds of subdivision"""
    if n < 0 or m < 0:
        raise LatticeError(f"gasket level and extent must be non-negative, got n={n}, m={m}")
    if 3 ** (n + m) > settings.MAX_GASKET_TRIANGLES:
        raise ResourceGuardError(
            f"3^{n + m} triangles exceeds MAX_GASKET_TRIANGLES={settings.MAX_GASKET_TRIANGLES}"
        )
    corners, _ = _subdivide(n + m)
    right, up = corners + [1, 0], corners + [0, 1]
    raw = np.unique(np.vstack([corners, right, up]), axis=0)
    # canonical order: by Euclidean x, then y, both exact in half-units
    order = np.lexsort((raw[:, 1], 2 * raw[:, 0] + raw[:, 1]))
    coords = raw[order]
    index = {(int(a), int(b)): i for i, (a, b) in enumerate(coords)}
    lookup = lambda pts: np.array([index[(int(a), int(b))] for a, b in pts], dtype=np.int64)
    c, r, u = lookup(corners), lookup(right), lookup(up)
    edges = np.vstack([np.stack([c, r], 1), np.stack([c, u], 1), np.stack([r, u], 1)])
    graph = nx.Graph()
    graph.add_nodes_from(range(len(coords)))
    graph.add_edges_from(map(tuple, edges))
    degree = np.array([graph.degree[v] for v in range(len(coords))], dtype=np.int64)
    neighbors = np.full((len(coords), 4), -1, dtype=np.int64)
    for v in range(len(coords)):
        nb = sorted(graph.neighbors(v))
        neighbors[v, :len(nb)] = nb
    coords.setflags(write=False)
    neighbors.setflags(write=False)
    degree.setflags(write=False)
    logger.debug(f"Built gasket n={n} m={m}: {len(coords)} vertices, {graph.number_of_edges()} edges")
    return GasketGraph(n, m, coords, neighbors, degree, graph, index)


def export_graph(g: GasketGraph) -> dict:
    return {
        "n": g.n,
        "m": g.m,
        "vertices": g.coords.tolist(),
        "edges": sorted([min(i, j), max(i, j)] for i, j in g.graph.edges()),
    }


def n_triangles(g: GasketGraph, k: int) -> List[Triangle]:
    """The level-k triangles of the gasket within the extent, 0 <= k <= n"""
    if not 0 <= k <= g.n:
        raise LatticeError(f"triangle level {k} outside [0, {g.n}]")
    corners, _ = _subdivide(k + g.m)
    return [Triangle(k, int(a), int(b)) for a, b in corners]


def exit_points(triangle: Triangle, g: GasketGraph) -> List[int]:
    """Apices of ``triangle`` that are vertices of g with a neighbour outside it"""
    out = []
    for a, b in triangle.lattice_apices(g.n):
        v = g.index.get((int(a), int(b)))
        if v is None:
            continue
        nb = g.neighbors[v, :g.degree[v]]
        if not triangle.contains_lattice(g.coords[nb], g.n).all():
            out.append(v)
    return out


def apex_exit_violations(path: SampledPath, triangle: Triangle, g: GasketGraph) -> int:
    """Times a gasket walk path steps from inside ``triangle`` to outside
    through a vertex other than one of its apices"""
    pts = np.rint(path.positions / g.edge_length).astype(np.int64)
    inside = triangle.contains_lattice(pts, g.n)
    leaving = np.flatnonzero(inside[:-1] & ~inside[1:])
    if len(leaving) == 0:
        return 0
    apices = {tuple(p) for p in triangle.lattice_apices(g.n)}
    return sum(1 for i in leaving if tuple(pts[i]) not in apices)


# ---------------------------------------------------------------- walks

def _walk_path(g: GasketGraph, vertices: np.ndarray, first_row: int) -> SampledPath:
    times = (first_row + np.arange(len(vertices))) * g.time_step
    return SampledPath(float(times[0]), times, g.lattice_frame(vertices))


def gasket_walk(g: GasketGraph, start, steps: int, seed: Optional[int] = None, *,
                key: tuple = ()) -> SampledPath:
    """Simple random walk from vertex ``start`` (lattice pair), jumping every 5^-n"""
    seed = settings.DEFAULT_SEED if seed is None else seed
    v = g.vertex(*start)
    uniforms = generator(seed, *key, STREAM_WALK).random(int(steps))
    visited = np.empty(int(steps) + 1, dtype=np.int64)
    visited[0] = v
    for i, u in enumerate(uniforms):
        visited[i + 1] = g.step(visited[i:i + 1], np.array([u]))[0]
    return _walk_path(g, visited, 0)


def _gasket_field(g: GasketGraph, seed: int, key: tuple) -> SiteField:
    return SiteField(seed, key + (STREAM_FIELD,), block_rows=64, block_sites=min(g.size, 4096))


def _gasket_starts(g: GasketGraph, starts) -> Tuple[np.ndarray, np.ndarray]:
    if not starts:
        raise LatticeError("at least one start point is needed")
    verts, rows = [], []
    for (a, b), t in starts:
        verts.append(g.vertex(a, b))
        raw = t / g.time_step
        row = round(raw)
        if abs(raw - row) > 1e-9 * max(1.0, abs(raw)):
            raise LatticeError(f"start time {t} is off the 5^-{g.n} time grid")
        rows.append(int(row))
    return np.array(verts, dtype=np.int64), np.array(rows, dtype=np.int64)


def simulate_coalescing_gasket(g: GasketGraph, starts, horizon: float, seed: Optional[int] = None, *,
                               key: tuple = ()) -> CoalescingSystem:
    """Coalescing walks from ((a, b), t) start points under one shared neighbour
    choice per (vertex, time row)"""
    seed = settings.DEFAULT_SEED if seed is None else seed
    verts, rows = _gasket_starts(g, starts)
    last = int(math.floor(horizon / g.time_step + 1e-9))
    if rows.max() >= last:
        raise LatticeError(f"horizon {horizon} must exceed every start time")
    first = int(rows.min())
    if len(verts) * (last - first) > settings.MAX_PARTICLE_STEPS:
        raise ResourceGuardError(
            f"{len(verts)} walks x {last - first} steps exceeds MAX_PARTICLE_STEPS={settings.MAX_PARTICLE_STEPS}"
        )
    noise = _gasket_field(g, seed, key)
    traj = np.full((len(verts), last - first + 1), -1, dtype=np.int64)
    pos = verts.copy()
    alive = np.zeros(len(verts), dtype=bool)
    for k in range(first, last + 1):
        alive |= rows == k
        traj[alive, k - first] = pos[alive]
        if k == last:
            break
        idx = np.flatnonzero(alive)
        pos[idx] = g.step(pos[idx], noise.at(k, pos[idx]))
    paths = []
    for p in range(len(verts)):
        col = rows[p] - first
        paths.append(_walk_path(g, traj[p, col:], int(rows[p])))
    system = coalesce(paths, MeetMode.GRID_EQUALITY)
    logger.debug(f"Simulated {len(verts)} coalescing gasket walks at n={g.n}, {system.merge_count} merges")
    return system


def gasket_flow_starts(g: GasketGraph, tubes: Sequence[PolyTube]):
    """Vertices within one edge of each tube's lower face, at the last row not after t0"""
    out, seen = [], set()
    for tube in tubes:
        tris = [p.triangle for p in tube.lower_face]
        inside = g.vertices_in(tris)
        near = set(inside.tolist())
        for v in inside:
            near.update(g.neighbors[v, :g.degree[v]].tolist())
        row = int(math.floor(tube.t0 / g.time_step + 1e-9))
        for v in sorted(near):
            if (v, row) not in seen:
                seen.add((v, row))
                a, b = g.coords[v]
                out.append(((int(a), int(b)), row * g.time_step))
    return out


def survivor_history_gasket(g: GasketGraph, region: Sequence[Triangle], delta: float,
                            seed: Optional[int] = None, *, key: tuple = ()) -> List[int]:
    """Distinct survivors after each step: one walk per vertex of the region at
    time 0, killed on leaving it, run for ceil(delta 5^n) steps"""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    seed = settings.DEFAULT_SEED if seed is None else seed
    inside = np.zeros(g.size, dtype=bool)
    occupied = g.vertices_in(region)
    inside[occupied] = True
    steps = int(math.ceil(delta / g.time_step - 1e-9))
    if len(occupied) * steps > settings.MAX_PARTICLE_STEPS:
        raise ResourceGuardError(
            f"{len(occupied)} walks x {steps} steps exceeds MAX_PARTICLE_STEPS={settings.MAX_PARTICLE_STEPS}"
        )
    noise = _gasket_field(g, seed, key)
    history = [len(occupied)]
    for k in range(steps):
        if len(occupied):
            occupied = g.step(occupied, noise.at(k, occupied))
            occupied = np.unique(occupied[inside[occupied]])
        history.append(len(occupied))
    return history


def survivor_count_gasket(g: GasketGraph, region: Sequence[Triangle], delta: float,
                          seed: Optional[int] = None, *, key: tuple = ()) -> int:
    return survivor_history_gasket(g, region, delta, seed, key=key)[-1]


def pair_meeting_probability(g: GasketGraph, x, y, steps: int, samples: int,
                             seed: Optional[int] = None, *, key: tuple = ()) -> float:
    """Empirical P(two independent walks from x and y share a vertex within ``steps`` steps)"""
    seed = settings.DEFAULT_SEED if seed is None else seed
    vx, vy = g.vertex(*x), g.vertex(*y)
    if vx == vy:
        return 1.0
    rng = generator(seed, *key, STREAM_WALK)
    a = np.full(samples, vx, dtype=np.int64)
    b = np.full(samples, vy, dtype=np.int64)
    met = np.zeros(samples, dtype=bool)
    for _ in range(int(steps)):
        a = g.step(a, rng.random(samples))
        b = g.step(b, rng.random(samples))
        met |= a == b
    return float(met.mean())


# ---------------------------------------------------------------- scaling

@dataclass(frozen=True)
class MsdCurve:
    level: int
    steps: Tuple[int, ...]
    times: Tuple[float, ...]
    msd: Tuple[float, ...]
    walks: int

    def slope(self, lo: Optional[float] = None, hi: Optional[float] = None) -> float:
        """Least-squares slope of log MSD against log t over [lo, hi]"""
        t, y = np.array(self.times), np.array(self.msd)
        keep = (t >= (lo if lo is not None else -np.inf)) & (t <= (hi if hi is not None else np.inf)) & (y > 0)
        if keep.sum() < 2:
            raise ValueError("need at least two positive MSD points to fit a slope")
        return float(np.polyfit(np.log(t[keep]), np.log(y[keep]), 1)[0])


def msd_curve(g: GasketGraph, start, step_counts: Sequence[int], walks: int,
              seed: Optional[int] = None, *, key: tuple = ()) -> MsdCurve:
    """E|X_t - X_0|^2 (Euclidean) of independent walks at the given step counts"""
    seed = settings.DEFAULT_SEED if seed is None else seed
    step_counts = sorted({int(s) for s in step_counts})
    horizon = step_counts[-1]
    if walks * horizon > settings.MAX_PARTICLE_STEPS:
        raise ResourceGuardError(
            f"{walks} walks x {horizon} steps exceeds MAX_PARTICLE_STEPS={settings.MAX_PARTICLE_STEPS}"
        )
    v0 = g.vertex(*start)
    origin = to_euclidean(g.lattice_frame([v0]))[0]
    reach = np.abs(g.coords).max()
    rng = generator(seed, *key, STREAM_WALK)
    pos = np.full(walks, v0, dtype=np.int64)
    wanted = set(step_counts)
    msd = {}
    touched_edge = False
    for k in range(1, horizon + 1):
        pos = g.step(pos, rng.random(walks))
        if k in wanted:
            disp = to_euclidean(g.lattice_frame(pos)) - origin
            msd[k] = float(np.mean(np.sum(disp ** 2, axis=1)))
            touched_edge |= bool((g.coords[pos].sum(axis=1) >= reach).any())
    if touched_edge:
        logger.warning(f"MSD walks reached the far side of the extent (m={g.m}); reflection biases the curve")
    return MsdCurve(g.n, tuple(step_counts), tuple(s * g.time_step for s in step_counts),
                    tuple(msd[s] for s in step_counts), walks)


def scaling_collapse(curve: MsdCurve) -> float:
    """sup |MSD(5t) / (4 MSD(t)) - 1| over the t with 5t also on the curve"""
    by_step = dict(zip(curve.steps, curve.msd))
    ratios = [by_step[5 * s] / (4.0 * by_step[s]) for s in curve.steps if 5 * s in by_step and by_step[s] > 0]
    if not ratios:
        raise ValueError("curve has no step counts s with 5s also present")
    return float(max(abs(r - 1.0) for r in ratios))


def extent_sensitivity(n: int, m: int, start, step_counts: Sequence[int], walks: int,
                       seed: Optional[int] = None) -> float:
    """sup relative MSD deviation between the extents m and m + 1.

    Both graphs number their shared vertices in the same order, so the same
    draws move a walk identically until it reaches a corner of the smaller
    extent; a nonzero value measures what the reflection there costs.
    """
    small = msd_curve(build_gasket(n, m), start, step_counts, walks, seed)
    large = msd_curve(build_gasket(n, m + 1), start, step_counts, walks, seed)
    return float(max(abs(a - b) / b for a, b in zip(small.msd, large.msd) if b > 0))

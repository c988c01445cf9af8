"""Tubes, sampled paths, the tube metric, enlargement and exact crossing.

A tube is a finite union of convex space-time pieces (axis-aligned boxes
here, triangular prisms in ``coalflow.core.gasket``) between a start time
``t0`` and an end time ``t1``; its faces are the slices of the body at
``t0`` and ``t1``. Paths are piecewise-linear in space-time, so crossing a
tube reduces to clipping every segment against every piece and checking
that the clipped parameter intervals cover the segment.
"""
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Protocol, Sequence, Tuple, Union, runtime_checkable
import json
import math
import os

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree
from loguru import logger

from coalflow.core.config import settings
from coalflow.core.exceptions import GeometryError

# parameter-space slack when gluing clipped intervals of one segment
_PARAM_EPS = 1e-12


@runtime_checkable
class Piece(Protocol):
    """A closed convex piece of a tube body: {z : A z <= b} in space-time."""

    @property
    def dim(self) -> int: ...

    @property
    def t_lo(self) -> float: ...

    @property
    def t_hi(self) -> float: ...

    def halfspaces(self) -> Tuple[np.ndarray, np.ndarray]: ...

    def touches(self, other: "Piece") -> bool: ...

    def sample(self, mesh: float) -> np.ndarray: ...

    def slice_sample(self, t: float, mesh: float) -> np.ndarray: ...

    def diameter(self) -> float: ...


def _axis(lo: float, hi: float, mesh: float) -> np.ndarray:
    count = max(1, int(math.ceil((hi - lo) / mesh)))
    return np.linspace(lo, hi, count + 1)


@dataclass(frozen=True)
class Box:
    """[lo_1, hi_1] x ... x [lo_{d+1}, hi_{d+1}], last coordinate is time."""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or len(lo) < 2:
            raise GeometryError(f"box corners must have equal length >= 2, got {len(lo)} and {len(hi)}")
        if any(not (a < b) for a, b in zip(lo, hi)):
            raise GeometryError(f"degenerate box: lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo) - 1

    @property
    def t_lo(self) -> float:
        return self.lo[-1]

    @property
    def t_hi(self) -> float:
        return self.hi[-1]

    def halfspaces(self) -> Tuple[np.ndarray, np.ndarray]:
        k = len(self.lo)
        eye = np.eye(k)
        return np.vstack([eye, -eye]), np.concatenate([np.array(self.hi), -np.array(self.lo)])

    def touches(self, other: "Piece") -> bool:
        if not isinstance(other, Box):
            return False
        return all(a <= d and c <= b for a, b, c, d in zip(self.lo, self.hi, other.lo, other.hi))

    def spatial_contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        x = np.atleast_1d(x)
        return bool(np.all(x >= np.array(self.lo[:-1]) - tol) and np.all(x <= np.array(self.hi[:-1]) + tol))

    def fatten(self, delta: float) -> "Box":
        return Box(tuple(v - delta for v in self.lo), tuple(v + delta for v in self.hi))

    def clip_time(self, t_lo: float, t_hi: float) -> Optional["Box"]:
        lo_t, hi_t = max(self.t_lo, t_lo), min(self.t_hi, t_hi)
        if not lo_t < hi_t:
            return None
        return Box(self.lo[:-1] + (lo_t,), self.hi[:-1] + (hi_t,))

    def sample(self, mesh: float) -> np.ndarray:
        axes = [_axis(a, b, mesh) for a, b in zip(self.lo, self.hi)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def slice_sample(self, t: float, mesh: float) -> np.ndarray:
        axes = [_axis(a, b, mesh) for a, b in zip(self.lo[:-1], self.hi[:-1])]
        grids = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        return np.hstack([pts, np.full((len(pts), 1), float(t))])

    def diameter(self) -> float:
        return float(np.linalg.norm(np.array(self.hi) - np.array(self.lo)))


@dataclass(frozen=True, eq=False)
class SampledPath:
    """A continuous path (gamma, t0) given by linear interpolation of samples.

    Before ``start_time`` the path is extended by its initial position, after
    the last sample by its final position. ``end_time`` marks a killed path:
    it is not defined past that time and crosses no tube ending later.
    """

    start_time: float
    times: np.ndarray
    positions: np.ndarray
    end_time: Optional[float] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        positions = np.asarray(self.positions, dtype=float)
        if positions.ndim == 1:
            positions = positions.reshape(-1, 1)
        if len(times) == 0 or len(positions) == 0:
            raise GeometryError("path needs at least one sample")
        if len(times) != len(positions):
            raise GeometryError(f"{len(times)} times but {len(positions)} positions")
        if times[0] != float(self.start_time):
            raise GeometryError(f"times[0]={times[0]} differs from start_time={self.start_time}")
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            raise GeometryError("path times must be strictly increasing")
        times.setflags(write=False)
        positions.setflags(write=False)
        object.__setattr__(self, "start_time", float(self.start_time))
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)
        if self.end_time is not None:
            object.__setattr__(self, "end_time", float(self.end_time))

    @classmethod
    def constant(cls, x, start_time: float = 0.0) -> "SampledPath":
        return cls(start_time, np.array([start_time]), np.atleast_1d(np.asarray(x, dtype=float))[None, :])

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def x(self) -> np.ndarray:
        """Positions of a one-dimensional path as a flat array"""
        return self.positions[:, 0]

    def evaluate(self, t):
        """Interpolated position(s); scalar t -> (d,), array t -> (len(t), d)"""
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((len(ts), self.dim))
        for i in range(self.dim):
            out[:, i] = np.interp(ts, self.times, self.positions[:, i])
        return out[0] if np.ndim(t) == 0 else out

    def knots(self, t0: float, t1: float) -> np.ndarray:
        """Space-time knots of the path restricted to [t0, t1], endpoints included"""
        inner = self.times[(self.times > t0) & (self.times < t1)]
        ts = np.concatenate([[t0], inner, [t1]])
        return np.hstack([self.evaluate(ts).reshape(len(ts), self.dim), ts[:, None]])

    def splice(self, tau: float, other: "SampledPath") -> "SampledPath":
        """Follow this path before ``tau`` and ``other`` from ``tau`` on"""
        keep = self.times < tau
        tail = other.times > tau
        times = np.concatenate([self.times[keep], [tau], other.times[tail]])
        positions = np.vstack([
            self.positions[keep],
            other.evaluate(tau).reshape(1, -1),
            other.positions[tail],
        ])
        return SampledPath(self.start_time if keep.any() else tau, times, positions, other.end_time)

    def truncate(self, end_time: float) -> "SampledPath":
        keep = self.times <= end_time
        if not keep.any():
            raise GeometryError(f"cannot end a path at {end_time} before its start {self.start_time}")
        return SampledPath(self.start_time, self.times[keep], self.positions[keep], end_time)


@dataclass(frozen=True, eq=False)
class PolyTube:
    """A tube whose body is a connected finite union of pieces."""

    pieces: Tuple[Piece, ...]
    t0: float
    t1: float
    tube_id: Optional[str] = None

    def __post_init__(self):
        pieces = tuple(self.pieces)
        if not pieces:
            raise GeometryError("tube needs at least one piece")
        t0, t1 = float(self.t0), float(self.t1)
        if not t0 < t1:
            raise GeometryError(f"tube start time {t0} must precede end time {t1}")
        dims = {p.dim for p in pieces}
        if len(dims) != 1:
            raise GeometryError(f"pieces of mixed spatial dimension {sorted(dims)}")
        slack = 1e-12 * max(1.0, abs(t0), abs(t1))
        for p in pieces:
            if p.t_lo < t0 - slack or p.t_hi > t1 + slack:
                raise GeometryError(f"piece time range [{p.t_lo}, {p.t_hi}] leaves the slab [{t0}, {t1}]")
        if not any(abs(p.t_lo - t0) <= slack for p in pieces):
            raise GeometryError("no piece reaches the lower face")
        if not any(abs(p.t_hi - t1) <= slack for p in pieces):
            raise GeometryError("no piece reaches the upper face")
        if len(pieces) > 1:
            graph = nx.Graph()
            graph.add_nodes_from(range(len(pieces)))
            graph.add_edges_from(
                (i, j) for i in range(len(pieces)) for j in range(i + 1, len(pieces))
                if pieces[i].touches(pieces[j])
            )
            if not nx.is_connected(graph):
                raise GeometryError("tube pieces do not form a connected set")
        object.__setattr__(self, "pieces", pieces)
        object.__setattr__(self, "t0", t0)
        object.__setattr__(self, "t1", t1)

    @classmethod
    def from_pieces(cls, pieces: Sequence[Piece], tube_id: Optional[str] = None) -> "PolyTube":
        pieces = tuple(pieces)
        if not pieces:
            raise GeometryError("tube needs at least one piece")
        return cls(pieces, min(p.t_lo for p in pieces), max(p.t_hi for p in pieces), tube_id)

    @property
    def dim(self) -> int:
        return self.pieces[0].dim

    @property
    def lower_face(self) -> Tuple[Piece, ...]:
        """Pieces whose time-t0 slices make up the lower face"""
        return tuple(p for p in self.pieces if p.t_lo <= self.t0)

    @property
    def upper_face(self) -> Tuple[Piece, ...]:
        return tuple(p for p in self.pieces if p.t_hi >= self.t1)

    def body_sample(self, mesh: float) -> np.ndarray:
        return np.unique(np.vstack([p.sample(mesh) for p in self.pieces]), axis=0)

    def face_sample(self, which: int, mesh: float) -> np.ndarray:
        face, t = (self.lower_face, self.t0) if which == 0 else (self.upper_face, self.t1)
        return np.unique(np.vstack([p.slice_sample(t, mesh) for p in face]), axis=0)

    def diameter(self) -> float:
        pts = np.vstack([p.sample(float("inf")) for p in self.pieces])
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    def label(self, index: int) -> str:
        return self.tube_id or f"T{index}"


def box_tube(lo: Sequence[float], hi: Sequence[float], tube_id: Optional[str] = None) -> PolyTube:
    """Single-box tube with full faces"""
    return PolyTube.from_pieces([Box(tuple(lo), tuple(hi))], tube_id)


def load_tube(data: Union[dict, str, os.PathLike]) -> PolyTube:
    """Build a box tube from its JSON description (or a file holding it); faces are derived"""
    if not isinstance(data, dict):
        try:
            with open(data, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise GeometryError(f"cannot read tube file {data}: {e}") from e
    try:
        pieces = [Box(tuple(p["lo"]), tuple(p["hi"])) for p in data["pieces"]]
    except KeyError as e:
        raise GeometryError(f"tube description is missing field {e}") from e
    if "dim" in data and any(p.dim != int(data["dim"]) for p in pieces):
        raise GeometryError(f"pieces do not match declared dim={data['dim']}")
    if "t0" in data or "t1" in data:
        t0 = data.get("t0", min(p.t_lo for p in pieces))
        t1 = data.get("t1", max(p.t_hi for p in pieces))
        return PolyTube(tuple(pieces), t0, t1, data.get("id"))
    return PolyTube.from_pieces(pieces, data.get("id"))


def dump_tube(tube: PolyTube) -> dict:
    if not all(isinstance(p, Box) for p in tube.pieces):
        raise GeometryError("only box tubes have a JSON description here")
    out = {
        "dim": tube.dim,
        "pieces": [{"lo": list(p.lo), "hi": list(p.hi)} for p in tube.pieces],
        "t0": tube.t0,
        "t1": tube.t1,
    }
    if tube.tube_id:
        out["id"] = tube.tube_id
    return out


# ---------------------------------------------------------------- metric

def hausdorff_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Hausdorff distance between two finite point sets in the same space"""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise GeometryError("empty set")
    if a.shape[1] != b.shape[1]:
        raise GeometryError(f"point sets live in different dimensions ({a.shape[1]} vs {b.shape[1]})")
    d_ab = cKDTree(b).query(a)[0].max()
    d_ba = cKDTree(a).query(b)[0].max()
    return float(max(d_ab, d_ba))


@dataclass(frozen=True)
class TubeDistance:
    value: float
    mesh: float
    mesh_error: float

    def __float__(self):
        return self.value


def tube_distance_report(t1: PolyTube, t2: PolyTube, mesh: Optional[float] = None) -> TubeDistance:
    """d_T on grid samplings, with the sampling error bound alongside"""
    if t1.dim != t2.dim:
        raise GeometryError(f"tube dimensions differ ({t1.dim} vs {t2.dim})")
    if mesh is None:
        mesh = settings.HAUSDORFF_MESH_FRACTION * max(t1.diameter(), t2.diameter())
    value = (
        hausdorff_distance(t1.body_sample(mesh), t2.body_sample(mesh))
        + hausdorff_distance(t1.face_sample(0, mesh), t2.face_sample(0, mesh))
        + hausdorff_distance(t1.face_sample(1, mesh), t2.face_sample(1, mesh))
    )
    return TubeDistance(value, mesh, 3 * mesh * math.sqrt(t1.dim + 1))


def tube_distance(t1: PolyTube, t2: PolyTube, mesh: Optional[float] = None) -> float:
    if t1 is t2:
        return 0.0
    return tube_distance_report(t1, t2, mesh).value


# ---------------------------------------------------------------- crossing

def clip_segments(p0: np.ndarray, p1: np.ndarray, a: np.ndarray, b: np.ndarray, tol: float):
    """Cyrus-Beck clipping of segments p0[i] -> p1[i] against {z : a z <= b + tol}.

    Returns (enter, leave) parameter arrays in [0, 1]; empty clips have
    enter > leave.
    """
    num = (b + tol)[None, :] - p0 @ a.T
    den = (p1 - p0) @ a.T
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / den
    enter = np.where(den < 0, ratio, -np.inf).max(axis=1)
    leave = np.where(den > 0, ratio, np.inf).min(axis=1)
    blocked = np.any((den == 0) & (num < 0), axis=1)
    enter = np.maximum(enter, 0.0)
    leave = np.minimum(leave, 1.0)
    enter[blocked] = np.inf
    leave[blocked] = -np.inf
    return enter, leave


def _covered(enter: np.ndarray, leave: np.ndarray) -> np.ndarray:
    """Per row, whether the union of [enter_k, leave_k] covers [0, 1]"""
    empty = enter > leave
    lo = np.where(empty, np.inf, enter)
    hi = np.where(empty, -np.inf, leave)
    order = np.argsort(lo, axis=1)
    lo = np.take_along_axis(lo, order, axis=1)
    hi = np.take_along_axis(hi, order, axis=1)
    reach = np.maximum.accumulate(hi, axis=1)
    ok = lo[:, 0] <= _PARAM_EPS
    if lo.shape[1] > 1:
        gap = (lo[:, 1:] > reach[:, :-1] + _PARAM_EPS) & (reach[:, :-1] < 1.0 - _PARAM_EPS)
        ok &= ~gap.any(axis=1)
    return ok & (reach[:, -1] >= 1.0 - _PARAM_EPS)


def _in_face(point: np.ndarray, face: Iterable[Piece], tol: float) -> bool:
    for p in face:
        a, b = p.halfspaces()
        if np.all(a @ point <= b + tol):
            return True
    return False


def crosses(path: SampledPath, tube: PolyTube, tol: Optional[float] = None) -> bool:
    """Whether the path enters through the lower face, stays in the body and
    leaves through the upper face (closed sets, slack ``tol``)."""
    tol = settings.CROSSING_TOL if tol is None else tol
    if tol < 0:
        raise GeometryError("tol must be non-negative")
    if path.dim != tube.dim:
        raise GeometryError(f"path dimension {path.dim} differs from tube dimension {tube.dim}")
    if path.start_time > tube.t0:
        return False
    if path.end_time is not None and path.end_time < tube.t1:
        return False
    z = path.knots(tube.t0, tube.t1)
    if not _in_face(z[0], tube.lower_face, tol) or not _in_face(z[-1], tube.upper_face, tol):
        return False
    p0, p1 = z[:-1], z[1:]
    enters = np.empty((len(p0), len(tube.pieces)))
    leaves = np.empty_like(enters)
    for k, piece in enumerate(tube.pieces):
        a, b = piece.halfspaces()
        enters[:, k], leaves[:, k] = clip_segments(p0, p1, a, b, tol)
    return bool(_covered(enters, leaves).all())


def crosses_many(paths: Sequence[SampledPath], tube: PolyTube, tol: Optional[float] = None) -> np.ndarray:
    """crosses() over a family of paths"""
    return np.array([crosses(p, tube, tol) for p in paths], dtype=bool)


# ---------------------------------------------------------------- enlargement

def _slice_mask(pieces: Sequence[Box], t_lo: float, t_hi: float, axes: List[np.ndarray]) -> np.ndarray:
    """Occupancy of the compressed spatial cells by pieces spanning [t_lo, t_hi]"""
    shape = tuple(len(ax) - 1 for ax in axes)
    mask = np.zeros(shape, dtype=bool)
    mids = [0.5 * (ax[:-1] + ax[1:]) for ax in axes]
    for p in pieces:
        if p.t_lo <= t_lo and p.t_hi >= t_hi:
            sel = np.ix_(*[(m >= lo) & (m <= hi) for m, lo, hi in zip(mids, p.lo[:-1], p.hi[:-1])])
            mask[sel] = True
    return mask


def _product_depth(tube: PolyTube, top: bool) -> float:
    pieces = tube.pieces
    axes = [np.unique(np.concatenate([[p.lo[i], p.hi[i]] for p in pieces])) for i in range(tube.dim)]
    breaks = np.unique(np.concatenate([[p.t_lo, p.t_hi] for p in pieces]))
    if top:
        breaks = breaks[::-1]
    face = None
    depth = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        lo, hi = min(a, b), max(a, b)
        mask = _slice_mask(pieces, lo, hi, axes)
        if face is None:
            face = mask
        elif not np.array_equal(mask, face):
            break
        depth = abs(b - breaks[0])
    return float(depth)


def enlargement_limit(tube: PolyTube) -> float:
    """t_e: enlarge(T, delta) is defined for 0 < delta < t_e"""
    if not all(isinstance(p, Box) for p in tube.pieces):
        raise GeometryError("enlargement is defined for box tubes only")
    return 0.5 * min(_product_depth(tube, top=False), _product_depth(tube, top=True))


def enlarge(tube: PolyTube, delta: float) -> PolyTube:
    """T^delta: body fattened by delta in L-infinity, slab shrunk by delta at both ends"""
    limit = enlargement_limit(tube)
    if not 0 < delta < limit:
        raise GeometryError(f"enlargement out of range: delta={delta}, allowed (0, {limit})")
    t0, t1 = tube.t0 + delta, tube.t1 - delta
    pieces = [q for q in (p.fatten(delta).clip_time(t0, t1) for p in tube.pieces) if q is not None]
    tube_id = f"{tube.tube_id}^{delta:g}" if tube.tube_id else None
    return PolyTube(tuple(pieces), t0, t1, tube_id)


def superdense_family(tube: PolyTube, deltas: Sequence[float]) -> List[PolyTube]:
    """The enlargement chain [T^delta for delta in deltas], deltas strictly decreasing"""
    deltas = [float(d) for d in deltas]
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise GeometryError(f"deltas must be strictly decreasing, got {deltas}")
    family = [enlarge(tube, d) for d in deltas]
    logger.debug(f"Built enlargement chain of {len(family)} tubes")
    return family

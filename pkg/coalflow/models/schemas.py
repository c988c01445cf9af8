from enum import Enum
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union
import json

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from coalflow.core.config import settings
from coalflow.core.exceptions import ConfigError, CoalflowError
from coalflow.core.gasket import load_tri_tube
from coalflow.core.geometry import PolyTube, load_tube
from coalflow.core.walk1d import StepLaw, WalkSpec


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelKind(str, Enum):
    WALK1D = "walk1d"
    BM1D = "bm1d"
    GASKET = "gasket"


class StudyKind(str, Enum):
    SINGLE = "single"
    N_LADDER = "n_ladder"
    SUP_CHARACTERIZATION = "sup_characterization"
    ETA_LADDER = "eta_ladder"
    ENLARGEMENT = "enlargement"
    KILLED_TAIL = "killed_tail"
    PAIR_TAIL = "pair_tail"
    GASKET_PAIR = "gasket_pair"
    RED_BLUE = "red_blue"
    MSD = "msd"


# ---------------------------------------------------------------- models

class StepConfig(Strict):
    kind: Literal["lazy", "two_point", "custom"] = "lazy"
    p: Optional[float] = None
    values: Optional[List[int]] = None
    probs: Optional[List[float]] = None

    @model_validator(mode="before")
    @classmethod
    def bare_kind(cls, data):
        # "step": "lazy"
        return {"kind": data} if isinstance(data, str) else data

    def to_law(self) -> StepLaw:
        if self.kind == "lazy":
            return StepLaw.lazy()
        if self.kind == "two_point":
            if self.p is None:
                raise ValueError("two_point step law needs p")
            return StepLaw.two_point(self.p)
        if self.values is None or self.probs is None:
            raise ValueError("custom step law needs values and probs")
        return StepLaw(tuple(self.values), tuple(self.probs))

    @model_validator(mode="after")
    def check_law(self):
        try:
            self.to_law()
        except CoalflowError as e:
            raise ValueError(str(e)) from e
        return self


class StartsConfig(Strict):
    """Where the free paths start.

    ``flow`` puts a walk under every lattice site (or gasket vertex) of each
    lower face; ``halton`` is a low-discrepancy dense set in
    x_range x t_range; ``grid`` is evenly spaced points at time t_range[0];
    ``points`` lists them. ``permute_seed`` relabels the start set.
    """

    kind: Literal["flow", "halton", "grid", "points"] = "flow"
    count: Optional[int] = Field(default=None, ge=1)
    x_range: Optional[Tuple[float, float]] = None
    t_range: Tuple[float, float] = (0.0, 0.0)
    points: Optional[List[Tuple[Any, float]]] = None
    permute_seed: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def check_kind(self):
        if self.kind in ("halton", "grid") and (self.count is None or self.x_range is None):
            raise ValueError(f"{self.kind} starts need count and x_range")
        if self.kind == "points" and not self.points:
            raise ValueError("points starts need a nonempty points list")
        if self.x_range is not None and not self.x_range[0] < self.x_range[1]:
            raise ValueError(f"empty x_range {self.x_range}")
        if self.t_range[0] > self.t_range[1]:
            raise ValueError(f"empty t_range {self.t_range}")
        return self


class Walk1dModel(Strict):
    kind: Literal["walk1d"] = "walk1d"
    eta: float = Field(default=0.125, gt=0, le=1)
    step: StepConfig = Field(default_factory=StepConfig)
    horizon: float = Field(default=1.0, gt=0)
    sigma2: Optional[float] = Field(default=None, gt=0)
    kill_interval: Optional[Tuple[float, float]] = None
    starts: StartsConfig = Field(default_factory=StartsConfig)

    @model_validator(mode="after")
    def check_spec(self):
        try:
            self.walk_spec()
        except CoalflowError as e:
            raise ValueError(str(e)) from e
        return self

    def walk_spec(self, eta: Optional[float] = None) -> WalkSpec:
        return WalkSpec(eta or self.eta, self.step.to_law(), self.horizon,
                        tuple(self.kill_interval) if self.kill_interval else None, self.sigma2)


class Bm1dModel(Strict):
    kind: Literal["bm1d"] = "bm1d"
    dt: float = Field(default=1e-3, gt=0)
    horizon: float = Field(default=1.0, gt=0)
    sigma2: float = Field(default=1.0, gt=0)
    starts: StartsConfig = Field(default_factory=lambda: StartsConfig(kind="halton", count=40, x_range=(-2.0, 2.0)))

    @field_validator("starts")
    @classmethod
    def no_flow(cls, v: StartsConfig):
        if v.kind == "flow":
            raise ValueError("Brownian starts must be halton, grid or points")
        return v


class GasketModel(Strict):
    kind: Literal["gasket"] = "gasket"
    n: int = Field(default=3, ge=0)
    m: int = Field(default=0, ge=0)
    horizon: float = Field(default=1.0, gt=0)
    starts: StartsConfig = Field(default_factory=StartsConfig)

    @field_validator("starts")
    @classmethod
    def flow_or_points(cls, v: StartsConfig):
        if v.kind not in ("flow", "points"):
            raise ValueError("gasket starts must be flow or points")
        return v


ModelConfig = Annotated[Union[Walk1dModel, Bm1dModel, GasketModel], Field(discriminator="kind")]


# ---------------------------------------------------------------- tubes

class BoxPieceConfig(Strict):
    lo: List[float]
    hi: List[float]


class PrismConfig(Strict):
    k: int
    a: int
    b: int
    grid: Optional[int] = None
    s: float
    t: float


class TubeConfig(Strict):
    id: Optional[str] = None
    dim: Optional[int] = None
    pieces: Optional[List[BoxPieceConfig]] = None
    prisms: Optional[List[PrismConfig]] = None
    t0: Optional[float] = None
    t1: Optional[float] = None

    @model_validator(mode="after")
    def one_body(self):
        if (self.pieces is None) == (self.prisms is None):
            raise ValueError("a tube has exactly one of pieces (boxes) or prisms (gasket triangles)")
        try:
            self.to_tube()
        except CoalflowError as e:
            raise ValueError(str(e)) from e
        return self

    @property
    def triangular(self) -> bool:
        return self.prisms is not None

    def to_tube(self) -> PolyTube:
        if self.prisms is not None:
            return load_tri_tube(self.model_dump(exclude_none=True))
        return load_tube(self.model_dump(exclude_none=True))


class TriangleConfig(Strict):
    k: int
    a: int
    b: int


# ---------------------------------------------------------------- studies

def _increasing(values, name):
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"{name} must be strictly increasing")
    return values


def _decreasing(values, name):
    if any(b >= a for a, b in zip(values, values[1:])):
        raise ValueError(f"{name} must be strictly decreasing")
    return values


class SingleStudy(Strict):
    kind: Literal["single"] = "single"


class NLadderStudy(Strict):
    kind: Literal["n_ladder", "sup_characterization"] = "n_ladder"
    n_values: List[Annotated[int, Field(ge=1)]] = Field(min_length=1)

    @field_validator("n_values")
    @classmethod
    def ordered(cls, v):
        return _increasing(v, "n_values")


class EtaLadderStudy(Strict):
    """Walk1d: eta_values shrink to the Brownian reference; gasket: levels grow
    to the finest one, which is the reference"""

    kind: Literal["eta_ladder"] = "eta_ladder"
    eta_values: Optional[List[Annotated[float, Field(gt=0, le=1)]]] = None
    levels: Optional[List[Annotated[int, Field(ge=0)]]] = None
    reference_dt: float = Field(default=1e-4, gt=0)
    reference_spacing: float = Field(default=1.0 / 64, gt=0)
    reference_margin: float = Field(default=0.25, ge=0)

    @model_validator(mode="after")
    def ordered(self):
        if (self.eta_values is None) == (self.levels is None):
            raise ValueError("give exactly one of eta_values or levels")
        if self.eta_values is not None:
            _decreasing(self.eta_values, "eta_values")
        else:
            _increasing(self.levels, "levels")
        return self


class EnlargementStudy(Strict):
    kind: Literal["enlargement"] = "enlargement"
    deltas: List[Annotated[float, Field(gt=0)]] = Field(min_length=1)
    tube: int = Field(default=0, ge=0)

    @field_validator("deltas")
    @classmethod
    def ordered(cls, v):
        return _decreasing(v, "deltas")


class KilledTailStudy(Strict):
    """Walk1d: sites of [-K n, K n] at steps n; gasket: vertices of ``region`` at each level"""

    kind: Literal["killed_tail"] = "killed_tail"
    delta: float = Field(gt=0)
    K: float = Field(default=1.0, gt=0)
    n_values: Optional[List[Annotated[int, Field(ge=1)]]] = None
    levels: Optional[List[Annotated[int, Field(ge=0)]]] = None
    region: Optional[List[TriangleConfig]] = None
    k_values: Optional[List[Annotated[int, Field(ge=1)]]] = None
    bound_factor: float = Field(default=1.25, gt=0)

    @model_validator(mode="after")
    def ordered(self):
        if (self.n_values is None) == (self.levels is None):
            raise ValueError("give exactly one of n_values or levels")
        if self.n_values is not None:
            _increasing(self.n_values, "n_values")
        else:
            _increasing(self.levels, "levels")
        if self.k_values is not None:
            _increasing(self.k_values, "k_values")
        return self


class PairTailStudy(Strict):
    kind: Literal["pair_tail"] = "pair_tail"
    pairs: List[Tuple[int, int]] = Field(min_length=1)
    t_values: List[Annotated[int, Field(ge=0)]] = Field(min_length=1)
    exact_t: Optional[int] = Field(default=4, ge=0)

    @field_validator("t_values")
    @classmethod
    def ordered(cls, v):
        return _increasing(v, "t_values")


class GasketPairStudy(Strict):
    kind: Literal["gasket_pair"] = "gasket_pair"
    k_values: List[Annotated[int, Field(ge=0)]] = Field(min_length=1)
    pairs_per_k: int = Field(default=20, ge=1)


class RedBlueStudy(Strict):
    kind: Literal["red_blue"] = "red_blue"
    s: float = 0.0
    s_prime: float = 0.25
    delta: float = Field(default=0.25, ge=0)
    K: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def ordered(self):
        if not self.s < self.s_prime:
            raise ValueError("need s < s_prime")
        return self


class MsdStudy(Strict):
    kind: Literal["msd"] = "msd"
    step_counts: List[Annotated[int, Field(ge=1)]] = Field(min_length=2)
    walks: int = Field(default=10_000, ge=1)
    fit_range: Optional[Tuple[float, float]] = None
    # lattice coordinates (a, b) of the start vertex
    start: Tuple[int, int] = (0, 0)
    extent_check: bool = False

    @field_validator("step_counts")
    @classmethod
    def ordered(cls, v):
        return _increasing(v, "step_counts")


StudyConfig = Annotated[
    Union[SingleStudy, NLadderStudy, EtaLadderStudy, EnlargementStudy, KilledTailStudy,
          PairTailStudy, GasketPairStudy, RedBlueStudy, MsdStudy],
    Field(discriminator="kind"),
]

# which models each study accepts
_STUDY_MODELS = {
    StudyKind.SINGLE: {ModelKind.WALK1D, ModelKind.BM1D, ModelKind.GASKET},
    StudyKind.N_LADDER: {ModelKind.WALK1D, ModelKind.BM1D, ModelKind.GASKET},
    StudyKind.SUP_CHARACTERIZATION: {ModelKind.WALK1D, ModelKind.BM1D, ModelKind.GASKET},
    StudyKind.ETA_LADDER: {ModelKind.WALK1D, ModelKind.GASKET},
    StudyKind.ENLARGEMENT: {ModelKind.WALK1D, ModelKind.BM1D},
    StudyKind.KILLED_TAIL: {ModelKind.WALK1D, ModelKind.GASKET},
    StudyKind.PAIR_TAIL: {ModelKind.WALK1D},
    StudyKind.GASKET_PAIR: {ModelKind.GASKET},
    StudyKind.RED_BLUE: {ModelKind.WALK1D},
    StudyKind.MSD: {ModelKind.GASKET},
}

_NEEDS_TUBES = {StudyKind.N_LADDER, StudyKind.SUP_CHARACTERIZATION, StudyKind.ETA_LADDER, StudyKind.ENLARGEMENT}

# model parameters the flat form keeps at the top level
_FLAT_MODEL_KEYS = ("eta", "sigma2", "step", "starts", "horizon", "kill", "dt", "n", "m")


def _unflatten(data: Dict[str, Any]) -> Dict[str, Any]:
    """{"model": "walk1d", "eta": ..., "step": "lazy", "starts": [[x, t], ...], "kill": [-K, K]}
    becomes the nested form; a flat config without a study is a single run"""
    data = dict(data)
    model: Dict[str, Any] = {"kind": data.pop("model")}
    for key in _FLAT_MODEL_KEYS:
        if key in data:
            model[key] = data.pop(key)
    if "kill" in model:
        model["kill_interval"] = model.pop("kill")
    if isinstance(model.get("starts"), list):
        model["starts"] = {"kind": "points", "points": model["starts"]}
    data["model"] = model
    data.setdefault("study", {"kind": "single"})
    return data


class ExperimentConfig(Strict):
    schema_version: str = settings.SCHEMA_VERSION
    name: Optional[str] = None
    model: ModelConfig
    tubes: List[TubeConfig] = Field(default_factory=list)
    study: StudyConfig
    samples: int = Field(default=settings.DEFAULT_SAMPLES, ge=1)
    seed: int = Field(default=settings.DEFAULT_SEED, ge=0, lt=2 ** 64)
    output: Optional[str] = None

    @property
    def study_kind(self) -> StudyKind:
        return StudyKind(self.study.kind)

    @property
    def model_kind(self) -> ModelKind:
        return ModelKind(self.model.kind)

    @model_validator(mode="before")
    @classmethod
    def flat_form(cls, data):
        if isinstance(data, dict) and isinstance(data.get("model"), str):
            return _unflatten(data)
        return data

    @field_validator("schema_version")
    @classmethod
    def known_schema(cls, v):
        if v != settings.SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v!r}, expected {settings.SCHEMA_VERSION!r}")
        return v

    @model_validator(mode="after")
    def compatible(self):
        if self.model_kind not in _STUDY_MODELS[self.study_kind]:
            raise ValueError(f"study {self.study_kind.value} does not run on model {self.model_kind.value}")
        if self.study_kind in _NEEDS_TUBES and not self.tubes:
            raise ValueError(f"study {self.study_kind.value} needs at least one tube")
        if self.study_kind is StudyKind.SINGLE and not self.tubes and self.model.starts.kind == "flow":
            raise ValueError("a single run without tubes needs explicit starts")
        triangular = self.model_kind is ModelKind.GASKET
        for i, tube in enumerate(self.tubes):
            if tube.triangular != triangular:
                kind = "prisms" if triangular else "box pieces"
                raise ValueError(f"tubes[{i}] must be given by {kind} for model {self.model_kind.value}")
            if not triangular and tube.to_tube().dim != 1:
                raise ValueError(f"tubes[{i}] must be one-dimensional")
        if self.study_kind is StudyKind.ENLARGEMENT and self.study.tube >= len(self.tubes):
            raise ValueError(f"study.tube={self.study.tube} but only {len(self.tubes)} tubes are given")
        if self.study_kind is StudyKind.KILLED_TAIL:
            if triangular and (self.study.levels is None or not self.study.region):
                raise ValueError("gasket killed_tail needs levels and region")
            if not triangular and self.study.n_values is None:
                raise ValueError("walk1d killed_tail needs n_values")
        if self.study_kind is StudyKind.ETA_LADDER:
            if triangular != (self.study.levels is not None):
                raise ValueError("eta_ladder takes levels for gasket and eta_values for walk1d")
        return self

    def built_tubes(self) -> List[PolyTube]:
        return [t.to_tube() for t in self.tubes]


def _field_path(error: dict) -> str:
    path = ".".join(str(p) for p in error.get("loc", ()))
    return path or "config"


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    """Validate a config dict; errors name the offending field path"""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(first.get("msg", str(e)), field=_field_path(first)) from e


def load_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", field=str(path)) from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON at line {e.lineno}: {e.msg}", field=str(path)) from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object", field=str(path))
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return parse_config(data)

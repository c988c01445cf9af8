from typing import Any, Dict, List, Optional, Tuple
import math

from pydantic import BaseModel, Field, model_validator

from coalflow.core.config import settings
from coalflow.core.stats import binomial_stderr, confidence_interval, intervals_overlap


class CrossingEstimate(BaseModel):
    tubes: List[str]
    p_hat: float = Field(ge=0.0, le=1.0)
    stderr: float = Field(ge=0.0)
    samples: int = Field(ge=1)
    successes: int = Field(ge=0)
    seed: int
    model: Dict[str, Any] = {}
    ci: Tuple[float, float] = (0.0, 1.0)
    # set when the estimated event is not a joint tube crossing
    event: Optional[str] = None

    @model_validator(mode="after")
    def consistent(self):
        if self.successes > self.samples:
            raise ValueError(f"{self.successes} successes out of {self.samples} samples")
        if not math.isclose(self.p_hat, self.successes / self.samples, rel_tol=0, abs_tol=1e-12):
            raise ValueError("p_hat must equal successes / samples")
        if not math.isclose(self.stderr, binomial_stderr(self.p_hat, self.samples), rel_tol=1e-9, abs_tol=1e-15):
            raise ValueError("stderr must equal sqrt(p_hat (1 - p_hat) / samples)")
        return self

    @classmethod
    def from_counts(cls, successes: int, samples: int, seed: int, tubes: List[str],
                    model: Optional[Dict[str, Any]] = None, event: Optional[str] = None) -> "CrossingEstimate":
        p = successes / samples
        return cls(
            tubes=tubes, p_hat=p, stderr=binomial_stderr(p, samples), samples=samples,
            successes=successes, seed=seed, model=model or {}, ci=confidence_interval(successes, samples),
            event=event,
        )


class ConvergenceReport(BaseModel):
    parameter: str
    ladder: List[float]
    estimates: List[CrossingEstimate]
    monotone_flag: bool
    ci_overlap: List[List[bool]] = []
    reference: Optional[CrossingEstimate] = None
    violations: int = 0
    extra: Dict[str, Any] = {}
    # per-replica values, one entry per replica in replica order
    raw: List[Any] = Field(default_factory=list, exclude=True)

    @model_validator(mode="after")
    def one_per_rung(self):
        if len(self.ladder) != len(self.estimates):
            raise ValueError(f"{len(self.ladder)} rungs but {len(self.estimates)} estimates")
        up = all(b > a for a, b in zip(self.ladder, self.ladder[1:]))
        down = all(b < a for a, b in zip(self.ladder, self.ladder[1:]))
        if not (up or down):
            raise ValueError(f"ladder {self.ladder} is not strictly ordered")
        if not self.ci_overlap:
            cis = [e.ci for e in self.estimates]
            self.ci_overlap = [[intervals_overlap(a, b) for b in cis] for a in cis]
        return self

    @property
    def p_hat(self) -> List[float]:
        return [e.p_hat for e in self.estimates]

    @property
    def stderr(self) -> List[float]:
        return [e.stderr for e in self.estimates]


class StudyReport(BaseModel):
    schema_version: str = settings.SCHEMA_VERSION
    study: str
    model: str
    config: Dict[str, Any]
    tubes: List[str] = []
    parameter: Optional[str] = None
    ladder: List[float] = []
    p_hat: List[float] = []
    stderr: List[float] = []
    samples: int
    seed: int
    monotone_flag: bool = True
    extra: Dict[str, Any] = {}
    settings: Dict[str, Any] = {}
    wall_time: float = 0.0

    @property
    def table(self) -> List[Dict[str, Any]]:
        """Rows of the CSV mirror: the study table if any, otherwise one row per rung"""
        if self.extra.get("table"):
            return list(self.extra["table"])
        return [
            {self.parameter or "rung": rung, "p_hat": p, "stderr": s}
            for rung, p, s in zip(self.ladder, self.p_hat, self.stderr)
        ]


class ReplicaRecord(BaseModel):
    """One line of raw.jsonl"""

    replica: int = Field(ge=0)
    values: Any

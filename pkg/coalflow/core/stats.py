"""Binomial estimates, confidence intervals and the consistency checks used by studies."""
from dataclasses import dataclass
from typing import Sequence, Tuple
import math

import numpy as np
from scipy.stats import ks_2samp, norm


def binomial_stderr(p_hat: float, samples: int) -> float:
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    return math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / samples)


def z_value(alpha: float = 0.05) -> float:
    return float(norm.ppf(1.0 - alpha / 2.0))


def wilson_interval(successes: int, samples: int, z: float = 1.96) -> Tuple[float, float]:
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    p = successes / samples
    denom = 1.0 + z * z / samples
    centre = (p + z * z / (2 * samples)) / denom
    half = z * math.sqrt(p * (1 - p) / samples + z * z / (4 * samples * samples)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def confidence_interval(successes: int, samples: int, z: float = 1.96) -> Tuple[float, float]:
    """Normal interval, or Wilson when fewer than 10 successes or failures are expected"""
    p = successes / samples
    if min(p, 1.0 - p) * samples < 10:
        return wilson_interval(successes, samples, z)
    se = binomial_stderr(p, samples)
    return max(0.0, p - z * se), min(1.0, p + z * se)


def joint_stderr(*stderrs: float) -> float:
    return math.sqrt(sum(s * s for s in stderrs))


def intervals_overlap(a: Tuple[float, float], b: Tuple[float, float]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def within_sigma(a: float, b: float, stderr: float, sigmas: float = 3.0) -> bool:
    """|a - b| <= sigmas * stderr, with a zero stderr meaning exact equality"""
    return abs(a - b) <= sigmas * stderr + 1e-15


def ks_distance(a: Sequence[float], b: Sequence[float]) -> float:
    return float(ks_2samp(np.asarray(a, dtype=float), np.asarray(b, dtype=float)).statistic)


def tail_probabilities(values: Sequence[int], ks: Sequence[int]) -> np.ndarray:
    """P(V >= k) for every k"""
    values = np.asarray(values)
    return np.array([float(np.mean(values >= k)) for k in ks])


@dataclass(frozen=True)
class BlockConsistency:
    block_means: Tuple[float, ...]
    overall: float
    max_z: float
    consistent: bool


def block_consistency(indicators: Sequence[bool], blocks: int, sigmas: float = 3.0) -> BlockConsistency:
    """Split replica indicators into disjoint consecutive blocks and check every
    block mean against the overall mean with the binomial stderr of the block"""
    x = np.asarray(indicators, dtype=float)
    if blocks < 1 or len(x) < blocks:
        raise ValueError(f"cannot split {len(x)} replicas into {blocks} blocks")
    overall = float(x.mean())
    means, zs = [], []
    for part in np.array_split(x, blocks):
        m = float(part.mean())
        se = binomial_stderr(overall, len(part))
        means.append(m)
        zs.append(0.0 if se == 0 else abs(m - overall) / se)
    max_z = max(zs)
    return BlockConsistency(tuple(means), overall, max_z, max_z <= sigmas)

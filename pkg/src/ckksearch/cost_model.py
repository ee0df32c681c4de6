"""Linear latency model over primitive counts, its calibration, and
bottleneck scoring."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import ZeroCost

log = logging.getLogger(__name__)

MIN_OBSERVATIONS = 4


@dataclass(frozen=True)
class PrimitiveCounts:
    mul: int = 0
    rot: int = 0
    boot: int = 0
    mem_cost: float = 0.0

    def __post_init__(self) -> None:
        if min(self.mul, self.rot, self.boot, self.mem_cost) < 0:
            raise ValueError("primitive counts must be nonnegative")

    def __add__(self, other: PrimitiveCounts) -> PrimitiveCounts:
        return PrimitiveCounts(
            self.mul + other.mul, self.rot + other.rot, self.boot + other.boot, self.mem_cost + other.mem_cost
        )

    def vector(self) -> np.ndarray:
        return np.array([self.mul, self.rot, self.boot, self.mem_cost], dtype=float)

    @property
    def is_zero(self) -> bool:
        return not (self.mul or self.rot or self.boot or self.mem_cost)

    def to_dict(self) -> dict[str, Any]:
        return {"mul": self.mul, "rot": self.rot, "boot": self.boot, "mem_cost": self.mem_cost}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> PrimitiveCounts:
        return cls(int(doc["mul"]), int(doc["rot"]), int(doc["boot"]), float(doc["mem_cost"]))


@dataclass(frozen=True)
class CostCoefficients:
    alpha: float
    beta: float
    gamma: float
    delta: float

    def __post_init__(self) -> None:
        if min(self.as_tuple()) < 0:
            raise ValueError("cost coefficients must be nonnegative")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.delta)

    def term(self, counts: PrimitiveCounts) -> float:
        return (
            self.alpha * counts.mul
            + self.beta * counts.rot
            + self.gamma * counts.boot
            + self.delta * counts.mem_cost
        )

    def to_dict(self) -> dict[str, float]:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma, "delta": self.delta}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> CostCoefficients:
        return cls(float(doc["alpha"]), float(doc["beta"]), float(doc["gamma"]), float(doc["delta"]))


# Microbenchmark seeds, in seconds per primitive. Placeholders until Phase B.
SEED_COEFFICIENTS = CostCoefficients(alpha=1e-3, beta=3e-3, gamma=0.5, delta=1e-4)


@dataclass(frozen=True)
class Prediction:
    total: float
    shares: dict[str, float]
    terms: dict[str, float]


def predict(counts: Mapping[str, PrimitiveCounts], coeffs: CostCoefficients) -> Prediction:
    """Proxy latency and per-layer shares for per-layer primitive counts."""
    terms = {lid: coeffs.term(c) for lid, c in counts.items()}
    total = sum(terms.values())
    if total <= 0:
        raise ZeroCost("every cost term is zero")
    return Prediction(total=total, shares={lid: t / total for lid, t in terms.items()}, terms=terms)


@dataclass(frozen=True)
class CalibrationResult:
    coefficients: CostCoefficients
    residuals: tuple[float, ...]
    rank_deficient: bool
    observations: int

    @property
    def rms_residual(self) -> float:
        if not self.residuals:
            return 0.0
        return float(np.sqrt(np.mean(np.square(self.residuals))))

    def to_dict(self) -> dict[str, Any]:
        return {
            "coefficients": self.coefficients.to_dict(),
            "residuals": list(self.residuals),
            "rms_residual": self.rms_residual,
            "rank_deficient": self.rank_deficient,
            "observations": self.observations,
        }


def calibrate(
    observations: Sequence[tuple[PrimitiveCounts, float]],
    seed: CostCoefficients = SEED_COEFFICIENTS,
) -> CalibrationResult:
    """Nonnegative least squares: OLS, clip negatives, refit on the active set.

    Underdetermined designs return the seed coefficients and set
    ``rank_deficient``; the workflow carries on with them.
    """
    if len(observations) < MIN_OBSERVATIONS:
        log.info("calibration: %d observations, need %d; keeping seed coefficients", len(observations), MIN_OBSERVATIONS)
        return CalibrationResult(seed, (), True, len(observations))
    A = np.array([c.vector() for c, _ in observations])
    y = np.array([t for _, t in observations], dtype=float)
    if np.linalg.matrix_rank(A) < A.shape[1]:
        log.info("calibration: design matrix is rank deficient; keeping seed coefficients")
        return CalibrationResult(seed, (), True, len(observations))

    # scale columns so the rank/conditioning of lstsq is not dominated by units
    scale = np.abs(A).max(axis=0)
    scale[scale == 0] = 1.0
    As = A / scale
    x = np.linalg.lstsq(As, y, rcond=None)[0]
    if (x < 0).any():
        active = x > 0
        x = np.zeros_like(x)
        if active.any():
            sub = np.linalg.lstsq(As[:, active], y, rcond=None)[0]
            x[active] = np.clip(sub, 0.0, None)
    coeffs = x / scale
    residuals = y - A @ coeffs
    return CalibrationResult(
        CostCoefficients(*(float(v) for v in coeffs)),
        tuple(float(r) for r in residuals),
        False,
        len(observations),
    )


@dataclass(frozen=True)
class BottleneckWeights:
    w1: float = 0.4
    w2: float = 0.2
    w3: float = 0.2
    w4: float = 0.2

    def __post_init__(self) -> None:
        ws = (self.w1, self.w2, self.w3, self.w4)
        if min(ws) < 0 or sum(ws) <= 0:
            raise ValueError("bottleneck weights must be nonnegative and not all zero")

    def normalized(self) -> BottleneckWeights:
        s = self.w1 + self.w2 + self.w3 + self.w4
        return BottleneckWeights(self.w1 / s, self.w2 / s, self.w3 / s, self.w4 / s)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.w1, self.w2, self.w3, self.w4)


@dataclass(frozen=True)
class ScoreInputs:
    """The four per-layer signals the bottleneck score combines."""

    layer_id: str
    runtime_fraction: float
    slot_utilization: float
    rot_norm: float
    low_margin: int


def bottleneck_scores(
    profiles: Iterable[ScoreInputs | Any],
    weights: BottleneckWeights = BottleneckWeights(),
    top_k: int = 2,
) -> list[tuple[str, float]]:
    """Top-k layers by w1*r + w2*(1-u) + w3*rho + w4*z, earlier layers win ties."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    w = weights.normalized()
    scored = []
    for pos, p in enumerate(profiles):
        s = (
            w.w1 * p.runtime_fraction
            + w.w2 * (1.0 - p.slot_utilization)
            + w.w3 * p.rot_norm
            + w.w4 * p.low_margin
        )
        scored.append((-s, pos, p.layer_id, s))
    scored.sort()
    return [(lid, s) for _, _, lid, s in scored[:top_k]]

"""Overfitting metrics: latent Fisher divergence, Gaussian 2-Wasserstein, mode coverage."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .denoiser import PromptSpec
from .diffusion import NoiseSchedule, q_sample
from .errors import ContractError, NumericError
from .worlds import PointSet

COVERAGE_RADIUS = 0.45
COVERAGE_QUORUM = 5
ORACLE_MAX_POINTS = 256


@dataclass
class MetricReport:
    metric: str
    value: float
    counts: dict[str, int] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value < 0:
            raise NumericError(f"{self.metric} must be finite and non-negative, got {self.value}")

    def to_dict(self) -> dict:
        return {"metric": self.metric, "value": self.value, "counts": dict(self.counts), "config": dict(self.config)}


@dataclass(frozen=True)
class MomentPair:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def of(cls, mean, cov) -> "MomentPair":
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(cov, dtype=np.float64)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise NumericError("moments contain non-finite values")
        return cls(mean, _clamp_psd(0.5 * (cov + cov.T)))


def _clamp_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    if np.all(vals >= 0):
        return m
    return (vecs * np.clip(vals, 0.0, None)) @ vecs.T


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


# An eps-predictor maps (z_t, t, prompt) to a noise estimate array.
EpsFn = Callable[[np.ndarray, np.ndarray, PromptSpec], np.ndarray]


def latent_fisher_divergence(
    theta: EpsFn,
    theta_prime: EpsFn,
    eval_latents: PointSet,
    prompts: Sequence[PromptSpec],
    sched: NoiseSchedule,
    n_t: int,
    rng: np.random.Generator,
    seed: int | None = None,
) -> MetricReport:
    """Half the mean squared gap between two noise predictors on non-customized prompts.

    Both predictors see the same ``(z_t, t, prompt)`` triples: each latent is
    noised at ``n_t`` uniform timesteps and evaluated under every prompt.
    """
    if n_t < 1:
        raise ContractError("n_t must be >= 1")
    if not prompts:
        raise ContractError("at least one prompt is required")
    for p in prompts:
        if p.concept_slots:
            raise ContractError("the Fisher divergence is defined over non-customized prompts only")
    z0 = np.repeat(eval_latents.points, n_t, axis=0)
    t = rng.integers(1, sched.T_train + 1, size=len(z0))
    eps = rng.standard_normal(z0.shape)
    z_t = q_sample(z0, t, eps, sched)
    total = 0.0
    for p in prompts:
        gap = theta(z_t, t, p) - theta_prime(z_t, t, p)
        total += float(np.sum(gap * gap, axis=1).mean())
    value = 0.5 * total / len(prompts)
    return MetricReport(
        "latent_fisher_divergence",
        value,
        counts={"latents": len(eval_latents), "n_t": n_t, "prompts": len(prompts)},
        config={"seed": seed},
    )


def gaussian_fit(points: PointSet | np.ndarray) -> MomentPair:
    pts = points.points if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        raise ContractError("a Gaussian fit needs at least two points")
    return MomentPair.of(pts.mean(axis=0), np.cov(pts, rowvar=False))


def w2_gaussian_squared(g1: MomentPair, g2: MomentPair) -> float:
    for g in (g1, g2):
        if not (np.all(np.isfinite(g.mean)) and np.all(np.isfinite(g.cov))):
            raise NumericError("moments contain non-finite values")
    diff = g1.mean - g2.mean
    mean_term = float(diff @ diff)
    if np.array_equal(g1.cov, g2.cov):
        # tr(S + S - 2 (S^1/2 S S^1/2)^1/2) is exactly zero; skip the rounding noise.
        return mean_term
    s2 = _psd_sqrt(g2.cov)
    cross = _psd_sqrt(s2 @ g1.cov @ s2)
    cov_term = float(np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * np.trace(cross))
    return mean_term + max(cov_term, 0.0)


def w2_gaussian(g1: MomentPair, g2: MomentPair) -> MetricReport:
    """Closed-form 2-Wasserstein distance between two Gaussians (the square root is returned)."""
    return MetricReport("w2_gaussian", math.sqrt(max(w2_gaussian_squared(g1, g2), 0.0)))


def w2_empirical_oracle(a: PointSet | np.ndarray, b: PointSet | np.ndarray) -> MetricReport:
    """Exact discrete 2-Wasserstein distance between equal-size point clouds via optimal matching."""
    pa = a.points if isinstance(a, PointSet) else np.asarray(a, dtype=np.float64).reshape(-1, 2)
    pb = b.points if isinstance(b, PointSet) else np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(pa) != len(pb):
        raise ContractError(f"point sets differ in size: {len(pa)} vs {len(pb)}")
    if not 1 <= len(pa) <= ORACLE_MAX_POINTS:
        raise ContractError(f"exact matching supports 1..{ORACLE_MAX_POINTS} points, got {len(pa)}")
    cost = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    return MetricReport("w2_empirical", math.sqrt(cost[rows, cols].mean()), counts={"n": len(pa)})


def mode_coverage(
    points: PointSet | np.ndarray,
    centers: np.ndarray,
    radius: float = COVERAGE_RADIUS,
    quorum: int = COVERAGE_QUORUM,
) -> float:
    """Fraction of ``centers`` with at least ``quorum`` points inside ``radius``."""
    if radius <= 0:
        raise ContractError("coverage radius must be positive")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if len(centers) == 0:
        raise ContractError("no modality centers given")
    pts = points.points if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return 0.0
    dist = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=2)
    hits = (dist <= radius).sum(axis=0)
    return float((hits >= quorum).sum()) / len(centers)


@dataclass
class CurveSeries:
    method: str
    steps: list[int] = field(default_factory=list)
    values: dict[str, list[float]] = field(default_factory=dict)

    def append(self, step: int, **metrics: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ContractError("curve steps must be strictly increasing")
        self.steps.append(step)
        for k, v in metrics.items():
            self.values.setdefault(k, []).append(v)

    def series(self, metric: str) -> list[float]:
        return self.values[metric]


def non_decreasing_with_dip(values: Sequence[float], max_dips: int = 1, tolerance: float = 0.10) -> bool:
    """True if ``values`` never decreases, except for up to ``max_dips`` drops of at most ``tolerance`` relative."""
    dips = 0
    for prev, cur in zip(values, values[1:]):
        if cur < prev:
            dips += 1
            if dips > max_dips or (prev - cur) > tolerance * prev:
                return False
    return True


def eps_fn_from(predict: Callable[..., np.ndarray], **kw) -> EpsFn:
    return lambda z, t, p: predict(z, t, p, **kw)


def summarize(reports: Mapping[str, MetricReport]) -> dict:
    return {k: r.to_dict() for k, r in reports.items()}

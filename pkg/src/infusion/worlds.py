"""Toy ground-truth distributions: concept-conditioned 2-D Gaussian mixtures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ContractError, MigrationError

WORLD_FORMAT_VERSION = 1
TOY_SIGMA = 0.15
SUPER_CLASS = "super"


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: tuple[float, float]
    cov: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        if not 0.0 < self.weight <= 1.0:
            raise ContractError(f"component weight must lie in (0, 1], got {self.weight}")
        c = np.asarray(self.cov, dtype=np.float64)
        if c.shape != (2, 2) or c[0, 1] != c[1, 0]:
            raise ContractError("covariance must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(c).min() <= 0:
            raise ContractError("covariance must be positive definite")


@dataclass
class PointSet:
    points: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.points)):
            raise ContractError("point set contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ConceptWorld:
    concepts: dict[str, list[GaussianComponent]]
    name: str = "custom"

    def __post_init__(self):
        for token, comps in self.concepts.items():
            if not comps:
                raise ContractError(f"concept {token!r} has no components")
            total = sum(c.weight for c in comps)
            if abs(total - 1.0) > 1e-12:
                raise ContractError(f"weights of concept {token!r} sum to {total}, not 1")

    @property
    def tokens(self) -> list[str]:
        return list(self.concepts)

    def modality_centers(self, concept: str | None = None) -> np.ndarray:
        """Component means of one concept, or of every concept in insertion order."""
        if concept is not None:
            return np.array([c.mean for c in self._lookup(concept)], dtype=np.float64)
        return np.array([c.mean for comps in self.concepts.values() for c in comps], dtype=np.float64)

    def _lookup(self, concept: str) -> list[GaussianComponent]:
        try:
            return self.concepts[concept]
        except KeyError:
            raise KeyError(f"unknown concept {concept!r}; world has {self.tokens}") from None

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": WORLD_FORMAT_VERSION,
            "name": self.name,
            "concepts": {
                token: [
                    {"weight": c.weight, "mean": list(c.mean), "cov": [list(r) for r in c.cov]}
                    for c in comps
                ]
                for token, comps in self.concepts.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ConceptWorld":
        version = doc.get("format_version")
        if version != WORLD_FORMAT_VERSION:
            raise MigrationError(f"unsupported world format_version {version!r}")
        concepts = {
            token: [
                GaussianComponent(
                    weight=float(c["weight"]),
                    mean=(float(c["mean"][0]), float(c["mean"][1])),
                    cov=tuple(tuple(float(x) for x in row) for row in c["cov"]),
                )
                for c in comps
            ]
            for token, comps in doc["concepts"].items()
        }
        return cls(concepts=concepts, name=doc.get("name", "custom"))


def _iso(sigma: float):
    return ((sigma * sigma, 0.0), (0.0, sigma * sigma))


def build_four_peak_world() -> ConceptWorld:
    means = {"A": (-2.0, 2.0), "B": (2.0, 2.0), "C": (-2.0, -2.0), "D": (2.0, -2.0)}
    return ConceptWorld(
        {k: [GaussianComponent(1.0, m, _iso(TOY_SIGMA))] for k, m in means.items()},
        name="four_peak",
    )


def build_grid25_world() -> ConceptWorld:
    grid = (-4.0, -2.0, 0.0, 2.0, 4.0)
    comps = [GaussianComponent(1.0 / 25.0, (x, y), _iso(TOY_SIGMA)) for y in grid for x in grid]
    return ConceptWorld({SUPER_CLASS: comps}, name="grid25")


BUILTIN_WORLDS = {"four_peak": build_four_peak_world, "grid25": build_grid25_world}


def sample_concept(world: ConceptWorld, concept: str, n: int, rng: np.random.Generator) -> PointSet:
    comps = world._lookup(concept)
    if n < 1:
        raise ContractError(f"sample count must be >= 1, got {n}")
    weights = np.array([c.weight for c in comps])
    idx = rng.choice(len(comps), size=n, p=weights / weights.sum())
    means = np.array([c.mean for c in comps])
    chol = np.array([np.linalg.cholesky(np.asarray(c.cov)) for c in comps])
    noise = rng.standard_normal((n, 2))
    pts = means[idx] + np.einsum("nij,nj->ni", chol[idx], noise)
    return PointSet(pts, label=f"{world.name}:{concept}")


@dataclass(frozen=True)
class LinearTarget:
    """A short jittered line segment replicated at a few carrier modalities."""

    anchor_a: tuple[float, float] = (-0.4, -0.4)
    anchor_b: tuple[float, float] = (0.4, 0.4)
    jitter: float = 0.05
    carriers: tuple[int, ...] = field(default=(0, 6, 12, 18, 24))

    def __post_init__(self):
        if self.jitter < 0:
            raise ContractError("jitter must be non-negative")
        if not self.carriers:
            raise ContractError("carrier set is empty")

    def validate(self, world: ConceptWorld) -> None:
        count = len(world.modality_centers())
        bad = [c for c in self.carriers if not 0 <= c < count]
        if bad:
            raise ContractError(f"carrier indices {bad} outside the world's {count} modalities")


def sample_custom_target(target: LinearTarget, world: ConceptWorld, n: int, rng: np.random.Generator) -> PointSet:
    """Points ``center + a + u (b - a) + jitter`` with ``center`` drawn uniformly from the carriers."""
    if n < 1:
        raise ContractError(f"sample count must be >= 1, got {n}")
    target.validate(world)
    centers = world.modality_centers()[list(target.carriers)]
    pick = rng.integers(0, len(centers), size=n)
    u = rng.uniform(0.0, 1.0, size=(n, 1))
    noise = rng.standard_normal((n, 2))
    a = np.asarray(target.anchor_a)
    b = np.asarray(target.anchor_b)
    pts = centers[pick] + a + u * (b - a) + target.jitter * noise
    return PointSet(pts, label=f"{world.name}:linear-target")

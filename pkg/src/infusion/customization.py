"""Concept customization: residual value embeddings and two fine-tuning baselines.

Residual training keeps the base denoiser frozen. Every step runs the
foundational pass to capture attention maps and then the customized pass with
those maps injected and the per-layer residuals added to the concept token's
value row; only the residuals receive gradients.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .denoiser import DenoiserWeights, PromptSpec, apply_residuals, denoise_forward  # noqa: F401  (re-export)
from .diffusion import NoiseSchedule, diffusion_loss, make_schedule, noisy_batch, optimize
from .errors import ContractError, IntegrityError, MigrationError
from .numerics import Tensor
from .worlds import PointSet

log = logging.getLogger(__name__)

RESIDUAL_FORMAT_VERSION = 1
METHODS = ("infusion", "full-finetune", "token-inversion")


@dataclass
class ResidualConceptEmbedding:
    concept: str
    deltas: np.ndarray  # (n_layers, d)
    base_fingerprint: str
    steps: int = 0

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if self.deltas.ndim != 2:
            raise ContractError("residual deltas must be an (n_layers, d) array")
        if not np.all(np.isfinite(self.deltas)):
            raise ContractError("residual deltas contain non-finite values")

    @property
    def n_layers(self) -> int:
        return self.deltas.shape[0]

    @property
    def dim(self) -> int:
        return self.deltas.shape[1]

    def to_dict(self) -> dict:
        return {
            "format_version": RESIDUAL_FORMAT_VERSION,
            "concept": self.concept,
            "d": self.dim,
            "layer_count": self.n_layers,
            "deltas": self.deltas.tolist(),
            "base_fingerprint": self.base_fingerprint,
            "steps": self.steps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: Mapping, base: DenoiserWeights | None = None) -> "ResidualConceptEmbedding":
        if doc.get("format_version") != RESIDUAL_FORMAT_VERSION:
            raise MigrationError(f"unsupported residual format_version {doc.get('format_version')!r}")
        deltas = np.array(doc["deltas"], dtype=np.float64)
        if deltas.shape != (doc["layer_count"], doc["d"]):
            raise IntegrityError(f"residual deltas have shape {deltas.shape}, header says {(doc['layer_count'], doc['d'])}")
        emb = cls(doc["concept"], deltas, doc["base_fingerprint"], int(doc.get("steps", 0)))
        if base is not None:
            emb.check_base(base)
        return emb

    def check_base(self, base: DenoiserWeights) -> None:
        fp = base.fingerprint()
        if fp != self.base_fingerprint:
            raise ContractError(
                f"residual {self.concept!r} was trained against base {self.base_fingerprint[:12]}, "
                f"refusing to apply it to base {fp[:12]}"
            )
        if self.deltas.shape != (base.config.n_layers, base.config.d_model):
            raise ContractError("residual shape does not match the base denoiser")


def residual_set(embeddings: Sequence[ResidualConceptEmbedding]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for e in embeddings:
        if e.concept in out:
            raise ContractError(f"two residuals for concept {e.concept!r}")
        out[e.concept] = e.deltas
    return out


@dataclass(frozen=True)
class CustomizationConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 0.01
    finetune_lr: float = 2e-3
    inversion_lr: float = 0.01
    p_uncond: float = 0.1
    checkpoint_every: int = 100
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CustomizationRun:
    method: str
    prompt: PromptSpec
    losses: list[float] = field(default_factory=list)
    checkpoints: list[tuple[int, object]] = field(default_factory=list)

    def at(self, step: int):
        for s, artifact in self.checkpoints:
            if s == step:
                return artifact
        raise KeyError(f"no checkpoint at step {step} for {self.method}")


def _single_slot(prompt: PromptSpec) -> tuple[int, str]:
    if len(prompt.concept_slots) != 1:
        raise ContractError(f"customization prompt needs exactly one concept slot, got {len(prompt.concept_slots)}")
    return prompt.concept_slots[0]


def _batches(data: PointSet, config: CustomizationConfig, rng: np.random.Generator) -> np.ndarray:
    if len(data) == 0:
        raise ContractError("customization data is empty")
    return data.points[rng.integers(0, len(data), size=config.batch_size)]


def _cadence(config: CustomizationConfig, step: int) -> bool:
    return config.checkpoint_every > 0 and step % config.checkpoint_every == 0


def infusion_loss(
    base: DenoiserWeights,
    deltas: Tensor,
    concept: str,
    points: np.ndarray,
    prompt: PromptSpec,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    base_tensors=None,
) -> Tensor:
    """Customization loss of the customized pass under maps captured from the foundational pass."""
    z_t, t, eps = noisy_batch(points, sched, rng)
    _, trace = denoise_forward(z_t, t, prompt, base, tensors=base_tensors)
    pred, _ = denoise_forward(z_t, t, prompt, base, residuals={concept: deltas}, injected=trace, tensors=base_tensors)
    return nx.mse(pred, eps)


def train_infusion(
    base: DenoiserWeights,
    data: PointSet,
    prompt: PromptSpec,
    steps: int | None = None,
    config: CustomizationConfig = CustomizationConfig(),
    sched: NoiseSchedule | None = None,
) -> tuple[ResidualConceptEmbedding, CustomizationRun]:
    _, concept = _single_slot(prompt)
    steps = config.steps if steps is None else steps
    sched = sched or make_schedule()
    rng = np.random.default_rng(config.seed)
    fingerprint = base.fingerprint()
    frozen = base.tensors()
    cfg = base.config
    run = CustomizationRun("infusion", prompt)
    init = {"deltas": np.zeros((cfg.n_layers, cfg.d_model))}
    run.checkpoints.append((0, ResidualConceptEmbedding(concept, init["deltas"].copy(), fingerprint, 0)))

    def loss_fn(tracked, step):
        return infusion_loss(base, tracked["deltas"], concept, _batches(data, config, rng), prompt, sched, rng, frozen)

    def on_step(step, params):
        if _cadence(config, step):
            run.checkpoints.append((step, ResidualConceptEmbedding(concept, params["deltas"].copy(), fingerprint, step)))

    params, run.losses = optimize(init, loss_fn, steps, lambda _: config.lr, on_step)
    return ResidualConceptEmbedding(concept, params["deltas"], fingerprint, steps), run


def train_full_finetune(
    base: DenoiserWeights,
    data: PointSet,
    prompt: PromptSpec,
    steps: int | None = None,
    config: CustomizationConfig = CustomizationConfig(),
    sched: NoiseSchedule | None = None,
) -> tuple[DenoiserWeights, CustomizationRun]:
    """Optimize every denoiser parameter on the customized data only."""
    _single_slot(prompt)
    steps = config.steps if steps is None else steps
    sched = sched or make_schedule()
    rng = np.random.default_rng(config.seed)
    plain = prompt.without_slots()
    run = CustomizationRun("full-finetune", prompt)
    run.checkpoints.append((0, base.copy()))

    def loss_fn(tracked, step):
        batch = PointSet(_batches(data, config, rng))
        return diffusion_loss(batch, plain, base, sched, config.p_uncond, rng, tensors=tracked)

    def on_step(step, params):
        if _cadence(config, step):
            run.checkpoints.append((step, base.with_params(params).copy()))

    params, run.losses = optimize(base.params, loss_fn, steps, lambda _: config.finetune_lr, on_step)
    return base.with_params(params), run


def train_token_inversion(
    base: DenoiserWeights,
    data: PointSet,
    placeholder: str,
    prompt: PromptSpec,
    init_token: str,
    steps: int | None = None,
    config: CustomizationConfig = CustomizationConfig(),
    sched: NoiseSchedule | None = None,
) -> tuple[np.ndarray, CustomizationRun]:
    """Learn only the placeholder's embedding row, starting from ``init_token``'s row."""
    _single_slot(prompt)
    if placeholder not in prompt.tokens:
        raise ContractError(f"placeholder {placeholder!r} does not occur in the prompt")
    if placeholder == init_token:
        raise ContractError("placeholder must differ from the initialization token")
    steps = config.steps if steps is None else steps
    sched = sched or make_schedule()
    rng = np.random.default_rng(config.seed)
    table = base.table
    row = table.index(placeholder)
    start = table.embeddings[table.index(init_token)].copy()
    # The placeholder row is zeroed in the frozen table and the learned vector
    # is added back in, so the looked-up row equals the learned vector exactly.
    frozen_table = table.embeddings.copy()
    frozen_table[row] = 0.0
    frozen = base.tensors()
    run = CustomizationRun("token-inversion", prompt)
    run.checkpoints.append((0, start.copy()))

    def loss_fn(tracked, step):
        tab = nx.add_rows(Tensor(frozen_table), [row], nx.reshape(tracked["embedding"], (1, -1)))
        batch = PointSet(_batches(data, config, rng))
        return diffusion_loss(batch, prompt, base, sched, 0.0, rng, tensors=frozen, token_table=tab)

    def on_step(step, params):
        if _cadence(config, step):
            run.checkpoints.append((step, params["embedding"].copy()))

    params, run.losses = optimize({"embedding": start}, loss_fn, steps, lambda _: config.inversion_lr, on_step)
    return params["embedding"], run


def with_token_embedding(base: DenoiserWeights, token: str, embedding: np.ndarray) -> DenoiserWeights:
    """Copy of ``base`` whose embedding row for ``token`` is replaced."""
    table = base.params["tok_emb"].copy()
    table[base.table.index(token)] = embedding
    return base.with_params({"tok_emb": table})


def residual_checksum(emb: ResidualConceptEmbedding) -> str:
    return hashlib.sha256(emb.to_json().encode()).hexdigest()

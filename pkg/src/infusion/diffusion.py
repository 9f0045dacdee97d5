"""Noise schedule, epsilon-prediction objective, base training and DDIM sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .denoiser import (
    PHOTO_OF,
    AttentionTrace,
    DenoiserConfig,
    DenoiserWeights,
    PromptSpec,
    denoise_forward,
    drop_condition,
    init_weights,
)
from .errors import ContractError, NumericError, TrainingError
from .numerics import OptimizerState, Tensor
from .worlds import ConceptWorld, PointSet, sample_concept

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray  # alpha_bar[0] == 1 so that index t is timestep t

    @property
    def T_train(self) -> int:
        return len(self.beta)

    def ab(self, t) -> np.ndarray:
        return self.alpha_bar[np.asarray(t, dtype=np.int64)]


def make_schedule(T_train: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T_train < 1:
        raise ContractError(f"T_train must be >= 1, got {T_train}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T_train) if T_train > 1 else np.array([beta_start])
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)


def q_sample(z0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > sched.T_train):
        raise ContractError(f"timesteps must lie in [1, {sched.T_train}]")
    ab = sched.ab(t)
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * np.asarray(z0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance: float = 2.0
    eta: float = 0.0

    def validate(self, sched: NoiseSchedule) -> None:
        if not 1 <= self.steps <= sched.T_train:
            raise ContractError(f"sampler steps must lie in [1, {sched.T_train}], got {self.steps}")
        if self.guidance < 0:
            raise ContractError("guidance scale must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise ContractError("eta must lie in [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 6000
    batch_size: int = 32
    lr: float = 2e-3
    lr_final: float | None = 2e-4
    p_uncond: float = 0.1
    checkpoint_every: int = 0
    seed: int = 0

    def lr_at(self, step: int) -> float:
        """Cosine decay from ``lr`` to ``lr_final`` (constant if ``lr_final`` is None)."""
        if self.lr_final is None or self.steps <= 1:
            return self.lr
        frac = step / (self.steps - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + math.cos(math.pi * frac))

    def to_dict(self) -> dict:
        return asdict(self)


def noisy_batch(points: np.ndarray, sched: NoiseSchedule, rng: np.random.Generator):
    """Draw (t, eps) per point and return ``(z_t, t, eps)``."""
    n = len(points)
    t = rng.integers(1, sched.T_train + 1, size=n)
    eps = rng.standard_normal((n, 2))
    return q_sample(points, t, eps, sched), t, eps


def diffusion_loss(
    batch: PointSet,
    prompt: PromptSpec | Sequence[PromptSpec],
    weights: DenoiserWeights,
    sched: NoiseSchedule,
    p_uncond: float,
    rng: np.random.Generator,
    tensors: Mapping[str, Tensor] | None = None,
    **forward_kw,
) -> Tensor:
    """Mean over the batch of ``||eps - eps_hat(z_t, t, prompt)||^2``."""
    if len(batch) == 0:
        raise ContractError("empty training batch")
    points = batch.points
    z_t, t, eps = noisy_batch(points, sched, rng)
    prompts = [prompt] * len(points) if isinstance(prompt, PromptSpec) else list(prompt)
    prompts = [drop_condition(p, p_uncond, rng) for p in prompts]
    pred, _ = denoise_forward(z_t, t, prompts, weights, tensors=tensors, **forward_kw)
    return nx.mse(pred, eps)


def concept_prompt(concept: str) -> PromptSpec:
    return PromptSpec.of(PHOTO_OF, concept)


def optimize(
    init: Mapping[str, np.ndarray],
    loss_fn: Callable[[Mapping[str, Tensor], int], Tensor],
    steps: int,
    lr_at: Callable[[int], float],
    on_step: Callable[[int, dict[str, np.ndarray]], None] | None = None,
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Generic Adam loop over named arrays; ``on_step(step, params)`` runs after each update."""
    params = {k: np.array(v, dtype=np.float64) for k, v in init.items()}
    state = OptimizerState.fresh(params)
    losses: list[float] = []
    for step in range(steps):
        tracked = {k: Tensor.param(v, k) for k, v in params.items()}
        loss = loss_fn(tracked, step)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(step)
        grads = nx.backward(loss, tracked)
        params, state = nx.adam_step(params, grads, state, lr_at(step))
        losses.append(value)
        if on_step is not None:
            on_step(step + 1, params)
    return params, losses


def train_base(
    world: ConceptWorld,
    config: TrainConfig,
    sched: NoiseSchedule | None = None,
    denoiser_config: DenoiserConfig | None = None,
    on_checkpoint: Callable[[int, DenoiserWeights], None] | None = None,
) -> tuple[DenoiserWeights, list[float]]:
    """Fit a fresh denoiser to ``world`` with concept-conditioned batches."""
    sched = sched or make_schedule()
    rng = np.random.default_rng(config.seed)
    weights = init_weights(denoiser_config or DenoiserConfig(), rng)
    concepts = world.tokens
    unknown = [c for c in concepts if c not in weights.config.vocab]
    if unknown:
        raise ContractError(f"world concepts {unknown} are missing from the vocabulary")
    prompts = {c: concept_prompt(c) for c in concepts}

    def loss_fn(tracked, step):
        picks = rng.integers(0, len(concepts), size=config.batch_size)
        pts = np.empty((config.batch_size, 2))
        for ci, c in enumerate(concepts):
            sel = picks == ci
            if sel.any():
                pts[sel] = sample_concept(world, c, int(sel.sum()), rng).points
        batch_prompts = [prompts[concepts[i]] for i in picks]
        return diffusion_loss(PointSet(pts), batch_prompts, weights, sched, config.p_uncond, rng, tensors=tracked)

    def on_step(step, params):
        if step % 1000 == 0:
            log.info("base step %d", step)
        if on_checkpoint and config.checkpoint_every and step % config.checkpoint_every == 0:
            on_checkpoint(step, weights.with_params(params))

    params, losses = optimize(weights.params, loss_fn, config.steps, config.lr_at, on_step)
    return weights.with_params(params), losses


def ddim_timesteps(T_train: int, steps: int) -> np.ndarray:
    if steps == 1:
        return np.array([T_train], dtype=np.int64)
    k = np.arange(steps, dtype=np.int64)
    return T_train - (k * (T_train - 1)) // (steps - 1)


def guided_eps(eps_null: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    return eps_null + scale * (eps_cond - eps_null)


def ddim_update(z, eps, ab_t: float, ab_prev: float, eta: float, rng: np.random.Generator) -> np.ndarray:
    x0 = (z - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev) if eta > 0 else 0.0
    out = math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0)) * eps
    if sigma > 0:
        out = out + sigma * rng.standard_normal(z.shape)
    return out


@dataclass
class SamplingLog:
    """Per-step record of a sampling run."""

    timesteps: list[int]
    guided: list[np.ndarray]
    traces: list[AttentionTrace]
    foundational: PointSet | None = None


def ddim_sample(
    weights: DenoiserWeights,
    prompt: PromptSpec,
    sched: NoiseSchedule,
    sampler: SamplerConfig,
    n: int,
    rng: np.random.Generator,
    residuals: Mapping[str, np.ndarray] | None = None,
    dual_stream: bool = False,
    inject_layers: Sequence[bool] | None = None,
    record: bool = False,
) -> tuple[PointSet, SamplingLog | None]:
    """Deterministic (eta=0) or stochastic DDIM with classifier-free guidance.

    In dual-stream mode two latents start from the same noise. The
    foundational latent is denoised by the plain model; at each step its
    conditional attention maps are injected into the customized pass, which
    also carries ``residuals`` and drives the returned samples.
    """
    sampler.validate(sched)
    if n < 1:
        raise ContractError("sample count must be >= 1")
    if dual_stream and residuals is None:
        raise ContractError("dual-stream sampling needs residual embeddings")
    null = PromptSpec.null(len(prompt))
    ts = ddim_timesteps(sched.T_train, sampler.steps)
    z = rng.standard_normal((n, 2))
    z_f = z.copy() if dual_stream else None
    slog = SamplingLog([], [], []) if record else None

    def guided(zz, t, **kw):
        e_null = denoise_forward(zz, t, null, weights)[0].data
        e_cond, trace = denoise_forward(zz, t, prompt, weights, **kw)
        return guided_eps(e_null, e_cond.data, sampler.guidance), trace

    for i, t in enumerate(ts):
        t = int(t)
        ab_t = float(sched.alpha_bar[t])
        ab_prev = float(sched.alpha_bar[ts[i + 1]]) if i + 1 < len(ts) else 1.0
        if dual_stream:
            eps_f, trace = guided(z_f, t)
            eps, _ = guided(z, t, residuals=residuals, injected=trace, inject_layers=inject_layers)
            noise_rng_state = rng.bit_generator.state
            z_f = ddim_update(z_f, eps_f, ab_t, ab_prev, sampler.eta, rng)
            if sampler.eta > 0:
                rng.bit_generator.state = noise_rng_state
        else:
            eps, trace = guided(z, t, residuals=residuals)
        z = ddim_update(z, eps, ab_t, ab_prev, sampler.eta, rng)
        if slog is not None:
            slog.timesteps.append(t)
            slog.guided.append(eps)
            slog.traces.append(trace)
    if not np.all(np.isfinite(z)):
        raise NumericError("sampling produced non-finite latents")
    if slog is not None and dual_stream:
        slog.foundational = PointSet(z_f, label="foundational")
    return PointSet(z, label="samples"), slog

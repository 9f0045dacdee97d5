"""Experiment configuration and the train -> customize -> evaluate pipeline."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .customization import (
    METHODS,
    CustomizationConfig,
    CustomizationRun,
    ResidualConceptEmbedding,
    train_full_finetune,
    train_infusion,
    train_token_inversion,
    with_token_embedding,
)
from .denoiser import PHOTO_OF, DenoiserConfig, DenoiserWeights, PromptSpec, denoise_forward, predict
from .diffusion import NoiseSchedule, SamplerConfig, TrainConfig, ddim_sample, make_schedule, train_base
from .errors import ContractError
from .metrics import (
    COVERAGE_QUORUM,
    COVERAGE_RADIUS,
    CurveSeries,
    gaussian_fit,
    latent_fisher_divergence,
    mode_coverage,
    w2_gaussian,
)
from .persist import canonical_json
from .worlds import BUILTIN_WORLDS, ConceptWorld, LinearTarget, PointSet, sample_concept, sample_custom_target

log = logging.getLogger(__name__)

CONFIG_FORMAT_VERSION = 1
PLACEHOLDER = "<obj>"
CURVE_COLUMNS = ("method", "step", "fisher", "w2", "coverage")


@dataclass(frozen=True)
class ScheduleConfig:
    T_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return make_schedule(self.T_train, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class MetricConfig:
    n_samples: int = 1000
    fisher_latents: int = 2000
    n_t: int = 8
    radius: float = COVERAGE_RADIUS
    quorum: int = COVERAGE_QUORUM
    eval_steps: tuple[int, ...] = (100, 200, 400, 1000, 2000)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "four-peak"
    world: str = "four_peak"
    concept: str = "A"
    seed: int = 0
    methods: tuple[str, ...] = METHODS
    n_data: int = 500
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    base: TrainConfig = field(default_factory=lambda: TrainConfig(steps=4000, batch_size=64, lr=2e-3, lr_final=2e-4))
    customize: CustomizationConfig = field(default_factory=CustomizationConfig)
    target: LinearTarget = field(default_factory=lambda: LinearTarget(carriers=(0,)))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    out: str = "runs/four-peak"

    def to_dict(self) -> dict:
        doc = _plain(asdict(self))
        doc["format_version"] = CONFIG_FORMAT_VERSION
        return doc

    def config_hash(self) -> str:
        """Hash of everything that influences results; the output directory is excluded."""
        doc = self.to_dict()
        del doc["out"]
        return hashlib.sha256(canonical_json(doc).encode()).hexdigest()

    def validate(self) -> None:
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ContractError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if self.world not in BUILTIN_WORLDS and not Path(self.world).is_file():
            raise ContractError(f"world {self.world!r} is neither a builtin nor an existing file")
        if self.n_data < 1:
            raise ContractError("n_data must be >= 1")
        if list(self.metrics.eval_steps) != sorted(set(self.metrics.eval_steps)):
            raise ContractError("metrics.eval_steps must be strictly increasing")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "denoiser": DenoiserConfig,
    "schedule": ScheduleConfig,
    "base": TrainConfig,
    "customize": CustomizationConfig,
    "target": LinearTarget,
    "sampler": SamplerConfig,
    "metrics": MetricConfig,
}


def _build_section(cls, doc: Mapping[str, Any], default):
    names = {f.name for f in fields(cls)}
    bad = set(doc) - names
    if bad:
        raise ContractError(f"unknown keys for {cls.__name__}: {sorted(bad)}")
    merged = {**asdict(default), **doc}
    merged = {k: (tuple(v) if isinstance(v, list) else v) for k, v in merged.items()}
    return cls(**merged)


def config_from_dict(doc: Mapping[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Overlay ``doc`` on ``base`` (defaults if omitted), validating every key."""
    cfg = base or ExperimentConfig()
    doc = dict(doc)
    version = doc.pop("format_version", CONFIG_FORMAT_VERSION)
    if version != CONFIG_FORMAT_VERSION:
        raise ContractError(f"unsupported config format_version {version!r}")
    doc.pop("preset", None)
    top = {f.name for f in fields(ExperimentConfig)}
    bad = set(doc) - top
    if bad:
        raise ContractError(f"unknown config keys: {sorted(bad)}")
    updates: dict[str, Any] = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            if not isinstance(value, Mapping):
                raise ContractError(f"config section {key!r} must be an object")
            updates[key] = _build_section(_SECTIONS[key], value, getattr(cfg, key))
        elif key == "methods":
            updates[key] = tuple(value)
        else:
            updates[key] = value
    out = replace(cfg, **updates)
    check_seed(out.seed)
    out.validate()
    return out


PRESETS: dict[str, dict[str, Any]] = {
    "four-peak": {},
    "grid25": {
        "name": "grid25",
        "world": "grid25",
        "concept": "super",
        "base": {"steps": 8000, "batch_size": 256, "lr": 3e-3, "lr_final": 3e-4},
        "target": {"carriers": [0, 6, 12, 18, 24]},
        "metrics": {"n_samples": 2000},
        "out": "runs/grid25",
    },
    # Values reported for the Stable Diffusion setting; sizes apply to fresh
    # training only, loaded checkpoints keep their own denoiser shape.
    "paper-sd15": {
        "customize": {"lr": 0.01, "batch_size": 4},
        "sampler": {"steps": 50, "guidance": 8.0},
        "denoiser": {"d_model": 768},
    },
}


def preset(name: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        overlay = PRESETS[name]
    except KeyError:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return config_from_dict(copy.deepcopy(overlay), base)


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ContractError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ContractError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ContractError("config must be a JSON object")
    base = preset(doc["preset"]) if "preset" in doc else None
    return config_from_dict(doc, base)


def check_seed(seed) -> None:
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ContractError(f"seed must be an explicit integer in [0, 2**64), got {seed!r}")


def derive_seed(seed: int, stream: str) -> int:
    """Stable per-stream seed so that every random draw traces back to the config seed."""
    return int.from_bytes(hashlib.sha256(f"{seed}/{stream}".encode()).digest()[:8], "little")


def rng_for(cfg: ExperimentConfig, stream: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(cfg.seed, stream))


def load_world(cfg: ExperimentConfig) -> ConceptWorld:
    if cfg.world in BUILTIN_WORLDS:
        world = BUILTIN_WORLDS[cfg.world]()
    else:
        world = ConceptWorld.from_dict(json.loads(Path(cfg.world).read_text()))
    if cfg.concept not in world.concepts:
        raise ContractError(f"concept {cfg.concept!r} is not part of world {world.name!r}")
    cfg.target.validate(world)
    return world


def base_train_config(cfg: ExperimentConfig) -> TrainConfig:
    return replace(cfg.base, seed=derive_seed(cfg.seed, "base"))


def custom_config(cfg: ExperimentConfig) -> CustomizationConfig:
    return replace(cfg.customize, seed=derive_seed(cfg.seed, "customize"))


def train_base_model(cfg: ExperimentConfig, world: ConceptWorld | None = None):
    world = world or load_world(cfg)
    return train_base(world, base_train_config(cfg), cfg.schedule.build(), cfg.denoiser)


@dataclass(frozen=True)
class Prompts:
    """Prompts used by one customization experiment."""

    custom: PromptSpec  # class prompt with the concept slot (Infusion, full fine-tune)
    inversion: PromptSpec  # placeholder prompt (token inversion)
    reference: PromptSpec  # plain class prompt: the un-customized distribution
    others: tuple[tuple[str, PromptSpec], ...]  # non-customized concepts with their prompts


def experiment_prompts(cfg: ExperimentConfig, world: ConceptWorld) -> Prompts:
    others = tuple((c, PromptSpec.of(PHOTO_OF, c)) for c in world.tokens if c != cfg.concept)
    if not others:
        # Single-concept worlds have no other concept; the unconditional prompt stands in.
        others = ((cfg.concept, PromptSpec.null(2)),)
    return Prompts(
        custom=PromptSpec.of(PHOTO_OF, cfg.concept, slots={1: PLACEHOLDER}),
        inversion=PromptSpec.of(PHOTO_OF, PLACEHOLDER, slots={1: PLACEHOLDER}),
        reference=PromptSpec.of(PHOTO_OF, cfg.concept),
        others=others,
    )


def customization_data(cfg: ExperimentConfig, world: ConceptWorld) -> PointSet:
    return sample_custom_target(cfg.target, world, cfg.n_data, rng_for(cfg, "custom-data"))


def run_method(
    method: str,
    cfg: ExperimentConfig,
    base: DenoiserWeights,
    data: PointSet,
    prompts: Prompts,
    steps: int | None = None,
) -> tuple[Any, CustomizationRun]:
    """Train one method; returns its final artifact and the run record."""
    sched = cfg.schedule.build()
    ccfg = custom_config(cfg)
    if method == "infusion":
        return train_infusion(base, data, prompts.custom, steps, ccfg, sched)
    if method == "full-finetune":
        return train_full_finetune(base, data, prompts.custom, steps, ccfg, sched)
    if method == "token-inversion":
        return train_token_inversion(base, data, PLACEHOLDER, prompts.inversion, cfg.concept, steps, ccfg, sched)
    raise ContractError(f"unknown method {method!r}")


class MethodModel:
    """Uniform view of a customized model: noise prediction and sampling."""

    def __init__(self, method: str, base: DenoiserWeights, artifact, prompts: Prompts):
        self.method = method
        self.base = base
        self.prompts = prompts
        self.residuals = None
        if method == "infusion":
            if isinstance(artifact, ResidualConceptEmbedding):
                artifact.check_base(base)
                artifact = artifact.deltas
            self.weights = base
            self.residuals = {PLACEHOLDER: np.asarray(artifact)}
            self.prompt = prompts.custom
        elif method == "full-finetune":
            self.weights = artifact
            self.prompt = prompts.reference
        elif method == "token-inversion":
            self.weights = with_token_embedding(base, PLACEHOLDER, artifact)
            self.prompt = prompts.inversion
        else:
            raise ContractError(f"unknown method {method!r}")

    def eps(self, z_t, t, prompt: PromptSpec) -> np.ndarray:
        if self.residuals is None:
            return predict(self.weights, z_t, t, prompt)
        _, trace = denoise_forward(z_t, t, prompt, self.weights)
        out, _ = denoise_forward(z_t, t, prompt, self.weights, residuals=self.residuals, injected=trace)
        return out.data

    def sample(self, sched: NoiseSchedule, sampler: SamplerConfig, n: int, rng: np.random.Generator) -> PointSet:
        pts, _ = ddim_sample(
            self.weights,
            self.prompt,
            sched,
            sampler,
            n,
            rng,
            residuals=self.residuals,
            dual_stream=self.residuals is not None,
        )
        pts.label = self.method
        return pts


@dataclass
class Evaluator:
    """Evaluates checkpoints of any method against the shared base model."""

    cfg: ExperimentConfig
    world: ConceptWorld
    base: DenoiserWeights
    prompts: Prompts
    _reference: PointSet | None = None
    _latents: dict[str, PointSet] = field(default_factory=dict)

    def __post_init__(self):
        self.sched = self.cfg.schedule.build()
        others = self.prompts.others
        per = max(2, self.cfg.metrics.fisher_latents // len(others))
        rng = rng_for(self.cfg, "fisher-latents")
        for concept, _ in others:
            self._latents[concept] = sample_concept(self.world, concept, per, rng)
        self.base_model = MethodModel("full-finetune", self.base, self.base, self.prompts)

    @property
    def centers(self) -> np.ndarray:
        return self.world.modality_centers(self.cfg.concept)

    def reference_samples(self) -> PointSet:
        if self._reference is None:
            self._reference = self.base_model.sample(
                self.sched, self.cfg.sampler, self.cfg.metrics.n_samples, rng_for(self.cfg, "eval-samples")
            )
            self._reference.label = "base"
        return self._reference

    def fisher(self, model: MethodModel) -> float:
        values = []
        for i, (concept, prompt) in enumerate(self.prompts.others):
            rep = latent_fisher_divergence(
                self.base_model.eps,
                model.eps,
                self._latents[concept],
                [prompt],
                self.sched,
                self.cfg.metrics.n_t,
                np.random.default_rng(derive_seed(self.cfg.seed, f"fisher/{i}")),
                seed=derive_seed(self.cfg.seed, f"fisher/{i}"),
            )
            values.append(rep.value)
        return float(np.mean(values))

    def samples(self, model: MethodModel) -> PointSet:
        return model.sample(self.sched, self.cfg.sampler, self.cfg.metrics.n_samples, rng_for(self.cfg, "eval-samples"))

    def evaluate(self, method: str, artifact) -> dict[str, float]:
        model = MethodModel(method, self.base, artifact, self.prompts)
        pts = self.samples(model)
        w2 = w2_gaussian(gaussian_fit(pts), gaussian_fit(self.reference_samples())).value
        cov = mode_coverage(pts, self.centers, self.cfg.metrics.radius, self.cfg.metrics.quorum)
        return {"fisher": self.fisher(model), "w2": w2, "coverage": cov}


def overfitting_curves(
    runs: Mapping[str, CustomizationRun],
    evaluator: Evaluator,
    steps: tuple[int, ...] | None = None,
) -> list[CurveSeries]:
    steps = tuple(evaluator.cfg.metrics.eval_steps if steps is None else steps)
    fp = evaluator.base.fingerprint()
    series = []
    for method, run in runs.items():
        curve = CurveSeries(method)
        for step in steps:
            artifact = run.at(step)
            if isinstance(artifact, ResidualConceptEmbedding) and artifact.base_fingerprint != fp:
                raise ContractError("checkpoint was trained against a different base model")
            curve.append(step, **evaluator.evaluate(method, artifact))
            log.info("%s step %d: %s", method, step, {k: v[-1] for k, v in curve.values.items()})
        series.append(curve)
    return series


def curves_csv(series: list[CurveSeries], config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for curve in series:
        for i, step in enumerate(curve.steps):
            writer.writerow([curve.method, step] + [repr(float(curve.values[k][i])) for k in CURVE_COLUMNS[2:]])
    return buf.getvalue()


def read_curves_csv(text: str) -> list[CurveSeries]:
    rows = [line for line in text.splitlines() if line and not line.startswith("#")]
    reader = csv.DictReader(rows)
    if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
        raise ContractError(f"curve CSV must have columns {CURVE_COLUMNS}")
    out: dict[str, CurveSeries] = {}
    for row in reader:
        curve = out.setdefault(row["method"], CurveSeries(row["method"]))
        curve.append(int(row["step"]), **{k: float(row[k]) for k in CURVE_COLUMNS[2:]})
    return list(out.values())


def loss_csv(losses, config_hash: str) -> str:
    lines = [f"# config_hash={config_hash}", "step,loss"]
    lines += [f"{i + 1},{loss!r}" for i, loss in enumerate(losses)]
    return "\n".join(lines) + "\n"


def points_csv(points: PointSet, config_hash: str) -> str:
    lines = [f"# config_hash={config_hash}", f"# label={points.label}", "x,y"]
    lines += [f"{x!r},{y!r}" for x, y in points.points.tolist()]
    return "\n".join(lines) + "\n"


def read_points_csv(text: str) -> PointSet:
    label = ""
    rows = []
    for line in text.splitlines():
        if line.startswith("# label="):
            label = line[len("# label="):]
        elif line and not line.startswith("#") and line != "x,y":
            x, y = line.split(",")
            rows.append((float(x), float(y)))
    return PointSet(np.array(rows).reshape(-1, 2), label=label)

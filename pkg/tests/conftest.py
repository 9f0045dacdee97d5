from __future__ import annotations

import time

import numpy as np
import pytest

from infusion.denoiser import DenoiserConfig, init_weights
from infusion.diffusion import make_schedule
from infusion.experiments import load_world, preset, train_base_model


TIMINGS: dict[str, float] = {}
CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sched():
    return make_schedule()


@pytest.fixture(scope="session")
def small_config():
    return DenoiserConfig(d_model=8, n_slots=2, n_layers=2, time_dim=4, lift_hidden=8, ffn_hidden=8, head_hidden=8)


@pytest.fixture(scope="session")
def small_weights(small_config):
    return init_weights(small_config, np.random.default_rng(7))


@pytest.fixture(scope="session")
def toy_weights():
    """Untrained weights at the default toy size."""
    return init_weights(DenoiserConfig(), np.random.default_rng(11))


@pytest.fixture(scope="session")
def four_peak():
    """Config, world and trained base model of the four-peak experiment (about 30 s)."""
    cfg = preset("four-peak")
    world = load_world(cfg)
    start = time.perf_counter()
    base, losses = train_base_model(cfg, world)
    TIMINGS["four-peak base"] = time.perf_counter() - start
    return cfg, world, base, losses


@pytest.fixture(scope="session")
def grid25():
    """Config, world and trained base model of the 25-mode experiment (about 3 min)."""
    cfg = preset("grid25")
    world = load_world(cfg)
    start = time.perf_counter()
    base, losses = train_base_model(cfg, world)
    TIMINGS["grid25 base"] = time.perf_counter() - start
    return cfg, world, base, losses


def _runs(bundle, methods):
    from infusion.experiments import customization_data, experiment_prompts, run_method

    cfg, world, base, _ = bundle
    prompts = experiment_prompts(cfg, world)
    data = customization_data(cfg, world)
    runs = {}
    for m in methods:
        start = time.perf_counter()
        runs[m] = run_method(m, cfg, base, data, prompts)
        TIMINGS[f"{cfg.name} {m}"] = time.perf_counter() - start
    return {"data": data, "prompts": prompts, "runs": runs}


@pytest.fixture(scope="session")
def four_peak_runs(four_peak):
    """All three customization methods trained for 2000 steps on concept A."""
    return _runs(four_peak, ("infusion", "full-finetune", "token-inversion"))


@pytest.fixture(scope="session")
def grid25_runs(grid25):
    """Infusion and full fine-tuning trained for 2000 steps on the 5-carrier line target."""
    return _runs(grid25, ("infusion", "full-finetune"))


@pytest.fixture(scope="session")
def grid25_eval(grid25, grid25_runs):
    """Fisher, W2 and coverage of both methods after 2000 steps, plus the evaluator used."""
    from infusion.experiments import Evaluator

    cfg, world, base, _ = grid25
    ev = Evaluator(cfg, world, base, grid25_runs["prompts"])
    metrics = {m: ev.evaluate(m, art) for m, (art, _) in grid25_runs["runs"].items()}
    return ev, metrics


TINY = {
    "preset": "four-peak",
    "base": {"steps": 30, "batch_size": 16},
    "customize": {"steps": 20, "batch_size": 8, "checkpoint_every": 10},
    "sampler": {"steps": 5},
    "metrics": {"n_samples": 60, "fisher_latents": 30, "n_t": 2, "eval_steps": [10, 20]},
    "n_data": 40,
}


@pytest.fixture
def tiny_config(tmp_path):
    """Path to a seconds-long experiment config writing into ``tmp_path/out``."""
    import json

    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({**TINY, "out": str(tmp_path / "out")}))
    return path

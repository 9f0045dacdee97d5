from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest

from infusion.customization import CustomizationRun, ResidualConceptEmbedding
from infusion.errors import ContractError
from infusion.experiments import (
    PRESETS,
    Evaluator,
    ExperimentConfig,
    config_from_dict,
    curves_csv,
    derive_seed,
    experiment_prompts,
    load_config,
    load_world,
    overfitting_curves,
    points_csv,
    preset,
    read_curves_csv,
    read_points_csv,
)
from infusion.metrics import CurveSeries
from infusion.worlds import PointSet


class TestConfig:
    def test_defaults_match_documented_values(self):
        cfg = ExperimentConfig()
        assert cfg.customize.lr == 0.01 and cfg.customize.batch_size == 32
        assert cfg.sampler.steps == 50 and cfg.sampler.guidance == 2.0 and cfg.sampler.eta == 0.0
        assert cfg.customize.p_uncond == 0.1 and cfg.customize.checkpoint_every == 100
        assert cfg.metrics.eval_steps == (100, 200, 400, 1000, 2000) and cfg.metrics.n_samples == 1000
        assert cfg.metrics.fisher_latents == 2000 and cfg.metrics.n_t == 8
        assert cfg.denoiser.d_model == 32 and cfg.denoiser.n_slots == 4 and cfg.denoiser.n_layers == 3

    def test_sd15_preset(self):
        cfg = preset("paper-sd15")
        assert cfg.customize.lr == 0.01 and cfg.customize.batch_size == 4
        assert cfg.sampler.steps == 50 and cfg.sampler.guidance == 8.0
        assert cfg.denoiser.d_model == 768

    def test_grid_preset(self):
        cfg = preset("grid25")
        assert cfg.world == "grid25" and cfg.target.carriers == (0, 6, 12, 18, 24)
        assert cfg.metrics.n_samples == 2000
        load_world(cfg)

    def test_unknown_keys(self):
        with pytest.raises(ContractError):
            config_from_dict({"sed": 1})
        with pytest.raises(ContractError):
            config_from_dict({"sampler": {"guidnce": 3}})
        with pytest.raises(ContractError):
            config_from_dict({"sampler": 3})
        with pytest.raises(ContractError):
            preset("sd-xl")

    @pytest.mark.parametrize("seed", [-1, 1.5, "7", True, 2**64])
    def test_seed_must_be_explicit_integer(self, seed):
        with pytest.raises(ContractError):
            config_from_dict({"seed": seed})

    def test_invalid_references(self):
        with pytest.raises(ContractError):
            config_from_dict({"world": "no/such/world.json"})
        with pytest.raises(ContractError):
            config_from_dict({"methods": ["lora"]})
        with pytest.raises(ContractError):
            config_from_dict({"format_version": 3})
        with pytest.raises(ContractError):
            load_world(config_from_dict({"concept": "Q"}))

    def test_world_from_file(self, tmp_path):
        from infusion.worlds import build_four_peak_world

        path = tmp_path / "w.json"
        path.write_text(build_four_peak_world().to_json())
        cfg = config_from_dict({"world": str(path)})
        assert load_world(cfg) == build_four_peak_world()

    def test_load_config_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"preset": "grid25", "seed": 5, "metrics": {"n_t": 3}}))
        cfg = load_config(path)
        assert cfg.world == "grid25" and cfg.seed == 5 and cfg.metrics.n_t == 3 and cfg.metrics.n_samples == 2000
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ContractError):
            load_config(tmp_path / "bad.json")
        with pytest.raises(ContractError):
            load_config(tmp_path / "missing.json")

    def test_hash(self):
        a = ExperimentConfig()
        assert a.config_hash() == ExperimentConfig().config_hash()
        assert a.config_hash() == config_from_dict({"out": "elsewhere"}).config_hash()
        assert a.config_hash() != config_from_dict({"seed": 1}).config_hash()
        assert a.to_dict()["format_version"] == 1

    def test_round_trip_through_dict(self):
        for name in PRESETS:
            cfg = preset(name)
            doc = cfg.to_dict()
            assert config_from_dict(doc) == cfg


def test_derive_seed_oracle():
    expected = int.from_bytes(hashlib.sha256(b"42/base").digest()[:8], "little")
    assert derive_seed(42, "base") == expected
    assert derive_seed(42, "base") != derive_seed(42, "customize")


def test_prompts():
    cfg = preset("four-peak")
    p = experiment_prompts(cfg, load_world(cfg))
    assert p.custom.concept_slots == ((1, "<obj>"),) and p.custom.tokens == ("photo-of", "A")
    assert p.inversion.tokens == ("photo-of", "<obj>")
    assert [c for c, _ in p.others] == ["B", "C", "D"]
    g = preset("grid25")
    gp = experiment_prompts(g, load_world(g))
    assert len(gp.others) == 1 and gp.others[0][1].is_null


def test_curve_csv_round_trip():
    c = CurveSeries("infusion")
    c.append(100, fisher=0.0, w2=0.1 + 0.2, coverage=1.0)
    c.append(200, fisher=1e-300, w2=2.5, coverage=0.2)
    text = curves_csv([c], "h" * 64)
    assert text.splitlines()[0] == "# config_hash=" + "h" * 64
    assert text.splitlines()[1] == "method,step,fisher,w2,coverage"
    (back,) = read_curves_csv(text)
    assert back == c
    with pytest.raises(ContractError):
        read_curves_csv("a,b\n1,2\n")


def test_points_csv_round_trip():
    pts = PointSet(np.random.default_rng(0).normal(size=(7, 2)), label="infusion")
    back = read_points_csv(points_csv(pts, "abc"))
    assert np.array_equal(back.points, pts.points) and back.label == "infusion"


def tiny_eval_config():
    return config_from_dict({"metrics": {"n_samples": 40, "fisher_latents": 30, "n_t": 2}, "sampler": {"steps": 4}})


def test_step_zero_artifacts_score_zero(toy_weights):
    cfg = tiny_eval_config()
    world = load_world(cfg)
    prompts = experiment_prompts(cfg, world)
    ev = Evaluator(cfg, world, toy_weights, prompts)
    fp = toy_weights.fingerprint()
    table = toy_weights.table
    artifacts = {
        "infusion": ResidualConceptEmbedding("<obj>", np.zeros((3, 32)), fp),
        "full-finetune": toy_weights.copy(),
        "token-inversion": table.embeddings[table.index("A")].copy(),
    }
    for method, art in artifacts.items():
        m = ev.evaluate(method, art)
        assert m["fisher"] == 0.0 and m["w2"] == 0.0, method


def test_curves_refuse_foreign_base(toy_weights, small_weights):
    cfg = tiny_eval_config()
    world = load_world(cfg)
    prompts = experiment_prompts(cfg, world)
    ev = Evaluator(cfg, world, toy_weights, prompts)
    run = CustomizationRun("infusion", prompts.custom, checkpoints=[(10, ResidualConceptEmbedding("<obj>", np.zeros((3, 32)), small_weights.fingerprint()))])
    with pytest.raises(ContractError):
        overfitting_curves({"infusion": run}, ev, (10,))

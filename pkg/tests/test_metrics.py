from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import sqrtm

from infusion.denoiser import PromptSpec, predict
from infusion.errors import ContractError, NumericError
from infusion.metrics import (
    CurveSeries,
    MetricReport,
    MomentPair,
    gaussian_fit,
    latent_fisher_divergence,
    mode_coverage,
    non_decreasing_with_dip,
    w2_empirical_oracle,
    w2_gaussian,
)
from infusion.worlds import PointSet, build_grid25_world, sample_concept

from .oracles import random_gaussian_pair


def random_moments(rng, spread=3.0):
    a = rng.normal(scale=0.8, size=(2, 2))
    return MomentPair.of(rng.uniform(-spread, spread, size=2), a @ a.T + 0.05 * np.eye(2))


def frechet_sqrtm(g1, g2):
    """Reference closed form using a general-purpose matrix square root."""
    s2 = np.real(sqrtm(g2.cov))
    cross = np.real(sqrtm(s2 @ g1.cov @ s2))
    d = g1.mean - g2.mean
    return float(np.sqrt(max(d @ d + np.trace(g1.cov + g2.cov - 2 * cross), 0.0)))


class TestGaussianFit:
    def test_two_points(self):
        g = gaussian_fit(PointSet(np.array([[0.0, 0.0], [2.0, 0.0]])))
        assert np.array_equal(g.mean, [1.0, 0.0])
        assert np.array_equal(g.cov, [[2.0, 0.0], [0.0, 0.0]])

    def test_identical_points(self):
        g = gaussian_fit(np.tile([1.5, -2.0], (10, 1)))
        assert np.array_equal(g.cov, np.zeros((2, 2)))

    def test_large_sample(self):
        rng = np.random.default_rng(0)
        mu, cov = np.array([1.0, -3.0]), np.array([[2.0, 0.6], [0.6, 0.5]])
        g = gaussian_fit(rng.multivariate_normal(mu, cov, size=100_000))
        assert np.linalg.norm(g.mean - mu) / np.linalg.norm(mu) < 0.02
        assert np.linalg.norm(g.cov - cov) / np.linalg.norm(cov) < 0.02

    def test_needs_two_points(self):
        with pytest.raises(ContractError):
            gaussian_fit(np.zeros((1, 2)))

    def test_clamps_negative_eigenvalues(self):
        g = MomentPair.of([0, 0], [[1.0, 2.0], [2.0, 1.0]])
        assert np.linalg.eigvalsh(g.cov).min() >= -1e-15
        assert np.array_equal(g.cov, g.cov.T)


class TestW2Gaussian:
    def test_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            g = random_moments(rng)
            assert w2_gaussian(g, g).value <= 1e-9

    def test_unit_shift(self):
        assert w2_gaussian(MomentPair.of([0, 0], np.eye(2)), MomentPair.of([1, 0], np.eye(2))).value == 1.0

    def test_one_dimensional_embedding(self):
        a = MomentPair.of([0, 0], [[1.0, 0.0], [0.0, 0.0]])
        b = MomentPair.of([0, 0], [[4.0, 0.0], [0.0, 0.0]])
        assert w2_gaussian(a, b).value == 1.0

    def test_equal_covariance_is_mean_distance(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            g = random_moments(rng)
            h = MomentPair.of(rng.normal(size=2), g.cov)
            assert w2_gaussian(g, h).value == np.linalg.norm(g.mean - h.mean)

    def test_matches_reference_square_root(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            g, h = random_moments(rng), random_moments(rng)
            assert w2_gaussian(g, h).value == pytest.approx(frechet_sqrtm(g, h), abs=1e-9)

    def test_symmetry_and_triangle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a, b, c = (random_moments(rng) for _ in range(3))
            ab, bc, ac = (w2_gaussian(x, y).value for x, y in ((a, b), (b, c), (a, c)))
            assert abs(ab - w2_gaussian(b, a).value) <= 1e-9
            assert ac <= ab + bc + 1e-9

    def test_degenerate_covariances(self):
        a = MomentPair.of([0, 0], np.zeros((2, 2)))
        b = MomentPair.of([3, 4], np.zeros((2, 2)))
        assert w2_gaussian(a, b).value == 5.0

    def test_non_finite(self):
        with pytest.raises(NumericError):
            MomentPair.of([np.nan, 0], np.eye(2))

    def test_report_must_be_valid(self):
        with pytest.raises(NumericError):
            MetricReport("x", -1.0)
        with pytest.raises(NumericError):
            MetricReport("x", float("inf"))


class TestOracle:
    def test_identical_sets(self):
        pts = np.random.default_rng(0).normal(size=(30, 2))
        assert w2_empirical_oracle(pts, pts).value == 0.0

    def test_single_pair(self):
        assert w2_empirical_oracle(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])).value == 5.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for n in range(1, 7):
            a, b = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
            best = min(np.mean(np.sum((a - b[list(p)]) ** 2, axis=1)) for p in itertools.permutations(range(n)))
            assert w2_empirical_oracle(a, b).value == pytest.approx(np.sqrt(best), abs=1e-12)

    def test_size_checks(self):
        with pytest.raises(ContractError):
            w2_empirical_oracle(np.zeros((3, 2)), np.zeros((4, 2)))
        with pytest.raises(ContractError):
            w2_empirical_oracle(np.zeros((257, 2)), np.zeros((257, 2)))

    def test_agrees_with_closed_form_on_random_pairs(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            (m1, c1), (m2, c2) = random_gaussian_pair(rng)
            a = rng.multivariate_normal(m1, c1, size=256)
            b = rng.multivariate_normal(m2, c2, size=256)
            exact = w2_gaussian(MomentPair.of(m1, c1), MomentPair.of(m2, c2)).value
            assert abs(w2_empirical_oracle(a, b).value - exact) <= 0.15 * exact


class TestCoverage:
    def test_every_center_once(self):
        centers = build_grid25_world().modality_centers()
        assert mode_coverage(centers, centers, quorum=1) == 1.0
        assert mode_coverage(centers, centers) == 0.0

    def test_empty(self):
        assert mode_coverage(np.zeros((0, 2)), np.zeros((3, 2))) == 0.0

    def test_world_samples_cover_all(self):
        world = build_grid25_world()
        pts = sample_concept(world, "super", 2000, np.random.default_rng(0))
        assert mode_coverage(pts, world.modality_centers()) == 1.0

    def test_partial(self):
        centers = np.array([[0.0, 0.0], [5.0, 5.0]])
        pts = np.vstack([np.zeros((5, 2)), np.full((4, 2), 5.0)])
        assert mode_coverage(pts, centers) == 0.5

    def test_bad_inputs(self):
        with pytest.raises(ContractError):
            mode_coverage(np.zeros((1, 2)), np.zeros((1, 2)), radius=0.0)
        with pytest.raises(ContractError):
            mode_coverage(np.zeros((1, 2)), np.zeros((0, 2)))


class TestFisher:
    prompts = [PromptSpec.of("photo-of", "A"), PromptSpec.of("photo-of", "B")]

    def latents(self):
        return PointSet(np.random.default_rng(0).normal(size=(20, 2)))

    def test_identical_models(self, toy_weights, sched):
        f = lambda z, t, p: predict(toy_weights, z, t, p)
        rep = latent_fisher_divergence(f, f, self.latents(), self.prompts, sched, 3, np.random.default_rng(0), seed=0)
        assert rep.value == 0.0 and rep.config["seed"] == 0
        assert rep.counts == {"latents": 20, "n_t": 3, "prompts": 2}

    def test_constant_predictors(self, sched):
        zero = lambda z, t, p: np.zeros((len(z), 2))
        one = lambda z, t, p: np.ones((len(z), 2))
        rep = latent_fisher_divergence(zero, one, self.latents(), self.prompts, sched, 2, np.random.default_rng(0))
        assert rep.value == 1.0

    def test_symmetric_and_deterministic(self, toy_weights, small_weights, sched):
        f = lambda z, t, p: predict(toy_weights, z, t, p)
        g = lambda z, t, p: predict(toy_weights.with_params({"head_b2": np.array([0.1, -0.2])}), z, t, p)
        ab = latent_fisher_divergence(f, g, self.latents(), self.prompts, sched, 2, np.random.default_rng(9)).value
        ba = latent_fisher_divergence(g, f, self.latents(), self.prompts, sched, 2, np.random.default_rng(9)).value
        assert ab == ba and ab == pytest.approx(0.5 * (0.01 + 0.04), rel=1e-9)

    def test_rejects_customized_prompts(self, sched):
        f = lambda z, t, p: np.zeros((len(z), 2))
        slot = PromptSpec.of("photo-of", "super", slots={1: "<obj>"})
        with pytest.raises(ContractError):
            latent_fisher_divergence(f, f, self.latents(), [slot], sched, 1, np.random.default_rng(0))
        with pytest.raises(ContractError):
            latent_fisher_divergence(f, f, self.latents(), self.prompts, sched, 0, np.random.default_rng(0))


class TestCurves:
    def test_steps_strictly_increase(self):
        c = CurveSeries("x")
        c.append(100, fisher=0.1)
        with pytest.raises(ContractError):
            c.append(100, fisher=0.2)
        assert c.series("fisher") == [0.1]

    @pytest.mark.parametrize(
        "values, ok",
        [
            ([0.1, 0.2, 0.3], True),
            ([0.1, 0.2, 0.19, 0.3], True),
            ([0.1, 0.2, 0.15, 0.3], False),
            ([0.1, 0.2, 0.19, 0.3, 0.29], False),
            ([0.5], True),
        ],
    )
    def test_dip_rule(self, values, ok):
        assert non_decreasing_with_dip(values) is ok


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(0.1, 3.0), st.floats(-5, 5))
def test_one_dimensional_closed_form(s1, s2, shift):
    a = MomentPair.of([0.0, 0.0], [[s1 * s1, 0.0], [0.0, 0.0]])
    b = MomentPair.of([shift, 0.0], [[s2 * s2, 0.0], [0.0, 0.0]])
    assert w2_gaussian(a, b).value == pytest.approx(np.hypot(shift, s1 - s2), abs=1e-9)

# tests/test_score_model.py
from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch

from src.artifacts import decode_pnm
from src.errors import ConfigurationError, DomainError, ShapeError
from src.schedule import NoiseSchedule, alpha_bar, forward_noise
from src.score_model import (
    ConditionKey,
    GaussianMode,
    LatentCodec,
    ViewLandscape,
    condition,
    denoised_target,
    dump_landscape,
    expected_init_score,
    gaussian_log_density,
    gaussian_score,
    noised_mixture_log_density,
    noised_mixture_score,
    predict_noise,
    responsibilities,
    restrict,
)

SCHEDULE = NoiseSchedule.linear()


def _central_difference(f, z: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(z)
    for k in range(z.size):
        e = np.zeros_like(z)
        e[k] = h
        grad[k] = (f(z + e) - f(z - e)) / (2.0 * h)
    return grad


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# -------------------------------------------------------------------
# Codec
# -------------------------------------------------------------------


def test_codec_reproduces_constant_images():
    """Flat images survive average pooling and upsampling."""
    codec = LatentCodec(image_size=8, latent_size=2)
    image = np.full((8, 8, 3), 0.3)
    z = codec.encode(image)
    assert z.shape == (4,)
    np.testing.assert_allclose(codec.decode(z), image, atol=1e-12)


def test_codec_is_linear_on_numpy_and_torch():
    """Encoding is a linear block average with the same result on arrays and tensors."""
    codec = LatentCodec(image_size=8, latent_size=4)
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    lhs = codec.encode(2.5 * x - 0.7 * y)
    rhs = 2.5 * codec.encode(x) - 0.7 * codec.encode(y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    z_torch = codec.encode(torch.from_numpy(x))
    np.testing.assert_allclose(z_torch.numpy(), codec.encode(x), atol=1e-15)


def test_codec_rejects_mismatched_sizes():
    """Image size must be a multiple of the latent size; inputs must fit the codec."""
    with pytest.raises(ConfigurationError):
        LatentCodec(image_size=10, latent_size=4)
    codec = LatentCodec(image_size=8, latent_size=2)
    with pytest.raises(ShapeError):
        codec.encode(np.zeros((4, 4, 3)))
    with pytest.raises(ShapeError):
        codec.decode(np.zeros(5))


# -------------------------------------------------------------------
# Scores
# -------------------------------------------------------------------


def test_gaussian_score_simple_values():
    """Zero at the mean, -(z - mu)/sigma^2 elsewhere."""
    mu = np.array([0.3, -1.2])
    np.testing.assert_array_equal(gaussian_score(mu, mu, 0.5), np.zeros(2))
    np.testing.assert_allclose(gaussian_score(np.array([1.0, 0.0]), np.zeros(2), 1.0), [-1.0, 0.0])
    with pytest.raises(DomainError):
        gaussian_score(mu, mu, 0.0)
    with pytest.raises(ShapeError):
        gaussian_score(np.zeros(3), mu, 1.0)


def test_gaussian_score_matches_finite_differences():
    """100 random cases, step 1e-4 * |z|."""
    rng = np.random.default_rng(10)
    for _ in range(100):
        dim = int(rng.integers(2, 9))
        z, mu = rng.standard_normal(dim), rng.standard_normal(dim)
        sigma2 = float(rng.uniform(0.2, 3.0))
        h = 1e-4 * np.linalg.norm(z)
        fd = _central_difference(lambda x: gaussian_log_density(x, mu, sigma2), z, h)
        assert _rel_err(fd, gaussian_score(z, mu, sigma2)) <= 1e-5


def _random_bucket(rng: np.random.Generator, n_modes: int, dim: int):
    w = rng.uniform(0.2, 1.0, size=n_modes)
    w = w / w.sum()
    return tuple(GaussianMode(rng.standard_normal(dim), float(w[k]), f"m{k}") for k in range(n_modes))


def test_noised_mixture_score_matches_finite_differences():
    """The mixture score is the gradient of the log-density of the noised mixture."""
    rng = np.random.default_rng(11)
    for _ in range(100):
        dim = 4
        bucket = _random_bucket(rng, 3, dim)
        t = int(rng.integers(200, 1001))
        z_t = rng.standard_normal(dim)
        fd = _central_difference(lambda x: noised_mixture_log_density(x, bucket, t, SCHEDULE), z_t, 1e-5)
        assert _rel_err(fd, noised_mixture_score(z_t, bucket, t, SCHEDULE)) <= 1e-5


def test_single_mode_mixture_is_the_noised_gaussian():
    """One mode of weight one scores like N(sqrt(a) mu, 1 - a)."""
    rng = np.random.default_rng(12)
    mu, z_t, t = rng.standard_normal(6), rng.standard_normal(6), 321
    a = alpha_bar(SCHEDULE, t)
    got = noised_mixture_score(z_t, (GaussianMode(mu, 1.0, "only"),), t, SCHEDULE)
    np.testing.assert_allclose(got, gaussian_score(z_t, np.sqrt(a) * mu, 1.0 - a), rtol=1e-12)


def test_symmetric_two_mode_mixture_has_zero_score_at_midpoint():
    """Equal weights cancel halfway between the noised means."""
    mu1, mu2, t = np.array([1.0, -2.0, 0.5]), np.array([-1.0, 0.0, 1.5]), 600
    a = alpha_bar(SCHEDULE, t)
    bucket = (GaussianMode(mu1, 0.5, "a"), GaussianMode(mu2, 0.5, "b"))
    mid = np.sqrt(a) * (mu1 + mu2) / 2.0
    np.testing.assert_allclose(noised_mixture_score(mid, bucket, t, SCHEDULE), np.zeros(3), atol=1e-10)
    np.testing.assert_allclose(responsibilities(mid, bucket, t, SCHEDULE), [0.5, 0.5], atol=1e-12)


def test_mixture_rejects_empty_bucket():
    """A bucket without modes has no score."""
    with pytest.raises(ConfigurationError):
        noised_mixture_score(np.zeros(2), (), 10, SCHEDULE)


# -------------------------------------------------------------------
# Noise prediction and conditioning
# -------------------------------------------------------------------


def test_predict_noise_is_scaled_negative_score():
    """Predicted noise is -sqrt(1 - a) times the score at every timestep."""
    rng = np.random.default_rng(13)
    bucket = _random_bucket(rng, 4, 5)
    for t in (1, 50, 600, 1000):
        z_t = rng.standard_normal(5)
        eps_hat = predict_noise(z_t, bucket, t, SCHEDULE)
        score = noised_mixture_score(z_t, bucket, t, SCHEDULE)
        assert np.linalg.norm(eps_hat + np.sqrt(1.0 - alpha_bar(SCHEDULE, t)) * score) <= 1e-12


def test_predict_noise_vanishes_at_a_noised_single_mode():
    """Sitting on the noised mean of the only mode predicts zero noise."""
    mu, t = np.array([0.2, 0.4, -0.1]), 300
    z_t = np.sqrt(alpha_bar(SCHEDULE, t)) * mu
    eps_hat = predict_noise(z_t, (GaussianMode(mu, 1.0, "a"),), t, SCHEDULE)
    np.testing.assert_allclose(eps_hat, np.zeros(3), atol=1e-15)


def test_conditioning_changes_the_prediction():
    """Restricting to the prompted mode changes the noise prediction of a two-mode bucket."""
    mu_a, mu_b, t = np.array([1.0, 0.0]), np.array([-1.0, 0.5]), 400
    bucket = (GaussianMode(mu_a, 0.5, "five_finger"), GaussianMode(mu_b, 0.5, "four_finger"))
    z_t = np.array([0.1, 0.3])
    free = predict_noise(z_t, bucket, t, SCHEDULE)
    cond = predict_noise(z_t, bucket, t, SCHEDULE, ConditionKey("front", "five_finger"))
    assert not np.allclose(free, cond)


def test_restrict_keeps_renormalizes_and_rejects():
    """
    Restricting keeps the label's modes and rescales their weights to one;
    unknown labels raise.
    """
    mu = np.zeros(2)
    two = (GaussianMode(mu, 0.5, "a"), GaussianMode(mu + 1, 0.5, "b"))
    only_a = restrict(two, ConditionKey("front", "a"))
    assert len(only_a) == 1 and only_a[0].label == "a" and only_a[0].weight == pytest.approx(1.0)

    same = (GaussianMode(mu, 0.25, "a"), GaussianMode(mu + 1, 0.75, "a"))
    kept = restrict(same, ConditionKey("front", "a"))
    assert kept == same

    three = (GaussianMode(mu, 0.5, "a"), GaussianMode(mu, 0.3, "b"), GaussianMode(mu, 0.2, "b"))
    weights = [m.weight for m in restrict(three, ConditionKey("side", "b"))]
    np.testing.assert_allclose(weights, [0.6, 0.4], rtol=1e-12)
    assert len(restrict(three, ConditionKey("side", "b"))) <= len(three)

    with pytest.raises(ConfigurationError, match="bucket labels"):
        restrict(two, ConditionKey("front", "c"))


def test_restrict_matches_skeleton_hashes():
    """A skeleton hash narrows the match to one pose of the label."""
    mu = np.zeros(2)
    bucket = (
        GaussianMode(mu, 0.25, "a", "h0"),
        GaussianMode(mu, 0.25, "a", "h1"),
        GaussianMode(mu, 0.5, "b", "h0"),
    )
    kept = restrict(bucket, ConditionKey("front", "a", "h1"))
    assert [(m.label, m.skeleton_hash) for m in kept] == [("a", "h1")]
    assert kept[0].weight == pytest.approx(1.0)


def _landscape() -> ViewLandscape:
    codec = LatentCodec(image_size=4, latent_size=2)
    modes = (GaussianMode(np.zeros(4), 0.5, "a"), GaussianMode(np.ones(4), 0.5, "b"))
    side = (GaussianMode(np.zeros(4), 1.0, "a"),)
    return ViewLandscape(buckets={"front": modes, "side": side}, codec=codec, schedule=SCHEDULE)


def test_condition_selects_modes_of_one_bucket():
    """Conditioning picks the label within its view bucket; a missing bucket raises."""
    landscape = _landscape()
    modes = condition(landscape, "front", ConditionKey("front", "b"))
    assert [m.label for m in modes] == ["b"]
    with pytest.raises(ConfigurationError):
        condition(landscape, "back", ConditionKey("back", "a"))


def test_landscape_validation():
    """Buckets must be non-empty, weights must sum to one and mean sizes must match the codec."""
    codec = LatentCodec(image_size=4, latent_size=2)
    mode = GaussianMode(np.zeros(4), 1.0, "a")
    with pytest.raises(ConfigurationError):
        ViewLandscape(buckets={"front": ()}, codec=codec, schedule=SCHEDULE)
    with pytest.raises(ConfigurationError):
        ViewLandscape(buckets={"upside": (mode,)}, codec=codec, schedule=SCHEDULE)
    with pytest.raises(ConfigurationError):
        ViewLandscape(
            buckets={"front": (GaussianMode(np.zeros(4), 0.6, "a"),)}, codec=codec, schedule=SCHEDULE
        )
    with pytest.raises(ShapeError):
        ViewLandscape(buckets={"front": (GaussianMode(np.zeros(3), 1.0, "a"),)}, codec=codec, schedule=SCHEDULE)


def test_denoised_target_inverts_forward_noise():
    """Knowing the noise recovers the clean latent."""
    rng = np.random.default_rng(14)
    z0, eps, t = rng.standard_normal(9), rng.standard_normal(9), 700
    z_t = forward_noise(z0, t, eps, SCHEDULE)
    np.testing.assert_allclose(denoised_target(z_t, eps, t, SCHEDULE), z0, atol=1e-10)


# -------------------------------------------------------------------
# Expected score of an initialization
# -------------------------------------------------------------------


CODEC = LatentCodec(image_size=8, latent_size=4)


def _views(seed: int, n: int = 3):
    rng = np.random.default_rng(seed)
    return [rng.uniform(size=(8, 8, 3)) for _ in range(n)]


def test_expected_score_vanishes_without_gap_and_noise():
    """Init views equal to the latent views and no noise give a zero score."""
    views = _views(0)
    rng = np.random.default_rng(0)
    formula, mc = expected_init_score(views, views, 300, 5, CODEC, SCHEDULE, rng, zero_noise=True)
    assert formula == 0.0 and mc == 0.0


def test_expected_score_noise_term_averages_out():
    """With no gap the score shrinks as noise draws are added."""
    views = _views(1)
    few = expected_init_score(views, views, 300, 10, CODEC, SCHEDULE, np.random.default_rng(1))
    many = expected_init_score(views, views, 300, 2000, CODEC, SCHEDULE, np.random.default_rng(1))
    assert many[0] < few[0]
    assert many[0] < 0.1


def test_expected_score_closed_form_with_fixed_gap():
    """ / (1 - a)."""
    init, latent = _views(2), _views(3)
    t = 300
    a = alpha_bar(SCHEDULE, t)
    gap = np.mean([CODEC.encode(x) - CODEC.encode(y) for x, y in zip(init, latent)], axis=0)
    formula, mc = expected_init_score(
        init, latent, t, 4, CODEC, SCHEDULE, np.random.default_rng(2), zero_noise=True
    )
    assert formula == pytest.approx(np.sqrt(a) * np.linalg.norm(gap) / (1.0 - a), rel=1e-12)
    assert mc == pytest.approx(formula, rel=1e-10)


def test_expected_score_formula_equals_monte_carlo():
    """The closed-form expected score matches an average over noise draws."""
    init, latent = _views(4), _views(5)
    formula, mc = expected_init_score(init, latent, 450, 50, CODEC, SCHEDULE, np.random.default_rng(3))
    assert mc == pytest.approx(formula, rel=1e-10)


def test_expected_score_variants():
    """The printed closed form equals the exact score; the last-line form does not."""
    init, latent = _views(6), _views(7)
    kwargs = dict(t=300, n_eps=20, codec=CODEC, schedule=SCHEDULE)
    exact = expected_init_score(init, latent, rng=np.random.default_rng(4), **kwargs)
    theorem = expected_init_score(init, latent, rng=np.random.default_rng(4), variant="theorem", **kwargs)
    appendix = expected_init_score(init, latent, rng=np.random.default_rng(4), variant="appendix", **kwargs)
    assert theorem[0] == pytest.approx(exact[0], rel=1e-10)
    assert appendix[0] != pytest.approx(exact[0], rel=1e-3)
    assert appendix[1] == exact[1]

    with pytest.raises(DomainError):
        expected_init_score(init, latent, rng=np.random.default_rng(4), variant="other", **kwargs)


def test_expected_score_washes_out_at_large_t():
    """At t = T the latent gap is almost gone from the score."""
    init, latent = _views(8), _views(9)
    rng = np.random.default_rng(5)
    low, _ = expected_init_score(init, latent, 50, 1, CODEC, SCHEDULE, rng, zero_noise=True)
    high, _ = expected_init_score(init, latent, 1000, 1, CODEC, SCHEDULE, rng, zero_noise=True)
    assert high < 0.01 * low


def test_expected_score_rejects_unpaired_views():
    """View lists must pair up and at least one noise draw is needed."""
    with pytest.raises(ShapeError):
        expected_init_score(_views(0, 3), _views(1, 2), 300, 5, CODEC, SCHEDULE, np.random.default_rng(0))
    with pytest.raises(DomainError):
        expected_init_score(_views(0), _views(1), 300, 0, CODEC, SCHEDULE, np.random.default_rng(0))


def test_dump_landscape_writes_one_pgm_per_mode(tmp_path: Path):
    """One grey image per mode, named by bucket, index and label."""
    written = dump_landscape(_landscape(), tmp_path)
    names = sorted(p.name for p in written)
    assert names == ["front_00_a.pgm", "front_01_b.pgm", "side_00_a.pgm"]
    image = decode_pnm((tmp_path / "front_01_b.pgm").read_bytes())
    assert image.shape == (4, 4)
    assert np.all(image == 255)

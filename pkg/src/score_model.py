from __future__ import annotations

"""
Analytic stand-in for a frozen 2D diffusion model.

Responsibilities:
- LatentCodec: linear encoder (block average) and decoder (nearest upsampling);
- ViewLandscape: per view-bucket Gaussian mixtures of clean latents;
- exact scores of single Gaussians and of the noised mixture
  sum_k w_k N(z_t; sqrt(a) mu_k, (1 - a) I), via log-sum-exp responsibilities;
- noise prediction eps_hat = -sqrt(1 - a) * score, optionally restricted to
  the modes compatible with a skeleton condition key;
- the expected score of an initialization against an ideal latent.

All randomness comes in through an explicit numpy Generator.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.special import logsumexp, softmax

from . import artifacts
from .errors import ConfigurationError, DomainError, ShapeError
from .render import VIEW_LABELS
from .schedule import NoiseSchedule, alpha_bar, forward_noise

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, torch.Tensor]

THEOREM_VARIANTS = ("exact", "theorem", "appendix")


# -------------------------------------------------------------------
# Codec
# -------------------------------------------------------------------


@dataclass(frozen=True)
class LatentCodec:
    """
    Block-average encoder and nearest-neighbour decoder.

    An (image_size, image_size, channels) image maps to a flat latent of
    latent_size ** 2 values: each latent cell is the mean over its
    factor x factor pixel block and over the color channels.
    """

    image_size: int = 64
    latent_size: int = 16
    image_channels: int = 3

    def __post_init__(self) -> None:
        if self.latent_size < 1 or self.image_size % self.latent_size != 0:
            raise ConfigurationError(
                f"image_size ({self.image_size}) must be a multiple of latent_size ({self.latent_size})"
            )

    @property
    def factor(self) -> int:
        return self.image_size // self.latent_size

    @property
    def dim(self) -> int:
        return self.latent_size * self.latent_size

    def encode(self, image: ArrayLike) -> ArrayLike:
        """Works on numpy arrays and on torch tensors (keeping the autograd graph)."""
        n, f, lat = self.image_size, self.factor, self.latent_size
        if tuple(image.shape[:2]) != (n, n):
            raise ShapeError(f"Expected a {n}x{n} image, got shape {tuple(image.shape)}")
        if isinstance(image, torch.Tensor):
            gray = image.mean(dim=-1) if image.ndim == 3 else image
            return gray.reshape(lat, f, lat, f).mean(dim=(1, 3)).reshape(-1)
        img = np.asarray(image, dtype=np.float64)
        gray = img.mean(axis=-1) if img.ndim == 3 else img
        return gray.reshape(lat, f, lat, f).mean(axis=(1, 3)).reshape(-1)

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dim,):
            raise ShapeError(f"Expected a latent of {self.dim} values, got shape {z.shape}")
        grid = z.reshape(self.latent_size, self.latent_size)
        up = np.repeat(np.repeat(grid, self.factor, axis=0), self.factor, axis=1)
        return np.repeat(up[..., None], self.image_channels, axis=-1)


# -------------------------------------------------------------------
# Landscape types
# -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianMode:
    """Clean-latent mode with its mixture weight and the hand it encodes."""

    mu: np.ndarray
    weight: float
    label: str
    skeleton_hash: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64).reshape(-1))
        if not (self.weight >= 0.0):
            raise DomainError(f"Mode weight must be non-negative, got {self.weight}")


@dataclass(frozen=True)
class ConditionKey:
    """Skeleton condition: view bucket, prompted hand label and projected-skeleton hash."""

    view_label: str
    pose_label: str
    skeleton_hash: Optional[str] = None


@dataclass(frozen=True, eq=False)
class ViewLandscape:
    buckets: Mapping[str, Tuple[GaussianMode, ...]]
    codec: LatentCodec
    schedule: NoiseSchedule

    def __post_init__(self) -> None:
        clean = {}
        for label, modes in self.buckets.items():
            if label not in VIEW_LABELS:
                raise ConfigurationError(f"Unknown view bucket {label!r}")
            modes = tuple(modes)
            if not modes:
                raise ConfigurationError(f"View bucket {label!r} has no modes")
            total = sum(m.weight for m in modes)
            if abs(total - 1.0) > 1e-12:
                raise ConfigurationError(f"Mode weights of bucket {label!r} sum to {total!r}, not 1")
            for m in modes:
                if m.mu.shape != (self.codec.dim,):
                    raise ShapeError(
                        f"Mode {m.label!r} in bucket {label!r} has dimension {m.mu.shape[0]}, "
                        f"codec expects {self.codec.dim}"
                    )
            clean[label] = modes
        object.__setattr__(self, "buckets", clean)

    def bucket(self, view_label: str) -> Tuple[GaussianMode, ...]:
        modes = self.buckets.get(view_label)
        if not modes:
            raise ConfigurationError(
                f"No modes for view bucket {view_label!r}; available: {sorted(self.buckets)}"
            )
        return modes


# -------------------------------------------------------------------
# Scores
# -------------------------------------------------------------------


def gaussian_score(z: np.ndarray, mu: np.ndarray, sigma2: float) -> np.ndarray:
    """Score of N(mu, sigma2 I): -(z - mu) / sigma2."""
    if not (sigma2 > 0.0):
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if z.shape != mu.shape:
        raise ShapeError(f"z has shape {z.shape} but mu has shape {mu.shape}")
    return -(z - mu) / sigma2


def gaussian_log_density(z: np.ndarray, mu: np.ndarray, sigma2: float) -> float:
    if not (sigma2 > 0.0):
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    diff = np.asarray(z, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    d = diff.size
    return float(-0.5 * (diff @ diff) / sigma2 - 0.5 * d * math.log(2.0 * math.pi * sigma2))


def _mixture_terms(
    z_t: np.ndarray, bucket: Sequence[GaussianMode], t: int, schedule: NoiseSchedule
) -> Tuple[np.ndarray, np.ndarray, float]:
    if not bucket:
        raise ConfigurationError("Cannot evaluate a mixture with no modes")
    z_t = np.asarray(z_t, dtype=np.float64)
    a = alpha_bar(schedule, t)
    var = 1.0 - a
    means = math.sqrt(a) * np.stack([m.mu for m in bucket])
    if means.shape[1:] != z_t.shape:
        raise ShapeError(f"Latent has shape {z_t.shape}, modes have dimension {means.shape[1]}")
    weights = np.array([m.weight for m in bucket], dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    sq = np.sum((z_t[None, :] - means) ** 2, axis=1)
    logits = log_w - 0.5 * sq / var
    return logits, means, var


def noised_mixture_log_density(
    z_t: np.ndarray, bucket: Sequence[GaussianMode], t: int, schedule: NoiseSchedule
) -> float:
    logits, means, var = _mixture_terms(z_t, bucket, t, schedule)
    d = means.shape[1]
    return float(logsumexp(logits) - 0.5 * d * math.log(2.0 * math.pi * var))


def responsibilities(
    z_t: np.ndarray, bucket: Sequence[GaussianMode], t: int, schedule: NoiseSchedule
) -> np.ndarray:
    logits, _, _ = _mixture_terms(z_t, bucket, t, schedule)
    return softmax(logits)


def noised_mixture_score(
    z_t: np.ndarray, bucket: Sequence[GaussianMode], t: int, schedule: NoiseSchedule
) -> np.ndarray:
    """Exact gradient of the noised mixture's log density at z_t."""
    logits, means, var = _mixture_terms(z_t, bucket, t, schedule)
    r = softmax(logits)
    return -(np.asarray(z_t, dtype=np.float64) - r @ means) / var


def restrict(bucket: Sequence[GaussianMode], key: ConditionKey) -> Tuple[GaussianMode, ...]:
    """
    Modes compatible with the key, weights renormalized.

    A mode is compatible when its label equals the key's pose label and,
    if both carry one, the skeleton hashes agree.
    """
    kept = [
        m
        for m in bucket
        if m.label == key.pose_label
        and (m.skeleton_hash is None or key.skeleton_hash is None or m.skeleton_hash == key.skeleton_hash)
    ]
    total = sum(m.weight for m in kept)
    if not kept or total <= 0.0:
        raise ConfigurationError(
            f"No mode compatible with {key}; bucket labels: {sorted({m.label for m in bucket})}"
        )
    if len(kept) == len(bucket):
        return tuple(bucket)
    return tuple(GaussianMode(m.mu, m.weight / total, m.label, m.skeleton_hash) for m in kept)


def condition(landscape: ViewLandscape, view_label: str, key: ConditionKey) -> Tuple[GaussianMode, ...]:
    """Modes of one view bucket that survive the skeleton condition."""
    return restrict(landscape.bucket(view_label), key)


def predict_noise(
    z_t: np.ndarray,
    bucket: Sequence[GaussianMode],
    t: int,
    schedule: NoiseSchedule,
    condition: Optional[ConditionKey] = None,
) -> np.ndarray:
    """eps_hat = -sqrt(1 - alpha_bar_t) * score of the (conditioned) noised mixture."""
    modes = restrict(bucket, condition) if condition is not None else tuple(bucket)
    a = alpha_bar(schedule, t)
    return -math.sqrt(1.0 - a) * noised_mixture_score(z_t, modes, t, schedule)


def denoised_target(z_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """One-step clean estimate z0_hat = (z_t - sqrt(1 - a) eps_hat) / sqrt(a)."""
    a = alpha_bar(schedule, t)
    return (np.asarray(z_t) - math.sqrt(1.0 - a) * np.asarray(eps_hat)) / math.sqrt(a)


# -------------------------------------------------------------------
# Expected score of an initialization
# -------------------------------------------------------------------


def expected_init_score(
    init_views: Sequence[np.ndarray],
    latent_views: Sequence[np.ndarray],
    t: int,
    n_eps: int,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    variant: str = "exact",
    zero_noise: bool = False,
) -> Tuple[float, float]:
    """
    Closed-form and Monte-Carlo magnitudes of the view-averaged score of
    noised init renders under Gaussians centred on the ideal latents.

    variant selects the closed form:
      "exact"    -1/(1-a) * [sqrt(a) gap + sqrt(1-a) eps_bar]
      "theorem"  -sqrt(a)/(1-a) * [gap + sqrt(1-a)/sqrt(a) eps_bar]
      "appendix" -sqrt(a)/sqrt(1-a) * gap + sqrt(1-a)/sqrt(a) * eps_bar
    "exact" and "theorem" are algebraically identical. The Monte-Carlo
    value always averages the exact score over the same draws.
    """
    if len(init_views) != len(latent_views) or not init_views:
        raise ShapeError(
            f"init_views ({len(init_views)}) and latent_views ({len(latent_views)}) must pair up"
        )
    if n_eps < 1:
        raise DomainError(f"n_eps must be >= 1, got {n_eps}")
    if variant not in THEOREM_VARIANTS:
        raise DomainError(f"Unknown variant {variant!r}, expected one of {THEOREM_VARIANTS}")

    z_init = np.stack([codec.encode(v) for v in init_views])
    z_lat = np.stack([codec.encode(v) for v in latent_views])
    n_views, dim = z_init.shape
    if zero_noise:
        eps = np.zeros((n_views, n_eps, dim))
    else:
        eps = rng.standard_normal((n_views, n_eps, dim))

    a = alpha_bar(schedule, t)
    gap = (z_init - z_lat).mean(axis=0)
    eps_bar = eps.mean(axis=(0, 1))
    if variant == "exact":
        formula = -(math.sqrt(a) * gap + math.sqrt(1.0 - a) * eps_bar) / (1.0 - a)
    elif variant == "theorem":
        formula = -math.sqrt(a) / (1.0 - a) * (gap + math.sqrt(1.0 - a) / math.sqrt(a) * eps_bar)
    else:
        formula = -math.sqrt(a) / math.sqrt(1.0 - a) * gap + math.sqrt(1.0 - a) / math.sqrt(a) * eps_bar

    mc = np.zeros(dim)
    for v in range(n_views):
        center = math.sqrt(a) * z_lat[v]
        for k in range(n_eps):
            z_t = forward_noise(z_init[v], t, eps[v, k], schedule)
            mc += gaussian_score(z_t, center, 1.0 - a)
    mc /= n_views * n_eps
    return float(np.linalg.norm(formula)), float(np.linalg.norm(mc))


# -------------------------------------------------------------------
# Debug dump
# -------------------------------------------------------------------


def dump_landscape(landscape: ViewLandscape, out_dir: Path) -> List[Path]:
    """Write every mode's decoded latent as a PGM, named bucket_index_label.pgm."""
    written: List[Path] = []
    for bucket_label in sorted(landscape.buckets):
        for k, mode in enumerate(landscape.buckets[bucket_label]):
            image = landscape.codec.decode(mode.mu)[..., 0]
            path = Path(out_dir) / f"{bucket_label}_{k:02d}_{mode.label}.pgm"
            written.append(artifacts.write_atomic(path, artifacts.encode_pgm(image)))
    logger.info("Dumped %d landscape modes to %s", len(written), out_dir)
    return written

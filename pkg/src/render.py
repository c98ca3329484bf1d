from __future__ import annotations

"""
Differentiable volumetric rendering of a dense voxel field.

Responsibilities:
- VoxelField: learnable density / color grid (softplus and sigmoid
  parameterizations over raw tensors);
- Camera: pinhole camera with a view-bucket label;
- march_ray / render_view: emission-absorption compositing with
  transmittance, opacity, depth mean and along-ray depth variance;
- OpacityProjector: opacity maps of a whole camera set as one sparse
  linear map of the node densities, for the silhouette losses;
- render_gradients: reverse-mode gradients of any linear functional of a
  render with respect to the raw parameters (torch autograd through
  trilinear interpolation and the transmittance recurrence).

Ray geometry (box intersection, stratified sample positions) is computed
in numpy because it does not depend on the parameters; everything
downstream of the field lookup is torch so that autograd sees it.
"""

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import sparse
from scipy.special import logit

from .errors import DomainError, ShapeError

DTYPE = torch.float64

# Guards the depth normalization on rays that hit (almost) nothing.
EPS_DIV = 1e-8

# Raw density given to "empty" nodes of fields that will be optimized:
# sigma = 10 * softplus(-10) ~ 5e-4, small but with a live gradient.
RAW_DENSITY_FLOOR = -10.0

VIEW_LABELS: Tuple[str, ...] = ("front", "back", "side", "top", "bottom")


# -------------------------------------------------------------------
# Voxel field
# -------------------------------------------------------------------


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0):
        raise DomainError("Density must be non-negative")
    out = np.full(y.shape, -np.inf)
    pos = y > 0
    big = y > 20.0
    small = pos & ~big
    out[big] = y[big] + np.log(-np.expm1(-y[big]))
    out[small] = np.log(np.expm1(y[small]))
    return out


class VoxelField:
    """
    Dense grid of raw parameters on the nodes of a cube [-extent, extent]^3.

    sigma = density_scale * softplus(raw_density) >= 0
    color = sigmoid(raw_color) in [0, 1]^3

    raw_density has shape (R, R, R) and raw_color (R, R, R, 3), both
    indexed [ix, iy, iz]. Node i along an axis sits at -extent + i * h
    with h = 2 * extent / (R - 1).
    """

    def __init__(
        self,
        raw_density: torch.Tensor,
        raw_color: torch.Tensor,
        extent: float,
        density_scale: float = 10.0,
    ) -> None:
        if raw_density.ndim != 3 or len(set(raw_density.shape)) != 1:
            raise ShapeError(f"raw_density must be a cube (R, R, R), got {tuple(raw_density.shape)}")
        if tuple(raw_color.shape) != tuple(raw_density.shape) + (3,):
            raise ShapeError(
                f"raw_color must have shape {tuple(raw_density.shape) + (3,)}, "
                f"got {tuple(raw_color.shape)}"
            )
        if extent <= 0 or density_scale <= 0:
            raise DomainError("extent and density_scale must be positive")

        self.raw_density = raw_density.detach().to(DTYPE).clone().requires_grad_(True)
        self.raw_color = raw_color.detach().to(DTYPE).clone().requires_grad_(True)
        self.extent = float(extent)
        self.density_scale = float(density_scale)

    # ------------------------------------------------------------------
    # Factory helpers
    # ------------------------------------------------------------------
    @classmethod
    def from_values(
        cls,
        density: np.ndarray,
        color: np.ndarray,
        extent: float,
        density_scale: float = 10.0,
        raw_floor: Optional[float] = None,
    ) -> "VoxelField":
        """
        Build a field from physical values (sigma >= 0, colors in [0, 1]).

        sigma == 0 maps to raw -inf (exactly empty, no gradient) unless
        raw_floor is given, in which case raw values are clipped from below.
        """
        raw_d = _inverse_softplus(np.asarray(density, dtype=np.float64) / density_scale)
        if raw_floor is not None:
            raw_d = np.maximum(raw_d, raw_floor)
        c = np.clip(np.asarray(color, dtype=np.float64), 1e-6, 1.0 - 1e-6)
        return cls(torch.from_numpy(raw_d), torch.from_numpy(logit(c)), extent, density_scale)

    @classmethod
    def empty(cls, resolution: int, extent: float, density_scale: float = 10.0) -> "VoxelField":
        """sigma == 0 everywhere, mid-gray color."""
        r = resolution
        return cls.from_values(
            np.zeros((r, r, r)), np.full((r, r, r, 3), 0.5), extent, density_scale
        )

    @classmethod
    def sphere(
        cls,
        resolution: int,
        extent: float,
        density: float = 0.01,
        radius_fraction: float = 0.8,
        density_scale: float = 10.0,
        raw_floor: Optional[float] = RAW_DENSITY_FLOOR,
    ) -> "VoxelField":
        """
        Low uniform density inside a centered ball of radius
        radius_fraction * extent; nodes outside sit at raw_floor.
        """
        blank = cls.empty(resolution, extent, density_scale)
        nodes = blank.node_positions()
        inside = np.linalg.norm(nodes, axis=-1) <= radius_fraction * extent
        sigma = np.where(inside, density, 0.0)
        return cls.from_values(
            sigma, np.full(sigma.shape + (3,), 0.5), extent, density_scale, raw_floor=raw_floor
        )

    # ------------------------------------------------------------------
    # Views on the parameters
    # ------------------------------------------------------------------
    @property
    def resolution(self) -> int:
        return int(self.raw_density.shape[0])

    @property
    def spacing(self) -> float:
        return 2.0 * self.extent / (self.resolution - 1)

    def density(self) -> torch.Tensor:
        sigma = self.density_scale * F.softplus(self.raw_density)
        assert not bool((sigma < 0).any()), "softplus produced a negative density"
        return sigma

    def color(self) -> torch.Tensor:
        return torch.sigmoid(self.raw_color)

    def parameters(self) -> List[torch.Tensor]:
        return [self.raw_density, self.raw_color]

    def named_parameters(self) -> Dict[str, torch.Tensor]:
        return {"raw_density": self.raw_density, "raw_color": self.raw_color}

    def blend(self, other: "VoxelField", s: float) -> "VoxelField":
        """Field with physical values (1 - s) * self + s * other."""
        if other.resolution != self.resolution or other.extent != self.extent:
            raise ShapeError("Blended fields must share resolution and extent")
        if not (0.0 <= s <= 1.0):
            raise DomainError(f"Blend parameter must be in [0, 1], got {s}")
        sigma = (1.0 - s) * self.density_numpy() + s * other.density_numpy()
        rgb = (1.0 - s) * self.color_numpy() + s * other.color_numpy()
        return VoxelField.from_values(sigma, rgb, self.extent, self.density_scale)

    def node_positions(self) -> np.ndarray:
        """World positions of every grid node, shape (R, R, R, 3)."""
        axis = np.linspace(-self.extent, self.extent, self.resolution)
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def clone(self) -> "VoxelField":
        return VoxelField(self.raw_density, self.raw_color, self.extent, self.density_scale)

    def density_numpy(self) -> np.ndarray:
        with torch.no_grad():
            return self.density().numpy().copy()

    def color_numpy(self) -> np.ndarray:
        with torch.no_grad():
            return self.color().numpy().copy()

    def __repr__(self) -> str:
        return (
            f"VoxelField(resolution={self.resolution}, extent={self.extent}, "
            f"density_scale={self.density_scale})"
        )


def sample_field(fld: VoxelField, points: np.ndarray) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Trilinearly interpolate density and color at world points.

    points: array (..., 3). Returns sigma (...,) and rgb (..., 3).
    Points outside the cube read as zero density.
    """
    pts = np.asarray(points, dtype=np.float64)
    lead = pts.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    grid = torch.from_numpy(pts.reshape(1, n, 1, 1, 3) / fld.extent).to(DTYPE)

    # grid_sample wants (N, C, D, H, W) with grid (x, y, z) -> (W, H, D).
    sigma_vol = fld.density().permute(2, 1, 0).unsqueeze(0).unsqueeze(0)
    color_vol = fld.color().permute(3, 2, 1, 0).unsqueeze(0)

    sigma = F.grid_sample(sigma_vol, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    rgb = F.grid_sample(color_vol, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return sigma.reshape(lead), rgb.reshape(3, n).t().reshape(lead + (3,))


# -------------------------------------------------------------------
# Camera
# -------------------------------------------------------------------


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Camera:
    """
    Pinhole camera looking from position to look_at.

    Image coordinates are continuous: pixel (row, col) covers
    [row, row + 1) x [col, col + 1), so the optical axis lands on
    (image_size / 2, image_size / 2).
    """

    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    fov: float = 50.0
    image_size: int = 64
    view_label: str = "front"

    def __post_init__(self) -> None:
        for name in ("position", "look_at", "up"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        forward = self.look_at - self.position
        if np.linalg.norm(forward) < 1e-12:
            raise DomainError("Camera position and look_at coincide")
        if np.linalg.norm(np.cross(forward, self.up)) < 1e-9 * np.linalg.norm(forward):
            raise DomainError("Camera up vector is parallel to the view direction")
        if not (0.0 < self.fov < 180.0):
            raise DomainError(f"fov must be in (0, 180) degrees, got {self.fov}")
        if self.image_size < 1:
            raise DomainError(f"image_size must be positive, got {self.image_size}")
        if self.view_label not in VIEW_LABELS:
            raise DomainError(f"Unknown view label {self.view_label!r}, expected one of {VIEW_LABELS}")

    def geometry_key(self) -> Tuple:
        """Hashable summary of everything that shapes the pixel rays."""
        return (
            tuple(self.position.tolist()),
            tuple(self.look_at.tolist()),
            tuple(self.up.tolist()),
            float(self.fov),
            int(self.image_size),
        )

    @classmethod
    def from_geometry_key(cls, key: Tuple) -> "Camera":
        position, look_at, up, fov, image_size = key
        return cls(np.array(position), np.array(look_at), np.array(up), fov, image_size)

    def basis(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (forward, right, true_up) frame."""
        forward = _normalize(self.look_at - self.position)
        right = _normalize(np.cross(forward, self.up))
        true_up = np.cross(right, forward)
        return forward, right, true_up

    def directions_for(self, cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Unit ray directions through continuous image coordinates."""
        forward, right, true_up = self.basis()
        half = math.tan(math.radians(self.fov) / 2.0)
        x_ndc = (np.asarray(cols) / self.image_size) * 2.0 - 1.0
        y_ndc = 1.0 - (np.asarray(rows) / self.image_size) * 2.0
        d = forward + (x_ndc * half)[..., None] * right + (y_ndc * half)[..., None] * true_up
        return _normalize(d)

    def pixel_rays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Origins and directions through every pixel center, each (H * W, 3)."""
        n = self.image_size
        rows, cols = np.meshgrid(np.arange(n) + 0.5, np.arange(n) + 0.5, indexing="ij")
        dirs = self.directions_for(cols.ravel(), rows.ravel())
        origins = np.broadcast_to(self.position, dirs.shape).copy()
        return origins, dirs

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Perspective projection of world points.

        Returns (cols, rows, depth) where depth is the distance along the
        optical axis; points with depth <= 0 lie behind the image plane.
        """
        forward, right, true_up = self.basis()
        rel = np.asarray(points, dtype=np.float64) - self.position
        depth = rel @ forward
        half = math.tan(math.radians(self.fov) / 2.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_ndc = (rel @ right) / (depth * half)
            y_ndc = (rel @ true_up) / (depth * half)
        cols = (x_ndc + 1.0) / 2.0 * self.image_size
        rows = (1.0 - y_ndc) / 2.0 * self.image_size
        return cols, rows, depth


def view_label_for(azimuth_deg: float, elevation_deg: float) -> str:
    """Map a camera direction to the view-dependent prompt bucket."""
    if elevation_deg >= 60.0:
        return "top"
    if elevation_deg <= -60.0:
        return "bottom"
    az = (azimuth_deg + 180.0) % 360.0 - 180.0
    if abs(az) < 45.0:
        return "front"
    if abs(az) > 135.0:
        return "back"
    return "side"


def camera_ring(
    count: int,
    radius: float,
    elevations: Sequence[float],
    fov: float = 50.0,
    image_size: int = 64,
) -> List[Camera]:
    """
    count cameras per elevation, evenly spaced in azimuth around the y axis.

    Azimuth 0 looks from +z (the palm side of the rest hand).
    """
    cameras: List[Camera] = []
    for elevation in elevations:
        el = math.radians(elevation)
        for k in range(count):
            az_deg = 360.0 * k / count
            az = math.radians(az_deg)
            position = radius * np.array(
                [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
            )
            up = np.array([0.0, 1.0, 0.0])
            if abs(math.cos(el)) < 1e-6:
                up = np.array([0.0, 0.0, -1.0 if elevation > 0 else 1.0])
            cameras.append(
                Camera(
                    position=position,
                    look_at=np.zeros(3),
                    up=up,
                    fov=fov,
                    image_size=image_size,
                    view_label=view_label_for(az_deg, elevation),
                )
            )
    return cameras


# -------------------------------------------------------------------
# Compositing
# -------------------------------------------------------------------


@dataclass
class RayMarch:
    """Per-ray compositing result; leading dims are the ray batch."""

    weights: torch.Tensor
    opacity: torch.Tensor
    color: torch.Tensor
    depth_mean: torch.Tensor
    depth_var: torch.Tensor
    transmittance: torch.Tensor


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def composite_samples(sigmas, deltas, colors, ts) -> RayMarch:
    """
    Emission-absorption quadrature over ordered samples.

    w_i = T_i * (1 - exp(-sigma_i delta_i)), T_i = prod_{j<i} exp(-sigma_j delta_j).
    Accepts numpy arrays or tensors of shape (..., n) and (..., n, 3).
    """
    sigma = _as_tensor(sigmas)
    delta = _as_tensor(deltas)
    rgb = _as_tensor(colors)
    t = _as_tensor(ts)

    tau = sigma * delta
    csum = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-(csum - tau))
    w = trans * -torch.expm1(-tau)

    opacity = w.sum(dim=-1)
    color = (w.unsqueeze(-1) * rgb).sum(dim=-2)
    denom = torch.clamp(opacity, min=EPS_DIV)
    depth = (w * t).sum(dim=-1) / denom
    var = (w * (t - depth.unsqueeze(-1)) ** 2).sum(dim=-1) / denom
    return RayMarch(
        weights=w,
        opacity=opacity,
        color=color,
        depth_mean=depth,
        depth_var=var,
        transmittance=torch.exp(-csum[..., -1]),
    )


def _ray_box(origins: np.ndarray, dirs: np.ndarray, extent: float) -> Tuple[np.ndarray, np.ndarray]:
    """Slab test against [-extent, extent]^3; returns (near, far) clipped to t >= 0."""
    inside = np.abs(origins) <= extent
    parallel = dirs == 0.0
    safe = np.where(parallel, 1.0, dirs)
    t0 = (-extent - origins) / safe
    t1 = (extent - origins) / safe
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    near = np.maximum(lo.max(axis=-1), 0.0)
    far = hi.min(axis=-1)
    return near, far


def _ray_samples(
    origins: np.ndarray,
    dirs: np.ndarray,
    extent: float,
    n_samples: int,
    rng: Optional[np.random.Generator],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    near, far = _ray_box(origins, dirs, extent)
    stride = np.where(far > near, far - near, 0.0) / n_samples
    if rng is None:
        jitter = np.full((origins.shape[0], n_samples), 0.5)
    else:
        jitter = rng.uniform(size=(origins.shape[0], n_samples))
    t = near[:, None] + (np.arange(n_samples)[None, :] + jitter) * stride[:, None]
    delta = np.broadcast_to(stride[:, None], t.shape).copy()
    points = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    return points, t, delta


@dataclass(frozen=True, eq=False)
class RaySamples:
    """Sample geometry of a ray batch: points (N, S, 3), depths t and strides delta (N, S)."""

    points: np.ndarray
    t: np.ndarray
    delta: np.ndarray


def ray_samples(
    origins: np.ndarray,
    dirs: np.ndarray,
    extent: float,
    n_samples: int,
    rng: Optional[np.random.Generator] = None,
) -> RaySamples:
    if n_samples < 2:
        raise DomainError(f"n_samples must be >= 2, got {n_samples}")
    return RaySamples(*_ray_samples(origins, dirs, extent, n_samples, rng))


def camera_samples(camera: Camera, extent: float, n_samples: int) -> RaySamples:
    """Unjittered samples of every pixel ray; shared by cameras with the same geometry."""
    return _cached_camera_samples(camera.geometry_key(), float(extent), int(n_samples))


@lru_cache(maxsize=32)
def _cached_camera_samples(key: Tuple, extent: float, n_samples: int) -> RaySamples:
    origins, dirs = Camera.from_geometry_key(key).pixel_rays()
    return ray_samples(origins, dirs, extent, n_samples)


def march_samples(fld: VoxelField, samples: RaySamples) -> RayMarch:
    sigma, rgb = sample_field(fld, samples.points)
    return composite_samples(sigma, samples.delta, rgb, samples.t)


def march_rays(
    fld: VoxelField,
    origins: np.ndarray,
    dirs: np.ndarray,
    n_samples: int,
    rng: Optional[np.random.Generator] = None,
) -> RayMarch:
    """Batched version of march_ray over (N, 3) origins / directions."""
    return march_samples(fld, ray_samples(origins, dirs, fld.extent, n_samples, rng))


def march_ray(
    fld: VoxelField,
    origin: Sequence[float],
    direction: Sequence[float],
    n_samples: int = 64,
    rng: Optional[np.random.Generator] = None,
) -> RayMarch:
    """Composite one ray through the field (zero output when it misses the box)."""
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise DomainError(f"Ray direction must be unit length, got norm {np.linalg.norm(d)}")
    out = march_rays(fld, np.asarray(origin, dtype=np.float64)[None, :], d[None, :], n_samples, rng)
    return RayMarch(
        weights=out.weights[0],
        opacity=out.opacity[0],
        color=out.color[0],
        depth_mean=out.depth_mean[0],
        depth_var=out.depth_var[0],
        transmittance=out.transmittance[0],
    )


# -------------------------------------------------------------------
# Views
# -------------------------------------------------------------------


@dataclass
class RenderOutput:
    """
    Rendered quantities for one camera; tensors keep the autograd graph
    when produced with track_grad=True.
    """

    color_image: torch.Tensor
    opacity_map: torch.Tensor
    normalized_opacity: torch.Tensor
    depth_map: torch.Tensor
    depth_variance: torch.Tensor

    def to_numpy(self) -> Dict[str, np.ndarray]:
        return {
            name: getattr(self, name).detach().numpy().copy()
            for name in ("color_image", "opacity_map", "normalized_opacity", "depth_map", "depth_variance")
        }


def normalize_opacity(opacity: torch.Tensor, range_floor: float = 0.0) -> torch.Tensor:
    """
    Min-max normalization of an opacity map.

    With range_floor == 0 this is exact min-max and a constant map gives
    all zeros. With a positive floor the divisor is max(max - min, floor),
    so near-constant maps shrink toward zero instead of being amplified.
    """
    lo = opacity.amin()
    spread = opacity.amax() - lo
    if range_floor <= 0.0:
        if float(spread.detach()) <= 0.0:
            return torch.zeros_like(opacity)
        return (opacity - lo) / spread
    return (opacity - lo) / torch.clamp(spread, min=range_floor)


def render_view(
    fld: VoxelField,
    camera: Camera,
    n_samples: int = 64,
    rng: Optional[np.random.Generator] = None,
    track_grad: bool = False,
) -> RenderOutput:
    """
    Render every pixel of the camera. The color image is composited over
    a white background.
    """
    if rng is None:
        samples = camera_samples(camera, fld.extent, n_samples)
    else:
        origins, dirs = camera.pixel_rays()
        samples = ray_samples(origins, dirs, fld.extent, n_samples, rng)
    with torch.set_grad_enabled(track_grad):
        out = march_samples(fld, samples)
        n = camera.image_size
        color = out.color + out.transmittance.unsqueeze(-1)
        opacity = out.opacity.reshape(n, n)
        return RenderOutput(
            color_image=color.reshape(n, n, 3),
            opacity_map=opacity,
            normalized_opacity=normalize_opacity(opacity),
            depth_map=out.depth_mean.reshape(n, n),
            depth_variance=out.depth_var.reshape(n, n),
        )


# -------------------------------------------------------------------
# Opacity-only projection
# -------------------------------------------------------------------


class _SparseLinearMap(torch.autograd.Function):
    """y = A @ x for a fixed scipy CSR matrix A; backward applies A^T."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, matrix: sparse.csr_matrix) -> torch.Tensor:
        ctx.matrix = matrix
        return torch.from_numpy(matrix @ x.detach().numpy())

    @staticmethod
    def backward(ctx, grad: torch.Tensor):
        return torch.from_numpy(ctx.matrix.T @ grad.detach().numpy()), None


class OpacityProjector:
    """
    Opacity maps of a fixed camera set as one sparse linear map of the
    node densities.

    Along a ray the optical depth sum_i sigma_i * delta_i is linear in
    the density grid once the sample points are fixed, and the
    composited opacity telescopes to 1 - exp(-optical depth). The matrix
    holds the trilinear weights of sample_field times the strides, so
    the maps equal render_view's opacity up to rounding at the cost of
    one sparse product per pass. Rows are camera-major, then row-major
    pixels; columns follow density() flattened in C order.
    """

    def __init__(self, cameras: Sequence[Camera], resolution: int, extent: float, n_samples: int):
        sizes = {cam.image_size for cam in cameras}
        if len(sizes) != 1:
            raise ShapeError(f"Cameras must share one image size, got {sorted(sizes)}")
        self.image_size = sizes.pop()
        self.n_views = len(cameras)
        self.resolution = int(resolution)
        self.extent = float(extent)
        self.n_samples = int(n_samples)
        self.matrix = sparse.vstack([self._camera_block(cam) for cam in cameras], format="csr")

    def _camera_block(self, camera: Camera) -> sparse.csr_matrix:
        samples = camera_samples(camera, self.extent, self.n_samples)
        r = self.resolution
        u = (samples.points / self.extent + 1.0) * 0.5 * (r - 1)
        base = np.floor(u)
        frac = u - base
        base = base.astype(np.int64)
        n_rays = u.shape[0]
        ray = np.broadcast_to(np.arange(n_rays)[:, None], u.shape[:2])

        rows, cols, vals = [], [], []
        for corner in itertools.product((0, 1), repeat=3):
            offset = np.array(corner)
            idx = base + offset
            w = np.prod(np.where(offset.astype(bool), frac, 1.0 - frac), axis=-1) * samples.delta
            # out-of-grid corners read as zero, like grid_sample's zero padding
            keep = np.all((idx >= 0) & (idx < r), axis=-1) & (w > 0.0)
            flat = (idx[..., 0] * r + idx[..., 1]) * r + idx[..., 2]
            rows.append(ray[keep])
            cols.append(flat[keep])
            vals.append(w[keep])
        # duplicate (ray, node) entries are summed on conversion
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_rays, r ** 3),
        )

    def _check(self, fld: VoxelField) -> None:
        if fld.resolution != self.resolution or abs(fld.extent - self.extent) > 1e-12:
            raise ShapeError(
                f"Projector built for resolution {self.resolution} / extent {self.extent}, "
                f"got a field with {fld.resolution} / {fld.extent}"
            )

    def optical_depth(self, fld: VoxelField) -> torch.Tensor:
        self._check(fld)
        return _SparseLinearMap.apply(fld.density().reshape(-1), self.matrix)

    def opacity(self, fld: VoxelField) -> torch.Tensor:
        """(n_views, H, W) opacity maps, differentiable in raw_density."""
        n = self.image_size
        return (-torch.expm1(-self.optical_depth(fld))).reshape(self.n_views, n, n)


def opacity_projector(
    cameras: Sequence[Camera], resolution: int, extent: float, n_samples: int
) -> OpacityProjector:
    """Projector for a camera set, built once per camera geometry and grid."""
    keys = tuple(cam.geometry_key() for cam in cameras)
    return _cached_projector(keys, int(resolution), float(extent), int(n_samples))


@lru_cache(maxsize=4)
def _cached_projector(keys: Tuple, resolution: int, extent: float, n_samples: int) -> OpacityProjector:
    cameras = [Camera.from_geometry_key(k) for k in keys]
    return OpacityProjector(cameras, resolution, extent, n_samples)


# -------------------------------------------------------------------
# Gradients
# -------------------------------------------------------------------


@dataclass
class RenderAdjoint:
    """Upstream sensitivities with the shapes of RenderOutput; None means zero."""

    color_image: Optional[np.ndarray] = None
    opacity_map: Optional[np.ndarray] = None
    normalized_opacity: Optional[np.ndarray] = None
    depth_map: Optional[np.ndarray] = None
    depth_variance: Optional[np.ndarray] = None


def parameter_gradient(fld: VoxelField, loss: torch.Tensor) -> Dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to the raw parameters, as numpy."""
    params = fld.named_parameters()
    if not loss.requires_grad:
        return {name: np.zeros(tuple(p.shape)) for name, p in params.items()}
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {
        name: (np.zeros(tuple(p.shape)) if g is None else g.detach().numpy().copy())
        for (name, p), g in zip(params.items(), grads)
    }


def render_gradients(
    fld: VoxelField,
    camera: Camera,
    upstream: RenderAdjoint,
    n_samples: int = 64,
    rng_seed: Optional[int] = None,
) -> Dict[str, np.ndarray]:
    """
    Exact gradient of sum(upstream * render) with respect to raw_density
    and raw_color. rng_seed reproduces a jittered render.
    """
    n = camera.image_size
    expected = {
        "color_image": (n, n, 3),
        "opacity_map": (n, n),
        "normalized_opacity": (n, n),
        "depth_map": (n, n),
        "depth_variance": (n, n),
    }
    rng = None if rng_seed is None else np.random.default_rng(rng_seed)
    out = render_view(fld, camera, n_samples, rng, track_grad=True)

    total = torch.zeros((), dtype=DTYPE)
    for name, shape in expected.items():
        adj = getattr(upstream, name)
        if adj is None:
            continue
        adj = np.asarray(adj, dtype=np.float64)
        if adj.shape != shape:
            raise ShapeError(f"Adjoint for {name} has shape {adj.shape}, expected {shape}")
        total = total + (torch.from_numpy(adj) * getattr(out, name)).sum()
    return parameter_gradient(fld, total)


# -------------------------------------------------------------------
# Surface snapshots
# -------------------------------------------------------------------


def shade_normals(
    fld: VoxelField,
    camera: Camera,
    render: RenderOutput,
    threshold: float = 0.5,
) -> np.ndarray:
    """
    Lambert-shaded surface map: normals from the density gradient,
    evaluated at the expected termination point of every foreground ray.
    Background pixels are white.
    """
    sigma = fld.density_numpy()
    gx, gy, gz = np.gradient(sigma, fld.spacing)
    normals = -np.stack([gx, gy, gz], axis=-1)
    norm = np.linalg.norm(normals, axis=-1, keepdims=True)
    normals = np.divide(normals, norm, out=np.zeros_like(normals), where=norm > 0)

    origins, dirs = camera.pixel_rays()
    depth = render.depth_map.detach().numpy().reshape(-1)
    points = origins + depth[:, None] * dirs

    vol = torch.from_numpy(normals).permute(3, 2, 1, 0).unsqueeze(0)
    grid = torch.from_numpy(points.reshape(1, -1, 1, 1, 3) / fld.extent)
    with torch.no_grad():
        n_at = F.grid_sample(vol, grid, mode="bilinear", padding_mode="border", align_corners=True)
    n_at = n_at.reshape(3, -1).t().numpy()
    n_len = np.linalg.norm(n_at, axis=-1, keepdims=True)
    n_at = np.divide(n_at, n_len, out=np.zeros_like(n_at), where=n_len > 0)

    lambert = np.clip(np.sum(n_at * -dirs, axis=-1), 0.0, 1.0)
    shade = 0.2 + 0.8 * lambert
    fg = render.opacity_map.detach().numpy().reshape(-1) > threshold
    size = camera.image_size
    return np.where(fg, shade, 1.0).reshape(size, size)

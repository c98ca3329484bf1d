# tests/test_render.py
from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
import torch

from src.errors import DomainError, ShapeError
from src.render import (
    EPS_DIV,
    Camera,
    OpacityProjector,
    RenderAdjoint,
    VoxelField,
    camera_ring,
    camera_samples,
    composite_samples,
    march_ray,
    march_rays,
    normalize_opacity,
    opacity_projector,
    parameter_gradient,
    render_gradients,
    render_view,
    sample_field,
    shade_normals,
    view_label_for,
)


def _random_field(seed: int, resolution: int = 6, extent: float = 1.0) -> VoxelField:
    rng = np.random.default_rng(seed)
    r = resolution
    density = rng.uniform(0.5, 3.0, size=(r, r, r))
    color = rng.uniform(0.1, 0.9, size=(r, r, r, 3))
    return VoxelField.from_values(density, color, extent)


def _camera(image_size: int = 6, position=(0.3, 0.4, 3.0)) -> Camera:
    return Camera(position=np.array(position), look_at=np.zeros(3), fov=50.0, image_size=image_size)


def _ball(radius_fraction: float = 0.5) -> VoxelField:
    return VoxelField.sphere(16, 1.0, density=50.0, radius_fraction=radius_fraction, raw_floor=None)


# -------------------------------------------------------------------
# Field
# -------------------------------------------------------------------


def test_field_parameterization_keeps_values_in_range():
    """Softplus density is non-negative and sigmoid color stays in [0, 1]."""
    fld = _random_field(0)
    sigma = fld.density_numpy()
    rgb = fld.color_numpy()
    assert np.all(sigma >= 0.0)
    assert np.all((rgb >= 0.0) & (rgb <= 1.0))


def test_field_round_trips_physical_values():
    """Densities and colours map to raw parameters and back."""
    rng = np.random.default_rng(1)
    density = rng.uniform(0.0, 40.0, size=(5, 5, 5))
    color = rng.uniform(0.05, 0.95, size=(5, 5, 5, 3))
    fld = VoxelField.from_values(density, color, 1.0)
    np.testing.assert_allclose(fld.density_numpy(), density, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(fld.color_numpy(), color, atol=1e-9)


def test_empty_field_is_exactly_zero_outside_and_inside():
    """An empty grid samples to exact zeros, also beyond its extent."""
    fld = VoxelField.empty(8, 1.0)
    assert np.all(fld.density_numpy() == 0.0)
    sigma, _ = sample_field(fld, np.array([[0.0, 0.0, 0.0], [0.3, -0.2, 0.9], [5.0, 0.0, 0.0]]))
    assert torch.all(sigma == 0.0)


def test_sample_field_reads_nodes_and_zero_outside():
    """Interpolation returns node values on nodes and zero density outside the cube."""
    fld = _random_field(2)
    nodes = fld.node_positions()
    sigma, rgb = sample_field(fld, nodes[1, 2, 3])
    assert float(sigma) == pytest.approx(fld.density_numpy()[1, 2, 3], rel=1e-12)
    np.testing.assert_allclose(rgb.detach().numpy(), fld.color_numpy()[1, 2, 3], rtol=1e-12)

    outside, _ = sample_field(fld, np.array([0.0, 0.0, 2.5]))
    assert float(outside) == 0.0


def test_blend_endpoints_and_validation():
    """Blend weight 0 and 1 return the endpoints; bad weights and grids raise."""
    a, b = _random_field(3), _random_field(4)
    np.testing.assert_allclose(a.blend(b, 0.0).density_numpy(), a.density_numpy(), rtol=1e-9)
    np.testing.assert_allclose(a.blend(b, 1.0).density_numpy(), b.density_numpy(), rtol=1e-9)
    with pytest.raises(DomainError):
        a.blend(b, 1.5)
    with pytest.raises(ShapeError):
        a.blend(_random_field(5, resolution=7), 0.5)


def test_field_rejects_bad_shapes():
    """Grids must be cubic, colours need three channels and the extent must be positive."""
    with pytest.raises(ShapeError):
        VoxelField(torch.zeros(4, 4, 5), torch.zeros(4, 4, 5, 3), 1.0)
    with pytest.raises(ShapeError):
        VoxelField(torch.zeros(4, 4, 4), torch.zeros(4, 4, 4), 1.0)
    with pytest.raises(DomainError):
        VoxelField(torch.zeros(4, 4, 4), torch.zeros(4, 4, 4, 3), 0.0)


# -------------------------------------------------------------------
# Camera
# -------------------------------------------------------------------


def test_camera_validation():
    """Degenerate placement, collinear up vector, bad fov and unknown labels raise."""
    with pytest.raises(DomainError):
        Camera(position=np.zeros(3), look_at=np.zeros(3))
    with pytest.raises(DomainError):
        Camera(position=np.array([0.0, 3.0, 0.0]), look_at=np.zeros(3), up=np.array([0.0, 1.0, 0.0]))
    with pytest.raises(DomainError):
        Camera(position=np.array([0.0, 0.0, 3.0]), look_at=np.zeros(3), fov=180.0)
    with pytest.raises(DomainError):
        Camera(position=np.array([0.0, 0.0, 3.0]), look_at=np.zeros(3), view_label="diagonal")


def test_camera_projects_look_at_to_image_center():
    """The look-at point lands on the image centre at its true distance."""
    cam = _camera(image_size=32)
    cols, rows, depth = cam.project(np.zeros((1, 3)))
    assert cols[0] == pytest.approx(16.0, abs=1e-9)
    assert rows[0] == pytest.approx(16.0, abs=1e-9)
    assert depth[0] == pytest.approx(np.linalg.norm(cam.position))


def test_camera_ring_labels():
    """Ring cameras get front, side and back buckets from their azimuth."""
    cams = camera_ring(8, 3.5, [15.0])
    labels = [c.view_label for c in cams]
    assert labels == ["front", "side", "side", "side", "back", "side", "side", "side"]
    assert cams[0].position[2] > 0.0
    for c in cams:
        assert np.linalg.norm(c.position) == pytest.approx(3.5)

    assert view_label_for(0.0, 75.0) == "top"
    assert view_label_for(10.0, -80.0) == "bottom"
    assert [c.view_label for c in camera_ring(2, 3.0, [90.0])] == ["top", "top"]


# -------------------------------------------------------------------
# Compositing
# -------------------------------------------------------------------


def test_march_ray_through_empty_space():
    """Empty space leaves the ray fully transmitted with nothing composited."""
    out = march_ray(VoxelField.empty(8, 1.0), [0.0, 0.0, 3.0], [0.0, 0.0, -1.0], n_samples=16)
    assert float(out.opacity) == 0.0
    assert torch.all(out.weights == 0.0)
    assert torch.all(out.color == 0.0)
    assert float(out.transmittance) == 1.0


def test_march_ray_rejects_bad_input():
    """Non-unit directions and fewer than two samples are rejected."""
    fld = VoxelField.empty(8, 1.0)
    with pytest.raises(DomainError):
        march_ray(fld, [0.0, 0.0, 3.0], [0.0, 0.0, -2.0])
    with pytest.raises(DomainError):
        march_ray(fld, [0.0, 0.0, 3.0], [0.0, 0.0, -1.0], n_samples=1)


def test_single_sample_with_half_absorption():
    """A sample with sigma*delta = ln 2 absorbs half the light."""
    out = composite_samples([math.log(2.0), 0.0, 0.0], [1.0, 1.0, 1.0], np.full((3, 3), 0.4), [1.0, 2.0, 3.0])
    assert float(out.opacity) == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(out.color.numpy(), [0.2, 0.2, 0.2], atol=1e-15)


def test_opaque_limit_takes_first_sample_color():
    """An opaque first sample hides everything behind it."""
    colors = np.array([[0.9, 0.1, 0.2], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    out = composite_samples([1e3, 1e3, 1e3], [0.1, 0.1, 0.1], colors, [1.0, 1.1, 1.2])
    assert float(out.opacity) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(out.color.numpy(), colors[0], atol=1e-12)


def test_transmittance_conservation_on_random_rays():
    """Final transmittance plus the sample weights sums to one on random rays."""
    rng = np.random.default_rng(6)
    out = composite_samples(
        rng.exponential(2.0, size=(1000, 64)),
        rng.uniform(0.0, 0.1, size=(1000, 64)),
        rng.uniform(size=(1000, 64, 3)),
        np.cumsum(rng.uniform(0.0, 0.1, size=(1000, 64)), axis=1),
    )
    total = out.transmittance + out.weights.sum(dim=-1)
    assert torch.max(torch.abs(total - 1.0)) <= 1e-10
    assert torch.all((out.opacity >= 0.0) & (out.opacity <= 1.0 + 1e-12))


def test_conservation_through_a_field():
    """Weights plus residual transmittance sum to one on 1000 jittered rays."""
    fld = _random_field(7)
    rng = np.random.default_rng(7)
    n = 1000
    origins = rng.standard_normal((n, 3))
    origins = 3.0 * origins / np.linalg.norm(origins, axis=1, keepdims=True)
    targets = rng.uniform(-1.2, 1.2, size=(n, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    with torch.no_grad():
        out = march_rays(fld, origins, dirs, 32, rng)
    total = out.transmittance + out.weights.sum(dim=-1)
    assert torch.max(torch.abs(total - 1.0)) <= 1e-10
    assert torch.all((out.opacity >= 0.0) & (out.opacity <= 1.0 + 1e-12))


def test_two_slab_depth_variance():
    """Two absorbing samples: variance w1 w2 (d1 - d2)^2 / (w1 + w2)^2."""
    d1, d2 = 1.0, 3.0
    out = composite_samples([math.log(2.0), math.log(2.0)], [1.0, 1.0], np.zeros((2, 3)), [d1, d2])
    w1, w2 = 0.5, 0.25
    expected = w1 * w2 * (d1 - d2) ** 2 / (w1 + w2) ** 2
    assert float(out.depth_var) == pytest.approx(expected, rel=1e-12)
    assert float(out.depth_mean) == pytest.approx((w1 * d1 + w2 * d2) / (w1 + w2), rel=1e-12)


def test_thin_opaque_shell_has_no_depth_variance():
    """All weight on one sample gives its depth and no spread."""
    out = composite_samples([0.0, 0.0, 1e4, 0.0], [0.1] * 4, np.zeros((4, 3)), [1.0, 2.0, 3.0, 4.0])
    assert float(out.depth_mean) == pytest.approx(3.0)
    assert float(out.depth_var) < 1e-9


def test_depth_guard_on_empty_rays():
    """Rays that hit nothing get finite zero depth instead of 0 / 0."""
    out = composite_samples([0.0, 0.0], [1.0, 1.0], np.zeros((2, 3)), [1.0, 2.0])
    assert float(out.depth_mean) == 0.0
    assert EPS_DIV > 0.0


# -------------------------------------------------------------------
# Views
# -------------------------------------------------------------------


def test_render_empty_field():
    """An empty field renders a white image with zero opacity."""
    out = render_view(VoxelField.empty(8, 1.0), _camera(8), n_samples=16)
    assert torch.all(out.opacity_map == 0.0)
    assert torch.all(out.normalized_opacity == 0.0)
    assert torch.allclose(out.color_image, torch.ones_like(out.color_image))


def test_render_solid_ball_normalization():
    """A ball seen head on fills the centre, leaves the corners empty and normalizes to [0, 1]."""
    out = render_view(_ball(), _camera(16, position=(0.0, 0.0, 3.0)), n_samples=64)
    norm = out.normalized_opacity
    assert float(norm[7, 7]) > 0.99
    assert float(norm[0, 0]) == 0.0
    assert float(norm.min()) == 0.0
    assert float(norm.max()) == 1.0
    assert torch.all((out.opacity_map >= 0.0) & (out.opacity_map <= 1.0 + 1e-12))


def test_normalize_opacity_with_range_floor():
    """A constant map normalizes to zero; the floor caps the amplification of small spreads."""
    flat = torch.full((4, 4), 0.3, dtype=torch.float64)
    assert torch.all(normalize_opacity(flat) == 0.0)
    assert torch.all(normalize_opacity(flat, 0.1) == 0.0)

    small = torch.tensor([[0.0, 0.05], [0.02, 0.01]], dtype=torch.float64)
    np.testing.assert_allclose(normalize_opacity(small, 0.1).numpy(), small.numpy() / 0.1)
    assert float(normalize_opacity(small).max()) == 1.0


def test_normalize_opacity_is_silent_on_tracked_maps():
    """Maps that carry a graph normalize without scalar-conversion warnings."""
    ramp = torch.tensor([[0.2, 0.4], [0.6, 0.8]], dtype=torch.float64, requires_grad=True)
    flat = torch.full((2, 2), 0.3, dtype=torch.float64, requires_grad=True)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        scaled = normalize_opacity(ramp * 1.0)
        zeros = normalize_opacity(flat * 1.0)
    assert scaled.requires_grad
    assert float(scaled.detach().max()) == pytest.approx(1.0)
    assert torch.all(zeros == 0.0)


def test_density_increase_never_decreases_opacity():
    """Adding density anywhere never lowers a pixel's opacity."""
    rng = np.random.default_rng(8)
    base = _random_field(8)
    denser = VoxelField.from_values(
        base.density_numpy() + rng.uniform(0.0, 1.0, size=(6, 6, 6)), base.color_numpy(), 1.0
    )
    cam = _camera(8)
    o1 = render_view(base, cam, 24).opacity_map
    o2 = render_view(denser, cam, 24).opacity_map
    assert torch.all(o2 >= o1 - 1e-12)


def test_doubling_samples_barely_changes_a_smooth_field():
    """Going from 64 to 128 samples moves a smooth Gaussian blob by under 2% of its peak opacity."""
    blank = VoxelField.empty(24, 1.0)
    nodes = blank.node_positions()
    sigma = 3.0 * np.exp(-np.sum(nodes ** 2, axis=-1) / 0.2)
    fld = VoxelField.from_values(sigma, np.full(sigma.shape + (3,), 0.5), 1.0)
    cam = _camera(8)
    o64 = render_view(fld, cam, 64).opacity_map
    o128 = render_view(fld, cam, 128).opacity_map
    assert float(torch.max(torch.abs(o128 - o64))) < 0.02 * float(o64.max())


def test_jittered_render_is_reproducible():
    """Jittered sampling repeats for a seed and differs from the stratified midpoints."""
    fld, cam = _random_field(9), _camera(6)
    a = render_view(fld, cam, 16, np.random.default_rng(3)).to_numpy()
    b = render_view(fld, cam, 16, np.random.default_rng(3)).to_numpy()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


# -------------------------------------------------------------------
# Gradients
# -------------------------------------------------------------------


def test_zero_adjoint_gives_zero_gradient():
    """An all-zero adjoint pulls on no parameter."""
    grads = render_gradients(_random_field(10), _camera(6), RenderAdjoint(), n_samples=16)
    assert set(grads) == {"raw_density", "raw_color"}
    assert all(np.all(g == 0.0) for g in grads.values())


def test_opacity_gradient_of_near_empty_field_is_non_negative():
    """More density can only add opacity, so the opacity gradient is non-negative."""
    fld = VoxelField.from_values(np.full((6, 6, 6), 1e-3), np.full((6, 6, 6, 3), 0.5), 1.0)
    grads = render_gradients(fld, _camera(6), RenderAdjoint(opacity_map=np.ones((6, 6))), n_samples=16)
    assert np.all(grads["raw_density"] >= 0.0)
    assert grads["raw_density"].sum() > 0.0


def test_render_gradients_are_linear_in_the_adjoint():
    """Gradient of a weighted sum of render terms is the weighted sum of their gradients."""
    fld, cam = _random_field(5), _camera(6)
    rng = np.random.default_rng(2)
    a_color = rng.standard_normal((6, 6, 3))
    a_opacity = rng.standard_normal((6, 6))
    a_depth = rng.standard_normal((6, 6))
    a_var = rng.standard_normal((6, 6))

    first = render_gradients(fld, cam, RenderAdjoint(color_image=a_color, depth_map=a_depth), n_samples=16)
    second = render_gradients(fld, cam, RenderAdjoint(opacity_map=a_opacity, depth_variance=a_var), n_samples=16)
    both = render_gradients(
        fld,
        cam,
        RenderAdjoint(
            color_image=2.0 * a_color,
            opacity_map=-0.5 * a_opacity,
            depth_map=2.0 * a_depth,
            depth_variance=-0.5 * a_var,
        ),
        n_samples=16,
    )
    for name, grad in both.items():
        expected = 2.0 * first[name] - 0.5 * second[name]
        np.testing.assert_allclose(grad, expected, rtol=1e-12, atol=1e-12 * np.abs(expected).max())


def test_adjoint_shape_mismatch():
    """Adjoint maps must match the image size."""
    with pytest.raises(ShapeError):
        render_gradients(_random_field(11), _camera(6), RenderAdjoint(opacity_map=np.ones((5, 6))))


def test_render_gradients_match_finite_differences():
    """50 sampled raw parameters, central differences."""
    fld, cam, n_samples = _random_field(12), _camera(6), 16
    rng = np.random.default_rng(12)
    adj = RenderAdjoint(
        color_image=rng.standard_normal((6, 6, 3)),
        opacity_map=rng.standard_normal((6, 6)),
        depth_map=rng.standard_normal((6, 6)),
        depth_variance=rng.standard_normal((6, 6)),
    )
    analytic = render_gradients(fld, cam, adj, n_samples)

    def objective() -> float:
        out = render_view(fld, cam, n_samples)
        total = 0.0
        for name in ("color_image", "opacity_map", "depth_map", "depth_variance"):
            total += float((torch.from_numpy(getattr(adj, name)) * getattr(out, name)).sum())
        return total

    params = fld.named_parameters()
    scale = max(np.abs(g).max() for g in analytic.values())
    candidates = [
        (name, int(k))
        for name, g in analytic.items()
        for k in np.flatnonzero(np.abs(g.ravel()) > 1e-3 * scale)
    ]
    picks = rng.choice(len(candidates), size=min(50, len(candidates)), replace=False)

    h = 1e-4
    for p in picks:
        name, k = candidates[p]
        flat = params[name].data.view(-1)
        orig = float(flat[k])
        flat[k] = orig + h
        plus = objective()
        flat[k] = orig - h
        minus = objective()
        flat[k] = orig
        fd = (plus - minus) / (2.0 * h)
        an = analytic[name].ravel()[k]
        assert fd == pytest.approx(an, rel=1e-4, abs=1e-9), (name, k)


# -------------------------------------------------------------------
# Opacity projection
# -------------------------------------------------------------------


def test_opacity_projector_matches_composited_opacity():
    """One sparse product reproduces render_view's opacity maps and their density gradient."""
    fld = _random_field(3, resolution=8)
    cams = camera_ring(3, 3.0, (0.0, 20.0), image_size=6)
    proj = OpacityProjector(cams, fld.resolution, fld.extent, n_samples=12)
    maps = proj.opacity(fld)
    assert tuple(maps.shape) == (len(cams), 6, 6)
    for k, cam in enumerate(cams):
        ref = render_view(fld, cam, 12).opacity_map.numpy()
        np.testing.assert_allclose(maps[k].detach().numpy(), ref, rtol=0.0, atol=1e-12)

    adj = np.random.default_rng(0).standard_normal((len(cams), 6, 6))
    grads = parameter_gradient(fld, (torch.from_numpy(adj) * maps).sum())
    expected = sum(
        render_gradients(fld, cam, RenderAdjoint(opacity_map=adj[k]), n_samples=12)["raw_density"]
        for k, cam in enumerate(cams)
    )
    np.testing.assert_allclose(grads["raw_density"], expected, rtol=1e-9, atol=1e-13)
    assert np.all(grads["raw_color"] == 0.0)


def test_ray_samples_and_projectors_are_shared_per_geometry():
    """Equal camera geometry reuses ray samples and projectors; other grids do not."""
    a = camera_ring(2, 3.0, (0.0,), image_size=5)
    b = camera_ring(2, 3.0, (0.0,), image_size=5)
    assert camera_samples(a[0], 1.0, 8) is camera_samples(b[0], 1.0, 8)
    assert camera_samples(a[0], 1.0, 8) is not camera_samples(a[1], 1.0, 8)
    assert opacity_projector(a, 6, 1.0, 8) is opacity_projector(b, 6, 1.0, 8)
    assert opacity_projector(a, 6, 1.0, 8) is not opacity_projector(a, 7, 1.0, 8)


def test_cached_geometry_renders_like_fresh_rays():
    """An unjittered render equals marching freshly built pixel rays."""
    fld, cam = _random_field(4), _camera(6)
    cached = render_view(fld, cam, 16).opacity_map.numpy()
    origins, dirs = cam.pixel_rays()
    fresh = march_rays(fld, origins, dirs, 16).opacity.detach().reshape(6, 6).numpy()
    np.testing.assert_array_equal(cached, fresh)


def test_projector_rejects_mismatched_fields_and_cameras():
    """A projector is tied to one grid resolution and one image size."""
    cams = camera_ring(2, 3.0, (0.0,), image_size=5)
    proj = OpacityProjector(cams, 6, 1.0, 8)
    with pytest.raises(ShapeError):
        proj.opacity(_random_field(0, resolution=7))
    with pytest.raises(ShapeError):
        OpacityProjector([_camera(5), _camera(6)], 6, 1.0, 8)


# -------------------------------------------------------------------
# Snapshots
# -------------------------------------------------------------------


def test_shade_normals_background_is_white():
    """Background pixels shade white and lit pixels stay above the ambient floor."""
    fld, cam = _ball(), _camera(16, position=(0.0, 0.0, 3.0))
    out = render_view(fld, cam, 32)
    shade = shade_normals(fld, cam, out)
    assert shade.shape == (16, 16)
    assert shade[0, 0] == 1.0
    assert np.all((shade >= 0.2) & (shade <= 1.0))

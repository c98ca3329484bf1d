from __future__ import annotations

"""
Two-stage optimization of a voxel field.

Stage 1 (init_stage) fits min-max normalized opacity maps to the
silhouettes of the prompted hand. Stage 2 (optimize_stage2) combines

    L = lambda_sds * L_sds + L_chs(t) + lambda_img * L_img + lambda_zvar * L_zvar

where L_chs already carries its annealed weight lambda_t. Every loss is
a torch scalar attached to the render graph; one backward pass per
iteration feeds torch.optim.Adam.

Stop-gradient boundaries: (eps_hat - eps) in L_sds and the decoded
clean estimate in L_img are constants with respect to the field.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from .errors import DivergenceError, ShapeError
from .hand_proxy import CapsuleHand, project_keypoints, silhouette_mask, skeleton_hash
from .render import (
    DTYPE,
    Camera,
    RenderOutput,
    VoxelField,
    normalize_opacity,
    opacity_projector,
    render_view,
)
from .schedule import (
    AnnealingPlan,
    forward_noise,
    lambda_chs_at_iter,
    lambda_chs_at_t,
    timestep_at,
    timestep_at_unrounded,
)
from .score_model import ConditionKey, ViewLandscape, denoised_target, predict_noise

logger = logging.getLogger(__name__)

STAGE_CSV_HEADER = (
    "iter",
    "t",
    "lambda_chs",
    "loss_sds",
    "loss_chs",
    "loss_img",
    "loss_zvar",
    "loss_total",
    "seconds",
)


# -------------------------------------------------------------------
# Types
# -------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    lambda_sds: float = 1.0
    lambda_img: float = 0.01
    lambda_zvar: float = 100.0

    def __post_init__(self) -> None:
        for name in ("lambda_sds", "lambda_img", "lambda_zvar"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


@dataclass(frozen=True)
class StageToggles:
    """Which stage-2 terms contribute; a disabled term records 0 and adds no gradient."""

    sds: bool = True
    chs_loss: bool = True
    img_loss: bool = True
    zvar_loss: bool = True
    skeleton_condition: bool = True


@dataclass(frozen=True)
class AdamSettings:
    lr: float = 1e-2
    betas: Tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8

    def build(self, fld: VoxelField) -> torch.optim.Adam:
        return torch.optim.Adam(fld.parameters(), lr=self.lr, betas=tuple(self.betas), eps=self.eps)


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Snapshot of Adam's moments for every raw parameter."""

    step: int
    lr: float
    betas: Tuple[float, float]
    eps: float
    exp_avg: Dict[str, np.ndarray]
    exp_avg_sq: Dict[str, np.ndarray]

    @classmethod
    def from_torch(cls, optimizer: torch.optim.Adam, fld: VoxelField) -> "OptimizerState":
        group = optimizer.param_groups[0]
        step = 0
        exp_avg: Dict[str, np.ndarray] = {}
        exp_avg_sq: Dict[str, np.ndarray] = {}
        for name, p in fld.named_parameters().items():
            state = optimizer.state.get(p, {})
            if state:
                step = int(float(state["step"]))
                exp_avg[name] = state["exp_avg"].detach().numpy().copy()
                exp_avg_sq[name] = state["exp_avg_sq"].detach().numpy().copy()
            else:
                exp_avg[name] = np.zeros(tuple(p.shape))
                exp_avg_sq[name] = np.zeros(tuple(p.shape))
        return cls(step, float(group["lr"]), tuple(group["betas"]), float(group["eps"]), exp_avg, exp_avg_sq)

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in list(self.exp_avg.values()) + list(self.exp_avg_sq.values()))


@dataclass(frozen=True)
class IterationRecord:
    iter: int
    t: int
    lambda_chs: float
    loss_sds: float
    loss_chs: float
    loss_img: float
    loss_zvar: float
    loss_total: float
    seconds: float

    def as_row(self) -> Tuple:
        return tuple(getattr(self, name) for name in STAGE_CSV_HEADER)


@dataclass(eq=False)
class StageReport:
    stage: str
    records: List[IterationRecord] = field(default_factory=list)
    final_loss: Optional[float] = None
    optimizer_state: Optional[OptimizerState] = None

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def rows(self) -> List[Tuple]:
        return [r.as_row() for r in self.records]


@dataclass(eq=False)
class SdsStep:
    """One score-distillation evaluation; surrogate carries the graph."""

    surrogate: torch.Tensor
    value: float
    t: int
    eps: np.ndarray
    eps_hat: np.ndarray
    z: np.ndarray
    z_t: np.ndarray
    key: Optional[ConditionKey]
    render: RenderOutput


def _check_finite(i: int, name: str, value: float) -> None:
    if not math.isfinite(value):
        raise DivergenceError(i, name, value)


def _masks_for(hand: CapsuleHand, cameras: Sequence[Camera], masks: Optional[Sequence[np.ndarray]]):
    if masks is None:
        return [silhouette_mask(hand, cam) for cam in cameras]
    if len(masks) != len(cameras):
        raise ShapeError(f"Got {len(masks)} masks for {len(cameras)} cameras")
    return list(masks)


def _silhouette_errors(
    fld: VoxelField,
    cameras: Sequence[Camera],
    masks: Sequence[np.ndarray],
    n_samples: int,
    range_floor: float,
) -> List[torch.Tensor]:
    """Per-view mean squared difference of normalized opacity and mask."""
    maps = opacity_projector(cameras, fld.resolution, fld.extent, n_samples).opacity(fld)
    errors = []
    for opacity, mask in zip(maps, masks):
        diff = normalize_opacity(opacity, range_floor) - torch.from_numpy(np.asarray(mask, dtype=np.float64))
        errors.append((diff ** 2).mean())
    return errors


# -------------------------------------------------------------------
# Stage 1
# -------------------------------------------------------------------


def init_stage(
    fld: VoxelField,
    hand: CapsuleHand,
    cameras: Sequence[Camera],
    iters: int = 2000,
    lr: float = 5e-2,
    n_samples: int = 64,
    range_floor: float = 0.1,
    masks: Optional[Sequence[np.ndarray]] = None,
    adam: Optional[AdamSettings] = None,
    timing: bool = False,
    log_every: int = 100,
    progress: bool = False,
) -> StageReport:
    """
    Fit the field's opacity to the hand silhouettes (mean over cameras
    of the per-pixel squared error). The field is updated in place.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if not cameras:
        raise ValueError("init_stage needs at least one camera")
    masks = _masks_for(hand, cameras, masks)
    base = adam or AdamSettings()
    optimizer = AdamSettings(lr=lr, betas=base.betas, eps=base.eps).build(fld)

    report = StageReport(stage="init")
    start = time.perf_counter()
    for i in tqdm(range(iters), desc="stage 1", unit="it", disable=not progress):
        optimizer.zero_grad(set_to_none=True)
        loss = torch.stack(_silhouette_errors(fld, cameras, masks, n_samples, range_floor)).mean()
        value = float(loss.detach())
        _check_finite(i, "loss_init", value)
        loss.backward()
        optimizer.step()
        report.records.append(
            IterationRecord(i, 0, 0.0, 0.0, 0.0, 0.0, 0.0, value, time.perf_counter() - start if timing else 0.0)
        )
        if (i + 1) % log_every == 0:
            logger.info("stage 1 iter %d/%d silhouette mse=%.6f", i + 1, iters, value)

    with torch.no_grad():
        final = torch.stack(_silhouette_errors(fld, cameras, masks, n_samples, range_floor)).mean()
    report.final_loss = float(final)
    report.optimizer_state = OptimizerState.from_torch(optimizer, fld)
    logger.info("stage 1 done: final silhouette mse=%.6f", report.final_loss)
    return report


# -------------------------------------------------------------------
# Stage 2 loss terms
# -------------------------------------------------------------------


def condition_key_for(hand: CapsuleHand, camera: Camera) -> ConditionKey:
    return ConditionKey(camera.view_label, hand.label, skeleton_hash(project_keypoints(hand, camera)))


def sds_step(
    fld: VoxelField,
    landscape: ViewLandscape,
    hand: CapsuleHand,
    camera: Camera,
    i: int,
    plan: AnnealingPlan,
    rng: np.random.Generator,
    n_samples: int = 64,
    condition_on_skeleton: bool = True,
    render_rng: Optional[np.random.Generator] = None,
    eps: Optional[np.ndarray] = None,
) -> SdsStep:
    """
    Score distillation for one camera at the annealed timestep of iteration i.
    A fixed eps replaces the draw from rng.

    The surrogate 0.5 * ||z - stopgrad(z - g)||^2 with g = eps_hat - eps
    has value 0.5 * ||g||^2 and gradient g * dz/dtheta.
    """
    render = render_view(fld, camera, n_samples, render_rng, track_grad=True)
    z = landscape.codec.encode(render.color_image)
    z_np = z.detach().numpy().copy()

    t = timestep_at(plan, i)
    if eps is None:
        eps = rng.standard_normal(z_np.shape[0])
    elif np.shape(eps) != z_np.shape:
        raise ShapeError(f"eps has shape {np.shape(eps)}, latent has {z_np.shape}")
    eps = np.asarray(eps, dtype=np.float64)
    z_t = forward_noise(z_np, t, eps, landscape.schedule)
    key = condition_key_for(hand, camera) if condition_on_skeleton else None
    eps_hat = predict_noise(z_t, landscape.bucket(camera.view_label), t, landscape.schedule, key)

    g = eps_hat - eps
    target = torch.from_numpy(z_np - g)
    surrogate = 0.5 * ((z - target) ** 2).sum()
    return SdsStep(
        surrogate=surrogate,
        value=float(0.5 * g @ g),
        t=t,
        eps=eps,
        eps_hat=eps_hat,
        z=z_np,
        z_t=z_t,
        key=key,
        render=render,
    )


def chs_loss(
    fld: VoxelField,
    hand: CapsuleHand,
    cameras: Sequence[Camera],
    t: float,
    plan: AnnealingPlan,
    n_samples: int = 64,
    masks: Optional[Sequence[np.ndarray]] = None,
    range_floor: float = 0.1,
) -> torch.Tensor:
    """lambda_t * mean over views of the per-view RMS of (normalized opacity - mask)."""
    if not cameras:
        raise ValueError("chs_loss needs at least one camera")
    masks = _masks_for(hand, cameras, masks)
    rms = []
    for mse in _silhouette_errors(fld, cameras, masks, n_samples, range_floor):
        positive = mse > 0
        safe = torch.where(positive, mse, torch.ones_like(mse))
        rms.append(torch.where(positive, torch.sqrt(safe), torch.zeros_like(mse)))
    return lambda_chs_at_t(plan, t) * torch.stack(rms).mean()


def img_loss(render: RenderOutput, target: np.ndarray) -> torch.Tensor:
    """Mean squared error between the rendered color image and a constant target image."""
    tgt = torch.from_numpy(np.asarray(target, dtype=np.float64))
    if tuple(tgt.shape) != tuple(render.color_image.shape):
        raise ShapeError(f"Target shape {tuple(tgt.shape)} != image shape {tuple(render.color_image.shape)}")
    return ((render.color_image - tgt) ** 2).mean()


def zvar_loss(render: RenderOutput, threshold: float = 0.5) -> torch.Tensor:
    """Mean depth variance over foreground pixels (opacity > threshold); 0 when there are none."""
    fg = render.opacity_map.detach() > threshold
    if not bool(fg.any()):
        return torch.zeros((), dtype=DTYPE)
    return render.depth_variance[fg].mean()


# -------------------------------------------------------------------
# Stage 2
# -------------------------------------------------------------------


def optimize_stage2(
    fld: VoxelField,
    landscape: ViewLandscape,
    hand: CapsuleHand,
    cameras: Sequence[Camera],
    plan: AnnealingPlan,
    weights: LossWeights,
    rng: np.random.Generator,
    toggles: StageToggles = StageToggles(),
    adam: AdamSettings = AdamSettings(),
    n_samples: int = 64,
    range_floor: float = 0.1,
    masks: Optional[Sequence[np.ndarray]] = None,
    jitter: bool = False,
    timing: bool = False,
    log_every: int = 100,
    progress: bool = False,
) -> StageReport:
    """
    plan.i_max iterations of the combined objective, cameras visited
    round-robin. The field is updated in place.
    """
    if not cameras:
        raise ValueError("optimize_stage2 needs at least one camera")
    if toggles.chs_loss:
        masks = _masks_for(hand, cameras, masks)
    optimizer = adam.build(fld)
    render_rng = np.random.default_rng(rng.integers(2 ** 63)) if jitter else None

    report = StageReport(stage="sds")
    start = time.perf_counter()
    for i in tqdm(range(plan.i_max), desc="stage 2", unit="it", disable=not progress):
        camera = cameras[i % len(cameras)]
        t = timestep_at(plan, i)
        lam = lambda_chs_at_iter(plan, i)
        terms: Dict[str, torch.Tensor] = {}
        values = {"loss_sds": 0.0, "loss_chs": 0.0, "loss_img": 0.0, "loss_zvar": 0.0}

        render = None
        if toggles.sds or toggles.img_loss:
            step = sds_step(
                fld, landscape, hand, camera, i, plan, rng, n_samples, toggles.skeleton_condition, render_rng
            )
            render = step.render
            if toggles.sds:
                terms["loss_sds"] = weights.lambda_sds * step.surrogate
                values["loss_sds"] = step.value
            if toggles.img_loss:
                z0_hat = denoised_target(step.z_t, step.eps_hat, t, landscape.schedule)
                l_img = img_loss(render, landscape.codec.decode(z0_hat))
                terms["loss_img"] = weights.lambda_img * l_img
                values["loss_img"] = float(l_img.detach())
        if toggles.zvar_loss:
            if render is None:
                render = render_view(fld, camera, n_samples, render_rng, track_grad=True)
            l_zvar = zvar_loss(render)
            terms["loss_zvar"] = weights.lambda_zvar * l_zvar
            values["loss_zvar"] = float(l_zvar.detach())
        if toggles.chs_loss:
            l_chs = chs_loss(
                fld, hand, cameras, timestep_at_unrounded(plan, i), plan, n_samples, masks, range_floor
            )
            terms["loss_chs"] = l_chs
            values["loss_chs"] = float(l_chs.detach())

        for name, value in values.items():
            _check_finite(i, name, value)
        total_value = sum(float(term.detach()) for term in terms.values())
        _check_finite(i, "loss_total", total_value)

        optimizer.zero_grad(set_to_none=True)
        graph_terms = [term for term in terms.values() if term.requires_grad]
        if graph_terms:
            torch.stack(graph_terms).sum().backward()
            optimizer.step()

        report.records.append(
            IterationRecord(
                iter=i,
                t=t,
                lambda_chs=lam,
                loss_total=total_value,
                seconds=time.perf_counter() - start if timing else 0.0,
                **values,
            )
        )
        if (i + 1) % log_every == 0:
            logger.info(
                "stage 2 iter %d/%d t=%d total=%.6f sds=%.4f chs=%.4f",
                i + 1,
                plan.i_max,
                t,
                total_value,
                values["loss_sds"],
                values["loss_chs"],
            )

    report.final_loss = report.records[-1].loss_total if report.records else None
    report.optimizer_state = OptimizerState.from_torch(optimizer, fld)
    return report

from __future__ import annotations

"""
Experiment harness.

Turns an ExperimentConfig into concrete objects (schedule, codec,
cameras, hands, mode landscape), runs the two optimization stages, and
implements the analyses built on top of them:

- run: one full experiment, with its artifact set and checksum;
- mode_consistency: nearest-mode labels of the final views and the
  fraction agreeing with the majority (the operational measure of view
  consistency used throughout this repo);
- gradient_field_dump / gradient_coherence: SDS latent gradients of a
  spherical vs a shape-prior initialization across timesteps and draws;
- theorem_family_study: expected initial score along a sphere -> hand
  family of fields;
- ablation_suite: the six component rows over several seeds.
"""

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.stats import spearmanr

from . import artifacts
from .config import ExperimentConfig, dump_experiment_config, parse_experiment_config
from .errors import ConfigurationError
from .hand_proxy import CapsuleHand, PoseParams, articulate, build_rest_hand, silhouette_mask, voxelize
from .render import (
    RAW_DENSITY_FLOOR,
    Camera,
    VoxelField,
    camera_ring,
    normalize_opacity,
    opacity_projector,
    render_view,
    shade_normals,
)
from .schedule import AnnealingPlan, NoiseSchedule, alpha_bar, forward_noise
from .score_model import (
    GaussianMode,
    LatentCodec,
    ViewLandscape,
    expected_init_score,
    noised_mixture_score,
    predict_noise,
    restrict,
)
from .sds_engine import (
    STAGE_CSV_HEADER,
    AdamSettings,
    LossWeights,
    StageReport,
    StageToggles,
    condition_key_for,
    init_stage,
    optimize_stage2,
)

logger = logging.getLogger(__name__)

# (skeleton_condition, shape_init, chs_loss), in the order of the ablation table.
ABLATION_ROWS: Tuple[Tuple[bool, bool, bool], ...] = (
    (False, False, False),
    (True, False, False),
    (True, True, False),
    (False, True, True),
    (True, False, True),
    (True, True, True),
)

ABLATION_CSV_HEADER = (
    "skeleton_condition",
    "shape_init",
    "chs_loss",
    "n_seeds",
    "consistency_mean",
    "consistency_sd",
    "final_chs_mean",
    "final_chs_sd",
)


# -------------------------------------------------------------------
# Builders
# -------------------------------------------------------------------


def build_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    s = cfg.schedule
    return NoiseSchedule.linear(s.num_steps, s.beta_start, s.beta_end)


def build_plan(cfg: ExperimentConfig, i_max: int) -> AnnealingPlan:
    s = cfg.schedule
    return AnnealingPlan(i_max, s.t_max, s.t_min, s.lambda_max_chs, s.lambda_min_chs)


def build_codec(cfg: ExperimentConfig) -> LatentCodec:
    return LatentCodec(image_size=cfg.cameras.image_size, latent_size=cfg.codec.latent_size)


def build_cameras(cfg: ExperimentConfig) -> List[Camera]:
    c = cfg.cameras
    return camera_ring(c.count, c.radius, c.elevations, c.fov, c.image_size)


def build_pose(cfg: ExperimentConfig) -> PoseParams:
    h = cfg.hand
    return PoseParams(tuple(h.curl), tuple(h.spread), tuple(h.wrist_rotation), tuple(h.translation))


def build_hands(cfg: ExperimentConfig) -> Dict[str, CapsuleHand]:
    """Every candidate hand of the landscape, articulated with the configured pose."""
    pose = build_pose(cfg)
    return {
        spec.label: articulate(build_rest_hand(spec.label, spec.missing_fingers, spec.palette), pose)
        for spec in cfg.landscape.modes
    }


def reference_field(cfg: ExperimentConfig, hand: CapsuleHand) -> VoxelField:
    f = cfg.field
    return voxelize(hand, f.resolution, f.extent, f.reference_density, f.density_scale)


def initial_sphere(cfg: ExperimentConfig) -> VoxelField:
    f = cfg.field
    return VoxelField.sphere(f.resolution, f.extent, f.init_density, f.init_radius_fraction, f.density_scale)


def _render_color(fld: VoxelField, camera: Camera, n_samples: int) -> np.ndarray:
    return render_view(fld, camera, n_samples).to_numpy()["color_image"]


def build_landscape(
    cfg: ExperimentConfig,
    cameras: Optional[Sequence[Camera]] = None,
    hands: Optional[Dict[str, CapsuleHand]] = None,
) -> ViewLandscape:
    """
    One mode per (candidate hand, camera) in the camera's view bucket.

    The mode is the encoded render of the voxelized hand and carries the
    projected-skeleton hash of that hand from that camera. Inside a
    bucket each hand's weight is split evenly over the bucket's cameras.
    """
    cameras = list(cameras) if cameras is not None else build_cameras(cfg)
    hands = hands if hands is not None else build_hands(cfg)
    codec = build_codec(cfg)
    schedule = build_schedule(cfg)
    all_labels = [spec.label for spec in cfg.landscape.modes]
    spec_weight = {spec.label: spec.weight for spec in cfg.landscape.modes}

    per_bucket: Dict[str, List[Camera]] = {}
    for cam in cameras:
        per_bucket.setdefault(cam.view_label, []).append(cam)

    refs = {label: reference_field(cfg, hands[label]) for label in all_labels}
    buckets: Dict[str, List[GaussianMode]] = {}
    for bucket_label, bucket_cams in per_bucket.items():
        labels = cfg.landscape.buckets.get(bucket_label, all_labels)
        if not labels:
            raise ConfigurationError(f"Landscape bucket {bucket_label!r} is configured with no modes")
        total = sum(spec_weight[label] for label in labels)
        modes: List[GaussianMode] = []
        for label in labels:
            for cam in bucket_cams:
                mu = codec.encode(_render_color(refs[label], cam, cfg.cameras.n_samples))
                modes.append(
                    GaussianMode(
                        mu=mu,
                        weight=spec_weight[label] / total / len(bucket_cams),
                        label=label,
                        skeleton_hash=condition_key_for(hands[label], cam).skeleton_hash,
                    )
                )
        buckets[bucket_label] = modes
    logger.debug("Built landscape: %s", {k: len(v) for k, v in buckets.items()})
    return ViewLandscape(buckets={k: tuple(v) for k, v in buckets.items()}, codec=codec, schedule=schedule)


def load_field(path: Path, density_scale: float = 10.0) -> VoxelField:
    """Field snapshot as an optimizable field (empty nodes at the raw floor)."""
    density, color, extent = artifacts.decode_field(Path(path).read_bytes())
    return VoxelField.from_values(density, color, extent, density_scale, raw_floor=RAW_DENSITY_FLOOR)


def field_snapshot(fld: VoxelField) -> bytes:
    return artifacts.encode_field(fld.density_numpy(), fld.color_numpy(), fld.extent)


# -------------------------------------------------------------------
# Mode assignment
# -------------------------------------------------------------------


@dataclass(frozen=True)
class ModeAssignment:
    """Nearest clean mode per view and the fraction of views agreeing with the majority."""

    view_labels: Tuple[str, ...]
    mode_labels: Tuple[str, ...]
    distances: Tuple[float, ...]
    majority: str
    consistency: float

    def csv_bytes(self) -> bytes:
        rows = [
            (k, view, mode, dist, int(mode == self.majority))
            for k, (view, mode, dist) in enumerate(zip(self.view_labels, self.mode_labels, self.distances))
        ]
        return artifacts.encode_csv(("view", "view_label", "mode_label", "distance", "agrees"), rows)


def assign_modes(
    images: Sequence[np.ndarray], view_labels: Sequence[str], landscape: ViewLandscape
) -> ModeAssignment:
    if len(images) < 2:
        raise ConfigurationError(f"Mode consistency needs at least 2 views, got {len(images)}")
    if len(images) != len(view_labels):
        raise ConfigurationError("Every image needs a view label")
    labels: List[str] = []
    distances: List[float] = []
    for image, view_label in zip(images, view_labels):
        z = landscape.codec.encode(image)
        bucket = landscape.bucket(view_label)
        d = [float(np.linalg.norm(z - m.mu)) for m in bucket]
        k = int(np.argmin(d))
        labels.append(bucket[k].label)
        distances.append(d[k])
    counts = Counter(labels)
    best = max(counts.values())
    majority = sorted(label for label, c in counts.items() if c == best)[0]
    return ModeAssignment(
        view_labels=tuple(view_labels),
        mode_labels=tuple(labels),
        distances=tuple(distances),
        majority=majority,
        consistency=best / len(labels),
    )


# -------------------------------------------------------------------
# Full run
# -------------------------------------------------------------------


@dataclass(eq=False)
class RunReport:
    config: ExperimentConfig
    stage1: Optional[StageReport]
    stage2: StageReport
    field: VoxelField
    cameras: List[Camera]
    images: List[np.ndarray]
    assignment: ModeAssignment
    final_chs: float
    files: Dict[str, bytes] = field(repr=False, default_factory=dict)
    checksum: str = ""
    run_dir: Optional[Path] = None

    @property
    def consistency(self) -> float:
        return self.assignment.consistency


def mode_consistency(report: RunReport, landscape: ViewLandscape) -> ModeAssignment:
    return assign_modes(report.images, [c.view_label for c in report.cameras], landscape)


def _silhouette_rms(fld: VoxelField, cameras, masks, n_samples: int, floor: float) -> float:
    """Mean over views of the RMS normalized-opacity error: the unweighted CHS term."""
    values = []
    with torch.no_grad():
        maps = opacity_projector(cameras, fld.resolution, fld.extent, n_samples).opacity(fld)
        for opacity, mask in zip(maps, masks):
            o = normalize_opacity(opacity, floor).numpy()
            values.append(float(np.sqrt(np.mean((o - mask) ** 2))))
    return float(np.mean(values))


def _stage_csv(report: Optional[StageReport]) -> bytes:
    return artifacts.encode_csv(STAGE_CSV_HEADER, report.rows() if report is not None else [])


def run(cfg: ExperimentConfig, out_dir: Optional[Path] = None, progress: bool = False) -> RunReport:
    """
    Stage 1 (or the init cache) when shape_init is on, otherwise the
    spherical init; then stage 2 with the configured toggles. Artifacts
    are assembled in memory, checksummed, and written when out_dir is set.
    """
    logger.info("Run seed=%d toggles=%s", cfg.seed, cfg.toggles.model_dump())
    rng = np.random.default_rng(cfg.seed)
    cameras = build_cameras(cfg)
    hands = build_hands(cfg)
    prompt = hands[cfg.hand.label]
    landscape = build_landscape(cfg, cameras, hands)
    masks = [silhouette_mask(prompt, cam) for cam in cameras]
    n_samples = cfg.cameras.n_samples
    floor = cfg.field.opacity_range_floor
    adam = AdamSettings(cfg.optim.lr, tuple(cfg.optim.betas), cfg.optim.eps)

    fld = initial_sphere(cfg)
    stage1: Optional[StageReport] = None
    if cfg.toggles.shape_init:
        if cfg.optim.init_cache:
            fld = load_field(Path(cfg.optim.init_cache), cfg.field.density_scale)
            if fld.resolution != cfg.field.resolution or abs(fld.extent - cfg.field.extent) > 1e-12:
                raise ConfigurationError(
                    f"Init cache {cfg.optim.init_cache} has resolution {fld.resolution} / extent "
                    f"{fld.extent}, config expects {cfg.field.resolution} / {cfg.field.extent}"
                )
            logger.info("Loaded stage-1 field from %s", cfg.optim.init_cache)
        elif cfg.optim.stage1_iters > 0:
            stage1 = init_stage(
                fld,
                prompt,
                cameras,
                cfg.optim.stage1_iters,
                lr=cfg.optim.stage1_lr,
                n_samples=n_samples,
                range_floor=floor,
                masks=masks,
                adam=adam,
                timing=cfg.report.timing,
                log_every=cfg.optim.log_every,
                progress=progress,
            )

    stage2 = StageReport(stage="sds")
    if cfg.optim.stage2_iters > 0:
        stage2 = optimize_stage2(
            fld,
            landscape,
            prompt,
            cameras,
            build_plan(cfg, cfg.optim.stage2_iters),
            LossWeights(cfg.loss.lambda_sds, cfg.loss.lambda_img, cfg.loss.lambda_zvar),
            rng,
            toggles=StageToggles(
                sds=cfg.toggles.sds,
                chs_loss=cfg.toggles.chs_loss,
                img_loss=cfg.toggles.img_loss,
                zvar_loss=cfg.toggles.zvar_loss,
                skeleton_condition=cfg.toggles.skeleton_condition,
            ),
            adam=adam,
            n_samples=n_samples,
            range_floor=floor,
            masks=masks,
            jitter=cfg.cameras.jitter,
            timing=cfg.report.timing,
            log_every=cfg.optim.log_every,
            progress=progress,
        )

    renders = [render_view(fld, cam, n_samples) for cam in cameras]
    images = [r.to_numpy()["color_image"] for r in renders]
    assignment = assign_modes(images, [c.view_label for c in cameras], landscape)
    final_chs = _silhouette_rms(fld, cameras, masks, n_samples, floor)

    files: Dict[str, bytes] = {
        "config.yaml": dump_experiment_config(cfg).encode("utf-8"),
        "stage1.csv": _stage_csv(stage1),
        "stage2.csv": _stage_csv(stage2),
        "field.bin": field_snapshot(fld),
        "skeleton.txt": prompt.skeleton.to_text().encode("ascii"),
        "mode_consistency.csv": assignment.csv_bytes(),
        "summary.csv": artifacts.encode_csv(
            ("metric", "value"),
            [
                ("mode_consistency_nearest_mode_agreement", assignment.consistency),
                ("majority_mode", assignment.majority),
                ("final_silhouette_rms", final_chs),
            ],
        ),
    }
    for k, (cam, out) in enumerate(zip(cameras, renders)):
        arrays = out.to_numpy()
        files[f"views/view_{k:02d}.ppm"] = artifacts.encode_ppm(arrays["color_image"])
        files[f"views/opacity_{k:02d}.pgm"] = artifacts.encode_pgm(arrays["opacity_map"])
        files[f"views/depth_{k:02d}.bin"] = artifacts.encode_depth(arrays["depth_map"])
        files[f"views/mask_{k:02d}.pgm"] = artifacts.encode_pgm(masks[k])
        if cfg.report.snapshots:
            files[f"views/normals_{k:02d}.pgm"] = artifacts.encode_pgm(shade_normals(fld, cam, out))

    report = RunReport(
        config=cfg,
        stage1=stage1,
        stage2=stage2,
        field=fld,
        cameras=cameras,
        images=images,
        assignment=assignment,
        final_chs=final_chs,
        files=files,
        checksum=artifacts.checksum(files),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        artifacts.write_artifacts(out_dir, files)
        artifacts.write_atomic(out_dir / "checksum.sha256", (report.checksum + "\n").encode("ascii"))
        report.run_dir = out_dir
        logger.info("Run artifacts written to %s", out_dir)
    logger.info(
        "Run done: consistency=%.3f majority=%s checksum=%s",
        assignment.consistency,
        assignment.majority,
        report.checksum[:12],
    )
    return report


def load_run(run_dir: Path) -> Tuple[ExperimentConfig, VoxelField]:
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.yaml"
    field_path = run_dir / "field.bin"
    if not cfg_path.exists() or not field_path.exists():
        raise ConfigurationError(f"{run_dir} is not a run directory (config.yaml / field.bin missing)")
    cfg = parse_experiment_config(cfg_path.read_text(encoding="utf-8"))
    return cfg, load_field(field_path, cfg.field.density_scale)


def consistency_of_run_dir(run_dir: Path) -> ModeAssignment:
    """Re-render a stored field from every camera and assign modes."""
    cfg, fld = load_run(run_dir)
    cameras = build_cameras(cfg)
    landscape = build_landscape(cfg, cameras)
    images = [_render_color(fld, cam, cfg.cameras.n_samples) for cam in cameras]
    return assign_modes(images, [c.view_label for c in cameras], landscape)


# -------------------------------------------------------------------
# Gradient fields
# -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GradientRow:
    t: int
    init: str
    draw: int
    alpha_bar: float
    sds_norm: float
    score_norm: float
    gradient: np.ndarray


def gradient_field_dump(
    cfg: ExperimentConfig,
    t_values: Optional[Sequence[int]] = None,
    eps_draws: Optional[int] = None,
    zero_noise: bool = False,
    out_path: Optional[Path] = None,
    condition: Optional[bool] = None,
) -> List[GradientRow]:
    """
    SDS latent gradients eps_hat - eps at the encoded render of two
    initializations (spherical "random" and voxelized "shape" prior)
    seen from one camera, for every timestep and noise draw.

    condition overrides toggles.skeleton_condition. Without it the noise
    prediction sees every mode of the camera's bucket, so a shape init
    sitting on one mode is still pulled toward the others.
    """
    t_values = list(t_values) if t_values is not None else list(cfg.gradfield.t_values)
    draws = eps_draws if eps_draws is not None else cfg.gradfield.draws
    cameras = build_cameras(cfg)
    camera = cameras[cfg.gradfield.camera]
    hands = build_hands(cfg)
    prompt = hands[cfg.hand.label]
    landscape = build_landscape(cfg, cameras, hands)
    schedule = landscape.schedule
    bucket = landscape.bucket(camera.view_label)
    if condition is None:
        condition = cfg.toggles.skeleton_condition
    key = condition_key_for(prompt, camera) if condition else None
    score_modes = restrict(bucket, key) if key is not None else bucket

    rng = np.random.default_rng(cfg.seed)
    inits = {"random": initial_sphere(cfg), "shape": reference_field(cfg, prompt)}
    rows: List[GradientRow] = []
    for init_name, fld in inits.items():
        z = landscape.codec.encode(_render_color(fld, camera, cfg.cameras.n_samples))
        for t in t_values:
            a = alpha_bar(schedule, t)
            for d in range(draws):
                eps = np.zeros_like(z) if zero_noise else rng.standard_normal(z.shape[0])
                z_t = forward_noise(z, t, eps, schedule)
                g = predict_noise(z_t, bucket, t, schedule, key) - eps
                score = noised_mixture_score(z_t, score_modes, t, schedule)
                rows.append(
                    GradientRow(t, init_name, d, a, float(np.linalg.norm(g)), float(np.linalg.norm(score)), g)
                )

    if out_path is not None:
        dim = landscape.codec.dim
        header = ["t", "init", "draw", "alpha_bar", "sds_norm", "score_norm"] + [f"g{k}" for k in range(dim)]
        data = artifacts.encode_csv(
            header,
            ([r.t, r.init, r.draw, r.alpha_bar, r.sds_norm, r.score_norm, *r.gradient.tolist()] for r in rows),
        )
        artifacts.write_atomic(Path(out_path), data)
        logger.info("Gradient field (%d rows) written to %s", len(rows), out_path)
    return rows


def gradient_coherence(
    rows: Sequence[GradientRow],
    rel_tol: float = 1e-9,
    abs_tol: float = 1e-12,
) -> Dict[Tuple[int, str], float]:
    """
    Mean pairwise cosine similarity of the gradients of every (t, init) group.

    A gradient whose norm is at most max(abs_tol, rel_tol * largest norm
    seen at the same t) has no direction and is left out. A group with
    fewer than two directed gradients counts as fully coherent (1.0).
    """
    scale: Dict[int, float] = {}
    for r in rows:
        scale[r.t] = max(scale.get(r.t, 0.0), float(np.linalg.norm(r.gradient)))
    groups: Dict[Tuple[int, str], List[np.ndarray]] = {}
    for r in rows:
        units = groups.setdefault((r.t, r.init), [])
        g = np.asarray(r.gradient, dtype=np.float64)
        norm = float(np.linalg.norm(g))
        if norm > max(abs_tol, rel_tol * scale[r.t]):
            units.append(g / norm)
    out: Dict[Tuple[int, str], float] = {}
    for key, units in groups.items():
        if len(units) < 2:
            out[key] = 1.0
            continue
        u = np.stack(units)
        cos = u @ u.T
        out[key] = float(cos[np.triu_indices(len(units), k=1)].mean())
    return out


# -------------------------------------------------------------------
# Expected initial score along an init family
# -------------------------------------------------------------------


def monotonicity_spearman(x: Sequence[float], y: Sequence[float]) -> float:
    return float(spearmanr(x, y).correlation)


@dataclass(frozen=True)
class FamilyStudy:
    t: int
    blend: Tuple[float, ...]
    gaps: Tuple[float, ...]
    formula: Tuple[float, ...]
    monte_carlo: Tuple[float, ...]
    spearman: float


def theorem_family_study(
    cfg: ExperimentConfig,
    n_points: int = 10,
    n_eps: int = 1000,
    t: Optional[int] = None,
    variant: str = "exact",
) -> FamilyStudy:
    """
    Expected score of fields blending the spherical init (s = 0) into the
    voxelized prompted hand (s = 1), against the hand's own renders.
    Every point reuses the same noise draws.
    """
    t = cfg.schedule.t_min if t is None else t
    cameras = build_cameras(cfg)
    prompt = build_hands(cfg)[cfg.hand.label]
    codec = build_codec(cfg)
    schedule = build_schedule(cfg)
    n_samples = cfg.cameras.n_samples

    target = reference_field(cfg, prompt)
    sphere = initial_sphere(cfg)
    latent_views = [_render_color(target, cam, n_samples) for cam in cameras]
    z_lat = np.stack([codec.encode(v) for v in latent_views])

    blends = np.linspace(0.0, 1.0, n_points)
    gaps, formula, mc = [], [], []
    for s in blends:
        fld = sphere.blend(target, float(s))
        init_views = [_render_color(fld, cam, n_samples) for cam in cameras]
        z_init = np.stack([codec.encode(v) for v in init_views])
        gaps.append(float(np.linalg.norm((z_init - z_lat).mean(axis=0))))
        f, m = expected_init_score(
            init_views,
            latent_views,
            t,
            n_eps,
            codec,
            schedule,
            np.random.default_rng(cfg.seed),
            variant=variant,
        )
        formula.append(f)
        mc.append(m)
    rho = monotonicity_spearman(gaps, formula)
    logger.info("Init family at t=%d: spearman(gap, score)=%.3f", t, rho)
    return FamilyStudy(t, tuple(blends.tolist()), tuple(gaps), tuple(formula), tuple(mc), rho)


# -------------------------------------------------------------------
# Ablation
# -------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    toggles: Tuple[bool, bool, bool]
    seeds: Tuple[int, ...]
    consistency: Tuple[float, ...]
    final_chs: Tuple[float, ...]

    @property
    def consistency_mean(self) -> float:
        return float(np.mean(self.consistency))

    @property
    def consistency_sd(self) -> float:
        return float(np.std(self.consistency, ddof=1))

    @property
    def final_chs_mean(self) -> float:
        return float(np.mean(self.final_chs))

    @property
    def final_chs_sd(self) -> float:
        return float(np.std(self.final_chs, ddof=1))


@dataclass(frozen=True)
class AblationTable:
    rows: Tuple[AblationRow, ...]

    def row(self, toggles: Tuple[bool, bool, bool]) -> AblationRow:
        for r in self.rows:
            if r.toggles == toggles:
                return r
        raise KeyError(toggles)

    def csv_bytes(self) -> bytes:
        return artifacts.encode_csv(
            ABLATION_CSV_HEADER,
            [
                (*r.toggles, len(r.seeds), r.consistency_mean, r.consistency_sd, r.final_chs_mean, r.final_chs_sd)
                for r in self.rows
            ],
        )


def ablation_config(base: ExperimentConfig, toggles: Tuple[bool, bool, bool], seed: int) -> ExperimentConfig:
    cn, init, chs = toggles
    return base.with_updates(
        seed=seed, toggles={"skeleton_condition": cn, "shape_init": init, "chs_loss": chs}
    )


def _ablation_arm(cfg: ExperimentConfig) -> Tuple[float, float]:
    report = run(cfg)
    return report.consistency, report.final_chs


def ablation_suite(
    base: ExperimentConfig,
    seeds: Sequence[int],
    workers: int = 1,
    out_path: Optional[Path] = None,
) -> AblationTable:
    """Every ablation row for every seed; mean and sample sd per row."""
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise ConfigurationError(f"The ablation suite needs at least 3 seeds, got {len(seeds)}")

    arms = [(row, seed) for row in ABLATION_ROWS for seed in seeds]
    results: Dict[int, Tuple[float, float]] = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            fut_to_idx = {
                executor.submit(_ablation_arm, ablation_config(base, row, seed)): idx
                for idx, (row, seed) in enumerate(arms)
            }
            for fut in as_completed(fut_to_idx):
                results[fut_to_idx[fut]] = fut.result()
    else:
        for idx, (row, seed) in enumerate(arms):
            results[idx] = _ablation_arm(ablation_config(base, row, seed))
            logger.info("Ablation arm %d/%d toggles=%s seed=%d done", idx + 1, len(arms), row, seed)

    table_rows = []
    for k, row in enumerate(ABLATION_ROWS):
        chunk = [results[k * len(seeds) + j] for j in range(len(seeds))]
        table_rows.append(
            AblationRow(
                toggles=row,
                seeds=tuple(seeds),
                consistency=tuple(c for c, _ in chunk),
                final_chs=tuple(h for _, h in chunk),
            )
        )
    table = AblationTable(tuple(table_rows))
    if out_path is not None:
        artifacts.write_atomic(Path(out_path), table.csv_bytes())
        logger.info("Ablation table written to %s", out_path)
    return table

from __future__ import annotations

"""
Build a reusable stage-1 field (the hand-shape initialization) once.

The initialization depends only on the prompted hand, its pose, the
camera ring and the field geometry, never on the mode landscape, so the
same snapshot can seed any number of stage-2 runs through
`optim.init_cache` in the experiment config.

High-level steps:
1. Load the experiment config.
2. Build the prompted hand and the camera ring, compute silhouettes.
3. Fit the spherical init to the silhouettes (stage 1).
4. Save the field snapshot and the stage-1 loss curve next to it.
"""

import argparse
import logging
from pathlib import Path

from src import artifacts, lab
from src.config import DEFAULT_CONFIG_PATH, load_experiment_config
from src.hand_proxy import silhouette_mask
from src.sds_engine import STAGE_CSV_HEADER, AdamSettings, init_stage

logger = logging.getLogger("build_init_cache")


def build_init_cache(config_path: Path, out_path: Path, iters: int | None = None) -> float:
    """Run stage 1 for the config and write the snapshot; returns the final silhouette MSE."""
    cfg = load_experiment_config(config_path)
    iters = cfg.optim.stage1_iters if iters is None else iters
    if iters < 1:
        raise ValueError(f"Stage 1 needs at least one iteration, got {iters}")

    cameras = lab.build_cameras(cfg)
    hand = lab.build_hands(cfg)[cfg.hand.label]
    logger.info("Computing %d silhouettes of %r", len(cameras), hand.label)
    masks = [silhouette_mask(hand, cam) for cam in cameras]

    fld = lab.initial_sphere(cfg)
    logger.info("Fitting %d^3 field for %d iterations", fld.resolution, iters)
    report = init_stage(
        fld,
        hand,
        cameras,
        iters,
        lr=cfg.optim.stage1_lr,
        n_samples=cfg.cameras.n_samples,
        range_floor=cfg.field.opacity_range_floor,
        masks=masks,
        adam=AdamSettings(cfg.optim.lr, tuple(cfg.optim.betas), cfg.optim.eps),
        log_every=cfg.optim.log_every,
        progress=True,
    )

    logger.info("Saving field snapshot to: %s", out_path)
    artifacts.write_atomic(out_path, lab.field_snapshot(fld))
    curve_path = out_path.with_suffix(".stage1.csv")
    logger.info("Saving stage-1 curve to: %s", curve_path)
    artifacts.write_atomic(curve_path, artifacts.encode_csv(STAGE_CSV_HEADER, report.rows()))
    logger.info("Done. Final silhouette mse=%.6f", report.final_loss)
    return float(report.final_loss)


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Build a reusable stage-1 field snapshot.")
    parser.add_argument(
        "--config",
        type=str,
        default=str(DEFAULT_CONFIG_PATH),
        help="Experiment YAML config (default: configs/default.yaml).",
    )
    parser.add_argument(
        "--out",
        type=str,
        required=True,
        help="Path of the field snapshot to write (e.g. runs/init_cache.bin).",
    )
    parser.add_argument(
        "--iters",
        type=int,
        default=None,
        help="Stage-1 iterations (default: optim.stage1_iters from the config).",
    )
    return parser.parse_args()


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="[%(levelname)s] %(message)s")
    args = parse_args()
    config_path = Path(args.config).resolve()
    if not config_path.exists():
        raise FileNotFoundError(f"Config file does not exist: {config_path}")

    build_init_cache(config_path, Path(args.out).resolve(), args.iters)


if __name__ == "__main__":
    main()

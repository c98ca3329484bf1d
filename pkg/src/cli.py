from __future__ import annotations

"""
Command-line entry point for the SDS hand lab.

Subcommands:
- `run <config>`: full experiment (stage 1 + stage 2), artifacts in the run dir;
- `gradfield <config> --t 50,600 --draws 20`: SDS gradient field CSV;
- `ablate <config> --seeds 1..10`: ablation table over seeds;
- `consistency <run_dir>`: re-assign modes of a stored run.

Example usage (from project root):

    python -m src.cli run configs/toy.yaml
    python -m src.cli ablate configs/toy.yaml --seeds 1..10 --workers 4

Exit codes: 0 success, 2 invalid configuration, 3 numerical divergence.
The output root defaults to ./runs and can be overridden with SDSLAB_OUT
(in the environment or in a .env file).
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError

from . import lab
from .config import load_experiment_config
from .errors import ConfigurationError, DivergenceError
from .score_model import dump_landscape

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3


def parse_int_list(text: str) -> List[int]:
    """'50,600' -> [50, 600]; '1..4' -> [1, 2, 3, 4]; both forms can be mixed."""
    values: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            values.extend(range(int(lo), int(hi) + 1))
        else:
            values.append(int(part))
    if not values:
        raise argparse.ArgumentTypeError(f"no integers in {text!r}")
    return values


def _int_list(text: str) -> List[int]:
    try:
        return parse_int_list(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(Path(args.config))
    out_dir = Path(args.out) if args.out else cfg.run_dir()
    report = lab.run(cfg, out_dir=out_dir, progress=args.progress)
    if args.dump_landscape:
        written = dump_landscape(lab.build_landscape(cfg), out_dir / "landscape")
        print(f"Landscape modes: {len(written)} images in {out_dir / 'landscape'}")
    print(f"Run dir: {out_dir}")
    print(f"Mode consistency: {report.consistency:.3f} (majority: {report.assignment.majority})")
    print(f"Checksum: {report.checksum}")
    return EXIT_OK


def cmd_gradfield(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(Path(args.config))
    out_path = Path(args.out) if args.out else cfg.run_dir() / "gradfield.csv"
    condition = False if args.unconditioned else None
    rows = lab.gradient_field_dump(
        cfg, args.t, args.draws, zero_noise=args.zero_noise, out_path=out_path, condition=condition
    )
    for (t, init), coherence in sorted(lab.gradient_coherence(rows).items()):
        print(f"t={t:<5d} init={init:<7s} mean pairwise cosine={coherence:+.4f}")
    print(f"Wrote {len(rows)} rows to {out_path}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(Path(args.config))
    out_path = Path(args.out) if args.out else cfg.run_dir() / "ablation.csv"
    table = lab.ablation_suite(cfg, args.seeds, workers=args.workers, out_path=out_path)
    print("CN  Init  CHS   consistency (mean +- sd)   final CHS (mean +- sd)")
    for row in table.rows:
        cn, init, chs = (int(v) for v in row.toggles)
        print(
            f"{cn}   {init}     {chs}     {row.consistency_mean:.3f} +- {row.consistency_sd:.3f}"
            f"            {row.final_chs_mean:.4f} +- {row.final_chs_sd:.4f}"
        )
    print(f"Wrote {out_path}")
    return EXIT_OK


def cmd_consistency(args: argparse.Namespace) -> int:
    assignment = lab.consistency_of_run_dir(Path(args.run_dir))
    for k, (view, mode, dist) in enumerate(
        zip(assignment.view_labels, assignment.mode_labels, assignment.distances)
    ):
        print(f"[{k:02d}] view={view:<6s} mode={mode:<12s} distance={dist:.4f}")
    print(f"Mode consistency: {assignment.consistency:.3f} (majority: {assignment.majority})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    """Top-level argparse parser with one subcommand per experiment verb."""
    parser = argparse.ArgumentParser(
        prog="sdslab",
        description="Score-distillation hand generation lab.",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable debug logging.")

    subparsers = parser.add_subparsers(dest="command", required=True)

    # --- run ---
    p_run = subparsers.add_parser("run", help="Run one experiment and write its artifacts.")
    p_run.add_argument("config", type=str, help="Experiment YAML config.")
    p_run.add_argument("--out", type=str, default=None, help="Run directory (defaults to config).")
    p_run.add_argument("--progress", action="store_true", help="Show progress bars.")
    p_run.add_argument(
        "--dump-landscape", action="store_true", help="Also write every landscape mode as a PGM."
    )
    p_run.set_defaults(func=cmd_run)

    # --- gradfield ---
    p_grad = subparsers.add_parser("gradfield", help="Dump SDS latent gradients for two inits.")
    p_grad.add_argument("config", type=str, help="Experiment YAML config.")
    p_grad.add_argument("--t", type=_int_list, default=None, help="Timesteps, e.g. 50,600.")
    p_grad.add_argument("--draws", type=int, default=None, help="Noise draws per timestep.")
    p_grad.add_argument("--zero-noise", action="store_true", help="Use eps = 0 for every draw.")
    p_grad.add_argument(
        "--unconditioned", action="store_true", help="Predict noise from the whole view bucket."
    )
    p_grad.add_argument("--out", type=str, default=None, help="Output CSV path.")
    p_grad.set_defaults(func=cmd_gradfield)

    # --- ablate ---
    p_abl = subparsers.add_parser("ablate", help="Run the component ablation over several seeds.")
    p_abl.add_argument("config", type=str, help="Base experiment YAML config.")
    p_abl.add_argument("--seeds", type=_int_list, default=list(range(1, 11)), help="e.g. 1..10")
    p_abl.add_argument("--workers", type=int, default=1, help="Parallel runs.")
    p_abl.add_argument("--out", type=str, default=None, help="Output CSV path.")
    p_abl.set_defaults(func=cmd_ablate)

    # --- consistency ---
    p_cons = subparsers.add_parser("consistency", help="Mode consistency of a stored run.")
    p_cons.add_argument("run_dir", type=str, help="Directory written by `run`.")
    p_cons.set_defaults(func=cmd_consistency)

    return parser


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="[%(levelname)s] %(message)s",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    try:
        return args.func(args)
    except (ValidationError, ConfigurationError) as exc:
        logger.error("Invalid configuration: %s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        logger.error("Diverged at iteration %d (%s): %s", exc.iteration, exc.component, exc)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())

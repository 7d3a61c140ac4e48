"""
nnQC - Command Line Entry Point
Diffusion-based pseudo ground truth for segmentation quality control
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from modules.config import configure_logging, load_config
from modules.errors import NNQCError
from modules.pipeline import QCPipeline

logger = logging.getLogger("nnqc")

COMMANDS = ("fingerprint", "train-vae", "train-ldm", "qc", "evaluate", "rank", "phantom-gen")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnqc", description="Segmentation quality control with pseudo ground truth")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML run configuration")
    common.add_argument("--seed", type=int, default=None, help="Override the configured seed")
    common.add_argument("--out", type=Path, default=None, help="Output directory")
    common.add_argument("--force", action="store_true", help="Continue on fingerprint mismatch")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--no-progress", action="store_true", help="Hide progress bars")

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--steps", type=int, default=None, help="DDIM sampling steps")
    sampling.add_argument("--metric", choices=["dsc", "hd95", "all"], default="all")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fingerprint", parents=[common], help="Split subjects and extract the dataset fingerprint")
    sub.add_parser("train-vae", parents=[common], help="Stage 1: train the VAE-GAN on GT masks")
    sub.add_parser("train-ldm", parents=[common], help="Stage 2: train the conditional latent diffusion model")

    qc = sub.add_parser("qc", parents=[common, sampling], help="Score one segmentation against its pGT")
    qc.add_argument("--image", type=Path, required=True)
    qc.add_argument("--mask", type=Path, default=None, help="Segmentation under QC (empty if omitted)")
    qc.add_argument("--gt", type=Path, default=None, help="Ground truth for real scores")
    qc.add_argument("--preview", action="store_true", help="Write a PNG of the mid slice")

    evaluate = sub.add_parser("evaluate", parents=[common, sampling], help="Pseudo vs real scores across bands")
    evaluate.add_argument("--dataset", type=Path, default=None, help="Evaluate on another dataset directory")

    rank = sub.add_parser("rank", parents=[common, sampling], help="Rank models by pseudo score")
    rank.add_argument("model_dirs", type=Path, nargs="+", help="One segmentation directory per model")

    phantom = sub.add_parser("phantom-gen", parents=[common], help="Write the synthetic phantom dataset")
    phantom.add_argument("--with-models", action="store_true", help="Also write synthetic model outputs")
    return parser


def run(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    pipeline = QCPipeline(config, force=args.force, show_progress=not args.no_progress)

    if args.command == "fingerprint":
        pipeline.cmd_fingerprint()
    elif args.command == "train-vae":
        pipeline.cmd_train_vae()
    elif args.command == "train-ldm":
        pipeline.cmd_train_ldm()
    elif args.command == "qc":
        pipeline.cmd_qc(args.image, args.mask, args.gt, args.metric, args.steps, args.out, args.preview)
    elif args.command == "evaluate":
        pipeline.cmd_evaluate(args.steps, args.metric, args.dataset, args.out)
    elif args.command == "rank":
        pipeline.cmd_rank(args.model_dirs, args.steps, args.metric, args.out)
    elif args.command == "phantom-gen":
        pipeline.cmd_phantom_gen(args.out, args.with_models)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        run(args)
    except NNQCError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except Exception as e:
        logger.exception("Unexpected error: %s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

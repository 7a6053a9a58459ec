#!/usr/bin/env python3
"""
CLI Interface for vqseg
Train, evaluate and profile vector-quantised segmentation models.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from utils.environment_validator import validate_or_exit

from .config import load_config
from .errors import VQSegError
from .model import build_model, profile_model
from .selftest import run_selftest
from .trainer import ablate_codebook, compare, evaluate, train

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='python -m vqseg.cli',
        description='Vector-quantised semantic segmentation at desk scale',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Train the desk-scale model on synthetic road scenes
  python -m vqseg.cli train --config configs/desk.yaml

  # Train the baseline without the quantiser, other seed
  python -m vqseg.cli train --config configs/desk.yaml --no-vq --seed 1

  # Continue an interrupted run
  python -m vqseg.cli train --config configs/desk.yaml \\
    --resume runs/desk/checkpoints/iter_001000.ckpt

  # Evaluate a checkpoint and write colourised predictions
  python -m vqseg.cli eval --config configs/desk.yaml \\
    --checkpoint runs/desk/checkpoints/iter_002000.ckpt \\
    --emit-png runs/desk/predictions

  # Codebook-size ablation, 3 seeds per size
  python -m vqseg.cli ablate --config configs/desk.yaml --codebook-sizes 19,95,190

  # Quantised model vs baseline over seeds
  python -m vqseg.cli compare --config configs/desk.yaml --seeds 0,1,2

  # Parameter counts and multiply-accumulates
  python -m vqseg.cli summary --config configs/desk.yaml

  # Gradient and oracle checks
  python -m vqseg.cli selftest

Environment (.env supported):
  VQSEG_RUN_DIR, VQSEG_NUM_WORKERS, VQSEG_DTYPE, VQSEG_LOG_LEVEL
        """
    )
    parser.add_argument(
        '--verbose',
        action='store_true',
        help='Debug logging'
    )
    sub = parser.add_subparsers(dest='command', required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument('--config', default=None, help='YAML run config (default: built-in desk settings)')
        p.add_argument('--run-dir', default=None, help='Override the run directory')
        p.add_argument('--seed', type=int, default=None, help='Seed for model, codebook and augmentation')
        p.add_argument('--max-iters', type=int, default=None, help='Override train.max_iters')
        return p

    p = with_config(sub.add_parser('train', help='Train a model'))
    p.add_argument('--no-vq', action='store_true', help='Bypass the quantiser (baseline)')
    p.add_argument('--resume', default=None, help='Continue from a checkpoint of the same config')

    p = with_config(sub.add_parser('eval', help='Evaluate a checkpoint'))
    p.add_argument('--checkpoint', required=True, help='Checkpoint file')
    p.add_argument('--emit-png', default=None, help='Directory for colourised prediction PNGs')
    p.add_argument('--split', default=None, help='Split to evaluate (default: validation split)')
    p.add_argument('--no-vq', action='store_true', help='Checkpoint was trained without the quantiser')
    p.add_argument('--oracle', action='store_true', help='Score ground truth against itself')

    p = with_config(sub.add_parser('ablate', help='Codebook-size ablation'))
    p.add_argument('--codebook-sizes', type=_int_list, default=[19, 95, 190], help='Comma-separated sizes (default: 19,95,190)')
    p.add_argument('--repeats', type=int, default=3, help='Seeds per size (default: 3)')

    p = with_config(sub.add_parser('compare', help='Quantised model vs baseline'))
    p.add_argument('--seeds', type=_int_list, default=[0, 1, 2], help='Comma-separated seeds (default: 0,1,2)')

    p = with_config(sub.add_parser('summary', help='Parameter counts and MACs'))
    p.add_argument('--no-vq', action='store_true', help='Profile the baseline')

    p = sub.add_parser('selftest', help='Run gradient and oracle checks')
    p.add_argument('--seed', type=int, default=0, help='Seed for the random instances')
    return parser


def setup_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, os.getenv('VQSEG_LOG_LEVEL', 'INFO').upper(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if getattr(args, 'seed', None) is not None:
        overrides['seed'] = args.seed
    if getattr(args, 'run_dir', None):
        overrides['run_dir'] = args.run_dir
    if getattr(args, 'max_iters', None) is not None:
        overrides['train.max_iters'] = args.max_iters
    if getattr(args, 'no_vq', False):
        overrides['model.use_vq'] = False
    return overrides


def _run(args: argparse.Namespace) -> int:
    if args.command == 'selftest':
        results = run_selftest(args.seed)
        for r in results:
            print(f"{'✅' if r.passed else '❌'} {r.name}: {r.detail} ({r.seconds:.2f}s)")
        failed = [r for r in results if not r.passed]
        print(f"\n{'🎉 All checks passed' if not failed else f'❌ {len(failed)} check(s) failed'}")
        return 1 if failed else 0

    cfg = load_config(args.config, _overrides(args))

    if args.command == 'summary':
        model = build_model(cfg.model, seed=cfg.seed)
        size = cfg.data.image_size
        profile = profile_model(model, (1, 3, size, size))
        print(f"📐 {cfg.name}: input 1x3x{size}x{size}")
        print(f"   encoder  {profile.encoder_params:>10,d} params")
        print(f"   codebook {profile.codebook_params:>10,d} params")
        print(f"   decoder  {profile.decoder_params:>10,d} params")
        print(f"   total    {profile.total_params:>10,d} params")
        print(f"   MACs     {profile.macs:>10,d} ({profile.gflops:.3f} GFLOPs)")
        return 0

    dataset_root = cfg.data.root if cfg.data.kind == 'folder' else None
    validate_or_exit(Path(cfg.run_dir), dataset_root, [cfg.data.train_split, cfg.data.val_split])

    if args.command == 'train':
        report = train(cfg, resume=Path(args.resume) if args.resume else None)
        final = report.snapshots[max(report.snapshots)]
        print(f"\n✅ Training finished in {report.wall_clock:.1f}s")
        print(f"   val mIoU: {final.mIoU:.4f}")
        if final.codebook is not None:
            print(f"   codebook usage: {final.codebook.usage:.3f}, perplexity {final.codebook.perplexity:.2f}")
        print(f"   checkpoint: {report.checkpoint}")
        print(f"📁 Outputs in {report.run_dir}")
        return 0

    if args.command == 'eval':
        report = evaluate(cfg, Path(args.checkpoint), emit_png=args.emit_png, split=args.split, oracle=args.oracle)
        print(f"\n✅ {report.split} mIoU: {report.mIoU:.4f}, pixel accuracy {report.pixel_accuracy:.4f}")
        for entry in report.per_class:
            value = '   n/a' if entry.iou is None else f"{entry.iou:.4f}"
            print(f"   {entry.name:<14} {value}")
        print(f"📁 Metrics written to {Path(cfg.run_dir) / 'metrics.json'}")
        return 0

    if args.command == 'ablate':
        rows = ablate_codebook(cfg, args.codebook_sizes, args.repeats)
        print("\n✅ Ablation finished")
        print(f"   {'K':>5}  {'mIoU':>8}  {'std':>7}  {'usage':>6}  {'perplexity':>10}")
        for row in rows:
            print(f"   {row.K:>5}  {row.mIoU:>8.4f}  {row.mIoU_std:>7.4f}  {row.usage:>6.3f}  {row.perplexity:>10.2f}")
        print(f"📁 Table written to {Path(cfg.run_dir) / 'ablation.csv'}")
        return 0

    if args.command == 'compare':
        rows = compare(cfg, args.seeds)
        print("\n✅ Comparison finished")
        for row in rows:
            print(f"   seed {row.seed}: vq {row.vq_mIoU:.4f} vs baseline {row.baseline_mIoU:.4f} (usage {row.usage:.3f})")
        print(f"📁 Table written to {Path(cfg.run_dir) / 'comparison.csv'}")
        return 0

    raise VQSegError(f"unknown command {args.command}")


def main(argv: Optional[List[str]] = None) -> int:
    """CLI entrypoint."""
    parser = build_parser()
    args = parser.parse_args(argv)

    # Load environment variables
    load_dotenv()
    setup_logging(args.verbose)

    try:
        return _run(args)

    except KeyboardInterrupt:
        print("\n\n⚠️  Run cancelled by user")
        return 130

    except VQSegError as e:
        print(f"\n❌ Error: {e}")
        return 1

    except Exception as e:
        print(f"\n❌ Error: {e}")
        if args.verbose:
            import traceback
            traceback.print_exc()
        return 1


if __name__ == '__main__':
    sys.exit(main())

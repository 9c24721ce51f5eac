"""This module defines the prediction and fusion commands."""
import argparse
from pathlib import Path

from deep_fext.services.prediction_service import PredictionService


def _threshold(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie in [0,1], got {value}")
    return value


def register(subparsers: argparse._SubParsersAction) -> None:
    """Add ``predict`` and ``fuse``."""
    parser = subparsers.add_parser("predict", help="write probability maps, masks and label images")
    parser.add_argument("--model", type=Path, required=True, help="checkpoint file")
    parser.add_argument("--input", type=Path, required=True, help="image file or directory")
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--threshold", type=_threshold, default=0.5)
    parser.add_argument("--fov", type=Path, help="field-of-view masks, matched by image id")
    parser.add_argument("--bits", type=int, choices=[8, 16], default=8, help="probability image depth")
    parser.set_defaults(handler=cmd_predict)

    parser = subparsers.add_parser("fuse", help="average the probability maps of several models")
    parser.add_argument("--models", type=Path, nargs="+", required=True, help="two or more checkpoints")
    parser.add_argument("--input", type=Path, required=True, help="image file or directory")
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--target", choices=["vessel", "centerline"], default="vessel")
    parser.add_argument("--threshold", type=_threshold, default=0.5)
    parser.add_argument("--fov", type=Path, help="field-of-view masks, matched by image id")
    parser.add_argument("--bits", type=int, choices=[8, 16], default=8)
    parser.set_defaults(handler=cmd_fuse)


def cmd_predict(args: argparse.Namespace) -> int:
    service = PredictionService(fov_dir=args.fov, bits=args.bits)
    written = service.predict(args.model, args.input, args.out, args.threshold)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_fuse(args: argparse.Namespace) -> int:
    service = PredictionService(fov_dir=args.fov, bits=args.bits)
    written = service.fuse(args.models, args.input, args.out, target=args.target, threshold=args.threshold)
    print(f"wrote {len(written)} files to {args.out}")
    return 0

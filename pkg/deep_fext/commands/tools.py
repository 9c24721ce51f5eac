"""This module defines the data preparation and inspection commands."""
import argparse
from pathlib import Path

import numpy as np

from deep_fext.models.dataset import Layout
from deep_fext.models.exceptions import FextError, ErrorTypes
from deep_fext.models.network import NETWORK_PRESETS, network_preset
from deep_fext.repositories.checkpoint_repository import load_checkpoint
from deep_fext.repositories.image_repository import decode_image
from deep_fext.services.fext_service import build_fext_network
from deep_fext.services.prediction_service import inspect_features, prepare_dataset, skeletonize_file


def register(subparsers: argparse._SubParsersAction) -> None:
    """Add ``prepare``, ``skeletonize`` and ``inspect-features``."""
    parser = subparsers.add_parser("prepare", help="build the cached centerline masks of a dataset")
    parser.add_argument("--dataset", type=Path, required=True)
    parser.add_argument("--layout", choices=[layout.value for layout in Layout], required=True)
    parser.add_argument("--out", type=Path, help="cache directory (default: beside the ground truth)")
    parser.set_defaults(handler=cmd_prepare)

    parser = subparsers.add_parser("skeletonize", help="thin a vessel mask into a centerline mask")
    parser.add_argument("--input", type=Path, required=True)
    parser.add_argument("--out", type=Path, required=True, help="output image path")
    parser.set_defaults(handler=cmd_skeletonize)

    parser = subparsers.add_parser("inspect-features", help="write every extracted feature map as an image")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--model", type=Path, help="checkpoint whose network is inspected")
    source.add_argument("--preset", choices=sorted(NETWORK_PRESETS), help="freshly initialized preset network")
    parser.add_argument("--seed", type=int, default=0, help="initialization seed for --preset")
    parser.add_argument("--input", type=Path, required=True, help="image file")
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--by-layer", action="store_true", help="group the maps per extraction layer")
    parser.set_defaults(handler=cmd_inspect_features)


def cmd_prepare(args: argparse.Namespace) -> int:
    counts = prepare_dataset(args.dataset, Layout(args.layout), cache_dir=args.out)
    print(f"{counts['items']} centerline masks ({counts['created']} created, {counts['reused']} up to date)")
    return 0


def cmd_skeletonize(args: argparse.Namespace) -> int:
    print(skeletonize_file(args.input, args.out))
    return 0


def cmd_inspect_features(args: argparse.Namespace) -> int:
    """Features of the input as the network sees it (normalized for a checkpoint)."""
    image = decode_image(args.input)
    if args.model is not None:
        model, _ = load_checkpoint(args.model)
        network = model.network
        if image.shape[0] == network.spec.input_channels:
            image = model.normalize(image)
    else:
        network = build_fext_network(network_preset(args.preset), np.random.default_rng(args.seed))
    if image.shape[0] != network.spec.input_channels:
        raise FextError(
            f"{args.input} has {image.shape[0]} channels, the network expects {network.spec.input_channels}",
            ErrorTypes.DATA
        )
    written = inspect_features(network, image, args.out, by_layer=args.by_layer)
    print(f"wrote {len(written)} feature images to {args.out}")
    return 0

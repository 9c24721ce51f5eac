"""This module defines the training command."""
import argparse
import logging
from pathlib import Path

from deep_fext.models.dataset import Layout
from deep_fext.models.training import Task, TrainConfig
from deep_fext.repositories.checkpoint_repository import load_checkpoint
from deep_fext.repositories.dataset_repository import DatasetRepository
from deep_fext.services.model_service import build_model
from deep_fext.services.training_service import FINAL_CHECKPOINT, train
from deep_fext.utils.workers import parallel_map

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    """Add ``train``."""
    parser = subparsers.add_parser("train", help="train a model end to end on a dataset split")
    parser.add_argument("--config", type=Path, required=True, help="JSON training config")
    parser.add_argument("--dataset", type=Path, required=True, help="dataset root")
    parser.add_argument("--layout", choices=[layout.value for layout in Layout], required=True)
    parser.add_argument("--task", choices=[task.value for task in Task], help="overrides the config task")
    parser.add_argument("--out", type=Path, required=True, help="checkpoint and log directory")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--resume", type=Path, help="continue from a checkpoint")
    parser.set_defaults(handler=cmd_train)


def load_config(args: argparse.Namespace) -> TrainConfig:
    """Config file with the command-line overrides applied and re-validated."""
    cfg = TrainConfig.from_file(args.config)
    overrides = {}
    if args.task is not None:
        overrides["task"] = args.task
    if args.seed is not None:
        overrides["seed"] = args.seed
    if not overrides:
        return cfg
    return TrainConfig.model_validate({**cfg.model_dump(exclude_none=True), **overrides})


def cmd_train(args: argparse.Namespace) -> int:
    """Train on the training split; checkpoints and train.log go to --out."""
    cfg = load_config(args)
    repository = DatasetRepository(cache_dir=args.out / "centerlines")
    train_split, _ = repository.load_dataset(args.dataset, Layout(args.layout))
    with_centerline = cfg.task is not Task.VESSEL
    images = parallel_map(lambda item: repository.load_item(item, with_centerline), train_split.items)

    if args.resume is not None:
        model, state = load_checkpoint(args.resume)
    else:
        model = build_model(cfg.network_spec(), cfg.head_spec(), cfg.task, seed=cfg.seed)
        state = None
    state = train(model, images, cfg, args.out, resume_state=state)
    print(f"trained {state.step} steps; final loss {state.running_loss:.6f}; checkpoint {args.out / FINAL_CHECKPOINT}")
    return 0

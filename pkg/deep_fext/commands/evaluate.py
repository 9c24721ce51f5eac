"""This module defines the evaluation command."""
import argparse
from pathlib import Path

from deep_fext.models.training import Task
from deep_fext.services.metrics_service import evaluate, format_table, write_report


def register(subparsers: argparse._SubParsersAction) -> None:
    """Add ``eval``."""
    parser = subparsers.add_parser("eval", help="score predictions against ground-truth masks")
    parser.add_argument("--pred", type=Path, required=True, help="prediction (or second-annotator) directory")
    parser.add_argument("--gt", type=Path, required=True, help="ground-truth vessel masks")
    parser.add_argument("--fov", type=Path, help="field-of-view masks; scoring is restricted to them")
    parser.add_argument("--task", choices=[task.value for task in Task], default=Task.VESSEL.value)
    parser.add_argument("--threshold", type=float, default=0.5, help="operating threshold for P/R/F1/kappa")
    parser.add_argument("--report", type=Path, required=True, help="JSON report path")
    parser.set_defaults(handler=cmd_eval)


def cmd_eval(args: argparse.Namespace) -> int:
    """Write the JSON report and print the table."""
    report = evaluate(args.pred, args.gt, args.fov, Task(args.task), args.threshold)
    write_report(report, args.report)
    print(format_table(report))
    return 0

"""
Segmentation scores: precision, recall, F1, average maximum Dice and Cohen's kappa.

Conventions: a pixel is positive when p >= t; precision (recall) is 1 when its
denominator is 0; F1 is 0 when p + r = 0. Dice is computed through the same
confusion counts as F1, so the two agree exactly.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from deep_fext.models.exceptions import FextError, ErrorTypes
from deep_fext.models.metrics import ConfusionCounts, ImageScores, MetricsReport
from deep_fext.models.training import Task
from deep_fext.repositories.dataset_repository import index_directory
from deep_fext.repositories.image_repository import decode_image, decode_mask
from deep_fext.utils.naming import base_stem, image_id
from deep_fext.utils.skeleton import skeletonize
from deep_fext.utils.workers import atomic_write_bytes, parallel_map

logger = logging.getLogger(__name__)

THRESHOLD_GRID = np.arange(1, 100) / 100.0
AGGREGATE_ID = "aggregate"
PREDICTION_SUFFIXES = ("_vessel", "_centerline", "_mask", "_labels")


def _check_shapes(*maps: Optional[np.ndarray]) -> None:
    shapes = {np.shape(m) for m in maps if m is not None}
    if len(shapes) > 1:
        raise FextError(f"map shapes differ: {sorted(shapes)}", ErrorTypes.DATA)


def confusion(pred_mask: np.ndarray, gt_mask: np.ndarray, fov: Optional[np.ndarray] = None) -> ConfusionCounts:
    """Counts over pixels where ``fov`` is set, or over every pixel."""
    _check_shapes(pred_mask, gt_mask, fov)
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if fov is not None:
        region = np.asarray(fov).astype(bool)
        pred, gt = pred[region], gt[region]
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=int(pred.size) - tp - fp - fn)


def f1_from_precision_recall(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def precision_recall_f1(counts: ConfusionCounts) -> Tuple[float, float, float]:
    """(precision, recall, F1) with the empty-denominator conventions."""
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 1.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 1.0
    return precision, recall, f1_from_precision_recall(precision, recall)


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray, fov: Optional[np.ndarray] = None) -> float:
    """2|A and B| / (|A| + |B|), through the F1 of the confusion counts."""
    return precision_recall_f1(confusion(pred_mask, gt_mask, fov))[2]


def cohens_kappa(counts: ConfusionCounts) -> float:
    """
    Chance-corrected agreement (p_o - p_e) / (1 - p_e).

    When p_e = 1 (one class on both sides) kappa is 1 for perfect agreement, else 0.
    """
    n = counts.total
    if n == 0:
        raise FextError("kappa needs at least one evaluated pixel", ErrorTypes.DATA)
    observed = (counts.tp + counts.tn) / n
    expected = ((counts.tp + counts.fp) * (counts.tp + counts.fn)
                + (counts.fn + counts.tn) * (counts.fp + counts.tn)) / (n * n)
    if expected == 1.0:
        return 1.0 if observed == 1.0 else 0.0
    return (observed - expected) / (1.0 - expected)


def dice_curve(
    prob_map: np.ndarray,
    gt_mask: np.ndarray,
    fov: Optional[np.ndarray] = None,
    thresholds: np.ndarray = THRESHOLD_GRID
) -> np.ndarray:
    """Dice of (prob >= t) against ``gt_mask`` for every t in ``thresholds``."""
    _check_shapes(prob_map, gt_mask, fov)
    probs = np.asarray(prob_map, dtype=np.float64)
    gt = np.asarray(gt_mask).astype(bool)
    if fov is not None:
        region = np.asarray(fov).astype(bool)
        probs, gt = probs[region], gt[region]
    positives = np.sort(probs[gt])
    negatives = np.sort(probs[~gt])
    # Count of values >= t via the number strictly below t.
    tp = positives.size - np.searchsorted(positives, thresholds, side="left")
    fp = negatives.size - np.searchsorted(negatives, thresholds, side="left")
    fn = positives.size - tp
    scores = []
    for tp_t, fp_t, fn_t in zip(tp, fp, fn):
        scores.append(precision_recall_f1(ConfusionCounts(tp=int(tp_t), fp=int(fp_t), fn=int(fn_t), tn=0))[2])
    return np.asarray(scores)


def max_dice(prob_map: np.ndarray, gt_mask: np.ndarray, fov: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """(best Dice over the threshold grid, the smallest threshold reaching it)."""
    curve = dice_curve(prob_map, gt_mask, fov)
    best = int(np.argmax(curve))
    return float(curve[best]), float(THRESHOLD_GRID[best])


def average_max_dice(
    prob_maps: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    fovs: Optional[Sequence[Optional[np.ndarray]]] = None
) -> Tuple[float, List[float]]:
    """Mean over images of the per-image maximum Dice, with each image's best threshold."""
    if not prob_maps:
        raise FextError("average_max_dice needs at least one image", ErrorTypes.DATA)
    if len(prob_maps) != len(gt_masks):
        raise FextError(f"{len(prob_maps)} probability maps for {len(gt_masks)} masks", ErrorTypes.DATA)
    fovs = fovs if fovs is not None else [None] * len(prob_maps)
    results = [max_dice(prob, gt, fov) for prob, gt, fov in zip(prob_maps, gt_masks, fovs)]
    return float(np.mean([value for value, _ in results])), [threshold for _, threshold in results]


def score_image(
    identifier: str,
    prob_map: np.ndarray,
    gt_mask: np.ndarray,
    fov: Optional[np.ndarray] = None,
    threshold: float = 0.5
) -> ImageScores:
    """Every column of one image at the operating ``threshold``."""
    counts = confusion(np.asarray(prob_map) >= threshold, gt_mask, fov)
    precision, recall, f1 = precision_recall_f1(counts)
    best_dice, best_threshold = max_dice(prob_map, gt_mask, fov)
    return ImageScores(
        id=identifier,
        precision=precision,
        recall=recall,
        f1=f1,
        max_dice=best_dice,
        best_threshold=best_threshold,
        kappa=cohens_kappa(counts)
    )


def combine_scores(identifier: str, rows: Sequence[ImageScores]) -> ImageScores:
    """Mean of every column; F1 is recomputed from the mean precision and recall."""
    precision = float(np.mean([row.precision for row in rows]))
    recall = float(np.mean([row.recall for row in rows]))
    return ImageScores(
        id=identifier,
        precision=precision,
        recall=recall,
        f1=f1_from_precision_recall(precision, recall),
        max_dice=float(np.mean([row.max_dice for row in rows])),
        best_threshold=float(np.mean([row.best_threshold for row in rows])),
        kappa=float(np.mean([row.kappa for row in rows]))
    )


def aggregate(rows: Sequence[ImageScores]) -> ImageScores:
    """Report-level row, folded in id order so file order never matters."""
    if not rows:
        raise FextError("no images were scored", ErrorTypes.DATA)
    return combine_scores(AGGREGATE_ID, sorted(rows, key=lambda row: row.id))


def _targets(task: Task) -> List[str]:
    return ["vessel", "centerline"] if task is Task.BOTH else [task.value]


def _find_prediction(candidates: List[Path], target: str) -> Tuple[Optional[Path], bool]:
    """(file, is_probability_map): the ``_<target>`` map, else any plain image with the id."""
    for path in candidates:
        if base_stem(path).endswith(f"_{target}"):
            return path, True
    for path in candidates:
        if not base_stem(path).endswith(PREDICTION_SUFFIXES):
            return path, False
    return None, False


def _index_predictions(pred_dir: Path) -> Dict[str, List[Path]]:
    found: Dict[str, List[Path]] = {}
    for path in sorted(pred_dir.iterdir()):
        if path.is_file() and not path.name.startswith("."):
            found.setdefault(image_id(path), []).append(path)
    return found


def evaluate(
    pred_dir: Path,
    gt_dir: Path,
    fov_dir: Optional[Path] = None,
    task: Task = Task.VESSEL,
    threshold: float = 0.5
) -> MetricsReport:
    """
    Score every ground-truth image against its prediction.

    Centerline ground truth is the skeleton of the vessel ground truth; a
    plain mask standing in for a centerline prediction is skeletonized too.
    ``both`` rows are the macro average of the vessel and centerline rows.

    Raises:
        FextError: missing directories or counterpart files (data), listing the ids.
    """
    task = Task(task)
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for directory in (pred_dir, gt_dir, fov_dir):
        if directory is not None and not Path(directory).is_dir():
            raise FextError(f"directory not found: {directory}", ErrorTypes.DATA)

    ground_truth = index_directory(gt_dir)
    if not ground_truth:
        raise FextError(f"no ground-truth images in {gt_dir}", ErrorTypes.DATA)
    fovs = index_directory(Path(fov_dir)) if fov_dir is not None else {}
    predictions = _index_predictions(pred_dir)

    jobs = []
    missing = []
    for key, gt_path in ground_truth.items():
        chosen = {}
        for target in _targets(task):
            path, is_map = _find_prediction(predictions.get(key, []), target)
            if path is None:
                missing.append(f"{key} ({target})")
            chosen[target] = (path, is_map)
        if fov_dir is not None and key not in fovs:
            missing.append(f"{key} (field of view)")
        jobs.append((key, gt_path, chosen))
    if missing:
        raise FextError(f"no counterpart in {pred_dir} or {fov_dir} for: {', '.join(missing)}", ErrorTypes.DATA)

    def score(job) -> ImageScores:
        key, gt_path, chosen = job
        vessel_gt = decode_mask(gt_path)
        fov = decode_mask(fovs[key]) if fov_dir is not None else None
        rows = []
        for target, (path, is_map) in chosen.items():
            prob = decode_image(path)[0]
            gt = vessel_gt if target == "vessel" else skeletonize(vessel_gt)
            if target == "centerline" and not is_map:
                prob = skeletonize(prob > 0.5).astype(np.float32)
            rows.append(score_image(key, prob, gt, fov, threshold))
        return rows[0] if len(rows) == 1 else combine_scores(key, rows)

    per_image = parallel_map(score, jobs)
    report = MetricsReport(
        task=task.value,
        threshold_used=threshold,
        fov_restricted=fov_dir is not None,
        per_image=per_image,
        aggregate=aggregate(per_image)
    )
    logger.info(
        "evaluated %d images (%s): F1 %.4f, kappa %.4f",
        len(per_image), task.value, report.aggregate.f1, report.aggregate.kappa
    )
    return report


def write_report(report: MetricsReport, path: Path) -> Path:
    """JSON report, written atomically."""
    atomic_write_bytes(Path(path), (report.model_dump_json(indent=2) + "\n").encode("utf-8"))
    return Path(path)


TABLE_COLUMNS = ["Precision", "Recall", "F1", "Average Max. Dice", "Kappa"]


def format_table(report: MetricsReport) -> str:
    """Fixed-width table: one row per image, then the aggregate."""
    rows = list(report.per_image) + ([report.aggregate] if report.aggregate else [])
    id_width = max([len("Image")] + [len(row.id) for row in rows])
    widths = [max(len(name), 9) for name in TABLE_COLUMNS]
    header = "  ".join([f"{'Image':<{id_width}}"] + [f"{name:>{w}}" for name, w in zip(TABLE_COLUMNS, widths)])
    lines = [header, "-" * len(header)]
    for row in rows:
        values = [row.precision, row.recall, row.f1, row.max_dice, row.kappa]
        lines.append("  ".join([f"{row.id:<{id_width}}"] + [f"{v:>{w}.4f}" for v, w in zip(values, widths)]))
    return "\n".join(lines)

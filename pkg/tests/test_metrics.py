"""Confusion counts, P/R/F1, average maximum Dice, kappa and directory evaluation."""
import json
import os
from pathlib import Path

import numpy as np
import pytest

from deep_fext.models.exceptions import ErrorTypes, FextError
from deep_fext.models.metrics import ConfusionCounts
from deep_fext.models.training import Task
from deep_fext.repositories.image_repository import encode_image
from deep_fext.services.metrics_service import (
    TABLE_COLUMNS,
    aggregate,
    average_max_dice,
    cohens_kappa,
    confusion,
    dice,
    evaluate,
    f1_from_precision_recall,
    format_table,
    precision_recall_f1,
    score_image,
    write_report,
)

from tests.conftest import draw_vessels, save_gray
from tests.oracles import brute_force_max_dice, loop_confusion, plain_dice, textbook_kappa


def random_pairs(count=100, shape=(16, 16), seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        density = rng.uniform(0.05, 0.95)
        yield rng.uniform(size=shape), rng.uniform(size=shape) < density, rng.uniform(size=shape) < 0.8


class TestConfusion:
    def test_perfect_prediction(self, rng):
        gt = rng.uniform(size=(9, 9)) < 0.3
        counts = confusion(gt, gt)
        assert counts.fp == counts.fn == 0

    def test_inverted_prediction(self, rng):
        gt = rng.uniform(size=(9, 9)) < 0.3
        counts = confusion(~gt, gt)
        assert counts.tp == counts.tn == 0

    def test_matches_pixel_loop(self):
        for prob, gt, fov in random_pairs():
            pred = prob >= 0.5
            assert confusion(pred, gt) == loop_confusion(pred, gt)
            counts = confusion(pred, gt, fov)
            assert counts == loop_confusion(pred, gt, fov)
            assert counts.total == int(fov.sum())

    def test_shape_mismatch_is_a_data_error(self):
        with pytest.raises(FextError) as err:
            confusion(np.zeros((3, 3)), np.zeros((3, 4)))
        assert err.value.error_type is ErrorTypes.DATA


class TestPrecisionRecall:
    def test_arithmetic(self):
        assert precision_recall_f1(ConfusionCounts(tp=8, fp=2, fn=2)) == pytest.approx((0.8, 0.8, 0.8))

    def test_empty_positive_convention(self):
        assert precision_recall_f1(ConfusionCounts(tn=5)) == (1.0, 1.0, 1.0)

    def test_zero_precision_and_recall_give_zero_f1(self):
        assert precision_recall_f1(ConfusionCounts(fp=3, fn=2))[2] == 0.0

    def test_reported_row_is_self_consistent(self):
        assert round(f1_from_precision_recall(0.8044, 0.8032), 4) == 0.8038

    def test_dice_is_f1_from_the_same_counts(self):
        for prob, gt, fov in random_pairs(seed=1):
            pred = prob >= 0.3
            assert dice(pred, gt, fov) == precision_recall_f1(confusion(pred, gt, fov))[2]
            assert dice(pred, gt) == pytest.approx(plain_dice(pred, gt), abs=1e-12)


class TestAverageMaxDice:
    def test_perfect_map(self, rng):
        gt = (rng.uniform(size=(8, 8)) < 0.4).astype(np.uint8)
        value, thresholds = average_max_dice([gt.astype(float)], [gt])
        assert value == 1.0
        assert thresholds == [0.01]

    def test_constant_half_map_closed_form(self):
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[:2] = 1
        value, thresholds = average_max_dice([np.full((4, 4), 0.5)], [gt])
        assert value == pytest.approx(2 * 8 / (8 + 16))
        assert thresholds == [0.01]

    def test_matches_exhaustive_thresholding(self):
        probs, gts = [], []
        for prob, gt, _ in random_pairs(shape=(8, 8), seed=2):
            probs.append(prob)
            gts.append(gt)
        value, _ = average_max_dice(probs, gts)
        expected = np.mean([brute_force_max_dice(p, g) for p, g in zip(probs, gts)])
        assert abs(value - expected) < 1e-9

    def test_empty_list_is_a_data_error(self):
        with pytest.raises(FextError) as err:
            average_max_dice([], [])
        assert err.value.error_type is ErrorTypes.DATA

    def test_dominates_f1_at_a_grid_threshold(self):
        for index, (prob, gt, fov) in enumerate(random_pairs(seed=3)):
            scores = score_image(str(index), prob, gt, fov, threshold=0.5)
            assert scores.max_dice >= scores.f1


class TestKappa:
    def test_arithmetic(self):
        assert cohens_kappa(ConfusionCounts(tp=40, fp=10, fn=10, tn=40)) == pytest.approx(0.6)

    def test_perfect_agreement(self):
        assert cohens_kappa(ConfusionCounts(tp=3, tn=7)) == 1.0

    def test_single_class_on_both_sides(self):
        assert cohens_kappa(ConfusionCounts(tn=12)) == 1.0

    def test_independent_predictions_are_near_zero(self, rng):
        pred = rng.uniform(size=10_000) < 0.3
        gt = rng.uniform(size=10_000) < 0.4
        assert abs(cohens_kappa(confusion(pred, gt))) < 0.05

    def test_matches_marginal_formula_and_is_bounded_by_agreement(self):
        for prob, gt, _ in random_pairs(seed=4):
            pred = prob >= 0.5
            counts = confusion(pred, gt)
            kappa = cohens_kappa(counts)
            assert abs(kappa - textbook_kappa(pred, gt)) < 1e-9
            assert kappa <= (counts.tp + counts.tn) / counts.total + 1e-12

    def test_no_pixels_is_a_data_error(self):
        with pytest.raises(FextError):
            cohens_kappa(ConfusionCounts())


def test_scores_are_invariant_under_pixel_permutation(rng):
    prob = rng.uniform(size=(12, 12))
    gt = rng.uniform(size=(12, 12)) < 0.3
    order = rng.permutation(144)
    original = score_image("x", prob, gt)
    permuted = score_image("x", prob.ravel()[order].reshape(12, 12), gt.ravel()[order].reshape(12, 12))
    assert original == permuted


def test_aggregate_ignores_row_order(rng):
    rows = [score_image(str(i), rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8)) < 0.5) for i in range(5)]
    forward, backward = aggregate(rows), aggregate(rows[::-1])
    assert forward == backward
    assert forward.f1 == pytest.approx(f1_from_precision_recall(forward.precision, forward.recall))


@pytest.fixture
def scored_dirs(tmp_path):
    """gt/, fov/ and pred/ holding probability maps for three images."""
    gt_dir, fov_dir, pred_dir = tmp_path / "gt", tmp_path / "fov", tmp_path / "pred"
    rng = np.random.default_rng(11)
    for number in (1, 2, 3):
        _, mask = draw_vessels(24, seed=number)
        save_gray(gt_dir / f"{number:02d}_manual1.png", mask)
        fov = np.zeros_like(mask)
        fov[2:-2, 2:-2] = 1
        save_gray(fov_dir / f"{number:02d}_test_mask.png", fov)
        noisy = np.clip(mask * 0.8 + rng.uniform(0, 0.3, size=mask.shape), 0, 1)
        encode_image(noisy, pred_dir / f"{number:02d}_test_vessel.png")
    return pred_dir, gt_dir, fov_dir


class TestEvaluate:
    def test_ground_truth_against_itself_scores_one(self, scored_dirs):
        _, gt_dir, fov_dir = scored_dirs
        for task in Task:
            report = evaluate(gt_dir, gt_dir, fov_dir, task)
            assert len(report.per_image) == 3
            row = report.aggregate
            assert (row.precision, row.recall, row.f1, row.max_dice, row.kappa) == (1.0, 1.0, 1.0, 1.0, 1.0)

    def test_probability_maps_are_scored_inside_the_fov(self, scored_dirs):
        pred_dir, gt_dir, fov_dir = scored_dirs
        report = evaluate(pred_dir, gt_dir, fov_dir, Task.VESSEL, threshold=0.5)
        assert report.fov_restricted
        assert [row.id for row in report.per_image] == ["01", "02", "03"]
        assert 0.0 < report.aggregate.f1 <= 1.0
        assert report.aggregate.max_dice >= report.aggregate.f1 - 1e-9

    def test_missing_prediction_is_a_data_error_naming_the_id(self, scored_dirs):
        pred_dir, gt_dir, _ = scored_dirs
        (pred_dir / "02_test_vessel.png").unlink()
        with pytest.raises(FextError) as err:
            evaluate(pred_dir, gt_dir, task=Task.VESSEL)
        assert err.value.error_type is ErrorTypes.DATA
        assert "02" in err.value.message

    def test_centerline_task_needs_centerline_maps(self, scored_dirs):
        pred_dir, gt_dir, _ = scored_dirs
        with pytest.raises(FextError):
            evaluate(pred_dir, gt_dir, task=Task.CENTERLINE)

    def test_report_and_table(self, scored_dirs, tmp_path):
        pred_dir, gt_dir, fov_dir = scored_dirs
        report = evaluate(pred_dir, gt_dir, fov_dir)
        path = write_report(report, tmp_path / "report.json")
        document = json.loads(path.read_text())
        assert document["task"] == "vessel"
        assert len(document["per_image"]) == 3
        assert set(document["aggregate"]) >= {"precision", "recall", "f1", "max_dice", "best_threshold", "kappa"}
        table = format_table(report)
        for column in TABLE_COLUMNS:
            assert column in table.splitlines()[0]
        assert table.splitlines()[-1].startswith("aggregate")


DRIVE_ROOT = os.environ.get("DEEP_FEXT_DRIVE_ROOT")


@pytest.mark.dataset
@pytest.mark.skipif(not DRIVE_ROOT, reason="DEEP_FEXT_DRIVE_ROOT is not set")
def test_drive_second_annotator_row():
    root = Path(DRIVE_ROOT) / "test"
    report = evaluate(root / "2nd_manual", root / "1st_manual", root / "mask", Task.VESSEL)
    row = report.aggregate
    expected = (0.8040, 0.7746, 0.7890, 0.8298, 0.7690)
    actual = (row.precision, row.recall, row.f1, row.max_dice, row.kappa)
    assert actual == pytest.approx(expected, abs=0.005)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drivesod.imageio import write_gray, write_mask
from drivesod.metrics import (
    DegenerateGroundTruth,
    evaluate,
    f_beta,
    image_metrics,
    mae,
    nearest_foreground,
    s_measure,
    weighted_f_beta,
)
from drivesod.registry import BenchmarkRegistry, registry_compare
from oracles import loop_f_beta, loop_mae, loop_s_measure, loop_weighted_f_beta


def random_pair(rng, shape=(8, 8)):
    gt = rng.uniform(size=shape) > rng.uniform(0.3, 0.8)
    if not gt.any():
        gt[rng.integers(shape[0]), rng.integers(shape[1])] = True
    if gt.all():
        gt[0, 0] = False
    pred = np.clip(0.6 * gt + rng.uniform(-0.3, 0.5, shape), 0, 1)
    return pred, gt


def test_perfect_prediction():
    gt = np.zeros((8, 8), dtype=bool)
    gt[2:6, 1:5] = True
    pred = gt.astype(float)
    assert mae(pred, gt) == 0
    assert f_beta(pred, gt) == pytest.approx(1.0)
    assert weighted_f_beta(pred, gt) == pytest.approx(1.0, abs=1e-12)
    assert s_measure(pred, gt) == pytest.approx(1.0, abs=1e-12)


def test_mae_half():
    gt = np.random.default_rng(0).uniform(size=(5, 7)) > 0.5
    assert mae(np.full((5, 7), 0.5), gt) == pytest.approx(0.5)


def test_mae_shape_mismatch():
    with pytest.raises(ValueError):
        mae(np.zeros((2, 2)), np.zeros((2, 3)))


def test_f_beta_half_recall_full_precision():
    # 4 foreground pixels, only 2 predicted: P = 1, R = 0.5
    gt = np.zeros((4, 4), dtype=bool)
    gt[0, :] = True
    pred = np.zeros((4, 4))
    pred[0, :2] = 1.0
    assert f_beta(pred, gt) == pytest.approx(1.3 * 0.5 / (0.3 + 0.5))
    assert f_beta(pred, gt) == pytest.approx(0.8125)


def test_weighted_f_beta_zero_prediction():
    # foreground kept clear of the zero-padded border of the 7x7 window
    gt = np.zeros((16, 16), dtype=bool)
    gt[5:11, 4:12] = True
    assert weighted_f_beta(np.zeros((16, 16)), gt) == pytest.approx(0.0, abs=1e-9)


def test_empty_ground_truth_is_degenerate():
    gt = np.zeros((4, 4), dtype=bool)
    with pytest.raises(DegenerateGroundTruth):
        f_beta(np.zeros((4, 4)), gt)
    with pytest.raises(DegenerateGroundTruth):
        weighted_f_beta(np.zeros((4, 4)), gt)
    assert s_measure(np.full((4, 4), 0.25), gt) == pytest.approx(0.75)
    assert s_measure(np.full((4, 4), 0.25), ~gt) == pytest.approx(0.25)


def test_nearest_foreground_prefers_raster_order():
    gt = np.zeros((3, 3), dtype=bool)
    gt[0, 1] = gt[1, 0] = True
    dist, r, c = nearest_foreground(gt)
    # (0, 0) is 1 away from both; (0, 1) comes first in raster order
    assert (r[0, 0], c[0, 0]) == (0, 1)
    assert dist[2, 2] == pytest.approx(np.sqrt(5))


def test_metrics_match_loop_oracles():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        pred, gt = random_pair(rng)
        p, g = pred.tolist(), gt.tolist()
        assert abs(mae(pred, gt) - loop_mae(p, g)) < 1e-6
        assert abs(f_beta(pred, gt) - loop_f_beta(p, g)) < 1e-6
        assert abs(weighted_f_beta(pred, gt) - loop_weighted_f_beta(p, g)) < 1e-6
        assert abs(s_measure(pred, gt) - loop_s_measure(p, g)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_mae_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(6, 9))
    b = rng.uniform(size=(6, 9)) > 0.5
    assert mae(a, b) == pytest.approx(np.abs(b - a).mean())
    assert mae(1 - a, ~b) == pytest.approx(mae(a, b))
    assert 0 <= mae(a, b) <= 1


def test_f_beta_invariant_under_level_preserving_transform():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pred, gt = random_pair(rng, (10, 10))
        q = np.rint(pred * 255).astype(int)
        present = np.unique(q[q > 0])
        targets = np.sort(rng.choice(np.arange(1, 256), size=len(present), replace=False))
        mapping = dict(zip(present, targets))
        q2 = np.array([[mapping.get(v, 0) for v in row] for row in q])
        assert f_beta(q2 / 255.0, gt) == pytest.approx(f_beta(pred, gt))


def test_all_metrics_in_unit_interval():
    rng = np.random.default_rng(9)
    for _ in range(20):
        pred, gt = random_pair(rng, (12, 10))
        for v in image_metrics(pred, gt).values():
            assert 0 <= v <= 1


def _write_set(root, preds, gts):
    (root / "pred").mkdir()
    (root / "gt").mkdir()
    for k, (p, g) in enumerate(zip(preds, gts)):
        write_gray(root / "pred" / f"{k}.png", p)
        write_mask(root / "gt" / f"{k}.png", g)


def test_evaluate_identical_dirs(tmp_path):
    rng = np.random.default_rng(1)
    gts = [random_pair(rng, (16, 24))[1] for _ in range(3)]
    _write_set(tmp_path, [g.astype(float) for g in gts], gts)
    report = evaluate(tmp_path / "gt", tmp_path / "gt")
    assert (report.mae, report.f_beta, report.weighted_f_beta) == (0.0, 1.0, pytest.approx(1.0))
    assert report.s_measure == pytest.approx(1.0)
    assert report.n_images == 3


def test_evaluate_is_mean_of_images(tmp_path):
    rng = np.random.default_rng(2)
    pairs = [random_pair(rng, (16, 24)) for _ in range(5)]
    preds = [np.rint(p * 255) / 255 for p, _ in pairs]
    gts = [g for _, g in pairs]
    _write_set(tmp_path, preds, gts)
    report = evaluate(tmp_path / "pred", tmp_path / "gt")
    per = [image_metrics(p, g) for p, g in zip(preds, gts)]
    for key in ("mae", "f_beta", "weighted_f_beta", "s_measure"):
        assert abs(getattr(report, key) - np.mean([m[key] for m in per])) < 1e-9


def test_evaluate_single_image(tmp_path):
    rng = np.random.default_rng(3)
    pred, gt = random_pair(rng, (16, 24))
    pred = np.rint(pred * 255) / 255
    _write_set(tmp_path, [pred], [gt])
    report = evaluate(tmp_path / "pred", tmp_path / "gt")
    single = image_metrics(pred, gt)
    assert report.mae == pytest.approx(single["mae"])
    assert report.s_measure == pytest.approx(single["s_measure"])


def test_evaluate_missing_file(tmp_path):
    rng = np.random.default_rng(4)
    pairs = [random_pair(rng) for _ in range(2)]
    _write_set(tmp_path, [p for p, _ in pairs], [g for _, g in pairs])
    (tmp_path / "pred" / "1.png").unlink()
    with pytest.raises(FileNotFoundError, match="1.png"):
        evaluate(tmp_path / "pred", tmp_path / "gt")


def test_evaluate_reports_skipped_empty_gt(tmp_path):
    gts = [np.zeros((8, 8), dtype=bool), np.eye(8, dtype=bool)]
    _write_set(tmp_path, [np.full((8, 8), 0.2), np.eye(8)], gts)
    report = evaluate(tmp_path / "pred", tmp_path / "gt")
    assert report.skipped == ["0.png"]
    assert report.f_beta == pytest.approx(1.0)


def test_registry_values():
    reg = BenchmarkRegistry.default()
    ours = reg.get("Ours", "after")
    assert (ours.mae, ours.f_w_beta, ours.f_beta, ours.s_m) == (0.133, 0.751, 0.811, 0.785)
    assert reg.get("R3Net†", "after").mae == 0.140
    assert reg.get("R3Net", "after").mae == 0.140
    assert reg.get("Baseline + AKT").f_beta == 0.810
    assert reg.get("Baseline").s_m == 0.770
    with pytest.raises(KeyError):
        reg.get("Ours", "before")


def test_registry_compare_zero_delta():
    reg = BenchmarkRegistry.default()
    row = reg.get("Ours")
    report = {"mae": row.mae, "f_w_beta": row.f_w_beta, "f_beta": row.f_beta, "s_m": row.s_m}
    assert registry_compare(report, reg, "Ours", "after") == {k: 0.0 for k in report}
    with pytest.raises(KeyError):
        registry_compare(report, reg, "Nope", "after")

import csv

import numpy as np
import pytest

import oracles
from inception_mamba.data import BlobSpec, gen_blob_sample
from inception_mamba.metrics import EvalReport, boundary, dice_score, hd95, iou_score


def random_pair(rng, size=24):
    # two overlapping blob masks from the generator plus pixel noise
    spec = BlobSpec(image_size=size, radius_min=3, radius_max=7)
    a = gen_blob_sample(spec, int(rng.integers(1 << 20))).mask.astype(bool)
    b = gen_blob_sample(spec, int(rng.integers(1 << 20))).mask.astype(bool)
    return a, a ^ (rng.random(a.shape) < 0.05) | b


def test_identical_masks():
    m = np.zeros((5, 5), bool)
    m[1:4, 2:4] = True
    assert dice_score(m, m) == iou_score(m, m) == 1.0 and hd95(m, m) == 0.0


def test_half_overlap():
    p, g = np.zeros((1, 3), bool), np.zeros((1, 3), bool)
    p[0, :2] = True
    g[0, 1:] = True
    assert dice_score(p, g) == 0.5 and iou_score(p, g) == pytest.approx(1 / 3, abs=1e-15)


def test_singleton_hd95():
    p, g = np.zeros((4, 4), bool), np.zeros((4, 4), bool)
    p[0, 0] = g[0, 3] = True
    assert hd95(p, g) == 3.0


def test_empty_conventions():
    empty, full = np.zeros((3, 3), bool), np.ones((3, 3), bool)
    assert dice_score(empty, empty) == iou_score(empty, empty) == 1.0
    assert dice_score(empty, full) == iou_score(empty, full) == 0.0
    assert hd95(empty, full) is None and hd95(full, empty) is None


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shapes"):
        dice_score(np.zeros((2, 2)), np.zeros((2, 3)))


def test_boundary_treats_border_as_background():
    m = np.ones((4, 4), bool)
    expect = np.ones((4, 4), bool)
    expect[1:3, 1:3] = False
    np.testing.assert_array_equal(boundary(m), expect)


@pytest.mark.parametrize("seed", range(5))
def test_boundary_matches_oracle(seed):
    a, _ = random_pair(np.random.default_rng(seed))
    pts = {tuple(map(int, q)) for q in oracles.boundary_pixels(a)}
    assert pts == set(zip(*np.nonzero(boundary(a))))


@pytest.mark.parametrize("seed", range(10))
def test_metrics_match_oracles(seed):
    p, g = random_pair(np.random.default_rng(seed))
    assert dice_score(p, g) == oracles.set_dice(p, g)
    assert iou_score(p, g) == oracles.set_iou(p, g)
    assert abs(hd95(p, g) - oracles.hd95(p, g)) < 1e-9


def test_oracle_percentile_agrees_with_linear_rule(rng):
    v = rng.random(37)
    assert oracles.percentile(v, 95) == pytest.approx(np.percentile(v, 95), abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_symmetry_order_and_rotation(seed):
    p, g = random_pair(np.random.default_rng(seed))
    assert dice_score(p, g) == dice_score(g, p) and iou_score(p, g) == iou_score(g, p)
    assert hd95(p, g) == hd95(g, p)
    d, i = dice_score(p, g), iou_score(p, g)
    assert d >= i and (d > i or d in (0.0, 1.0))
    for f in (np.rot90, np.fliplr, np.flipud):
        assert dice_score(f(p), f(g)) == d and iou_score(f(p), f(g)) == i
        assert hd95(f(p), f(g)) == pytest.approx(hd95(p, g), abs=1e-12)


def test_report_excludes_empty_hd95(tmp_path):
    rep = EvalReport()
    gt = np.zeros((4, 4), np.uint8)
    gt[1:3, 1:3] = 1
    rep.add("a", gt, gt)
    rep.add("b", np.zeros_like(gt), gt)
    assert rep.count == 2 and rep.hd95_undefined == 1
    assert rep.mean("dice") == 0.5 and rep.mean("hd95") == 0.0
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader((tmp_path / "r.csv").open()))
    assert rows[0] == ["id", "dice", "iou", "hd95"]
    assert rows[2] == ["b", "0.000000", "0.000000", ""]
    assert rows[3][0] == "mean" and rows[4][0] == "std" and rows[5] == ["count", "2", "2", "1"]


def test_report_foreground_class():
    rep = EvalReport(foreground=2)
    pred = np.array([[2, 1], [0, 2]])
    score = rep.add("x", pred, np.array([[2, 2], [0, 0]]))
    assert score.dice == 0.5

import numpy as np
import pytest

from sfda.metrics import accumulate, iou_scores, new_confusion, write_iou_table


def test_perfect_prediction(rng):
    y = rng.integers(0, 4, size=(3, 5, 5))
    cm = accumulate(new_confusion(4), y, y)
    assert np.trace(cm) == y.size
    s = iou_scores(cm)
    assert s.miou == 1.0 and s.pa == 1.0 and s.mpa == 1.0
    assert np.all(s.iou[np.isfinite(s.iou)] == 1.0)


def test_empty_input_unchanged():
    cm = new_confusion(3)
    cm[0, 1] = 2
    assert np.array_equal(accumulate(cm, np.zeros(0, int), np.zeros(0, int)), cm)


def test_associative(rng):
    p, t = rng.integers(0, 5, size=(4, 6, 6)), rng.integers(0, 5, size=(4, 6, 6))
    whole = accumulate(new_confusion(5), p, t)
    halves = accumulate(accumulate(new_confusion(5), p[:2], t[:2]), p[2:], t[2:])
    assert np.array_equal(whole, halves)


def test_disjoint_binary():
    t = np.array([0, 0, 1, 1])
    s = iou_scores(accumulate(new_confusion(2), 1 - t, t))
    assert np.array_equal(s.iou, [0.0, 0.0])


def test_hand_countable_case():
    s = iou_scores(accumulate(new_confusion(2), np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1])))
    assert s.iou[0] == pytest.approx(1 / 2)
    assert s.iou[1] == pytest.approx(2 / 3)
    assert s.miou == pytest.approx(7 / 12)
    assert s.pa == pytest.approx(3 / 4)
    assert s.mpa == pytest.approx((1 / 2 + 1) / 2)


def test_absent_class_excluded():
    s = iou_scores(accumulate(new_confusion(3), np.array([0, 1]), np.array([0, 1])))
    assert np.isnan(s.iou[2])
    assert s.miou == 1.0


def test_out_of_range():
    with pytest.raises(ValueError):
        accumulate(new_confusion(2), np.array([2]), np.array([0]))


def test_empty_matrix():
    with pytest.raises(ValueError):
        iou_scores(new_confusion(3))


def test_properties_random(rng):
    for _ in range(50):
        C = int(rng.integers(2, 7))
        p, t = rng.integers(0, C, 200), rng.integers(0, C, 200)
        s = iou_scores(accumulate(new_confusion(C), p, t))
        finite = s.iou[np.isfinite(s.iou)]
        assert np.all((finite >= 0) & (finite <= 1))
        assert s.miou <= finite.max() + 1e-12
        perm = rng.permutation(C)
        s2 = iou_scores(accumulate(new_confusion(C), perm[p], perm[t]))
        assert s2.pa == pytest.approx(s.pa)


def test_iou_table_csv(tmp_path):
    s = iou_scores(accumulate(new_confusion(2), np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1])))
    path = tmp_path / "iou.csv"
    write_iou_table(path, {"source only": s}, ["road", "sky"])
    lines = path.read_text().splitlines()
    assert lines[0] == "method,road,sky,mIoU"
    assert lines[1] == "source only,50.00,66.67,58.33"

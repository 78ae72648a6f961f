import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from viba import metrics as M
from viba.metrics import AnnotationRecord

from oracles import confusion_loops, ece_loops, iou_loops, overlap_loops, rpi_loops, tcs_loops

masks_2d = arrays(bool, st.tuples(st.integers(1, 6), st.integers(1, 6)))


def random_masks(rng, n, shape=(7, 9), p=0.3):
    return [rng.random(shape) < p for _ in range(n)]


# --- binarization ------------------------------------------------------------------

def test_binarize_hundred_distinct_values():
    m = np.random.default_rng(0).permutation(100).reshape(10, 10).astype(float)
    b = M.binarize_map(m)
    assert b.sum() in (15, 16)
    # sort-based oracle: threshold is the sorted value at floor(q * (n - 1))
    s = np.sort(m.ravel())
    thr = s[int(np.floor(0.85 * 99))]
    assert b.sum() == (m >= thr).sum() == 16


def test_binarize_degenerate():
    assert M.binarize_map(np.full((3, 3), 2.0)).all()
    assert M.binarize_map(np.arange(9.0).reshape(3, 3), q=1e-9).all()
    with pytest.raises(ValueError):
        M.binarize_map(np.zeros((2, 2)), q=1.0)


# --- IoU / TCS / RPI ------------------------------------------------------------------

def test_iou_hand_examples():
    a = np.array([[1, 1], [0, 0]], bool)
    assert M.iou(a, a) == 1
    assert M.iou(a, ~a) == 0
    assert M.iou(a, np.array([[1, 0], [1, 0]], bool)) == pytest.approx(1 / 3, abs=1e-12)
    assert M.iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 1
    with pytest.raises(ValueError):
        M.iou(a, np.zeros((3, 3), bool))


def test_tcs_hand_examples():
    assert M.tcs([np.ones((3, 3), bool)] * 2) == 1
    assert M.tcs([np.zeros((3, 3), bool)] * 2) == 0
    assert M.tcs([np.array([[1, 0], [0, 0]], bool), np.array([[1, 1], [1, 0]], bool)]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        M.tcs([])


def _dot(shape, x, y):
    m = np.zeros(shape, bool)
    m[y, x] = True
    return m


def test_rpi_hand_examples():
    a = np.zeros((10, 10), bool)
    a[2:4, 2:4] = True
    assert M.rpi([a, a, a]) == 0
    assert M.rpi([_dot((10, 10), 1, 1), _dot((10, 10), 4, 5)]) == pytest.approx(5 / math.sqrt(200), abs=1e-12)
    path = [_dot((10, 10), 0, 0), _dot((10, 10), 1, 0), _dot((10, 10), 1, 1)]
    assert M.rpi(path) == pytest.approx(1 / math.sqrt(200), abs=1e-12)


def test_rpi_skips_empty_frames():
    e = np.zeros((10, 10), bool)
    assert M.rpi([e, e]) == 0
    assert M.rpi([_dot((10, 10), 0, 0), e, _dot((10, 10), 3, 4)]) == 0
    with pytest.raises(ValueError):
        M.rpi([e])


def test_masks_match_oracles_on_random_fixtures():
    rng = np.random.default_rng(0)
    for _ in range(20):
        ms = random_masks(rng, int(rng.integers(2, 6)), (int(rng.integers(2, 9)), int(rng.integers(2, 9))))
        assert abs(M.iou(ms[0], ms[1]) - iou_loops(ms[0], ms[1])) < 1e-9
        assert abs(M.tcs(ms) - tcs_loops(ms)) < 1e-9
        assert abs(M.rpi(ms) - rpi_loops(ms)) < 1e-9


@given(masks_2d, st.data())
def test_iou_properties(a, data):
    b = data.draw(arrays(bool, a.shape))
    v = M.iou(a, b)
    assert 0 <= v <= 1 and v == M.iou(b, a)
    assert M.iou(a, a) == 1


@given(st.lists(masks_2d, min_size=2, max_size=5).filter(lambda ms: len({m.shape for m in ms}) == 1))
def test_sequence_metric_bounds(ms):
    assert 0 <= M.tcs(ms) <= 1
    assert 0 <= M.rpi(ms) <= 1
    assert 0 <= M.mean_pairwise_iou(ms) <= 1


@settings(max_examples=50)
@given(st.integers(0, 4), st.integers(0, 4), st.integers(1, 3), st.integers(1, 3))
def test_rpi_translation(x, y, dx, dy):
    a = np.zeros((12, 12), bool)
    a[y:y + 3, x:x + 3] = True
    b = np.roll(np.roll(a, dy, axis=0), dx, axis=1)
    assert M.rpi([a, b]) == pytest.approx(math.hypot(dx, dy) / math.sqrt(288))


# --- ECE --------------------------------------------------------------------------------

def test_ece_hand_examples():
    assert M.ece(np.ones(10), np.zeros(10), np.zeros(10)) == 0
    pred = np.ones(10, int)
    labels = np.array([1, 0] * 5)
    assert M.ece(np.full(10, 0.9), pred, labels) == pytest.approx(0.4, abs=1e-12)
    probs = np.column_stack([np.full(10, 0.1), np.full(10, 0.9)])
    assert M.ece(probs, pred, labels) == pytest.approx(0.4, abs=1e-12)


def test_ece_bin_edges_are_right_closed():
    # 0.5 belongs to (0.4, 0.5], 0.50001 to (0.5, 0.6]
    conf = np.array([0.5, 0.50001])
    got = M.ece(conf, np.array([1, 1]), np.array([1, 0]))
    assert got == pytest.approx(0.5 * 0.5 + 0.5 * 0.50001, abs=1e-12)


def test_ece_matches_oracle_on_random_fixtures():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(1, 60))
        conf = rng.uniform(0.5, 1.0, n)
        conf[: n // 5] = np.round(conf[: n // 5], 1)  # exercise exact bin edges
        pred, labels = rng.integers(0, 2, n), rng.integers(0, 2, n)
        assert abs(M.ece(conf, pred, labels) - ece_loops(conf.tolist(), pred, labels)) < 1e-9


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_ece_bounds(rows):
    conf, pred, lab = map(np.array, zip(*rows))
    assert 0 <= M.ece(conf, pred, lab) <= 1


def test_ece_length_mismatch():
    with pytest.raises(ValueError):
        M.ece(np.ones(3), np.ones(2), np.ones(3))


# --- classification ------------------------------------------------------------------------

def test_classification_hand_examples():
    y = np.array([0, 1] * 5)
    r = M.classification_report(y, y)
    assert (r.accuracy, r.precision, r.recall, r.f1_macro) == (1, 1, 1, 1)
    with pytest.warns(UserWarning):
        r = M.classification_report(np.ones(10, int), y)
    assert r.recall == 1 and r.precision == 0.5
    pred = np.array([1] * 9 + [1] * 3 + [0] * 1 + [0] * 7)
    lab = np.array([1] * 9 + [0] * 3 + [1] * 1 + [0] * 7)
    r = M.classification_report(pred, lab)
    assert (r.tp, r.fp, r.fn, r.tn) == (9, 3, 1, 7)
    assert r.precision == pytest.approx(0.75) and r.recall == pytest.approx(0.9)


def test_classification_matches_oracle_on_random_fixtures():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(4, 50))
        pred, lab = rng.integers(0, 2, n), rng.integers(0, 2, n)
        tp, fp, fn, tn = confusion_loops(pred.tolist(), lab.tolist())
        with np.errstate(all="ignore"):
            r = M.classification_report(pred, lab)
        assert (r.tp, r.fp, r.fn, r.tn) == (tp, fp, fn, tn)
        assert abs(r.accuracy - (tp + tn) / n) < 1e-9
        p = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        pn = tn / (tn + fn) if tn + fn else 0.0
        rn = tn / (tn + fp) if tn + fp else 0.0
        f1 = lambda a, b: 2 * a * b / (a + b) if a + b else 0.0  # noqa: E731
        assert abs(r.precision - p) < 1e-9 and abs(r.recall - rc) < 1e-9
        assert abs(r.f1_macro - (f1(p, rc) + f1(pn, rn)) / 2) < 1e-9


# --- region sets ----------------------------------------------------------------------------

def test_overlap_hand_examples():
    assert M.overlap_coefficient({"L", "B"}, {"L", "B", "C"}) == 1
    assert M.overlap_coefficient({"L"}, {"B"}) == 0
    assert M.overlap_coefficient({"L", "B", "N"}, {"B", "N", "C", "E"}) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        M.overlap_coefficient(set(), {"L"})


def test_overlap_matches_oracle_on_random_fixtures():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = set(rng.choice(M.REGION_CODES, int(rng.integers(1, 5))).tolist())
        b = set(rng.choice(M.REGION_CODES, int(rng.integers(1, 5))).tolist())
        assert abs(M.overlap_coefficient(a, b) - overlap_loops(a, b)) < 1e-9


def test_human_regions_tie_order():
    assert M.human_regions(["N", "E", "N", "E", "C"]) == ["E", "N", "C"]
    assert M.human_regions(["C", "O", "B", "L"], k=2) == ["L", "B"]


def test_annotation_code_validated():
    with pytest.raises(ValueError):
        AnnotationRecord("v", "a", "Z")


TAX = np.array([[1, 2, 3], [4, 5, 6]])


def _ann(vid, codes):
    return [AnnotationRecord(vid, f"a{i}", c) for i, c in enumerate(codes)]


def test_two_video_fixture_by_hand():
    maps = {"A": np.array([[5.0, 0, 3], [0, 1, 0]]), "B": np.array([[0, 2.0, 0], [0, 0, 0]])}
    ann = _ann("A", "LLEBBN") + _ann("B", "CCCE")
    rep = M.region_agreement(maps, {"A": TAX, "B": TAX}, ann)
    a, b = rep.videos
    assert a.model_set == ["L", "B", "O"] and a.human_set == ["L", "B", "E"]
    assert b.model_set == ["E"] and b.human_set == ["C", "E"]
    assert rep.f1_macro == pytest.approx(2 / 3)
    assert rep.precision == pytest.approx(5 / 6)
    assert rep.recall == pytest.approx(7 / 12)
    assert rep.overlap == pytest.approx(5 / 6)
    assert rep.top1_rate == 0.5
    assert rep.model_frequency["L"] == 1 and rep.human_frequency["C"] == 3


def test_identical_sets_give_perfect_agreement():
    maps = {"A": np.array([[3.0, 2, 1], [0, 0, 0]])}
    rep = M.region_agreement(maps, {"A": TAX}, _ann("A", "LLLEEB"))
    assert rep.f1_macro == 1 and rep.top1_rate == 1


def test_background_mass_gives_empty_model_set():
    tax = np.array([[0, 0, 1], [2, 3, 4]])
    maps = {"A": np.array([[4.0, 1, 0], [0, 0, 0]])}
    rep = M.region_agreement(maps, {"A": tax}, _ann("A", "LLE"))
    assert rep.videos[0].model_set == [] and rep.recall == 0 and rep.overlap == 0


def test_agreement_missing_inputs():
    with pytest.raises(KeyError):
        M.region_agreement({"A": np.zeros((2, 3))}, {}, _ann("A", "L"))
    with pytest.raises(KeyError):
        M.region_agreement({"A": np.zeros((2, 3))}, {"A": TAX}, _ann("B", "L"))
    with pytest.raises(ValueError):
        M.model_regions(np.zeros((3, 3)), TAX)


# --- report files ----------------------------------------------------------------------------

def test_csv_formatting(tmp_path):
    M.write_csv(tmp_path / "r.csv", ["a", "b", "c", "d"], [[1, 0.5, True, "x"], [np.int64(2), np.float32(1 / 3), False, ""]])
    assert (tmp_path / "r.csv").read_text() == "a,b,c,d\n1,0.500000,1,x\n2,0.333333,0,\n"

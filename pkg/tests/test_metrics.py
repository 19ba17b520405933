import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forestwsl.metrics_eval import (
    ConfusionMatrix,
    confusion,
    dumps_report,
    f1_score,
    format_table,
    prf,
    prf_from_counts,
    report,
)
from forestwsl.raster_core import FOREST, NON_FOREST, ClassMap


def test_confusion_perfect_prediction():
    truth = np.random.default_rng(0).integers(0, 2, size=(7, 9))
    c = confusion(truth, truth).counts
    assert c[0, 1] == c[1, 0] == 0 and c[0, 0] + c[1, 1] == 63


def test_confusion_all_unlabeled():
    cm = confusion(np.zeros((3, 3), np.uint8), np.full((3, 3), 255, np.uint8))
    assert cm.total == 0 and not cm.counts.any()


def test_confusion_hand_case():
    pred = np.array([[0, 1], [1, 0]], np.uint8)
    truth = np.array([[0, 1], [0, 1]], np.uint8)
    assert confusion(ClassMap(pred), ClassMap(truth)).counts.tolist() == [[1, 1], [1, 1]]


def test_confusion_indexing_is_truth_then_prediction():
    cm = confusion(np.array([1, 1, 1]), np.array([0, 0, 1]))
    assert cm.counts.tolist() == [[0, 2], [0, 1]]
    assert cm.outcomes(FOREST) == (1, 2, 0, 0)
    assert cm.outcomes(NON_FOREST) == (0, 0, 2, 1)


def test_confusion_skips_unlabeled_truth():
    pred = np.array([0, 1, 1, 0])
    truth = np.array([0, 255, 1, 255])
    cm = confusion(pred, truth)
    assert cm.total == 2 and cm.counts.tolist() == [[1, 0], [0, 1]]


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        confusion(np.array([0, 255]), np.array([0, 1]))
    with pytest.raises(ValueError):
        ConfusionMatrix(np.array([[1, -1], [0, 0]]))
    with pytest.raises(ValueError):
        ConfusionMatrix(np.zeros((3, 3)))


@pytest.mark.parametrize(
    "p, r, f",
    [
        (0.90, 0.973, 0.935),
        # the table prints this F1 as 0.94 (two decimals); 2PR/(P+R) = 0.94076 is 0.00076 away
        pytest.param(0.902, 0.983, 0.940, marks=pytest.mark.xfail(strict=True, reason="printed F1 has two decimals")),
    ],
)
def test_f1_reported_examples(p, r, f):
    assert abs(f1_score(p, r) - f) <= 0.0005


def test_f1_inaccurate_row_matches_printed_precision():
    value = f1_score(0.902, 0.983)
    assert value == pytest.approx(0.9407596817, abs=1e-10)
    assert round(value, 2) == 0.94


def test_prf_undefined_is_none_not_zero():
    assert prf_from_counts(0, 0, 0) == (None, None, None)
    m = prf_from_counts(0, 0, 5)
    assert m.precision is None and m.recall == 0.0 and m.f1 is None
    # both defined and zero: harmonic mean is 0/0
    assert prf_from_counts(0, 3, 4).f1 is None
    assert f1_score(0.0, 0.0) is None


def test_prf_matches_definition():
    cm = ConfusionMatrix(np.array([[50, 10], [5, 35]]))
    p, r, f = prf(cm, FOREST)
    assert p == 35 / 45 and r == 35 / 40
    assert f == pytest.approx(2 * p * r / (p + r), rel=1e-15)
    p0, r0, _ = prf(cm, NON_FOREST)
    assert p0 == 50 / 55 and r0 == 50 / 60


counts = st.lists(st.integers(0, 10_000), min_size=4, max_size=4).map(lambda v: np.array(v).reshape(2, 2))


@settings(max_examples=200, deadline=None)
@given(c=counts)
def test_swapping_classes_is_an_involution(c):
    cm = ConfusionMatrix(c)
    swapped = ConfusionMatrix(c[::-1, ::-1])
    tp, fp, fn, tn = cm.outcomes(FOREST)
    assert swapped.outcomes(NON_FOREST) == (tp, fp, fn, tn)
    assert cm.outcomes(NON_FOREST) == (tn, fn, fp, tp)
    assert prf(swapped, NON_FOREST) == prf(cm, FOREST)
    assert ConfusionMatrix(swapped.counts[::-1, ::-1]).counts.tolist() == c.tolist()


@settings(max_examples=200, deadline=None)
@given(c=counts, cls=st.sampled_from([NON_FOREST, FOREST]))
def test_f1_between_precision_and_recall(c, cls):
    p, r, f = prf(ConfusionMatrix(c), cls)
    if f is not None:
        assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 200))
def test_confusion_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 2, n)
    truth = rng.choice(np.array([0, 1, 255]), n)
    perm = rng.permutation(n)
    assert confusion(pred, truth).counts.tolist() == confusion(pred[perm], truth[perm]).counts.tolist()
    # independent count by enumeration
    expected = np.zeros((2, 2), int)
    for a, b in zip(pred, truth):
        if b != 255:
            expected[b, a] += 1
    assert confusion(pred, truth).counts.tolist() == expected.tolist()


def _maps(seed=0):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 2, size=(20, 20)).astype(np.uint8)
    truth[0, :5] = 255
    a = np.where(rng.random((20, 20)) < 0.1, 1 - (truth % 2), truth % 2).astype(np.uint8)
    b = rng.integers(0, 2, size=(20, 20)).astype(np.uint8)
    return ClassMap(truth), {"dense": ClassMap(a), "incomplete": ClassMap(b)}


def test_report_cardinality_bytes_and_recompute(tmp_path):
    truth, preds = _maps()
    records = report(preds, truth, tmp_path / "a.json", seed=7, cfg_hash="abc")
    report(preds, truth, tmp_path / "b.json", seed=7, cfg_hash="abc")
    assert len(records) == 4
    assert [(r["method"], r["class"]) for r in records] == [
        ("dense", "non-forest"), ("dense", "forest"), ("incomplete", "non-forest"), ("incomplete", "forest"),
    ]
    raw = (tmp_path / "a.json").read_bytes()
    assert raw == (tmp_path / "b.json").read_bytes()
    assert raw.decode() == dumps_report(json.loads(raw))
    for r in json.loads(raw):
        assert r["seed"] == 7 and r["config_hash"] == "abc"
        assert r["tp"] + r["fp"] + r["fn"] + r["tn"] == 395
        # recompute from the stored maps, independently of the module
        pred = preds[r["method"]].values
        pos = 0 if r["class"] == "non-forest" else 1
        lab = truth.values != 255
        tp = int(((pred == pos) & (truth.values == pos) & lab).sum())
        fp = int(((pred == pos) & (truth.values != pos) & lab).sum())
        fn = int(((pred != pos) & (truth.values == pos) & lab).sum())
        assert (r["tp"], r["fp"], r["fn"]) == (tp, fp, fn)
        p, rec = tp / (tp + fp), tp / (tp + fn)
        assert r["precision"] == round(p, 3) and r["recall"] == round(rec, 3)
        assert r["f1"] == round(2 * p * rec / (p + rec), 3)


def test_report_errors_and_undefined(tmp_path):
    truth, _ = _maps()
    with pytest.raises(ValueError):
        report({}, truth, tmp_path / "x.json", seed=0, cfg_hash="h")
    with pytest.raises(ValueError):
        report({"m": ClassMap(np.zeros((3, 3), np.uint8))}, truth, tmp_path / "x.json", seed=0, cfg_hash="h")
    all_zero = ClassMap(np.zeros((2, 2), np.uint8))
    records = report({"m": all_zero}, all_zero, tmp_path / "u.json", seed=0, cfg_hash="h")
    forest = records[1]
    assert forest["precision"] is None and forest["recall"] is None and forest["f1"] is None
    assert json.loads((tmp_path / "u.json").read_text())[1]["f1"] is None
    table = format_table(records)
    assert "n/a" in table and len(table.splitlines()) == 3

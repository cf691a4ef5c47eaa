import numpy as np
import pytest

from mscaps.evaluation import ConfusionCounts, confusion, infer_change_map, metrics, parse_record
from mscaps.preprocessing import DifferenceImage
from mscaps.training import Checkpoint, TrainConfig, init_params

from oracles import confusion_loops


def _kappa_oracle(tp, tn, fp, fn):
    n = tp + tn + fp + fn
    po = (tp + tn) / n
    pe = ((tp + fp) / n) * ((tp + fn) / n) + ((tn + fn) / n) * ((tn + fp) / n)
    return 100 * (po - pe) / (1 - pe)


def test_table_row_oe_and_pcc():
    # the class split is not published; any split with these error counts gives the same OE and PCC
    for tp in (0, 3000, 9000):
        c = ConfusionCounts(TP=tp, TN=65536 - 425 - 779 - tp, FP=425, FN=779)
        m = metrics(c)
        assert m.OE == 1204
        assert abs(m.PCC - 98.16) <= 0.01


def test_kappa_half_example():
    m = metrics(ConfusionCounts(TP=25, TN=50, FP=0, FN=25))
    assert abs(m.KC - 50.0) < 1e-12
    assert abs(m.PCC - 75.0) < 1e-12


def test_kappa_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        tp, tn, fp, fn = (int(x) for x in rng.integers(1, 1000, size=4))
        assert abs(metrics(ConfusionCounts(tp, tn, fp, fn)).KC - _kappa_oracle(tp, tn, fp, fn)) < 1e-9


def test_perfect_and_degenerate():
    m = metrics(ConfusionCounts(10, 90, 0, 0))
    assert (m.OE, m.PCC, m.KC) == (0, 100.0, 100.0)
    m = metrics(ConfusionCounts(0, 100, 0, 0))  # single class, perfect agreement
    assert m.KC == 100.0
    with pytest.raises(ValueError):
        metrics(ConfusionCounts(0, 0, 0, 0))


def test_confusion_matches_loops():
    rng = np.random.default_rng(5)
    p = rng.integers(0, 2, size=(30, 20))
    t = rng.integers(0, 2, size=(30, 20))
    c = confusion(p, t)
    assert (c.TP, c.TN, c.FP, c.FN) == confusion_loops(p, t)
    with pytest.raises(ValueError):
        confusion(p, t[:, :10])


def test_record_format_and_parse():
    m = metrics(ConfusionCounts(1, 2, 3, 4))
    rec = m.record()
    assert rec.startswith("FP=3 FN=4 OE=7 PCC=")
    back = parse_record(rec)
    assert back["OE"] == 7 and abs(back["PCC"] - m.PCC) < 0.005


def test_infer_change_map_shape_and_consistency():
    rng = np.random.default_rng(0)
    di = DifferenceImage(rng.uniform(size=(6, 7)))
    cfg = TrainConfig(epochs=0)
    ck = Checkpoint(init_params(0, cfg), cfg, [])
    a = infer_change_map(di, ck, batch=5)
    b = infer_change_map(di, ck, batch=64)
    assert a.shape == (6, 7) and a.dtype == np.uint8
    assert set(np.unique(a)) <= {0, 1}
    np.testing.assert_array_equal(a, b)


def test_kappa_small_hand_example():
    m = metrics(ConfusionCounts(TP=2, TN=1, FP=1, FN=0))
    assert abs(m.KC - 50.0) < 1e-12 and m.PCC == 75.0


def test_class_swap_symmetry():
    rng = np.random.default_rng(9)
    for _ in range(20):
        tp, tn, fp, fn = (int(x) for x in rng.integers(0, 500, size=4))
        if tp + tn + fp + fn == 0:
            continue
        a = metrics(ConfusionCounts(tp, tn, fp, fn))
        b = metrics(ConfusionCounts(tn, tp, fn, fp))
        assert abs(a.PCC - b.PCC) < 1e-12 and abs(a.KC - b.KC) < 1e-9
        assert 0 <= a.PCC <= 100 and a.KC <= 100

import numpy as np
import pytest

from fedshield import model_math as mm
from fedshield.attacks import TriggerSpec
from fedshield.data import LabeledDataset
from fedshield.metrics import compute_metrics, fidelity_score, metrics_from_predictions


def test_perfect_classifier():
    y = np.array([0, 1, 2, 1, 0, 2])
    m = metrics_from_predictions(y, y, source=1, target=2)
    assert (m.ma, m.rcl, m.asr) == (100.0, 100.0, 0.0)
    assert np.isnan(m.ba)


def test_constant_prediction_of_target():
    y = np.array([0, 1, 2, 1, 0, 2])
    m = metrics_from_predictions(np.full(6, 2), y, source=1, target=2)
    assert m.ma == pytest.approx(100 / 3) and m.rcl == 0.0 and m.asr == 100.0


def test_hand_count_ten_samples():
    y = np.array([0, 0, 1, 1, 1, 1, 2, 2, 3, 3])
    p = np.array([0, 1, 1, 3, 3, 1, 2, 0, 3, 3])
    m = metrics_from_predictions(p, y, source=1, target=3)
    assert m.ma == 60.0 and m.rcl == 50.0 and m.asr == 50.0
    tp = np.array([3, 3, 3, 1, 3, 3, 3, 0, 3, 3])
    m = metrics_from_predictions(p, y, 1, 3, tp, y, backdoor_class=3)
    assert m.ba == 75.0        # 6 of the 8 non-target samples land on class 3


def test_missing_source_is_nan():
    m = metrics_from_predictions([0, 0], [0, 2], source=1, target=2)
    assert np.isnan(m.rcl) and np.isnan(m.asr)


def test_compute_metrics_with_trigger():
    arch = mm.Architecture(2, 2)
    # class 1 iff x0 > 0
    W = np.array([-1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    test = LabeledDataset(np.array([[-1.0, 0.0], [1.0, 0.0], [-2.0, 0.0]]), [0, 1, 0])
    m = compute_metrics(W, arch, test, source=0, target=1, trigger=TriggerSpec((0,), [5.0], 1, 1))
    assert m.ma == 100.0 and m.ba == 100.0


@pytest.mark.parametrize("assign,flags,expected", [
    ([0, 0, 1, 1], [0, 0, 1, 1], 1.0),
    ([0, 0, 0, 0], [0, 0, 0, 1], 0.75),
    ([0, 0, 0, 1, 1, 1], [0, 0, 1, 1, 1, 1], 5 / 6),
    ([0, 1], [0, 1], 1.0),
])
def test_fidelity_examples(assign, flags, expected):
    assert fidelity_score(assign, flags) == pytest.approx(expected)


def test_fidelity_bounds():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, f = rng.integers(0, 4, 20), rng.integers(0, 2, 20)
        assert 0.5 <= fidelity_score(a, f) <= 1.0
    assert np.isnan(fidelity_score([], []))

from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sava.config import AttackConfig
from sava.data import SynthConfig, generate_synthetic_dataset
from sava.metrics import (MetricsInput, aap, aap_formula, ani, asp, fmt, fooling_rate,
                          l21_distance, normal_ci99, transfer_from_predictions)
from sava.models import init_classifier, train
from sava.runner import transfer_matrix


@dataclass
class R:
    success: bool
    iterations: int = 0
    ssim_distance: float = 0.0
    l21_distance: float = 0.0


def test_fooling_rate_cases():
    assert fooling_rate([R(True)] * 3) == 1.0
    assert fooling_rate([R(False)] * 2) == 0.0
    assert fooling_rate([R(True), R(True), R(False), R(True)]) == 0.75
    with pytest.raises(ValueError):
        fooling_rate([])


def test_ani_cases():
    assert ani([R(True, 8)]) == 8
    assert ani([R(True, 6), R(True, 10), R(False, 100)]) == 8
    assert ani([R(False, 100)]) is None
    assert fmt(ani([R(False, 100)])) == "-"


def test_asp_uses_successes_only():
    assert asp([R(True, ssim_distance=0.02), R(True, ssim_distance=0.04), R(False, ssim_distance=0.5)]) == pytest.approx(0.03)
    assert asp([R(False)]) is None


def test_aap_hand_cases():
    assert aap_formula(1.0, 0.05, 0.1) == pytest.approx(0.05)
    assert aap_formula(0.0, None, 0.1) == pytest.approx(0.1)
    assert aap_formula(0.5, 0.05, 0.1) == pytest.approx(0.075, abs=1e-15)
    results = [R(True, ssim_distance=0.05), R(False, ssim_distance=0.9)]
    assert aap(MetricsInput(results, 0.1)) == pytest.approx(0.075, abs=1e-15)
    results = [R(True, l21_distance=0.02), R(True, l21_distance=0.04)]
    assert aap(MetricsInput(results, 0.1, "l21")) == pytest.approx(0.03)
    with pytest.raises(ValueError):
        MetricsInput(results, 0.0)


def test_l21_hand_cases():
    d = np.zeros((2, 4, 5, 3))
    assert l21_distance(d) == 0.0
    d[0] = 0.1
    assert l21_distance(d) == pytest.approx(0.05, abs=1e-15)
    rng = np.random.default_rng(0)
    e = rng.normal(size=(3, 4, 4, 2))
    assert l21_distance(2 * e) == pytest.approx(2 * l21_distance(e), rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=20))
def test_ci_brackets_mean(values):
    mean, half = normal_ci99(values)
    assert mean == pytest.approx(np.mean(values))
    assert half >= 0
    sd = np.std(values, ddof=1)
    assert half == pytest.approx(2.5758293035489004 * sd / np.sqrt(len(values)), abs=1e-12)


def test_fmt():
    assert fmt(None) == "-"
    assert fmt(float("nan")) == "-"
    assert fmt(0.5) == "0.500000"


def test_transfer_from_predictions():
    m = transfer_from_predictions(["a", "b"], [[0, 1], []], [[[1, 0], [1, 1]], [[], []]])
    assert m.values[0] == [1.0, 0.5]
    assert m.values[1] == [None, None]
    assert m.counts == [2, 0]
    assert m.to_csv().splitlines() == ["source,a,b,successes", "a,1.0000,0.5000,2", "b,-,-,0"]


@pytest.fixture(scope="module")
def small_models():
    cfg = SynthConfig(num_videos=24, T=4, H=8, W=8, shape_size=3, seed=3)
    records = generate_synthetic_dataset(cfg)
    models = []
    for i, arch in enumerate(("frame_cnn_meanpool", "conv3d", "frame_cnn_recurrent")):
        spec = init_classifier(arch, (4, 8, 8, 3), 4, seed=i)
        models.append(train(spec, records, epochs=4, lr=1e-2, seed=i)[0])
    return models, records[:6]


def test_transfer_single_model_is_one(small_models):
    models, records = small_models
    cfg = AttackConfig(max_iters=30, lr=0.05)
    m = transfer_matrix(models[:1], records, cfg, policy="first", k=2)
    if m.counts[0]:
        assert m.values == [[1.0]]
    else:
        assert m.values == [[None]]


def test_transfer_identical_models_fool_each_other(small_models):
    models, records = small_models
    cfg = AttackConfig(max_iters=30, lr=0.05)
    m = transfer_matrix([models[0], models[0].copy()], records, cfg, policy="first", k=2)
    assert m.counts[0] > 0
    assert m.values[0] == [1.0, 1.0] and m.values[1] == [1.0, 1.0]


def test_transfer_three_models(small_models):
    models, records = small_models
    cfg = AttackConfig(max_iters=30, lr=0.05)
    m = transfer_matrix(models, records, cfg, names=["mp", "c3", "gru"], policy="first", k=2)
    assert m.names == ["mp", "c3", "gru"]
    for i, row in enumerate(m.values):
        if m.counts[i]:
            assert row[i] == 1.0
            assert all(0.0 <= v <= 1.0 for v in row)

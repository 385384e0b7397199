import math

import numpy as np
import pytest
import torch

from latent_soc.grad_core import ContractViolation
from latent_soc.downstream import (
    PROBE_GRID,
    FinetuneHyper,
    ProbeHyper,
    _layer_groups,
    extract_features,
    finetune,
    finetune_predict,
    metrics,
    pearson,
    probe_fit,
    probe_predict,
    probe_search,
    split,
    task_loss,
    universal_feature,
    zscore,
)
from latent_soc.networks import LatentSOCModel, ModelConfig

SMALL = ModelConfig(n=3, d=4, blocks=2, heads=2, bases=2, dropout=0.0)


def test_universal_feature_is_time_mean():
    alpha = torch.tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]])
    assert torch.equal(universal_feature(alpha), torch.tensor([3.0, 2.0]))
    with pytest.raises(ContractViolation):
        universal_feature(torch.zeros(0, 2))


def test_task_loss_values():
    assert task_loss([0.5], [1.0], "cls").item() == pytest.approx(math.log(2))
    assert math.isfinite(task_loss([0.0], [1.0], "cls").item())
    assert task_loss([0.0], [1.0], "cls").item() == pytest.approx(-math.log(1e-7))
    assert task_loss([1.0, 2.0], [1.0, 4.0], "reg").item() == pytest.approx(2.0)
    with pytest.raises(ContractViolation, match="unknown task"):
        task_loss([0.5], [1.0], "rank")


def test_metric_examples():
    m = metrics([1, 2, 3], [1, 2, 4], "reg")
    assert m["mse"] == pytest.approx(1 / 3)
    assert m["rho"] == pytest.approx(0.9819805, abs=1e-6)
    c = metrics([0.9, 0.2, 0.6, 0.4], [1, 0, 0, 1], "cls")
    assert c["acc"] == 0.5 and c["f1"] == pytest.approx(0.5)


def test_pearson_zero_variance_warns():
    with pytest.warns(UserWarning, match="zero-variance"):
        assert pearson([1, 1, 1], [1, 2, 3]) == 0.0
    with pytest.raises(ContractViolation):
        pearson([1], [1])


def test_split_stratified_and_disjoint(rng):
    labels = np.array([0] * 60 + [1] * 40, float)
    tr, va, te = split(labels, "cls", seed=0)
    assert len(set(tr) | set(va) | set(te)) == 100
    assert not (set(tr) & set(va)) and not (set(va) & set(te))
    assert (len(tr), len(va), len(te)) == (60, 20, 20)
    assert labels[tr].mean() == pytest.approx(0.4)
    a = split(labels, "cls", seed=1)
    assert not np.array_equal(a[0], tr)
    assert all(np.array_equal(x, y) for x, y in zip(split(labels, "cls", seed=1), a))


def test_split_regression_bins(rng):
    y = rng.standard_normal(200)
    tr, va, te = split(y, "reg", seed=0)
    assert len(tr) == 120 and len(va) == 40 and len(te) == 40


def test_split_rejects_tiny_stratum():
    with pytest.raises(ContractViolation, match="stratum 1"):
        split(np.array([0, 0, 0, 0, 1, 1], float), "cls", 0)


def test_probe_recovers_linear_rule(rng):
    X = rng.standard_normal((300, 3))
    y = X @ np.array([1.0, -2.0, 0.5]) + 0.1 * rng.standard_normal(300)
    probe = probe_fit(X[:200], y[:200], "reg", ProbeHyper(lr=0.01, batch=32, epochs=100))
    assert metrics(probe_predict(probe, X[200:]), y[200:], "reg")["rho"] > 0.99


def test_probe_classifies_separable_data(rng):
    X = rng.standard_normal((200, 2)) * 0.3 + np.repeat([[2.0, 0.0], [-2.0, 0.0]], 100, 0) + 100.0
    y = np.repeat([1.0, 0.0], 100)
    probe = probe_fit(X, y, "cls")
    assert metrics(probe_predict(probe, X), y, "cls")["acc"] == 1.0


def test_probe_constant_labels_warn():
    with pytest.warns(UserWarning, match="identical"):
        probe = probe_fit(np.ones((5, 2)), np.full(5, 2.5), "reg")
    assert np.array_equal(probe_predict(probe, np.zeros((3, 2))), np.full(3, 2.5))


def test_probe_input_validation():
    with pytest.raises(ContractViolation, match="non-finite"):
        probe_fit(np.array([[np.nan], [1.0]]), [0.0, 1.0], "reg")
    with pytest.raises(ContractViolation, match="0 or 1"):
        probe_fit(np.ones((2, 1)), [0.0, 2.0], "cls")


def test_probe_does_not_modify_features(rng):
    X = rng.standard_normal((40, 3))
    before = X.copy()
    probe_fit(X, rng.standard_normal(40), "reg", ProbeHyper(epochs=2))
    assert np.array_equal(X, before)


def test_probe_grid_and_search(rng):
    assert len(PROBE_GRID) == 12
    X = rng.standard_normal((90, 2))
    y = X[:, 0]
    probe, hyper = probe_search(X[:60], y[:60], X[60:], y[60:], "reg", grid=PROBE_GRID[:2])
    assert hyper in PROBE_GRID[:2] and probe.head is not None


def test_zscore_uses_training_stats():
    tr, te = zscore([1.0, 3.0], [5.0])
    assert np.allclose(tr, [-1, 1]) and np.allclose(te, [3.0])


def test_extract_features_shape(rng):
    model = LatentSOCModel(SMALL)
    f = extract_features(model, np.tile(np.arange(8) * 0.1, (5, 1)), rng.standard_normal((5, 8, 3)), batch=2)
    assert f.shape == (5, 4)


def test_layer_groups_decay():
    model = LatentSOCModel(SMALL)
    groups = _layer_groups(model, torch.nn.Linear(4, 1), FinetuneHyper(lr=1.0, layer_decay=0.5))
    assert [g["lr"] for g in groups] == [1.0, 0.125, 0.25, 0.5]


def test_finetune_learns_and_leaves_original(rng):
    model = LatentSOCModel(SMALL)
    before = [p.clone() for p in model.parameters()]
    n = 60
    times = np.tile(np.arange(10) * 0.1, (n, 1))
    y = np.repeat([0.0, 1.0], n // 2)
    values = rng.standard_normal((n, 10, 3)) + 1.5 * (2 * y - 1)[:, None, None]
    tuned, probe = finetune(model, times, values, y, "cls", FinetuneHyper(lr=0.01, epochs=15, batch=16))
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))
    assert metrics(finetune_predict(tuned, probe, times, values), y, "cls")["acc"] > 0.9


def test_universal_feature_invariances(rng):
    alpha = torch.as_tensor(rng.standard_normal((7, 3)))
    f = universal_feature(alpha)
    assert torch.allclose(universal_feature(alpha[torch.randperm(7)]), f, atol=1e-15)
    assert torch.allclose(universal_feature(2.5 * alpha), 2.5 * f, atol=1e-15)
    assert torch.equal(universal_feature(torch.tensor([[1.0, 2.0], [3.0, 4.0]])), torch.tensor([2.0, 3.0]))


def test_loss_and_metric_extremes():
    assert task_loss([1.0, 2.0], [1.0, 2.0], "reg").item() == 0.0
    assert task_loss([1.0, 0.0], [1.0, 0.0], "cls").item() <= 1e-6
    assert metrics([1.0, 2.0, 3.0], [-1.0, -2.0, -3.0], "reg")["rho"] == pytest.approx(-1.0)


def test_probe_fits_realisable_regression(rng):
    X = rng.standard_normal((200, 2))
    y = X @ np.array([0.7, -1.2]) + 0.3
    probe = probe_fit(X, y, "reg", ProbeHyper(lr=0.01, batch=32, epochs=200))
    assert metrics(probe_predict(probe, X), y, "reg")["mse"] < 1e-4


def test_probing_leaves_encoder_untouched(rng):
    model = LatentSOCModel(SMALL)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    times = np.tile(np.arange(6) * 0.1, (20, 1))
    X = extract_features(model, times, rng.standard_normal((20, 6, 3)))
    probe_fit(X, rng.standard_normal(20), "reg", ProbeHyper(epochs=2))
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_split_keeps_class_proportions():
    labels = np.array([0] * 70 + [1] * 30, float)
    for part, size in zip(split(labels, "cls", seed=3), (60, 20, 20)):
        assert abs(labels[part].sum() - 0.3 * size) <= 1

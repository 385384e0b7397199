import csv

import numpy as np
import pytest

from latent_soc.data_io import SynthConfig, generate
from latent_soc.downstream import ProbeHyper
from latent_soc.experiments import ablation, is_unimodal, judge, sweep_means, write_ablation
from latent_soc.networks import ModelConfig
from latent_soc.pretrain import PretrainConfig


def _rows(gamma_curve, tau_curve):
    rows = [{"sweep": "gamma", "gamma": g, "tau": 0.01, "seed": 0, "rho": r} for g, r in gamma_curve.items()]
    rows += [{"sweep": "tau", "gamma": 0.75, "tau": t, "seed": 0, "rho": r} for t, r in tau_curve.items()]
    return rows


def test_unimodal():
    assert is_unimodal([1, 2, 3, 2, 1])
    assert is_unimodal([1, 1, 2])
    assert not is_unimodal([1, 3, 2, 3, 1])


def test_judge_accepts_expected_shape():
    rows = _rows({0.4: 0.5, 0.6: 0.7, 0.75: 0.8, 0.9: 0.6}, {0.0: 0.7, 0.01: 0.8, 0.1: 0.6})
    v = judge(rows)
    assert v.passed and v.gamma_peak == 0.75


def test_judge_rejects_edge_peak_and_harmful_tau():
    v = judge(_rows({0.4: 0.9, 0.6: 0.7, 0.9: 0.6}, {0.0: 0.9, 0.01: 0.8, 0.1: 0.9}))
    assert not v.gamma_peak_interior and not v.tau_small_helps and not v.tau_large_degrades
    assert not v.passed


def test_sweep_means_average_seeds():
    rows = [{"sweep": "tau", "tau": 0.0, "rho": 0.2}, {"sweep": "tau", "tau": 0.0, "rho": 0.4}]
    xs, ys = sweep_means(rows, "tau")
    assert xs.tolist() == [0.0] and ys[0] == pytest.approx(0.3)


def test_ablation_shares_runs_and_writes(tmp_path):
    data = generate(SynthConfig(n=4, length=20, n_series=30), np.random.default_rng(0))
    base = PretrainConfig(epochs=1, warmup=0, batch=10, T=12, gamma=0.5)
    model_cfg = ModelConfig(n=4, d=4, blocks=1, heads=1, bases=2, dropout=0.0)
    rows = ablation(data, base, model_cfg, seeds=(0,), gammas=(0.5, 0.6), taus=(0.0, 0.01),
                    grid=[ProbeHyper(epochs=3)])
    assert len(rows) == 4
    shared = [r for r in rows if r["gamma"] == 0.5 and r["tau"] == 0.01]
    assert len(shared) == 2 and shared[0]["rho"] == shared[1]["rho"]
    write_ablation(rows, tmp_path / "a.csv", tmp_path / "a.png")
    assert len(list(csv.reader(open(tmp_path / "a.csv")))) == 5
    assert (tmp_path / "a.png").stat().st_size > 0

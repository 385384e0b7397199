"""Pre-train then probe, and the mask-ratio / regulariser-weight sweeps."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .data_io import Dataset, csv_export, robust_scale
from .downstream import PROBE_GRID, extract_features, metrics, probe_predict, probe_search, split, zscore
from .networks import LatentSOCModel, ModelConfig
from .objective import LossConfig
from .pretrain import PretrainConfig, reconstruction_mse, train

GAMMA_GRID = (0.4, 0.5, 0.6, 0.7, 0.75, 0.8, 0.9)
TAU_GRID = (0.0, 0.005, 0.01, 0.03, 0.1)
ABLATION_HEADER = ["sweep", "gamma", "tau", "seed", "rho", "reg_mse", "acc", "f1", "recon_mse", "baseline_mse"]


def probe_all(model: LatentSOCModel, data: Dataset, medians, iqrs, seed: int, grid=PROBE_GRID,
              tasks=(("cls", "regime"), ("reg", "target"))) -> dict[str, float]:
    """Linear-probe every task on one split seed and report test metrics."""
    values = robust_scale(data.values, medians, iqrs)
    times = data.timestamps * data.time_scale
    feats = extract_features(model, times, values)
    out = {}
    for task, name in tasks:
        y = data.label(name)
        tr, va, te = split(y, task, seed)
        ytr, yva, yte = zscore(y[tr], y[va], y[te]) if task == "reg" else (y[tr], y[va], y[te])
        probe, _ = probe_search(feats[tr], ytr, feats[va], yva, task, grid, seed)
        m = metrics(probe_predict(probe, feats[te]), yte, task)
        out.update({"reg_mse": m["mse"], "rho": m["rho"]} if task == "reg" else m)
    return out


@dataclass
class PipelineResult:
    model: LatentSOCModel
    probes: list[dict[str, float]]
    recon_mse: float
    baseline_mse: float
    seconds: float


def run_pipeline(data: Dataset, cfg: PretrainConfig, model_cfg: ModelConfig, seeds=(0, 1, 2),
                 grid=PROBE_GRID, log=None) -> PipelineResult:
    start = time.perf_counter()
    res = train(data, cfg, model_cfg, log=log)
    values = robust_scale(data.values, res.medians, res.iqrs)
    recon, base = reconstruction_mse(res.model, data.timestamps * data.time_scale, values, cfg, seed=10_000 + cfg.seed)
    probes = [probe_all(res.model, data, res.medians, res.iqrs, s, grid) for s in seeds]
    return PipelineResult(res.model, probes, recon, base, time.perf_counter() - start)


def ablation(data: Dataset, base: PretrainConfig, model_cfg: ModelConfig, seeds=(0, 1, 2),
             gammas=GAMMA_GRID, taus=TAU_GRID, grid=PROBE_GRID, progress=None) -> list[dict]:
    """One pre-train + probe per (setting, seed). The gamma sweep holds the base tau and vice versa."""
    # tau is derived from lam, so round it to share cache entries with the tau sweep
    base_tau = round(base.loss.tau, 12)
    settings = [("gamma", g, base_tau) for g in gammas] + [("tau", base.gamma, t) for t in taus]
    cache, rows = {}, []
    for sweep, gamma, tau in settings:
        for seed in seeds:
            key = (gamma, tau, seed)
            if key not in cache:
                loss = LossConfig.from_tau(tau, base.loss.sigma_p2, base.loss.sigma_q2, base.loss.sigma_gamma2)
                cfg = replace(base, gamma=gamma, loss=loss, seed=seed)
                res = run_pipeline(data, cfg, model_cfg, seeds=(seed,), grid=grid)
                cache[key] = {**res.probes[0], "recon_mse": res.recon_mse, "baseline_mse": res.baseline_mse}
            row = {"sweep": sweep, "gamma": gamma, "tau": tau, "seed": seed, **cache[key]}
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def sweep_means(rows: list[dict], sweep: str, metric: str = "rho") -> tuple[np.ndarray, np.ndarray]:
    key = "gamma" if sweep == "gamma" else "tau"
    xs = sorted({r[key] for r in rows if r["sweep"] == sweep})
    means = [np.mean([r[metric] for r in rows if r["sweep"] == sweep and r[key] == x]) for x in xs]
    return np.array(xs), np.array(means)


def is_unimodal(ys) -> bool:
    """Nondecreasing up to the maximum and nonincreasing after it."""
    ys = np.asarray(ys)
    peak = int(np.argmax(ys))
    return bool(np.all(np.diff(ys[:peak + 1]) >= 0) and np.all(np.diff(ys[peak:]) <= 0))


@dataclass
class AblationVerdict:
    tau_small_helps: bool
    tau_large_degrades: bool
    gamma_unimodal: bool
    gamma_peak: float
    gamma_peak_interior: bool

    @property
    def passed(self) -> bool:
        return self.tau_small_helps and self.tau_large_degrades and self.gamma_unimodal and self.gamma_peak_interior


def judge(rows: list[dict], metric: str = "rho") -> AblationVerdict:
    taus, tmeans = sweep_means(rows, "tau", metric)
    t = dict(zip(taus.tolist(), tmeans.tolist()))
    gammas, gmeans = sweep_means(rows, "gamma", metric)
    peak = float(gammas[int(np.argmax(gmeans))])
    return AblationVerdict(t[0.01] >= t[0.0], t[0.1] < t[0.01], is_unimodal(gmeans), peak, 0.6 <= peak <= 0.8)


def write_ablation(rows: list[dict], csv_path, plot_path=None, metric: str = "rho") -> None:
    csv_export(csv_path, ABLATION_HEADER, [[r[k] for k in ABLATION_HEADER] for r in rows])
    if plot_path is None:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, sweep, label in zip(axes, ("gamma", "tau"), ("mask ratio gamma", "regulariser weight tau")):
        key = "gamma" if sweep == "gamma" else "tau"
        pts = [(r[key], r[metric]) for r in rows if r["sweep"] == sweep]
        ax.scatter(*zip(*pts), s=12, alpha=0.5, color="grey")
        xs, ys = sweep_means(rows, sweep, metric)
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel(label)
        ax.set_ylabel(f"probe {metric}")
    fig.tight_layout()
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)

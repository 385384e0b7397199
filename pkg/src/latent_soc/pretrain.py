"""Masked pre-training: subsample, mask, encode the context, propagate moments
with the prefix scan, sample, decode, and regress onto the slow target encoder."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data_io import Dataset, robust_scale, robust_stats
from .dynamics import TIME_SCALE
from .grad_core import ContractViolation
from .networks import Checkpoint, LatentSOCModel, ModelConfig, ema_update, save_checkpoint
from .objective import LossBreakdown, LossConfig, rescaled_loss
from .scan import scan_moment_arrays

METRICS_HEADER = ["epoch", "energy", "recon", "reg", "total", "val_mse", "lr"]


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class PretrainConfig:
    """Defaults are the large-scale preset; :meth:`desk` shrinks them for one CPU."""

    epochs: int = 200
    warmup: int = 10
    peak_lr: float = 1e-3
    initial_lr: float = 1e-4
    min_lr: float = 1e-4
    batch: int = 128
    gamma: float = 0.75
    T: int = 160
    time_scale: float = TIME_SCALE
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    ema_start: float = 0.996
    ema_end: float = 1.0
    val_fraction: float = 0.1
    checkpoint_every: int = 0
    decode_mean: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ContractViolation(f"mask ratio gamma={self.gamma} must lie in (0, 1)")
        if self.warmup > self.epochs:
            raise ContractViolation("warmup longer than training")
        if self.batch < 1 or self.T < 2:
            raise ContractViolation("batch must be >= 1 and T >= 2")

    @classmethod
    def desk(cls, **overrides) -> "PretrainConfig":
        base = dict(epochs=60, warmup=5, batch=32)
        base.update(overrides)
        return cls(**base)


@dataclass
class MaskSplit:
    context: np.ndarray
    target: np.ndarray


def subsample_irregular(length: int, T: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of ``T`` timesteps drawn uniformly without replacement."""
    if length < T:
        raise ContractViolation(f"series of length {length} shorter than subsample size {T}")
    return np.sort(rng.choice(length, size=T, replace=False))


def n_targets(k: int, gamma: float) -> int:
    return int(math.floor(gamma * k + 0.5))


def mask_split(k: int, gamma: float, rng: np.random.Generator) -> MaskSplit:
    """Uniformly random target subset of ``round(gamma k)`` positions out of ``k``."""
    m = n_targets(k, gamma)
    if m == 0 or m == k:
        raise ContractViolation(f"gamma={gamma} with k={k} leaves an empty context or target set")
    perm = rng.permutation(k)
    return MaskSplit(np.sort(perm[m:]), np.sort(perm[:m]))


def lr_schedule(step: int, cfg: PretrainConfig, steps_per_epoch: int) -> float:
    """Linear warm-up from ``initial_lr`` to ``peak_lr``, then cosine decay to ``min_lr``."""
    warm = cfg.warmup * steps_per_epoch
    last = max(cfg.epochs * steps_per_epoch - 1, 1)
    if step < warm:
        return cfg.initial_lr + (cfg.peak_lr - cfg.initial_lr) * step / warm
    p = min((step - warm) / max(last - warm, 1), 1.0)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * p))


def ema_momentum(step: int, total: int, cfg: PretrainConfig) -> float:
    return cfg.ema_start + (cfg.ema_end - cfg.ema_start) * min(step / max(total - 1, 1), 1.0)


@dataclass
class Batch:
    """``B`` items sharing one subsample size and mask size."""

    times: torch.Tensor          # (B, T)
    values: torch.Tensor         # (B, T, n)
    context: np.ndarray          # (B, kc) positions into T
    target: np.ndarray           # (B, kt)

    def gather(self, x: torch.Tensor, idx: np.ndarray) -> torch.Tensor:
        index = torch.as_tensor(idx)
        if x.dim() == 3:
            index = index[..., None].expand(-1, -1, x.shape[-1])
        return torch.gather(x, 1, index)


def make_batch(times: np.ndarray, values: np.ndarray, T: int, gamma: float, rng: np.random.Generator) -> Batch:
    """Subsample and mask each row of ``times (B, K)`` / ``values (B, K, n)``."""
    ts, vs, ctx, tar = [], [], [], []
    for t, v in zip(times, values):
        keep = subsample_irregular(t.size, T, rng)
        split = mask_split(T, gamma, rng)
        ts.append(t[keep])
        vs.append(v[keep])
        ctx.append(split.context)
        tar.append(split.target)
    return Batch(torch.as_tensor(np.stack(ts)), torch.as_tensor(np.stack(vs)), np.stack(ctx), np.stack(tar))


def hold_index(context: np.ndarray, T: int) -> np.ndarray:
    """Context slot whose (lambda, alpha) drive each interval of the full grid.

    Interval ``j`` ends at position ``j`` and starts at ``j - 1``; it uses the
    latest context position at or before ``j - 1``. Intervals before the first
    context position borrow the first context token.
    """
    B = context.shape[0]
    is_ctx = np.zeros((B, T), dtype=bool)
    np.put_along_axis(is_ctx, context, True, 1)
    latest = np.cumsum(is_ctx, 1) - 1
    owner = np.concatenate([np.zeros((B, 1), dtype=int), latest[:, :-1]], 1)
    return np.clip(owner, 0, None)


def latent_rollout(model: LatentSOCModel, batch: Batch, sigma_q: float, noise: torch.Generator | None,
                   sample: bool = True):
    """Encode the context and return per-interval controls, deltas and sampled/mean latents."""
    t_ctx, y_ctx = batch.gather(batch.times, batch.context), batch.gather(batch.values, batch.context)
    z = model.encoder(t_ctx, y_ctx)
    if sample:
        z = z + sigma_q * torch.randn(z.shape, generator=noise)
    lam_ctx, alpha_ctx = model.heads(z)
    owner = hold_index(batch.context, batch.times.shape[1])
    lam, alpha = batch.gather(lam_ctx, owner), batch.gather(alpha_ctx, owner)
    deltas = torch.diff(batch.times, dim=1, prepend=torch.zeros_like(batch.times[:, :1]))

    V = model.heads.V()
    mean_hat, var_hat = scan_moment_arrays(model.heads.mu0 @ V, model.heads.initial_variance(), lam, alpha @ V, deltas)
    x_hat = mean_hat + torch.sqrt(var_hat) * torch.randn(mean_hat.shape, generator=noise) if sample else mean_hat
    return alpha, deltas, x_hat @ V.T, mean_hat @ V.T


def batch_loss(model: LatentSOCModel, batch: Batch, cfg: PretrainConfig, noise: torch.Generator | None = None,
               reduction: str = "mean") -> LossBreakdown:
    loss_cfg = cfg.loss
    alpha, deltas, X, X_mean = latent_rollout(model, batch, math.sqrt(loss_cfg.sigma_q2), noise)
    if cfg.decode_mean:
        X = X_mean
    z_hat = X + math.sqrt(loss_cfg.sigma_p2) * torch.randn(X.shape, generator=noise)
    decoded = model.decoder(z_hat)
    T_target = None
    if loss_cfg.tau > 0:
        with torch.no_grad():
            T_target = model.target_encoder(batch.gather(batch.times, batch.target),
                                            batch.gather(batch.values, batch.target))
    return rescaled_loss(batch.values, batch.gather(z_hat, batch.target), decoded, T_target, alpha, deltas,
                         loss_cfg, reduction=reduction)


def _diagnose(model, batch, cfg, noise_state) -> str:
    gen = torch.Generator().set_state(noise_state)
    with torch.no_grad():
        per_item = batch_loss(model, batch, cfg, gen, reduction="none")
    for term in ("control_energy", "reconstruction", "regularization"):
        bad = np.flatnonzero(~np.isfinite(getattr(per_item, term).numpy()))
        if bad.size:
            return f"term {term} non-finite for batch items {bad.tolist()}"
    return "total non-finite"


def pretrain_step(model: LatentSOCModel, batch: Batch, cfg: PretrainConfig, optimizer: torch.optim.Optimizer,
                  noise: torch.Generator, lr: float, momentum: float) -> LossBreakdown:
    model.train()
    state = noise.get_state()
    out = batch_loss(model, batch, cfg, noise)
    if not torch.isfinite(out.total):
        raise NonFiniteLoss(f"aborting step: {_diagnose(model, batch, cfg, state)}")
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad()
    out.total.backward()
    optimizer.step()
    ema_update(model.target_encoder, model.encoder, momentum)
    return out


def reconstruction_mse(model: LatentSOCModel, times: np.ndarray, values: np.ndarray, cfg: PretrainConfig,
                       seed: int) -> tuple[float, float]:
    """Masked-reconstruction MSE at target times and the per-series context-mean baseline.

    The model decodes the controlled mean path; the baseline fills every
    target with that series' context mean for each channel.
    """
    rng = np.random.default_rng(seed)
    batch = make_batch(times, values, min(cfg.T, times.shape[1]), cfg.gamma, rng)
    model.eval()
    with torch.no_grad():
        _, _, _, X_mean = latent_rollout(model, batch, 0.0, None, sample=False)
        pred = batch.gather(model.decoder(X_mean), batch.target)
    y_tar = batch.gather(batch.values, batch.target)
    base = batch.gather(batch.values, batch.context).mean(1, keepdim=True)
    return float(((pred - y_tar) ** 2).mean()), float(((base - y_tar) ** 2).mean())


@dataclass
class TrainResult:
    model: LatentSOCModel
    metrics: list[dict]
    medians: np.ndarray
    iqrs: np.ndarray


def train(data: Dataset, cfg: PretrainConfig, model_cfg: ModelConfig, out_dir=None, log=None) -> TrainResult:
    """Full pre-training loop; writes ``metrics.csv`` and checkpoints under ``out_dir`` if given."""
    if len(data) == 0:
        raise ContractViolation("empty pre-training dataset")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    noise = torch.Generator().manual_seed(cfg.seed)

    order = rng.permutation(len(data))
    n_val = max(1, int(round(cfg.val_fraction * len(data)))) if len(data) > 1 else 0
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    raw = data.values
    medians, iqrs = robust_stats(raw[train_idx])
    values = robust_scale(raw, medians, iqrs)
    times = data.timestamps * data.time_scale

    model = LatentSOCModel(model_cfg)
    optimizer = torch.optim.Adam(model.online_parameters(), lr=cfg.initial_lr, betas=(0.9, 0.999), eps=1e-8)
    spe = math.ceil(train_idx.size / cfg.batch)
    total = cfg.epochs * spe
    T = min(cfg.T, times.shape[1])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    metrics, step = [], 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(train_idx)
        sums = np.zeros(4)
        lr = cfg.initial_lr
        for b in range(spe):
            idx = perm[b * cfg.batch:(b + 1) * cfg.batch]
            batch = make_batch(times[idx], values[idx], T, cfg.gamma, rng)
            lr = lr_schedule(step, cfg, spe)
            res = pretrain_step(model, batch, cfg, optimizer, noise, lr, ema_momentum(step, total, cfg))
            sums += [v for v in res.as_floats().values()]
            step += 1
        val = reconstruction_mse(model, times[val_idx], values[val_idx], cfg, seed=cfg.seed + 1)[0] \
            if val_idx.size else float("nan")
        row = dict(zip(METRICS_HEADER, [epoch, *(sums / spe), val, lr]))
        metrics.append(row)
        if log is not None:
            log(row)
        if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _save(out / f"checkpoint_{epoch + 1:04d}.bin", model, cfg, medians, iqrs, epoch + 1)
    if out is not None:
        _save(out / "checkpoint.bin", model, cfg, medians, iqrs, cfg.epochs)
        write_metrics(out / "metrics.csv", metrics)
    return TrainResult(model, metrics, medians, iqrs)


def _save(path: Path, model, cfg: PretrainConfig, medians, iqrs, epoch: int):
    try:
        save_checkpoint(path, Checkpoint.from_model(
            model, epoch=epoch, seed=cfg.seed, gamma=cfg.gamma, tau=cfg.loss.tau, T=cfg.T,
            time_scale=cfg.time_scale, medians=np.asarray(medians).tolist(), iqrs=np.asarray(iqrs).tolist()))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror}") from exc


def write_metrics(path, rows: list[dict]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write metrics {path}: {exc.strerror}") from exc

"""Universal features, linear probes, fine-tuning, task losses, metrics and splits."""

from __future__ import annotations

import copy
import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .grad_core import ContractViolation
from .networks import LatentSOCModel

TASKS = ("cls", "reg")
_CLAMP = 1e-7


def _check_task(task: str):
    if task not in TASKS:
        raise ContractViolation(f"unknown task {task!r}; expected one of {TASKS}")


def universal_feature(alpha):
    """Mean of a control sequence over time (axis -2)."""
    if alpha.shape[-2] == 0:
        raise ContractViolation("cannot pool an empty control sequence")
    return alpha.mean(-2)


@torch.no_grad()
def extract_features(model: LatentSOCModel, times: np.ndarray, values: np.ndarray, batch: int = 64) -> np.ndarray:
    """Universal feature of every series, computed from encoder means."""
    model.eval()
    out = []
    for i in range(0, len(values), batch):
        t = torch.as_tensor(times[i:i + batch])
        v = torch.as_tensor(values[i:i + batch])
        out.append(universal_feature(model.heads.controls(model.encoder(t, v))).numpy())
    return np.concatenate(out)


def task_loss(pred, label, task: str):
    """Binary cross-entropy on probabilities or mean squared error."""
    _check_task(task)
    pred, label = torch.as_tensor(pred), torch.as_tensor(label)
    if task == "reg":
        return ((pred - label) ** 2).mean()
    p = pred.clamp(_CLAMP, 1.0 - _CLAMP)
    return -(label * torch.log(p) + (1.0 - label) * torch.log1p(-p)).mean()


def pearson(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size < 2:
        raise ContractViolation("correlation needs at least two points")
    a, b = a - a.mean(), b - b.mean()
    denom = math.sqrt((a @ a) * (b @ b))
    if denom == 0:
        warnings.warn("zero-variance input; correlation defined as 0", stacklevel=2)
        return 0.0
    return float(a @ b / denom)


def metrics(preds, labels, task: str) -> dict[str, float]:
    """``{mse, rho}`` for regression, ``{acc, f1}`` (threshold 0.5) for classification."""
    _check_task(task)
    preds, labels = np.asarray(preds, float), np.asarray(labels, float)
    if task == "reg":
        return {"mse": float(np.mean((preds - labels) ** 2)), "rho": pearson(preds, labels)}
    hard = preds >= 0.5
    pos = labels >= 0.5
    tp = np.sum(hard & pos)
    precision = tp / max(hard.sum(), 1)
    recall = tp / max(pos.sum(), 1)
    f1 = 0.0 if tp == 0 else 2 * precision * recall / (precision + recall)
    return {"acc": float(np.mean(hard == pos)), "f1": float(f1)}


def selection_score(m: dict[str, float], task: str) -> float:
    return m["acc"] if task == "cls" else m["rho"]


# splits --------------------------------------------------------------------

def split(labels, task: str, seed: int, ratios=(6, 2, 2), bins: int = 10) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified train/val/test indices; regression labels are stratified by quantile bin."""
    _check_task(task)
    labels = np.asarray(labels, float)
    if task == "reg":
        edges = np.quantile(labels, np.linspace(0, 1, bins + 1)[1:-1])
        strata = np.searchsorted(edges, labels, side="right")
    else:
        strata = labels.astype(int)
    rng = np.random.default_rng(seed)
    frac = np.asarray(ratios, float) / np.sum(ratios)
    parts = ([], [], [])
    for s in np.unique(strata):
        members = np.flatnonzero(strata == s)
        if members.size < 3:
            raise ContractViolation(f"stratum {s} has {members.size} items; at least 3 are needed")
        members = rng.permutation(members)
        # every part keeps at least one member of each stratum
        n_va = max(1, int(round(frac[1] * members.size)))
        n_te = max(1, int(round(frac[2] * members.size)))
        n_tr = members.size - n_va - n_te
        parts[0].append(members[:n_tr])
        parts[1].append(members[n_tr:n_tr + n_va])
        parts[2].append(members[n_tr + n_va:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


# linear probe --------------------------------------------------------------

@dataclass(frozen=True)
class ProbeHyper:
    lr: float = 0.01
    batch: int = 32
    epochs: int = 50
    min_lr: float = 0.001
    seed: int = 0


# search space of the linear probe
PROBE_GRID = [ProbeHyper(lr, b, 50, m) for lr, b, m in itertools.product([0.01, 0.005], [16, 32, 64], [0.001, 0.005])]


class LinearHead(nn.Module):
    """Single linear layer on standardised features."""

    def __init__(self, d: int, mean=None, std=None):
        super().__init__()
        self.linear = nn.Linear(d, 1)
        self.register_buffer("mean", torch.zeros(d) if mean is None else torch.as_tensor(mean))
        self.register_buffer("std", torch.ones(d) if std is None else torch.as_tensor(std))

    def forward(self, x):
        return self.linear((x - self.mean) / self.std)[..., 0]


@dataclass
class Probe:
    head: LinearHead | None
    task: str
    constant: float | None = None


def _cosine(epoch_frac: float, lr: float, min_lr: float) -> float:
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * epoch_frac))


def probe_fit(features, labels, task: str, hyper: ProbeHyper = ProbeHyper()) -> Probe:
    """Train a linear head with Adam on the task loss; features are never modified."""
    _check_task(task)
    X = torch.as_tensor(np.asarray(features, float))
    y = torch.as_tensor(np.asarray(labels, float))
    if not torch.isfinite(X).all():
        raise ContractViolation("non-finite features")
    if task == "cls" and not torch.all((y == 0) | (y == 1)):
        raise ContractViolation("classification labels must be 0 or 1")
    if torch.all(y == y[0]):
        warnings.warn("all training labels identical; fitting a constant predictor", stacklevel=2)
        return Probe(None, task, float(y[0]))
    std = X.std(0, unbiased=False)
    head = LinearHead(X.shape[1], X.mean(0), torch.where(std > 0, std, torch.ones_like(std)))
    gen = torch.Generator().manual_seed(hyper.seed)
    torch.manual_seed(hyper.seed)
    head.linear.reset_parameters()
    opt = torch.optim.Adam(head.linear.parameters(), lr=hyper.lr)
    n = X.shape[0]
    for epoch in range(hyper.epochs):
        for g in opt.param_groups:
            g["lr"] = _cosine(epoch / max(hyper.epochs - 1, 1), hyper.lr, hyper.min_lr)
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, hyper.batch):
            idx = perm[i:i + hyper.batch]
            out = head(X[idx])
            loss = task_loss(torch.sigmoid(out), y[idx], task) if task == "cls" else task_loss(out, y[idx], task)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return Probe(head, task)


@torch.no_grad()
def probe_predict(probe: Probe, features) -> np.ndarray:
    X = torch.as_tensor(np.asarray(features, float))
    if probe.head is None:
        return np.full(X.shape[0], probe.constant)
    out = probe.head(X)
    return (torch.sigmoid(out) if probe.task == "cls" else out).numpy()


def probe_search(train_x, train_y, val_x, val_y, task: str, grid=PROBE_GRID, seed: int = 0):
    """Fit every configuration in ``grid`` and keep the best on validation."""
    best = None
    for hyper in grid:
        probe = probe_fit(train_x, train_y, task, ProbeHyper(hyper.lr, hyper.batch, hyper.epochs, hyper.min_lr, seed))
        score = selection_score(metrics(probe_predict(probe, val_x), val_y, task), task)
        if best is None or score > best[0]:
            best = (score, probe, hyper)
    return best[1], best[2]


def zscore(train_y, *others):
    """Standardise regression targets with training statistics."""
    mu, sd = float(np.mean(train_y)), float(np.std(train_y))
    sd = sd if sd > 0 else 1.0
    return tuple((np.asarray(y, float) - mu) / sd for y in (train_y, *others))


@dataclass(frozen=True)
class FinetuneHyper:
    lr: float = 1e-3
    batch: int = 16
    epochs: int = 50
    layer_decay: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0


def _layer_groups(model: LatentSOCModel, head: nn.Module, hyper: FinetuneHyper) -> list[dict]:
    """AdamW groups with learning rate shrinking by ``layer_decay`` per layer below the head."""
    enc = model.encoder
    layers = [list(enc.embed.parameters())] + [list(b.parameters()) for b in enc.blocks]
    depth = len(layers)
    groups = [{"params": list(head.parameters()) + [model.heads.B], "lr": hyper.lr}]
    for i, params in enumerate(layers):
        groups.append({"params": params, "lr": hyper.lr * hyper.layer_decay ** (depth - i)})
    return groups


def finetune(model: LatentSOCModel, times, values, labels, task: str, hyper: FinetuneHyper = FinetuneHyper()):
    """Jointly update a copy of the encoder, the control map and a new linear head."""
    _check_task(task)
    model = copy.deepcopy(model)
    y = torch.as_tensor(np.asarray(labels, float))
    t_all, v_all = torch.as_tensor(times), torch.as_tensor(values)
    torch.manual_seed(hyper.seed)
    gen = torch.Generator().manual_seed(hyper.seed)
    head = LinearHead(model.cfg.d)
    opt = torch.optim.AdamW(_layer_groups(model, head, hyper), weight_decay=hyper.weight_decay)
    base = [g["lr"] for g in opt.param_groups]
    n = y.shape[0]
    for epoch in range(hyper.epochs):
        scale = 0.5 * (1.0 + math.cos(math.pi * epoch / max(hyper.epochs, 1)))
        for g, lr in zip(opt.param_groups, base):
            g["lr"] = lr * scale
        model.train()
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, hyper.batch):
            idx = perm[i:i + hyper.batch]
            feat = universal_feature(model.heads.controls(model.encoder(t_all[idx], v_all[idx])))
            out = head(feat)
            loss = task_loss(torch.sigmoid(out), y[idx], task) if task == "cls" else task_loss(out, y[idx], task)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model, Probe(head, task)


@torch.no_grad()
def finetune_predict(model: LatentSOCModel, probe: Probe, times, values) -> np.ndarray:
    return probe_predict(probe, extract_features(model, times, values))

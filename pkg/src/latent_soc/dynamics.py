"""Closed-form Gaussian moments of the piecewise-linear controlled latent SDE.

On every interval ``[t_i, t_{i+1})`` the latent follows

    dX = (-V diag(lam_i) V^T X + alpha_i) dt + dW

and in the eigenbasis ``Xhat = V^T X`` each coordinate is an independent
Ornstein-Uhlenbeck process. One interval of length ``delta`` maps

    mean -> E * mean + Phi1 * alpha_hat
    var  -> E**2 * var + Phi2

with ``E = exp(-lam delta)``, ``Phi1 = (1 - exp(-lam delta)) / lam`` and
``Phi2 = (1 - exp(-2 lam delta)) / (2 lam)``. Only decaying exponentials are
ever evaluated, so nothing overflows for large ``lam * delta``.

All functions accept numpy arrays or float64 torch tensors (torch keeps the
autograd graph intact).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .grad_core import ContractViolation

TIME_SCALE = 0.1
EIGEN_FLOOR = 1e-4
_LAMBDA_EPS = 1e-300


def _xp(*xs):
    return torch if any(isinstance(x, torch.Tensor) for x in xs) else np


def _common(*xs):
    """Promote numpy operands to tensors when any operand is a tensor."""
    if _xp(*xs) is np:
        return xs
    return tuple(x if isinstance(x, torch.Tensor) else torch.as_tensor(x) for x in xs)


def _min(x) -> float:
    if isinstance(x, torch.Tensor):
        return float(x.detach().min()) if x.numel() else 0.0
    x = np.asarray(x)
    return float(x.min()) if x.size else 0.0


def decay_kernels(lam, delta):
    """Return ``(E, Phi1, Phi2)`` for decay rates ``lam`` over ``delta``.

    ``lam == 0`` is handled by its limit (``Phi1 = Phi2 = delta``).
    """
    if _min(delta) < 0:
        raise ContractViolation(f"negative interval length: min delta = {_min(delta)}")
    xp = _xp(lam, delta)
    if xp is np:
        lam = np.asarray(lam, dtype=np.float64)
        delta = np.asarray(delta, dtype=np.float64)
    else:
        lam, delta = torch.as_tensor(lam), torch.as_tensor(delta, dtype=torch.float64)
    x = lam * delta
    E = xp.exp(-x)
    tiny = lam <= _LAMBDA_EPS
    safe = xp.where(tiny, xp.ones_like(lam), lam)
    phi1 = xp.where(tiny, delta * xp.ones_like(x), -xp.expm1(-safe * delta) / safe)
    phi2 = xp.where(tiny, delta * xp.ones_like(x), -xp.expm1(-2.0 * safe * delta) / (2.0 * safe))
    return E, phi1, phi2


@dataclass
class TimeGrid:
    """Observation times after time-scaling, plus the context/target partition.

    ``origin`` is where the initial state lives; interval ``i`` runs from
    ``times[i-1]`` (or ``origin`` for ``i == 0``) to ``times[i]``.
    """

    times: np.ndarray
    origin: float = 0.0
    is_target: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if self.times.size == 0:
            raise ContractViolation("empty time grid")
        if np.any(np.diff(self.times) <= 0):
            raise ContractViolation("times must be strictly increasing")
        if self.times[0] < self.origin:
            raise ContractViolation(f"first time {self.times[0]} precedes origin {self.origin}")
        if self.is_target is None:
            self.is_target = np.zeros(self.times.size, dtype=bool)
        self.is_target = np.asarray(self.is_target, dtype=bool).reshape(-1)
        if self.is_target.size != self.times.size:
            raise ContractViolation("partition labels must cover every time")

    @classmethod
    def from_indices(cls, indices, time_scale: float = TIME_SCALE, is_target=None) -> "TimeGrid":
        return cls(np.asarray(indices, dtype=np.float64) * time_scale, 0.0, is_target)

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.times, prepend=self.origin)

    @property
    def context(self) -> np.ndarray:
        return np.flatnonzero(~self.is_target)

    @property
    def target(self) -> np.ndarray:
        return np.flatnonzero(self.is_target)

    def __len__(self) -> int:
        return self.times.size


@dataclass
class EigenSchedule:
    """Shared eigenbasis ``V`` with per-interval eigenvalues and controls.

    ``controls`` are in the canonical basis; ``hat_controls = V^T alpha``.
    Arrays may carry leading batch dimensions: ``lambdas`` is ``(..., K, d)``.
    """

    V: object
    lambdas: object
    controls: object

    def __post_init__(self):
        V = self.V.detach().cpu().numpy() if isinstance(self.V, torch.Tensor) else np.asarray(self.V)
        d = V.shape[-1]
        if np.max(np.abs(V.T @ V - np.eye(d))) >= 1e-8:
            raise ContractViolation("eigenbasis V is not orthonormal")
        if tuple(self.lambdas.shape) != tuple(self.controls.shape):
            raise ContractViolation(
                f"lambdas {tuple(self.lambdas.shape)} and controls {tuple(self.controls.shape)} differ")
        if _min(self.lambdas) < EIGEN_FLOOR * (1 - 1e-12):
            raise ContractViolation(f"eigenvalue below floor {EIGEN_FLOOR}")

    @property
    def hat_controls(self):
        controls, V = _common(self.controls, self.V)
        return controls @ V

    def __len__(self) -> int:
        return self.lambdas.shape[-2]


@dataclass
class GaussianState:
    """Marginal of the latent at one or more times.

    In the ``"eigen"`` basis ``cov`` holds the diagonal variances ``(..., d)``;
    in the ``"canonical"`` basis it is a full ``(..., d, d)`` matrix.
    """

    mean: object
    cov: object
    basis: str = "eigen"

    def __post_init__(self):
        if self.basis not in ("eigen", "canonical"):
            raise ContractViolation(f"unknown basis {self.basis!r}")


def propagate_step(state: GaussianState, lam, a_hat, delta) -> GaussianState:
    if state.basis != "eigen":
        raise ContractViolation("propagate_step expects an eigenbasis state")
    E, phi1, phi2 = decay_kernels(lam, delta)
    return GaussianState(E * state.mean + phi1 * a_hat, E * E * state.cov + phi2, "eigen")


def _check_lengths(sched: EigenSchedule, grid: TimeGrid):
    if len(sched) != len(grid):
        raise ContractViolation(f"schedule has {len(sched)} intervals but grid has {len(grid)}")


def sequential_moments(mu0, var0, lambdas, a_hat, deltas):
    """Left-to-right recurrence over intervals (axis -2). Returns ``(means, vars)``."""
    xp = _xp(mu0, var0, lambdas, a_hat)
    mu0, var0, lambdas, a_hat, deltas = _common(mu0, var0, lambdas, a_hat, deltas)
    E, phi1, phi2 = decay_kernels(lambdas, deltas[..., None])
    mu, var = mu0, var0
    means, variances = [], []
    for i in range(lambdas.shape[-2]):
        mu = E[..., i, :] * mu + phi1[..., i, :] * a_hat[..., i, :]
        var = E[..., i, :] ** 2 * var + phi2[..., i, :]
        means.append(mu)
        variances.append(var)
    return xp.stack(means, -2), xp.stack(variances, -2)


def moments_sequential(init: GaussianState, sched: EigenSchedule, grid: TimeGrid) -> GaussianState:
    """Marginals at every grid time by repeated ``propagate_step`` (O(k) depth)."""
    _check_lengths(sched, grid)
    init = to_eigen(init, sched.V)
    m, v = sequential_moments(init.mean, init.cov, sched.lambdas, sched.hat_controls, grid.deltas)
    return GaussianState(m, v, "eigen")


def _transpose(V):
    return V.mT if isinstance(V, torch.Tensor) else np.swapaxes(V, -1, -2)


def to_eigen(x, V):
    """Express a vector (``(..., d)`` array) or ``GaussianState`` in the eigenbasis.

    A canonical covariance is rotated and its diagonal kept; it must already be
    diagonal in ``V`` for the result to be exact.
    """
    if isinstance(x, GaussianState):
        if x.basis == "eigen":
            return x
        cov = _transpose(V) @ x.cov @ V
        diag = torch.diagonal(cov, dim1=-2, dim2=-1) if isinstance(cov, torch.Tensor) \
            else np.diagonal(cov, axis1=-2, axis2=-1).copy()
        return GaussianState(x.mean @ V, diag, "eigen")
    return x @ V


def from_eigen(x, V):
    if isinstance(x, GaussianState):
        if x.basis == "canonical":
            return x
        cov = (V * x.cov[..., None, :]) @ _transpose(V)
        return GaussianState(x.mean @ _transpose(V), cov, "canonical")
    return x @ _transpose(V)


def sample_state(state: GaussianState, noise):
    """Reparameterised draw ``mean + sqrt(cov) noise``."""
    xp = _xp(state.mean, state.cov, noise)
    if state.basis == "eigen":
        if _min(state.cov) < 0:
            raise ContractViolation("negative variance in eigenbasis state")
        return state.mean + xp.sqrt(state.cov) * noise
    cov = state.cov
    if xp is np:
        w, U = np.linalg.eigh(cov)
        if w.min() < -1e-12:
            raise ContractViolation("covariance is not PSD")
        root = (U * np.sqrt(np.clip(w, 0, None))[..., None, :]) @ np.swapaxes(U, -1, -2)
    else:
        w, U = torch.linalg.eigh(cov)
        if float(w.detach().min()) < -1e-12:
            raise ContractViolation("covariance is not PSD")
        root = (U * torch.sqrt(torch.clamp(w, min=0))[..., None, :]) @ U.mT
    return state.mean + (root @ noise[..., None])[..., 0]

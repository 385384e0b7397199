"""Loss terms: control energy, the geometric-mixture posterior, the rescaled
training objective and the closed-form ELBO of the linear-Gaussian family."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .dynamics import EigenSchedule, GaussianState, TimeGrid, to_eigen
from .grad_core import ContractViolation, tensor
from .scan import scan_moment_arrays


@dataclass(frozen=True)
class LossConfig:
    """Mixture balance ``lam`` and the three fixed variances.

    ``tau = (1 - lam) * sigma_gamma2 / sigma_q2`` weights the regulariser and
    ``control_weight = 2 * sigma_q2`` multiplies the energy ``sum 1/2 |alpha|^2 dt``,
    so ``total`` carries ``sigma_q2 * integral |alpha|^2`` exactly.
    """

    lam: float = 0.99
    sigma_p2: float = 0.01
    sigma_q2: float = 0.01
    sigma_gamma2: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ContractViolation(f"mixture balance lam={self.lam} outside (0, 1]")
        for name in ("sigma_p2", "sigma_q2", "sigma_gamma2"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")

    @property
    def tau(self) -> float:
        return (1.0 - self.lam) * self.sigma_gamma2 / self.sigma_q2

    @property
    def control_weight(self) -> float:
        return 2.0 * self.sigma_q2

    @classmethod
    def from_tau(cls, tau: float, sigma_p2: float = 0.01, sigma_q2: float = 0.01,
                 sigma_gamma2: float = 0.01) -> "LossConfig":
        return cls(1.0 - tau * sigma_q2 / sigma_gamma2, sigma_p2, sigma_q2, sigma_gamma2)


@dataclass
class LossBreakdown:
    control_energy: torch.Tensor
    reconstruction: torch.Tensor
    regularization: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("control_energy", "reconstruction", "regularization", "total")}


def control_energy(controls, deltas):
    """``sum_i 1/2 |alpha_i|^2 delta_i`` over the last two axes ``(K, d)``."""
    deltas = deltas if isinstance(deltas, torch.Tensor) or not isinstance(controls, torch.Tensor) \
        else torch.as_tensor(deltas)
    return 0.5 * ((controls ** 2).sum(-1) * deltas).sum(-1)


def mixture_posterior(X, T_target, cfg: LossConfig):
    """Normalised geometric mixture ``N(z; X, sp2)^lam N(z; T, sq2)^(1-lam)``.

    Returns ``(m, S)`` with ``S`` the shared scalar variance.
    """
    precision = cfg.lam / cfg.sigma_p2 + (1.0 - cfg.lam) / cfg.sigma_q2
    S = 1.0 / precision
    m = S * (cfg.lam / cfg.sigma_p2 * X + (1.0 - cfg.lam) / cfg.sigma_q2 * T_target)
    return m, S


def rescaled_loss(y, z_hat, decoded, T_target, controls, deltas, cfg: LossConfig,
                  target_idx=None, reduction: str = "mean") -> LossBreakdown:
    """Rescaled objective for one or more sequences.

    ``y`` and ``decoded`` are ``(..., k, n)`` over every observed time;
    ``z_hat`` is ``(..., k, d)``; ``T_target`` is ``(..., m, d)`` and lines up
    with ``z_hat[..., target_idx, :]``. ``T_target`` comes from the slow encoder
    and is detached here. Terms are summed over time and averaged over any
    leading batch axis (``reduction="none"`` keeps per-item terms).
    """
    if reduction not in ("mean", "none"):
        raise ContractViolation(f"unknown reduction {reduction!r}")
    if y.shape != decoded.shape:
        raise ContractViolation(f"observation shape {tuple(y.shape)} != decoded shape {tuple(decoded.shape)}")
    recon = ((y - decoded) ** 2).sum((-1, -2))
    if cfg.tau > 0 and T_target is not None:
        z_t = z_hat if target_idx is None else z_hat[..., target_idx, :]
        if z_t.shape != T_target.shape:
            raise ContractViolation(f"target latents {tuple(z_t.shape)} != target embedding {tuple(T_target.shape)}")
        reg = ((z_t - T_target.detach()) ** 2).sum((-1, -2))
    else:
        reg = torch.zeros_like(recon)
    energy = control_energy(controls, deltas)
    total = cfg.control_weight * energy + recon + cfg.tau * reg
    if reduction == "none":
        return LossBreakdown(energy, recon, reg, total)
    return LossBreakdown(energy.mean(), recon.mean(), reg.mean(), total.mean())


_LOG2PI = math.log(2.0 * math.pi)


def elbo_linear_gaussian(sched: EigenSchedule, grid: TimeGrid, init: GaussianState, C, R, y):
    """Exact ``-J(alpha, y)`` for ``y_i ~ N(C X(t_i), R)`` under piecewise-constant controls.

    The controlled marginals are Gaussian, so the expected log-likelihood is
    ``log N(y; C mu, R) - 1/2 tr(R^-1 C Sigma C^T)``; normalising constants are kept.
    Differentiable in ``sched.controls`` when those are torch tensors.
    """
    C, R, y = tensor(C), tensor(R), tensor(y)
    try:
        L = torch.linalg.cholesky(R)
    except RuntimeError:
        raise ContractViolation("emission noise R is not positive definite") from None
    V = tensor(sched.V)
    lambdas = tensor(sched.lambdas) if not isinstance(sched.lambdas, torch.Tensor) else sched.lambdas
    controls = tensor(sched.controls) if not isinstance(sched.controls, torch.Tensor) else sched.controls
    init = to_eigen(GaussianState(tensor(init.mean), tensor(init.cov), init.basis), V)
    deltas = torch.as_tensor(grid.deltas)

    mean_hat, var_hat = scan_moment_arrays(init.mean, init.cov, lambdas, controls @ V, deltas)
    mean = mean_hat @ V.T
    n = C.shape[0]
    resid = y - mean @ C.T
    white = torch.linalg.solve_triangular(L, resid.T, upper=False)
    logdet = 2.0 * torch.log(torch.diagonal(L)).sum()
    loglik = -0.5 * (white ** 2).sum() - 0.5 * resid.shape[0] * (logdet + n * _LOG2PI)
    # tr(R^-1 C V diag(v) V^T C^T) = sum_j v_j |L^-1 C V e_j|^2
    CV = torch.linalg.solve_triangular(L, C @ V, upper=False)
    trace = (var_hat * (CV ** 2).sum(0)).sum()
    return loglik - 0.5 * trace - control_energy(controls, deltas)

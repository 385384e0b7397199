"""Dense float64 tensors with reverse-mode differentiation.

Tensors are ``torch.Tensor`` objects in double precision; torch's autograd graph
plays the role of the tape. This module pins the dtype, exposes a small
record/backward surface with explicit contract errors, and carries an
independent central-difference checker used throughout the test-suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
POSITIVE_FLOOR = 1e-4

torch.set_default_dtype(DTYPE)


class ContractViolation(ValueError):
    """Raised when an operation's preconditions are not met."""


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64) if not isinstance(data, torch.Tensor) else data,
                        dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def positive(x: torch.Tensor, floor: float = POSITIVE_FLOOR) -> torch.Tensor:
    """softplus(x) + floor, the positivity map for variances and eigenvalues."""
    return F.softplus(x) + floor


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ContractViolation(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ContractViolation(f"add shape mismatch: {tuple(a.shape)} + {tuple(b.shape)}") from None
    return a + b


@dataclass
class Tape:
    """Provenance of one recorded forward evaluation."""

    inputs: list[torch.Tensor]
    output: torch.Tensor | None = None
    consumed: bool = field(default=False)


def forward(expr: Callable[..., torch.Tensor], inputs: Sequence, record: bool = True):
    """Evaluate ``expr(*inputs)``; with ``record`` also return the tape.

    Inputs are copied to fresh float64 leaves so the caller's tensors are never
    mutated or attached to the graph.
    """
    leaves = [tensor(x, requires_grad=record) for x in inputs]
    if not record:
        with torch.no_grad():
            return expr(*leaves), None
    out = expr(*leaves)
    return out, Tape(inputs=leaves, output=out)


def backward(tape: Tape | None, seed=None) -> list[torch.Tensor]:
    """Return d(seed . output)/d(input) for every recorded input."""
    if tape is None or tape.output is None:
        raise ContractViolation("backward called without a recorded tape")
    if tape.consumed:
        raise ContractViolation("tape already consumed by a previous backward pass")
    out = tape.output
    if seed is None:
        if out.numel() != 1:
            raise ContractViolation(f"seed required for non-scalar output of shape {tuple(out.shape)}")
        seed = torch.ones_like(out)
    seed = tensor(seed)
    if seed.shape != out.shape:
        raise ContractViolation(f"seed shape {tuple(seed.shape)} does not match output shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out, tape.inputs, grad_outputs=seed, allow_unused=True)
    tape.consumed = True
    return [torch.zeros_like(x) if g is None else g for x, g in zip(tape.inputs, grads)]


def finite_diff_check(loss: Callable[[Sequence[torch.Tensor]], torch.Tensor],
                      params: Sequence[torch.Tensor], eps: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    ``loss`` maps a list of tensors to a scalar. The error per coordinate is
    ``|analytic - fd| / (|analytic| + 1e-12)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractViolation(f"eps={eps} outside [1e-7, 1e-3]")
    leaves = [tensor(p, requires_grad=True) for p in params]
    value = loss(leaves)
    analytic = torch.autograd.grad(value, leaves, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(leaves, analytic)]

    base = [p.detach().clone() for p in leaves]
    worst = 0.0
    with torch.no_grad():
        for i, p in enumerate(base):
            flat = p.view(-1)
            g = analytic[i].reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                up = float(loss(base))
                flat[j] = orig - eps
                down = float(loss(base))
                flat[j] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise FloatingPointError(f"non-finite loss at param {i}, coordinate {j}")
                fd = (up - down) / (2.0 * eps)
                a = g[j].item()
                worst = max(worst, abs(a - fd) / (abs(a) + 1e-12))
    return worst

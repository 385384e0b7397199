"""Associative affine-map elements and a Blelloch two-sweep prefix scan.

One interval of the moment recurrence is the diagonal affine map
``x -> A * x + b``. Composition is associative, so the whole sequence of
prefix maps can be evaluated in ``O(log k)`` tree levels instead of a
``k``-long dependency chain.

Convention: ``combine(later, earlier)`` is the map that applies ``earlier``
first, i.e. ``(A_l * A_e, A_l * b_e + b_l)``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from .dynamics import EigenSchedule, GaussianState, TimeGrid, _check_lengths, _common, _xp, decay_kernels, to_eigen
from .grad_core import ContractViolation

# levels smaller than this are combined on the calling thread
_MIN_CHUNK = 256


@dataclass
class Affine:
    """Stack of diagonal affine maps ``x -> A * x + b`` along axis -2."""

    A: object
    b: object

    def __len__(self) -> int:
        return self.A.shape[-2]

    def __getitem__(self, idx) -> "Affine":
        return Affine(self.A[..., idx, :], self.b[..., idx, :])

    def apply(self, x):
        return self.A * x + self.b


# mean elements carry (E, Phi1 * alpha_hat); covariance elements (E**2, Phi2)
MeanElement = Affine
CovElement = Affine


def identity_like(elems: Affine, length: int | None = None) -> Affine:
    xp = _xp(elems.A, elems.b)
    shape = list(elems.A.shape)
    if length is not None:
        shape[-2] = length
    if xp is np:
        return Affine(np.ones(shape), np.zeros(shape))
    return Affine(torch.ones(shape, dtype=elems.A.dtype), torch.zeros(shape, dtype=elems.b.dtype))


def combine(later: Affine, earlier: Affine) -> Affine:
    return Affine(later.A * earlier.A, later.A * earlier.b + later.b)


def default_workers() -> int:
    cores = os.cpu_count() or 1
    env = os.environ.get("LATENT_SOC_THREADS")
    if env:
        return max(1, min(cores, int(env)))
    return cores


def _cat(parts, axis=-2):
    if isinstance(parts[0], torch.Tensor):
        return torch.cat(parts, dim=axis)
    return np.concatenate(parts, axis=axis)


def _combine_level(later: Affine, earlier: Affine, pool: ThreadPoolExecutor | None, workers: int) -> Affine:
    n = len(later)
    if pool is None or workers <= 1 or n < 2 * _MIN_CHUNK or isinstance(later.A, torch.Tensor):
        return combine(later, earlier)
    bounds = np.linspace(0, n, min(workers, n // _MIN_CHUNK) + 1).astype(int)
    jobs = [pool.submit(combine, later[slice(lo, hi)], earlier[slice(lo, hi)])
            for lo, hi in zip(bounds[:-1], bounds[1:])]
    parts = [j.result() for j in jobs]
    return Affine(_cat([p.A for p in parts]), _cat([p.b for p in parts]))


def _interleave(even, odd):
    xp = _xp(even, odd)
    stacked = xp.stack([even, odd], -2) if xp is np else torch.stack([even, odd], dim=-2)
    shape = tuple(even.shape[:-2]) + (2 * even.shape[-2], even.shape[-1])
    return stacked.reshape(shape)


def _pad_pow2(elems: Affine) -> Affine:
    k = len(elems)
    size = 1 << (k - 1).bit_length()
    if size == k:
        return elems
    pad = identity_like(elems, size - k)
    return Affine(_cat([elems.A, pad.A]), _cat([elems.b, pad.b]))


def blelloch_scan(elems: Affine, workers: int = 1) -> Affine:
    """Inclusive prefix compositions ``elems_1 (x) ... (x) elems_i``.

    The input is padded with identities to a power of two. The up-sweep
    reduces pairs level by level; the down-sweep pushes exclusive prefixes
    back to the leaves; a last combine makes them inclusive. The combine tree
    depends on ``len(elems)`` only, never on ``workers``.
    """
    k = len(elems)
    if k == 0:
        raise ContractViolation("blelloch_scan needs at least one element")
    leaves = _pad_pow2(elems)
    pool = ThreadPoolExecutor(workers) if workers > 1 and not isinstance(elems.A, torch.Tensor) else None
    try:
        levels = [leaves]
        node = leaves
        while len(node) > 1:
            node = _combine_level(node[1::2], node[0::2], pool, workers)
            levels.append(node)

        exclusive = identity_like(node, 1)
        for level in reversed(levels[:-1]):
            left = level[0::2]
            right_prefix = _combine_level(left, exclusive, pool, workers)
            exclusive = Affine(_interleave(exclusive.A, right_prefix.A), _interleave(exclusive.b, right_prefix.b))

        inclusive = _combine_level(leaves, exclusive, pool, workers)
    finally:
        if pool is not None:
            pool.shutdown()
    return inclusive[slice(0, k)]


def sequential_scan(elems: Affine) -> Affine:
    """Left-fold reference for :func:`blelloch_scan`."""
    if len(elems) == 0:
        raise ContractViolation("sequential_scan needs at least one element")
    xp = _xp(elems.A, elems.b)
    acc = elems[0]
    As, bs = [acc.A], [acc.b]
    for i in range(1, len(elems)):
        acc = combine(elems[i], acc)
        As.append(acc.A)
        bs.append(acc.b)
    stack = (lambda xs: np.stack(xs, -2)) if xp is np else (lambda xs: torch.stack(xs, dim=-2))
    return Affine(stack(As), stack(bs))


def element_arrays(lambdas, a_hat, deltas) -> tuple[Affine, Affine]:
    """Mean and covariance elements from per-interval eigenvalues, controls and lengths."""
    E, phi1, phi2 = decay_kernels(lambdas, deltas[..., None])
    return Affine(E, phi1 * a_hat), Affine(E * E, phi2)


def make_elements(sched: EigenSchedule, grid: TimeGrid) -> tuple[Affine, Affine]:
    _check_lengths(sched, grid)
    return element_arrays(sched.lambdas, sched.hat_controls, grid.deltas)


def scan_moment_arrays(mu0, var0, lambdas, a_hat, deltas, workers: int = 1):
    """Eigenbasis means and variances at every time via two prefix scans."""
    mu0, var0, lambdas, a_hat, deltas = _common(mu0, var0, lambdas, a_hat, deltas)
    mean_el, cov_el = element_arrays(lambdas, a_hat, deltas)
    M = blelloch_scan(mean_el, workers)
    S = blelloch_scan(cov_el, workers)
    return M.A * mu0[..., None, :] + M.b, S.A * var0[..., None, :] + S.b


def scan_moments(init: GaussianState, sched: EigenSchedule, grid: TimeGrid, workers: int = 1) -> GaussianState:
    _check_lengths(sched, grid)
    init = to_eigen(init, sched.V)
    m, v = scan_moment_arrays(init.mean, init.cov, sched.lambdas, sched.hat_controls, grid.deltas, workers)
    return GaussianState(m, v, "eigen")

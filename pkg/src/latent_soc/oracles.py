"""Ground-truth engines for linear-Gaussian instances.

Nothing here reuses the closed-form kernels of :mod:`latent_soc.dynamics`:
transitions come from dense matrix exponentials (Van Loan's block trick for
the process noise) and the Monte-Carlo path simulator integrates the SDE with
plain Euler-Maruyama steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .grad_core import ContractViolation


@dataclass
class LinearGaussianModel:
    """``dX = -D X dt + dW`` observed as ``y_i ~ N(C X(t_i), R)``.

    ``X(origin) ~ N(mu0, Sigma0)``; ``times`` are the observation instants.
    """

    D: np.ndarray
    C: np.ndarray
    R: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray
    times: np.ndarray
    origin: float = 0.0

    def __post_init__(self):
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        self.Sigma0 = np.atleast_2d(np.asarray(self.Sigma0, dtype=float))
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        if np.any(np.linalg.eigvalsh(0.5 * (self.R + self.R.T)) < 0):
            raise ContractViolation("emission noise R is not PSD")
        if np.any(np.diff(np.concatenate([[self.origin], self.times])) < 0):
            raise ContractViolation("observation times must be nondecreasing from the origin")

    @property
    def dim(self) -> int:
        return self.D.shape[0]

    def transition(self, delta: float) -> tuple[np.ndarray, np.ndarray]:
        """Exact ``(F, Q)`` of the prior over an interval of length ``delta``.

        The block exponential grows like ``exp(|D| delta)``, so long intervals
        are halved until ``|D| delta <= 1`` and the pieces composed back.
        """
        d = self.dim
        halvings = max(0, int(np.ceil(np.log2(max(np.linalg.norm(self.D, 1) * delta, 1e-300)))))
        h = delta / 2 ** halvings
        block = np.zeros((2 * d, 2 * d))
        block[:d, :d] = self.D
        block[:d, d:] = np.eye(d)
        block[d:, d:] = -self.D.T
        E = linalg.expm(block * h)
        F = E[d:, d:].T
        Q = F @ E[:d, d:]
        for _ in range(halvings):
            Q = F @ Q @ F.T + Q
            F = F @ F
        return F, 0.5 * (Q + Q.T)


@dataclass
class FilterResult:
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    predicted_means: np.ndarray
    predicted_covs: np.ndarray
    transitions: np.ndarray
    log_marginal: float


def _gauss_logpdf(resid: np.ndarray, S: np.ndarray) -> float:
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ContractViolation("singular innovation covariance") from None
    z = linalg.solve_triangular(L, resid, lower=True)
    return float(-0.5 * z @ z - np.log(np.diag(L)).sum() - 0.5 * resid.size * np.log(2 * np.pi))


def kf_forward(model: LinearGaussianModel, ys) -> FilterResult:
    """Kalman filter over the observation times, with the exact log-marginal.

    Rows of ``ys`` that contain NaN are treated as missing: the prediction is
    carried forward without an update.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    k = model.times.size
    if ys.shape[0] != k:
        raise ContractViolation(f"{ys.shape[0]} observations for {k} times")
    d = model.dim
    fm, fc = np.zeros((k, d)), np.zeros((k, d, d))
    pm, pc = np.zeros((k, d)), np.zeros((k, d, d))
    Fs = np.zeros((k, d, d))
    m, P = model.mu0.copy(), model.Sigma0.copy()
    prev, logZ = model.origin, 0.0
    for i, t in enumerate(model.times):
        F, Q = model.transition(t - prev)
        m, P = F @ m, F @ P @ F.T + Q
        pm[i], pc[i], Fs[i] = m, P, F
        prev = t
        if np.any(np.isnan(ys[i])):
            fm[i], fc[i] = m, P
            continue
        S = model.C @ P @ model.C.T + model.R
        resid = ys[i] - model.C @ m
        logZ += _gauss_logpdf(resid, S)
        K = linalg.solve(S, model.C @ P, assume_a="pos").T
        m = m + K @ resid
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
        fm[i], fc[i] = m, P
    return FilterResult(fm, fc, pm, pc, Fs, logZ)


def rts_smooth(result: FilterResult) -> tuple[np.ndarray, np.ndarray]:
    """Rauch-Tung-Striebel pass; returns smoothed means ``(k, d)`` and covariances."""
    sm, sc = result.filtered_means.copy(), result.filtered_covs.copy()
    for i in range(sm.shape[0] - 2, -1, -1):
        F, Pp = result.transitions[i + 1], result.predicted_covs[i + 1]
        G = linalg.solve(Pp, F @ result.filtered_covs[i], assume_a="pos").T
        sm[i] = result.filtered_means[i] + G @ (sm[i + 1] - result.predicted_means[i + 1])
        sc[i] = result.filtered_covs[i] + G @ (sc[i + 1] - Pp) @ G.T
        sc[i] = 0.5 * (sc[i] + sc[i].T)
    return sm, sc


def exact_log_marginal(model: LinearGaussianModel, ys) -> float:
    return kf_forward(model, ys).log_marginal


def piecewise_drift(times, Ds, alphas, origin: float = 0.0):
    """Drift ``-D_i x + alpha_i`` with ``(D_i, alpha_i)`` held on ``[t_{i-1}, t_i)``.

    Past the last time the last pair is held.
    """
    starts = np.concatenate([[origin], np.asarray(times, dtype=float)[:-1]])
    Ds, alphas = np.asarray(Ds, dtype=float), np.asarray(alphas, dtype=float)

    def drift(t, x):
        # tolerance keeps float step times from slipping back across a boundary
        i = min(np.searchsorted(starts, t + 1e-9, side="right") - 1, len(starts) - 1)
        return -x @ Ds[i].T + alphas[i]

    return drift


def em_simulate(drift, x0, dt: float, steps: int, rng, diffusion: float = 1.0, record_every: int = 1):
    """Euler-Maruyama paths. ``x0`` is ``(n_paths, d)``; returns ``(n_records + 1, n_paths, d)``.

    ``drift(t, x)`` receives the left end of each step.
    """
    x = np.array(x0, dtype=float, copy=True)
    out = [x.copy()]
    sq = np.sqrt(dt) * diffusion
    for s in range(steps):
        x = x + drift(s * dt, x) * dt
        if diffusion:
            x += sq * rng.standard_normal(x.shape)
        if (s + 1) % record_every == 0:
            out.append(x.copy())
    return np.stack(out)


@dataclass
class MonteCarloMoments:
    mean: np.ndarray
    cov: np.ndarray
    mean_se: np.ndarray
    var_se: np.ndarray
    n_paths: int


def em_moments(drift, mu0, Sigma0, times, dt: float, n_paths: int, seed: int,
               origin: float = 0.0, chunk: int = 20_000) -> MonteCarloMoments:
    """Empirical mean/covariance at ``times`` with standard errors.

    Paths are drawn in chunks, each from its own Philox counter stream, so
    results do not depend on how chunks are scheduled.
    """
    times = np.asarray(times, dtype=float)
    marks = np.rint((times - origin) / dt).astype(int)
    if np.any(np.abs(marks * dt + origin - times) > 1e-9):
        raise ContractViolation("observation times must lie on the dt grid")
    d = len(mu0)
    k = times.size
    s1, s2 = np.zeros((k, d)), np.zeros((k, d, d))
    w, U = np.linalg.eigh(np.asarray(Sigma0, dtype=float))
    root = U * np.sqrt(np.clip(w, 0.0, None))
    done = 0
    c = 0
    while done < n_paths:
        m = min(chunk, n_paths - done)
        rng = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, c, 0]))
        x = mu0 + rng.standard_normal((m, d)) @ root.T
        step = 0
        for j, target in enumerate(marks):
            while step < target:
                x = x + drift(origin + step * dt, x) * dt + np.sqrt(dt) * rng.standard_normal((m, d))
                step += 1
            s1[j] += x.sum(0)
            s2[j] += x.T @ x
        done += m
        c += 1
    mean = s1 / n_paths
    cov = (s2 - n_paths * mean[:, :, None] * mean[:, None, :]) / (n_paths - 1)
    var = np.diagonal(cov, axis1=1, axis2=2)
    return MonteCarloMoments(mean, cov, np.sqrt(var / n_paths), var * np.sqrt(2.0 / (n_paths - 1)), n_paths)

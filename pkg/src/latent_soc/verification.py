"""Oracle suites comparing the closed-form engine against independent references.

Each check returns a :class:`Check` with the measured statistic so callers
can apply their own thresholds and print a table.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .dynamics import EigenSchedule, GaussianState, TimeGrid, from_eigen, moments_sequential, sequential_moments
from .grad_core import finite_diff_check
from .networks import LatentSOCModel, ModelConfig
from .objective import LossConfig, elbo_linear_gaussian
from .oracles import LinearGaussianModel, em_moments, kf_forward, piecewise_drift, rts_smooth
from .pretrain import Batch, PretrainConfig, batch_loss, mask_split
from .scan import Affine, blelloch_scan, combine, scan_moment_arrays, scan_moments


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    seconds: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value < self.threshold)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} value={self.value:.3e}  threshold={self.threshold:.1e}  " \
               f"({self.seconds:.1f}s) {self.detail}".rstrip()


def random_orthonormal(d: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def random_schedule(k: int, d: int, rng: np.random.Generator, lam_range=(0.05, 5.0)):
    lambdas = rng.uniform(*lam_range, size=(k, d))
    a_hat = rng.standard_normal((k, d)) * 2
    deltas = rng.uniform(0.01, 1.0, size=k)
    return lambdas, a_hat, deltas


def scan_equivalence(ks=(1, 2, 3, 5, 16, 1000, 4096), ds=(1, 3, 8), seed: int = 0) -> Check:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in ks:
        for d in ds:
            lam, a_hat, deltas = random_schedule(k, d, rng)
            mu0, var0 = rng.standard_normal(d), rng.uniform(0, 2, d)
            m1, v1 = sequential_moments(mu0, var0, lam, a_hat, deltas)
            m2, v2 = scan_moment_arrays(mu0, var0, lam, a_hat, deltas)
            worst = max(worst, np.abs(m1 - m2).max(), np.abs(v1 - v2).max())
    return Check("scan == sequential", worst, 1e-10, time.perf_counter() - start,
                 f"k in {list(ks)}, d in {list(ds)}")


def em_zscores(instances: int = 20, n_paths: int = 100_000, dt: float = 1e-3, seed: int = 0,
               max_d: int = 4, max_k: int = 8) -> np.ndarray:
    """Signed (closed form - Monte Carlo) / SE for every mean and variance component."""
    rng = np.random.default_rng(seed)
    zs = []
    for inst in range(instances):
        d, k = int(rng.integers(1, max_d + 1)), int(rng.integers(1, max_k + 1))
        V = random_orthonormal(d, rng)
        lam = rng.uniform(0.2, 1.5, size=(k, d))
        alpha = rng.standard_normal((k, d))
        steps = rng.integers(50, 301, size=k)
        times = np.cumsum(steps) * dt
        mu0, s0 = rng.standard_normal(d), rng.uniform(0.0, 1.0, d)
        sched = EigenSchedule(V, lam, alpha)
        exact = from_eigen(moments_sequential(GaussianState(mu0 @ V, s0, "eigen"), sched, TimeGrid(times)), V)
        Ds = np.einsum("ij,kj,lj->kil", V, lam, V)
        mc = em_moments(piecewise_drift(times, Ds, alpha), mu0, V @ np.diag(s0) @ V.T, times, dt, n_paths,
                        seed=seed * 1000 + inst)
        var_exact = np.diagonal(exact.cov, axis1=1, axis2=2)
        zs.append(((exact.mean - mc.mean) / mc.mean_se).ravel())
        zs.append(((var_exact - np.diagonal(mc.cov, axis1=1, axis2=2)) / mc.var_se).ravel())
    return np.concatenate(zs)


def em_agreement(instances: int = 20, n_paths: int = 100_000, dt: float = 1e-3, seed: int = 0,
                 max_d: int = 4, max_k: int = 8) -> Check:
    """Largest |closed form - Monte Carlo| / SE over every mean and variance component."""
    start = time.perf_counter()
    z = em_zscores(instances, n_paths, dt, seed, max_d, max_k)
    return Check("closed form vs Euler-Maruyama (z)", float(np.abs(z).max()), 3.0, time.perf_counter() - start,
                 f"{instances} instances, {z.size} components, {n_paths} paths, dt={dt}")


def _random_lg_instance(rng, max_d=4, max_k=16):
    d, k, n = int(rng.integers(1, max_d + 1)), int(rng.integers(1, max_k + 1)), int(rng.integers(1, 4))
    V = random_orthonormal(d, rng)
    lam = rng.uniform(0.1, 3.0, d)
    times = np.cumsum(rng.uniform(0.05, 1.0, k))
    C = rng.standard_normal((n, d))
    A = rng.standard_normal((n, n))
    R = A @ A.T + 0.1 * np.eye(n)
    mu0, s0 = rng.standard_normal(d), rng.uniform(0.1, 1.0, d)
    model = LinearGaussianModel(V @ np.diag(lam) @ V.T, C, R, mu0, V @ np.diag(s0) @ V.T, times)
    ys = model.C @ rng.standard_normal(d) + rng.standard_normal((k, n))
    return model, V, lam, s0, ys


def elbo_bound(trials: int = 1000, seed: int = 0) -> Check:
    """Largest ELBO - log-marginal over random instances and controls (must stay below 1e-6)."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(trials):
        model, V, lam, s0, ys = _random_lg_instance(rng)
        k, d = ys.shape[0], V.shape[0]
        alpha = rng.standard_normal((k, d)) * rng.uniform(0, 3)
        sched = EigenSchedule(V, np.tile(lam, (k, 1)), alpha)
        elbo = float(elbo_linear_gaussian(sched, TimeGrid(model.times), GaussianState(model.mu0 @ V, s0), model.C,
                                          model.R, ys))
        worst = max(worst, elbo - kf_forward(model, ys).log_marginal)
    return Check("ELBO <= Kalman log-marginal", worst, 1e-6, time.perf_counter() - start, f"{trials} instances")


@dataclass
class ToyResult:
    gap: float
    mean_error: float
    seconds: float


# scalar toy: unit decay, five observations every 0.5, weakly informative noise
TOY_TIMES = np.arange(1, 6) * 0.5
TOY_Y = np.array([[1.0], [2.0], [1.5], [0.5], [1.0]])
TOY_R = 100.0


def optimise_toy(steps: int = 500, R: float = TOY_R, lr: float = 0.05) -> ToyResult:
    """Adam on piecewise-constant controls; reports the ELBO gap and the mean error against RTS."""
    start = time.perf_counter()
    model = LinearGaussianModel([[1.0]], [[1.0]], [[R]], [0.0], [[0.5]], TOY_TIMES)
    res = kf_forward(model, TOY_Y)
    smooth_mean, _ = rts_smooth(res)
    grid, init = TimeGrid(TOY_TIMES), GaussianState(np.zeros(1), np.full(1, 0.5))
    ctrl = torch.zeros(len(TOY_TIMES), 1, requires_grad=True)
    lam = torch.ones(len(TOY_TIMES), 1)
    opt = torch.optim.Adam([ctrl], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss = -elbo_linear_gaussian(EigenSchedule(np.eye(1), lam, ctrl), grid, init, [[1.0]], [[R]], TOY_Y)
        loss.backward()
        opt.step()
    with torch.no_grad():
        sched = EigenSchedule(np.eye(1), lam, ctrl.detach())
        elbo = float(elbo_linear_gaussian(sched, grid, init, [[1.0]], [[R]], TOY_Y))
        mean = scan_moments(init, sched, grid).mean.numpy()[:, 0]
    return ToyResult(res.log_marginal - elbo, float(np.abs(mean - smooth_mean[:, 0]).max()),
                     time.perf_counter() - start)


def tiny_model_loss(seed: int = 0, d: int = 4, k: int = 8, n: int = 6):
    """``(loss_fn, params)`` for the rescaled loss of a small model on one series.

    Sampling noise is redrawn from the same seed on every call so the loss is a
    deterministic function of the parameters.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = LatentSOCModel(ModelConfig(n=n, d=d, blocks=1, heads=2, bases=3, dropout=0.0))
    with torch.no_grad():
        for p in model.target_encoder.parameters():
            p.add_(0.1 * torch.randn(p.shape))
    model.eval()
    split = mask_split(k, 0.5, rng)
    times = np.sort(rng.choice(40, size=k, replace=False)) * 0.1
    batch = Batch(torch.as_tensor(times[None]), torch.as_tensor(rng.standard_normal((1, k, n))),
                  split.context[None], split.target[None])
    cfg = PretrainConfig(epochs=1, warmup=0, batch=1, T=k, gamma=0.5, loss=LossConfig.from_tau(0.01))
    names = [name for name, _ in model.named_parameters() if not name.startswith("target_encoder.")]
    params = [dict(model.named_parameters())[name].detach().clone() for name in names]

    def loss(ps):
        return _loss_with(model, names, ps, batch, cfg, torch.Generator().manual_seed(seed + 1))

    return loss, params


def _loss_with(model, names, params, batch, cfg, gen):
    """Evaluate the loss with ``params`` swapped in for the named parameters."""
    saved = {name: p for name, p in model.named_parameters()}
    try:
        for name, p in zip(names, params):
            _set_param(model, name, p)
        return batch_loss(model, batch, cfg, gen).total
    finally:
        for name, p in saved.items():
            _set_param(model, name, p)


def _set_param(model, name, value):
    mod = model
    *path, leaf = name.split(".")
    for part in path:
        mod = getattr(mod, part)
    del mod._parameters[leaf]
    mod._parameters[leaf] = value


def gradient_check(seed: int = 0, eps: float = 1e-6) -> Check:
    start = time.perf_counter()
    loss, params = tiny_model_loss(seed)
    err = finite_diff_check(loss, params, eps)
    return Check("rescaled loss finite differences", err, 1e-4, time.perf_counter() - start,
                 f"{sum(p.numel() for p in params)} parameters, d=4 k=8 n=6")


def random_affine(rng, m: int, d: int) -> Affine:
    return Affine(rng.uniform(0.0, 1.0, (m, d)), rng.standard_normal((m, d)))


def associativity(triples: int = 10_000, seed: int = 0) -> Check:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    a, b, c = (random_affine(rng, triples, 4) for _ in range(3))
    left = combine(combine(c, b), a)
    right = combine(c, combine(b, a))
    worst = max(np.abs(left.A - right.A).max(), np.abs(left.b - right.b).max())
    return Check("combine associativity", worst, 1e-12, time.perf_counter() - start, f"{triples} triples")


def worker_determinism(workers=(1, 2, 4, 8), k: int = 8192, d: int = 8, seed: int = 0) -> Check:
    """Number of worker counts whose scan output differs bitwise from the single-worker run."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    elems = random_affine(rng, k, d)
    ref = blelloch_scan(elems, workers[0])
    mismatches = 0
    for w in workers[1:]:
        out = blelloch_scan(elems, w)
        if not (np.array_equal(out.A, ref.A) and np.array_equal(out.b, ref.b)):
            mismatches += 1
    return Check("scan bit-identical across workers", mismatches, 0.5, time.perf_counter() - start,
                 f"workers {list(workers)}")


@dataclass
class BenchRow:
    k: int
    d: int
    sequential_ns: int
    scan_ns: int
    workers: int
    max_abs_diff: float

    @property
    def speedup(self) -> float:
        return self.sequential_ns / max(self.scan_ns, 1)


def bench_scan(k: int = 8192, d: int = 8, workers: int = 4, repeats: int = 5, seed: int = 0) -> BenchRow:
    """Best-of-``repeats`` wall clock for the sequential recurrence and the prefix scan."""
    rng = np.random.default_rng(seed)
    lam, a_hat, deltas = random_schedule(k, d, rng)
    mu0, var0 = rng.standard_normal(d), rng.uniform(0, 1, d)
    seq_t, scan_t = [], []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        m1, v1 = sequential_moments(mu0, var0, lam, a_hat, deltas)
        t1 = time.perf_counter_ns()
        m2, v2 = scan_moment_arrays(mu0, var0, lam, a_hat, deltas, workers)
        t2 = time.perf_counter_ns()
        seq_t.append(t1 - t0)
        scan_t.append(t2 - t1)
    diff = max(np.abs(m1 - m2).max(), np.abs(v1 - v2).max())
    return BenchRow(k, d, min(seq_t), min(scan_t), workers, float(diff))


def quick_suite() -> list[Check]:
    """Reduced-size versions of every oracle comparison for the ``verify`` command."""
    toy = optimise_toy()
    return [
        scan_equivalence(),
        associativity(),
        worker_determinism(),
        elbo_bound(trials=200),
        Check("toy ELBO gap after 500 steps", toy.gap, 1e-3, toy.seconds),
        Check("toy mean error vs RTS", toy.mean_error, 1e-2, 0.0),
        gradient_check(),
        em_agreement(instances=4, n_paths=20_000),
    ]

"""Synthetic multichannel series, normalisation transforms and the binary series format.

SeriesFile layout (little-endian)::

    magic  b"LSOCSER\\0"   8 bytes
    u32    version
    u32    n (channels)
    u32    k (timesteps)
    u8     dtype code (1 = float64)
    f64    time scale
    f64[k] timestamps (raw indices; times = timestamps * time scale)
    f64[k*n] values, row-major
    u32    label count, then per label: u16 name length, utf-8 name, f64 value

A dataset file is ``b"LSOCDSET"``, u32 version, u32 count and that many
SeriesFile records back to back.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import TIME_SCALE
from .oracles import em_simulate

SERIES_MAGIC = b"LSOCSER\0"
DATASET_MAGIC = b"LSOCDSET"
FORMAT_VERSION = 1
_F64 = 1


class SeriesFormatError(ValueError):
    pass


@dataclass
class SeriesFile:
    timestamps: np.ndarray
    values: np.ndarray
    time_scale: float = TIME_SCALE
    labels: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.timestamps.size:
            raise SeriesFormatError(
                f"values shape {self.values.shape} does not match {self.timestamps.size} timestamps")

    @property
    def times(self) -> np.ndarray:
        return self.timestamps * self.time_scale

    def to_bytes(self) -> bytes:
        k, n = self.values.shape
        out = [SERIES_MAGIC, struct.pack("<IIIBd", FORMAT_VERSION, n, k, _F64, self.time_scale),
               self.timestamps.astype("<f8").tobytes(), np.ascontiguousarray(self.values, "<f8").tobytes(),
               struct.pack("<I", len(self.labels))]
        for name, value in self.labels.items():
            raw = name.encode()
            out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<d", value))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["SeriesFile", int]:
        """Parse one record at ``offset``; returns it with the offset just past it."""
        if buf[offset:offset + 8] != SERIES_MAGIC:
            raise SeriesFormatError(f"bad series magic at byte {offset}")
        try:
            version, n, k, code, scale = struct.unpack_from("<IIIBd", buf, offset + 8)
            if version != FORMAT_VERSION:
                raise SeriesFormatError(f"unsupported series version {version}")
            if code != _F64:
                raise SeriesFormatError(f"unsupported dtype code {code}")
            pos = offset + 8 + struct.calcsize("<IIIBd")
            need = 8 * (k + k * n)
            if pos + need > len(buf):
                raise SeriesFormatError(f"payload truncated: header declares k={k}, n={n}")
            ts = np.frombuffer(buf, "<f8", k, pos).copy()
            vals = np.frombuffer(buf, "<f8", k * n, pos + 8 * k).reshape(k, n).copy()
            pos += need
            (count,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            labels = {}
            for _ in range(count):
                (ln,) = struct.unpack_from("<H", buf, pos)
                name = buf[pos + 2:pos + 2 + ln].decode()
                if len(name.encode()) != ln:
                    raise SeriesFormatError("label name truncated")
                (labels[name],) = struct.unpack_from("<d", buf, pos + 2 + ln)
                pos += 2 + ln + 8
        except (struct.error, UnicodeDecodeError) as exc:
            raise SeriesFormatError(f"corrupted series record: {exc}") from None
        return cls(ts, vals, scale, labels), pos


def write_series(path, series: SeriesFile) -> None:
    Path(path).write_bytes(series.to_bytes())


def read_series(path) -> SeriesFile:
    buf = Path(path).read_bytes()
    series, end = SeriesFile.from_bytes(buf)
    if end != len(buf):
        raise SeriesFormatError(f"{path}: {len(buf) - end} trailing bytes")
    return series


@dataclass
class Dataset:
    """Equal-length series stacked for batching, plus optional ground truth."""

    series: list[SeriesFile]
    latents: np.ndarray | None = None
    biases: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.series)

    @property
    def values(self) -> np.ndarray:
        return np.stack([s.values for s in self.series])

    @property
    def timestamps(self) -> np.ndarray:
        return np.stack([s.timestamps for s in self.series])

    @property
    def time_scale(self) -> float:
        return self.series[0].time_scale

    def label(self, name: str) -> np.ndarray:
        try:
            return np.array([s.labels[name] for s in self.series])
        except KeyError:
            raise SeriesFormatError(f"label {name!r} missing from dataset") from None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return Dataset([self.series[i] for i in idx], pick(self.latents), pick(self.biases))

    def with_values(self, values: np.ndarray) -> "Dataset":
        return Dataset([SeriesFile(s.timestamps, v, s.time_scale, dict(s.labels)) for s, v in zip(self.series, values)],
                       self.latents, self.biases)


def write_dataset(path, data: Dataset) -> None:
    body = b"".join(s.to_bytes() for s in data.series)
    Path(path).write_bytes(DATASET_MAGIC + struct.pack("<II", FORMAT_VERSION, len(data)) + body)


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise SeriesFormatError(f"{path}: cannot read ({exc.strerror})") from None
    if buf[:8] != DATASET_MAGIC:
        raise SeriesFormatError(f"{path}: not a dataset file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise SeriesFormatError(f"{path}: unsupported dataset version {version}")
    pos, out = 16, []
    for _ in range(count):
        s, pos = SeriesFile.from_bytes(buf, pos)
        out.append(s)
    if pos != len(buf):
        raise SeriesFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return Dataset(out)


# synthetic generator -------------------------------------------------------

@dataclass
class Regime:
    eigenvalues: tuple[float, ...]
    control_bias: tuple[float, ...]
    emission_seed: int = 0


def _default_regimes() -> list[Regime]:
    return [Regime((0.3, 0.5, 0.8, 1.2), (0.6, -0.3, 0.4, 0.2)),
            Regime((1.0, 1.5, 2.0, 2.5), (-0.6, 0.3, -0.4, -0.2))]


@dataclass
class SynthConfig:
    n: int = 16
    latent_dim: int = 4
    length: int = 200
    n_series: int = 1000
    regimes: list[Regime] = field(default_factory=_default_regimes)
    obs_noise: float = 0.3
    bias_jitter: float = 0.5
    label_noise: float = 0.0
    class_balance: tuple[float, ...] | None = None
    time_scale: float = TIME_SCALE
    substeps: int = 5

    def __post_init__(self):
        if not self.regimes:
            raise ValueError("at least one regime is required")
        for r in self.regimes:
            if len(r.eigenvalues) != self.latent_dim or len(r.control_bias) != self.latent_dim:
                raise ValueError(f"regime dimensions must equal latent_dim={self.latent_dim}")
        if min(self.n, self.latent_dim, self.length, self.n_series, self.substeps) < 1:
            raise ValueError("sizes must be positive")


def emission_matrix(n: int, d: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, d)) / np.sqrt(d)


def generate(cfg: SynthConfig, rng: np.random.Generator) -> Dataset:
    """Draw series from per-regime linear SDEs started at rest.

    Each series gets its own control bias ``bias * (1 + jitter * e)``; the
    ``target`` label is the mean of that bias vector plus optional noise and
    ``regime`` is the regime index.
    """
    R, d = len(cfg.regimes), cfg.latent_dim
    balance = np.full(R, 1.0 / R) if cfg.class_balance is None else np.asarray(cfg.class_balance, float)
    regime = rng.choice(R, size=cfg.n_series, p=balance / balance.sum())
    scale = 1.0 + cfg.bias_jitter * rng.standard_normal(cfg.n_series)
    lams = np.array([r.eigenvalues for r in cfg.regimes])[regime]
    bias = np.array([r.control_bias for r in cfg.regimes])[regime] * scale[:, None]
    target = bias.mean(1) + cfg.label_noise * rng.standard_normal(cfg.n_series)

    dt = cfg.time_scale / cfg.substeps
    steps = (cfg.length - 1) * cfg.substeps
    path = em_simulate(lambda t, x: -lams * x + bias, np.zeros((cfg.n_series, d)), dt, steps, rng,
                       record_every=cfg.substeps)
    latents = np.transpose(path, (1, 0, 2))

    Cs = np.stack([emission_matrix(cfg.n, d, r.emission_seed) for r in cfg.regimes])[regime]
    values = np.einsum("skd,snd->skn", latents, Cs)
    values += cfg.obs_noise * rng.standard_normal(values.shape)
    stamps = np.arange(cfg.length, dtype=np.float64)
    series = [SeriesFile(stamps, values[i], cfg.time_scale, {"regime": float(regime[i]), "target": float(target[i])})
              for i in range(cfg.n_series)]
    return Dataset(series, latents, bias)


# normalisation -------------------------------------------------------------

def center(values: np.ndarray) -> np.ndarray:
    """Per-series zero-mean centring along time (axis -2)."""
    return values - values.mean(-2, keepdims=True)


def robust_stats(values: np.ndarray, centre: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Channel medians and interquartile ranges (linear-interpolation quartiles)."""
    x = center(values) if centre else np.asarray(values, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    q1, med, q3 = np.percentile(flat, [25, 50, 75], axis=0)
    return med, q3 - q1


def robust_scale(values: np.ndarray, medians, iqrs, centre: bool = True) -> np.ndarray:
    """``(x - median) / IQR`` after per-series centring; zero-IQR channels pass through unscaled."""
    x = center(values) if centre else np.asarray(values, dtype=np.float64)
    iqrs = np.asarray(iqrs, dtype=np.float64)
    flat = iqrs <= 0
    if np.any(flat):
        warnings.warn(f"channels {np.flatnonzero(flat).tolist()} have zero IQR; left unscaled", stacklevel=2)
    return (x - medians) / np.where(flat, 1.0, iqrs)


def csv_export(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)

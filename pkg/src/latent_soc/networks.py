"""Encoder, dynamics heads, decoder, shared eigenbasis and the slow target encoder.

Also holds the checkpoint container: a little-endian binary file with a JSON
metadata block followed by named float64 parameter blocks.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dynamics import EIGEN_FLOOR
from .grad_core import ContractViolation, positive


@dataclass
class ModelConfig:
    n: int = 16
    d: int = 32
    blocks: int = 4
    heads: int = 4
    bases: int = 16
    dropout: float = 0.1
    attn_dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ContractViolation(f"d={self.d} not divisible by heads={self.heads}")
        if min(self.n, self.d, self.blocks, self.heads, self.bases) < 1:
            raise ContractViolation("model sizes must be positive")


def time_embedding(times: torch.Tensor, d: int) -> torch.Tensor:
    """Sinusoidal embedding of continuous times, ``(..., k) -> (..., k, d)``."""
    half = d // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=times.dtype) / max(half, 1))
    angles = times[..., None] * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], -1)
    if d % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], -1)
    return emb


class Attention(nn.Module):
    """Pre-normalised multi-head self-attention with a post-projection norm and residual."""

    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.norm_q = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)
        self.norm_out = nn.LayerNorm(d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, k, d = x.shape
        h = self.norm_q(x)
        split = lambda t: t.reshape(*lead, k, self.heads, d // self.heads).transpose(-2, -3)
        q, key, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        w = torch.softmax(q @ key.transpose(-1, -2) / math.sqrt(d // self.heads), -1)
        mixed = (self.drop(w) @ v).transpose(-2, -3).reshape(*lead, k, d)
        return x + self.out(self.norm_out(mixed))


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(nn.LayerNorm(d), nn.Linear(d, mult * d), nn.GELU(), nn.Linear(mult * d, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.net(x)


class Encoder(nn.Module):
    """Maps tokens ``(t, y_t)`` to latent means ``T(t, Y)``, one per token."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d
        self.d = d
        self.embed = nn.Sequential(nn.Linear(cfg.n, d), nn.ReLU(), nn.LayerNorm(d),
                                   nn.Linear(d, d), nn.ReLU(), nn.LayerNorm(d))
        self.blocks = nn.ModuleList(
            nn.Sequential(Attention(d, cfg.heads, cfg.attn_dropout), FeedForward(d)) for _ in range(cfg.blocks))

    def forward(self, times: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        if values.shape[-2] == 0:
            raise ContractViolation("encoder needs at least one token")
        x = self.embed(values) + time_embedding(times, self.d)
        for block in self.blocks:
            x = block(x)
        return x


def _round_robin(d: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Partition all ``d(d-1)/2`` index pairs into rounds of disjoint pairs."""
    m = d + (d % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [tuple(sorted(p)) for p in pairs if max(p) < d]
        if pairs:
            rounds.append((np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def orthonormal_V(angles: torch.Tensor, d: int) -> torch.Tensor:
    """Product of ``d(d-1)/2`` Givens rotations, one angle per index pair.

    Pairs are applied in round-robin rounds so each round is one vectorised
    update of disjoint row pairs. Zero angles give the identity.
    """
    if angles.shape[-1] != d * (d - 1) // 2:
        raise ContractViolation(f"expected {d * (d - 1) // 2} angles for d={d}, got {angles.shape[-1]}")
    V = torch.eye(d, dtype=angles.dtype)
    offset = 0
    for i, j in _round_robin(d):
        theta = angles[offset:offset + len(i)]
        offset += len(i)
        c, s = torch.cos(theta)[:, None], torch.sin(theta)[:, None]
        Vi, Vj = V[i], V[j]
        V = V.index_copy(0, torch.as_tensor(i), c * Vi - s * Vj)
        V = V.index_copy(0, torch.as_tensor(j), s * Vi + c * Vj)
    return V


class DynamicsHeads(nn.Module):
    """Mixture weights over ``L`` diagonal bases, the control map and the initial state."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, L = cfg.d, cfg.bases
        self.d = d
        self.w = nn.Linear(d, L)
        # spread base decay rates over roughly [0.1, 3]
        init = torch.log(torch.expm1(torch.linspace(0.1, 3.0, L)))[:, None].repeat(1, d)
        self.eigen_logits = nn.Parameter(init + 0.01 * torch.randn(L, d))
        self.B = nn.Parameter(torch.randn(d, d) / math.sqrt(d))
        self.V_params = nn.Parameter(torch.zeros(d * (d - 1) // 2))
        self.mu0 = nn.Parameter(torch.zeros(d))
        self.sigma0_logits = nn.Parameter(torch.zeros(d))

    def base_eigenvalues(self) -> torch.Tensor:
        return positive(self.eigen_logits, EIGEN_FLOOR)

    def V(self) -> torch.Tensor:
        return orthonormal_V(self.V_params, self.d)

    def initial_variance(self) -> torch.Tensor:
        return positive(self.sigma0_logits)

    def controls(self, z: torch.Tensor) -> torch.Tensor:
        return z @ self.B.T

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-token eigenvalues ``sum_l w_l lambda^l`` and controls ``B z``."""
        weights = torch.softmax(self.w(z), -1)
        return weights @ self.base_eigenvalues(), self.controls(z)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(cfg.d, cfg.n), nn.ReLU(), nn.Dropout(cfg.dropout), nn.Linear(cfg.n, cfg.n))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, momentum: float) -> None:
    """``target <- m * target + (1 - m) * online`` parameter by parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ContractViolation(f"EMA momentum {momentum} outside [0, 1]")
    for t, o in zip(target.parameters(), online.parameters()):
        t.mul_(momentum).add_(o, alpha=1.0 - momentum)


class LatentSOCModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.heads = DynamicsHeads(cfg)
        self.decoder = Decoder(cfg)
        self.target_encoder = copy.deepcopy(self.encoder)
        self.target_encoder.requires_grad_(False)

    def online_parameters(self):
        """Everything the optimiser updates (the target encoder is excluded)."""
        return [p for name, p in self.named_parameters() if not name.startswith("target_encoder.")]

    def features(self, times: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        """Mean-pooled control sequence computed from the encoder means."""
        return self.heads.controls(self.encoder(times, values)).mean(-2)


# checkpoint container ------------------------------------------------------

CHECKPOINT_MAGIC = b"LSOCCKPT"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: LatentSOCModel, **metadata) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().astype("<f8", copy=True) for k, v in model.state_dict().items()}
        return cls(model.cfg, state, metadata)

    def build(self) -> LatentSOCModel:
        model = LatentSOCModel(self.config)
        model.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float64)) for k, v in self.state.items()})
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = json.dumps({"config": asdict(ckpt.config), "metadata": ckpt.metadata}, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(meta)), meta,
             struct.pack("<I", len(ckpt.state))]
    for name, arr in ckpt.state.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<IQ", buf, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 20
        meta = json.loads(buf[pos:pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos + 1)
            pos += 1 + 8 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + size > len(buf):
                raise CheckpointFormatError(f"{path}: block {name!r} truncated")
            state[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupted checkpoint ({exc})") from None
    if pos != len(buf):
        raise CheckpointFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return Checkpoint(ModelConfig(**meta["config"]), state, meta["metadata"])

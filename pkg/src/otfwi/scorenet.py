"""Trainable score model: a small conv net fit by denoising score matching.

The network predicts the noise sample eps from (x_i, i); the exposed score is
-eps_hat / sqrt(1 - alpha_bar_i).  Training minimizes mean squared error on
eps, which equals the score-matching loss against the conditional score
-(x_i - sqrt(alpha_bar) x0) / (1 - alpha_bar) weighted by (1 - alpha_bar_i)
per level (the variance-stabilized convention).

Inputs carry two fixed coordinate channels so the net can express
position-dependent statistics on the small fields used here; the step enters
through a sinusoidal embedding mapped to per-channel scale/shift pairs.
Checkpoints use an in-repo binary container (see ``save_checkpoint``) rather
than pickle, so loads are deterministic and inspectable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .diffusion import DiffusionSchedule, FieldScaler
from .arrayio import ArrayIOError

__all__ = [
    "NetConfig",
    "TrainingError",
    "TrainedScore",
    "dsm_train",
    "save_checkpoint",
    "load_checkpoint",
]

_CKPT_MAGIC = b"OTFWICP1"
_CKPT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when the DSM loss stops being finite."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture and optimizer knobs for the denoiser."""

    width: int = 32
    emb_dim: int = 32
    batch_size: int = 128
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.width < 1 or self.width > 32:
            raise ValueError("width must sit in 1..32")
        if self.emb_dim < 2 or self.emb_dim % 2:
            raise ValueError("embedding dimension must be even and >= 2")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def _sinusoidal_embedding(steps: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    angles = steps.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class _Film(nn.Module):
    """Per-channel scale/shift conditioned on the step embedding."""

    def __init__(self, emb_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(emb_dim, 2 * channels)

    def forward(self, h, emb):
        scale, shift = self.proj(emb)[:, :, None, None].chunk(2, dim=1)
        return h * (1.0 + scale) + shift


class _EpsNet(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        w = config.width
        e = config.emb_dim
        self.emb_mlp = nn.Sequential(nn.Linear(e, e), nn.GELU(), nn.Linear(e, e))
        self.inp = nn.Conv2d(3, w, 3, padding=1)
        self.conv1 = nn.Conv2d(w, w, 3, padding=1)
        self.film1 = _Film(e, w)
        self.conv2 = nn.Conv2d(w, w, 3, padding=1)
        self.film2 = _Film(e, w)
        self.conv3 = nn.Conv2d(w, w, 3, padding=1)
        self.film3 = _Film(e, w)
        self.out = nn.Conv2d(w, 1, 3, padding=1)
        self.emb_dim = e

    def forward(self, x, steps):
        emb = self.emb_mlp(_sinusoidal_embedding(steps, self.emb_dim))
        b, _, hgt, wid = x.shape
        cx = torch.linspace(-1.0, 1.0, hgt, dtype=x.dtype)[None, None, :, None].expand(b, 1, hgt, wid)
        cz = torch.linspace(-1.0, 1.0, wid, dtype=x.dtype)[None, None, None, :].expand(b, 1, hgt, wid)
        h = torch.nn.functional.gelu(self.inp(torch.cat([x, cx, cz], dim=1)))
        h = torch.nn.functional.gelu(self.film1(self.conv1(h), emb))
        # One pooled pass widens the receptive field without a full pyramid.
        coarse = torch.nn.functional.avg_pool2d(h, 2, ceil_mode=True)
        coarse = torch.nn.functional.gelu(self.film2(self.conv2(coarse), emb))
        h = h + torch.nn.functional.interpolate(coarse, size=h.shape[-2:], mode="nearest")
        h = torch.nn.functional.gelu(self.film3(self.conv3(h), emb))
        return self.out(h)


class TrainedScore:
    """ScoreModel adapter around the eps-prediction network."""

    def __init__(self, net: _EpsNet, schedule: DiffusionSchedule, config: NetConfig,
                 training_loss: tuple[float, ...] = ()):
        self.net = net.eval()
        self.schedule = schedule
        self.config = config
        self.training_loss = tuple(training_loss)

    def _eps(self, x: torch.Tensor, i: int) -> torch.Tensor:
        steps = torch.full((x.shape[0],), float(i))
        return self.net(x, steps)

    def score(self, x: np.ndarray, i: int) -> np.ndarray:
        abar = self.schedule.alpha_bar_at(i)
        xt = torch.from_numpy(np.asarray(x, dtype=np.float32))[None, None]
        with torch.no_grad():
            eps = self._eps(xt, i)
        return -eps[0, 0].double().numpy() / math.sqrt(1.0 - abar)

    def vjp(self, x: np.ndarray, i: int, cotangent: np.ndarray) -> np.ndarray:
        abar = self.schedule.alpha_bar_at(i)
        xt = torch.from_numpy(np.asarray(x, dtype=np.float32))[None, None].requires_grad_(True)
        eps = self._eps(xt, i)
        score = -eps / math.sqrt(1.0 - abar)
        cot = torch.from_numpy(np.asarray(cotangent, dtype=np.float32))[None, None]
        (grad,) = torch.autograd.grad(score, xt, grad_outputs=cot)
        return grad[0, 0].double().numpy()


def dsm_train(
    samples: np.ndarray,
    schedule: DiffusionSchedule,
    net_config: NetConfig,
    epochs: int,
    seed: int,
) -> TrainedScore:
    """Fit the denoiser on normalized clean fields, shape (n_samples, nx, nz).

    Deterministic for a fixed seed: torch runs single-threaded and every draw
    (step indices, noise, shuffling, init) comes from one generator.
    """
    data = np.asarray(samples, dtype=np.float32)
    if data.ndim != 3 or data.shape[0] < 2:
        raise ValueError("training needs a (n >= 2, nx, nz) sample stack")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")

    torch.set_num_threads(1)
    torch.manual_seed(seed)
    net = _EpsNet(net_config)
    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=net_config.learning_rate)

    x0_all = torch.from_numpy(data)[:, None]
    abar = torch.from_numpy(schedule.alpha_bar.astype(np.float32))
    n = data.shape[0]
    bs = min(net_config.batch_size, n)
    losses = []
    for _ in range(epochs):
        order = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            x0 = x0_all[idx]
            steps = torch.randint(1, schedule.n + 1, (idx.numel(),), generator=gen)
            a = abar[steps - 1][:, None, None, None]
            eps = torch.randn(x0.shape, generator=gen)
            x_i = torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * eps
            pred = net(x_i, steps)
            loss = torch.mean((pred - eps) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            batches += 1
        mean_loss = epoch_loss / batches
        if not math.isfinite(mean_loss):
            raise TrainingError(f"DSM loss diverged at epoch {len(losses) + 1}")
        losses.append(mean_loss)
    return TrainedScore(net, schedule, net_config, tuple(losses))


def save_checkpoint(path, model: TrainedScore, scaler: FieldScaler) -> None:
    """Binary container: magic, u16 version, u32 JSON header length, JSON
    metadata (net config, scaler, tensor manifest, losses), then raw tensor
    payloads in manifest order (net weights float32 LE, schedule beta float64
    LE so the schedule rebuilds bit-exactly)."""
    state = model.net.state_dict()
    manifest = []
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().numpy().astype("<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "<f4"})
        blobs.append(arr.tobytes(order="C"))
    beta = model.schedule.beta.astype("<f8")
    manifest.append({"name": "schedule.beta", "shape": [beta.size], "dtype": "<f8"})
    blobs.append(beta.tobytes(order="C"))
    header = {
        "net": {
            "width": model.config.width,
            "emb_dim": model.config.emb_dim,
            "batch_size": model.config.batch_size,
            "learning_rate": model.config.learning_rate,
        },
        "scaler": {"v_min": scaler.v_min, "v_max": scaler.v_max},
        "training_loss": list(model.training_loss),
        "tensors": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(_CKPT_VERSION.to_bytes(2, "little"))
        fh.write(len(head).to_bytes(4, "little"))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[TrainedScore, FieldScaler]:
    """Rebuild the trained score model and its scaler from disk."""
    blob = Path(path).read_bytes()
    if blob[:8] != _CKPT_MAGIC:
        raise ArrayIOError(f"{path}: not a score checkpoint (bad magic)")
    version = int.from_bytes(blob[8:10], "little")
    if version != _CKPT_VERSION:
        raise ArrayIOError(f"{path}: checkpoint version {version} not supported")
    hlen = int.from_bytes(blob[10:14], "little")
    header = json.loads(blob[14 : 14 + hlen].decode("utf-8"))
    config = NetConfig(**header["net"])
    scaler = FieldScaler(**header["scaler"])

    offset = 14 + hlen
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        size = count * dtype.itemsize
        if offset + size > len(blob):
            raise ArrayIOError(f"{path}: tensor payload cut short at {entry['name']}")
        arr = np.frombuffer(blob[offset : offset + size], dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = arr
        offset += size

    beta = tensors.pop("schedule.beta").astype(np.float64)
    alpha = 1.0 - beta
    abar = np.cumprod(alpha)
    abar_prev = np.concatenate([[1.0], abar[:-1]])
    sigma_hat = np.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar))
    schedule = DiffusionSchedule(
        n=beta.size, beta=beta, alpha=alpha, alpha_bar=abar, sigma_hat=sigma_hat
    )

    torch.set_num_threads(1)
    net = _EpsNet(config)
    state = {name: torch.from_numpy(arr.astype(np.float32)) for name, arr in tensors.items()}
    net.load_state_dict(state)
    return (
        TrainedScore(net, schedule, config, tuple(header.get("training_loss", ()))),
        scaler,
    )

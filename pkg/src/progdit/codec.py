"""Image <-> latent codecs standing in for a pretrained VAE.

Both codecs multiply latents by :data:`LATENT_SCALE` on encode and divide
on decode, and both track whether that has happened through ``Latent.scaled``.

* :class:`FixedCodec` is space-to-depth followed by a fixed orthonormal
  (Hadamard) projection. At ``factor=2`` with one input channel the projection
  is square, so decode inverts encode.
* :class:`TrainableCodec` is a deterministic autoencoder of three stride-2
  stages, each a learned per-pixel map over 2x2 neighbourhoods.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from . import tnsr
from .tensor import Tensor

LATENT_SCALE = 0.13025
log = logging.getLogger(__name__)


class CodecError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class Latent:
    data: np.ndarray  # (B, C, H/f, W/f)
    scaled: bool = True

    @property
    def shape(self):
        return self.data.shape


def space_to_depth(x: np.ndarray | Tensor, f: int):
    """``(B, C, H, W) -> (B, C*f*f, H/f, W/f)``; channel index is ``(c, dy, dx)``."""
    b, c, h, w = x.shape
    if h % f or w % f:
        raise CodecError(f"image {h}x{w} not divisible by {f}")
    y = x.reshape(b, c, h // f, f, w // f, f).transpose(0, 1, 3, 5, 2, 4)
    return y.reshape(b, c * f * f, h // f, w // f)


def depth_to_space(x: np.ndarray | Tensor, f: int):
    b, cf, h, w = x.shape
    c = cf // (f * f)
    y = x.reshape(b, c, f, f, h, w).transpose(0, 1, 4, 2, 5, 3)
    return y.reshape(b, c, h * f, w * f)


def hadamard(n: int) -> np.ndarray:
    """Orthonormal Sylvester-Hadamard matrix; ``n`` must be a power of two."""
    if n < 1 or n & (n - 1):
        raise CodecError(f"Hadamard size {n} is not a power of two")
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h / math.sqrt(n)


def _as_batch(image) -> tuple[np.ndarray, bool]:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None], True
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise CodecError(f"expected (H,W), (C,H,W) or (B,C,H,W) image, got shape {x.shape}")


def _unscaled(latent: Latent) -> np.ndarray:
    if not latent.scaled:
        raise CodecError("decode expects a scaled latent (scaled=True)")
    return np.asarray(latent.data, dtype=np.float64) / LATENT_SCALE


@dataclass(frozen=True)
class CodecConfig:
    kind: str = "trainable"  # "fixed" | "trainable"
    factor: int = 8
    latent_channels: int = 4
    in_channels: int = 1
    widths: tuple[int, int, int] = (32, 64, 64)
    seed: int = 7
    lr: float = 2e-3
    epochs: int = 80
    batch_size: int = 16
    mse_threshold: float = 2e-3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class FixedCodec:
    kind = "fixed"

    def __init__(self, factor: int = 8, latent_channels: int = 4, in_channels: int = 1):
        self.factor, self.latent_channels, self.in_channels = factor, latent_channels, in_channels
        n = in_channels * factor * factor
        if latent_channels > n:
            raise CodecError(f"cannot project {n} channels onto {latent_channels}")
        self.basis = hadamard(n)[:latent_channels]  # rows orthonormal

    @property
    def invertible(self) -> bool:
        return self.basis.shape[0] == self.basis.shape[1]

    def encode(self, image) -> Latent:
        x, single = _as_batch(image)
        if x.shape[1] != self.in_channels:
            raise CodecError(f"codec takes {self.in_channels} channel(s), got {x.shape[1]}")
        blocks = space_to_depth(x, self.factor)
        z = np.einsum("kc,bchw->bkhw", self.basis, blocks) * LATENT_SCALE
        return Latent(z[0] if single else z, True)

    def decode(self, latent: Latent) -> np.ndarray:
        z = _unscaled(latent)
        single = z.ndim == 3
        z = z[None] if single else z
        blocks = np.einsum("kc,bkhw->bchw", self.basis, z)
        img = np.clip(depth_to_space(blocks, self.factor), 0.0, 1.0)
        return img[0] if single else img

    def train(self, images, **_) -> dict:
        return {}

    def state_dict(self) -> dict:
        return {"basis": self.basis}


class TrainableCodec(nn.Module):
    kind = "trainable"

    def __init__(self, cfg: CodecConfig = CodecConfig()):
        if cfg.factor != 8:
            raise CodecError("the trainable codec has three stride-2 stages (factor 8)")
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        w1, w2, w3 = cfg.widths
        cin, lat = cfg.in_channels, cfg.latent_channels
        # encoder: each stage maps a 2x2 neighbourhood (4*c channels) to the next width
        self.e1 = nn.Linear(4 * cin, w1, rng)
        self.e2 = nn.Linear(4 * w1, w2, rng)
        self.e3 = nn.Linear(4 * w2, w3, rng)
        self.e_out = nn.Linear(w3, lat, rng)
        self.d_in = nn.Linear(lat, w3, rng)
        self.d3 = nn.Linear(w3, 4 * w2, rng)
        self.d2 = nn.Linear(w2, 4 * w1, rng)
        self.d1 = nn.Linear(w1, 4 * cin, rng)
        # fixed affine normalizer of the raw code, refit after training
        self.latent_shift = np.zeros(lat)
        self.latent_gain = np.ones(lat)
        self.latent_std_raw = np.ones(lat)

    @staticmethod
    def _pix(layer: nn.Linear, x: Tensor) -> Tensor:
        # per-pixel linear map over channels of (B, C, H, W)
        y = layer(x.transpose(0, 2, 3, 1))
        return y.transpose(0, 3, 1, 2)

    def encode_raw(self, x: Tensor) -> Tensor:
        h = T.silu(self._pix(self.e1, space_to_depth(x, 2)))
        h = T.silu(self._pix(self.e2, space_to_depth(h, 2)))
        h = T.silu(self._pix(self.e3, space_to_depth(h, 2)))
        return self._pix(self.e_out, h)

    def decode_raw(self, z: Tensor) -> Tensor:
        h = T.silu(self._pix(self.d_in, z))
        h = T.silu(depth_to_space(self._pix(self.d3, h), 2))
        h = T.silu(depth_to_space(self._pix(self.d2, h), 2))
        return depth_to_space(self._pix(self.d1, h), 2)

    def _norm(self, arr):
        return arr.reshape(1, -1, 1, 1)

    def encode(self, image) -> Latent:
        x, single = _as_batch(image)
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise CodecError(f"image {x.shape[2]}x{x.shape[3]} not divisible by 8")
        with T.no_grad():
            raw = self.encode_raw(Tensor(x)).data
        z = (raw - self._norm(self.latent_shift)) * self._norm(self.latent_gain) * LATENT_SCALE
        return Latent(z[0] if single else z, True)

    def decode(self, latent: Latent) -> np.ndarray:
        z = _unscaled(latent)
        single = z.ndim == 3
        z = z[None] if single else z
        raw = z / self._norm(self.latent_gain) + self._norm(self.latent_shift)
        with T.no_grad():
            img = self.decode_raw(Tensor(raw)).data
        img = np.clip(img, 0.0, 1.0)
        return img[0] if single else img

    def recon_mse(self, images: np.ndarray) -> float:
        x, _ = _as_batch(images)
        return float(np.mean((self.decode(self.encode(x)) - x) ** 2))

    def train(self, images: np.ndarray, epochs: int | None = None,
              validation: np.ndarray | None = None) -> dict:
        """Adam on reconstruction MSE; returns per-epoch losses and final latent statistics."""
        from .trainer import AdamW  # local import: trainer depends on this module

        cfg = self.cfg
        x_all, _ = _as_batch(images)
        epochs = cfg.epochs if epochs is None else epochs
        rng = np.random.default_rng(cfg.seed + 1)
        params = self.named_parameters()
        opt = AdamW(params, weight_decay=0.0)
        snapshot = {k: v.data.copy() for k, v in params.items()}
        history = []
        n = len(x_all)
        steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
        total = epochs * steps_per_epoch
        step = 0
        for ep in range(epochs):
            order = rng.permutation(n)
            ep_loss = 0.0
            for s in range(steps_per_epoch):
                idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
                if len(idx) == 0:
                    continue
                xb = Tensor(x_all[idx])
                self.zero_grad()
                rec = self.decode_raw(self.encode_raw(xb))
                diff = rec - xb
                loss = (diff * diff).mean()
                if not np.isfinite(loss.data):
                    self.load_state_dict(snapshot)
                    raise TrainingError(f"codec loss diverged at epoch {ep}; restored last finite weights")
                T.backward(loss)
                lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total))
                opt.step(lr)
                step += 1
                ep_loss += float(loss.data) * len(idx)
            history.append(ep_loss / n)
            snapshot = {k: v.data.copy() for k, v in params.items()}
        self.fit_normalizer(x_all)
        out = {"train_mse": history}
        if validation is not None:
            out["val_mse"] = self.recon_mse(validation)
        return out

    def fit_normalizer(self, images: np.ndarray) -> None:
        x, _ = _as_batch(images)
        with T.no_grad():
            raw = self.encode_raw(Tensor(x)).data
        mu = raw.mean(axis=(0, 2, 3))
        sd = raw.std(axis=(0, 2, 3))
        sd = np.where(sd > 1e-12, sd, 1.0)
        self.latent_shift = mu
        self.latent_std_raw = sd
        # scaled latents come out with unit std per channel
        self.latent_gain = 1.0 / (sd * LATENT_SCALE)

    def state_dict(self):
        out = super().state_dict()
        out["latent_shift"] = self.latent_shift
        out["latent_gain"] = self.latent_gain
        out["latent_std_raw"] = self.latent_std_raw
        return out

    def load_state_dict(self, state):
        state = dict(state)
        for k in ("latent_shift", "latent_gain", "latent_std_raw"):
            if k in state:
                setattr(self, k, np.asarray(state.pop(k), dtype=np.float64))
        super().load_state_dict(state)


def build_codec(cfg: CodecConfig):
    if cfg.kind == "fixed":
        return FixedCodec(cfg.factor, cfg.latent_channels, cfg.in_channels)
    if cfg.kind == "trainable":
        return TrainableCodec(cfg)
    raise CodecError(f"unknown codec kind {cfg.kind!r}")


def save_codec(codec, directory: str | Path) -> None:
    cfg = codec.cfg.to_dict() if isinstance(codec, TrainableCodec) else {
        "kind": "fixed", "factor": codec.factor, "latent_channels": codec.latent_channels,
        "in_channels": codec.in_channels}
    tnsr.save_table(directory, codec.state_dict(), {"codec": cfg})


def load_codec(directory: str | Path):
    arrays, meta = tnsr.load_table(directory)
    cfg = dict(meta["codec"])
    if cfg["kind"] == "fixed":
        return FixedCodec(cfg["factor"], cfg["latent_channels"], cfg["in_channels"])
    cfg["widths"] = tuple(cfg["widths"])
    codec = TrainableCodec(CodecConfig(**cfg))
    codec.load_state_dict(arrays)
    return codec

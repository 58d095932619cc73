"""Diffusion transformer over latent patches with hybrid text/metadata conditioning.

Per block: AdaLN-modulated self-attention (RoPE on queries and keys), plain
pre-LN cross-attention into the fused text sequence (RoPE on image queries
only, text keys/values unrotated), then an AdaLN-modulated feed-forward.
All residual branches are gated and start closed, so a freshly built model
is the zero function.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import conditioning as C
from . import nn
from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    hidden_size: int = 128
    num_heads: int = 4
    patch_size: int = 2
    latent_channels: int = 4
    latent_h: int = 8
    latent_w: int = 8
    clip_len: int = 16
    clip_dim: int = 64
    t5_len: int = 32
    t5_dim: int = 128
    amd_dim: int = C.AMD_DIM
    res_dim: int = 4
    mlp_ratio: int = 4
    freq_dim: int = 256
    rope_base: float = 10000.0
    ln_eps: float = 1e-6
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by {self.num_heads} heads")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary pairs")
        p = self.patch_size
        if self.latent_h % p or self.latent_w % p:
            raise ConfigError(f"latent {self.latent_h}x{self.latent_w} not divisible by patch {p}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def grid(self) -> tuple[int, int]:
        return self.latent_h // self.patch_size, self.latent_w // self.patch_size

    @property
    def meta_dim(self) -> int:
        return self.t5_dim + self.res_dim + self.amd_dim

    @classmethod
    def full_scale(cls, **overrides) -> ModelConfig:
        base = dict(depth=40, hidden_size=1408, num_heads=16, patch_size=2, latent_channels=4,
                    latent_h=32, latent_w=32, clip_len=77, clip_dim=1280, t5_len=256, t5_dim=4096)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenGrid:
    tokens: Tensor  # (B, rows*cols, p*p*C) before embedding
    rows: int
    cols: int


def patchify(latent: Tensor, p: int) -> TokenGrid:
    """``(B, C, H, W) -> (B, (H/p)(W/p), p*p*C)`` in row-major patch order."""
    b, c, h, w = latent.shape
    if h % p or w % p:
        raise ConfigError(f"latent {h}x{w} not divisible by patch size {p}")
    x = latent.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 3, 5, 1)
    return TokenGrid(x.reshape(b, (h // p) * (w // p), p * p * c), h // p, w // p)


def unpatchify(grid: TokenGrid, p: int, channels: int) -> Tensor:
    b = grid.tokens.shape[0]
    x = grid.tokens.reshape(b, grid.rows, grid.cols, p, p, channels).transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(b, channels, grid.rows * p, grid.cols * p)


# -- rotary embeddings ----------------------------------------------------------------
def rope_angles(positions: np.ndarray, head_dim: int, base: float = 10000.0) -> np.ndarray:
    """Per-pair angles ``(T, head_dim/2)``: leading pairs follow rows, trailing pairs columns.

    Each axis owning ``k`` pairs uses frequencies ``base**(-2i / (2k))``.
    """
    if head_dim % 2:
        raise ConfigError(f"head_dim {head_dim} must be even")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    pairs = head_dim // 2
    n_row = (pairs + 1) // 2
    n_col = pairs - n_row
    parts = []
    for axis, k in ((0, n_row), (1, n_col)):
        if k:
            omega = base ** (-2.0 * np.arange(k) / (2 * k))
            parts.append(pos[:, axis:axis + 1] * omega[None])
    return np.concatenate(parts, axis=1)


@lru_cache(maxsize=32)
def _grid_tables(rows: int, cols: int, head_dim: int, base: float):
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    ang = rope_angles(np.stack([r.ravel(), c.ravel()], axis=1), head_dim, base)
    return np.cos(ang), np.sin(ang)


def grid_positions(rows: int, cols: int) -> np.ndarray:
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([r.ravel(), c.ravel()], axis=1).astype(np.float64)


def rope_rotate(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate ``x`` (..., T, d) by the axial angles of ``positions`` (T, 2)."""
    ang = rope_angles(positions, x.shape[-1], base)
    return T.rotate_pairs(x, np.cos(ang), np.sin(ang))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale.reshape(scale.shape[0], 1, -1) + 1.0) + shift.reshape(shift.shape[0], 1, -1)


def _chunk(x: Tensor, n: int) -> list[Tensor]:
    d = x.shape[-1] // n
    return T.split(x, [d] * n, axis=-1)


# -- blocks ----------------------------------------------------------------------
class DiTBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        h, dt = cfg.hidden_size, cfg.dtype
        self.cfg = cfg
        self.adaln = nn.Linear(h, 6 * h, rng, zero=True, dtype=dt)
        self.qkv = nn.Linear(h, 3 * h, rng, dtype=dt)
        self.attn_out = nn.Linear(h, h, rng, dtype=dt)
        self.cross_q = nn.Linear(h, h, rng, dtype=dt)
        self.cross_kv = nn.Linear(cfg.clip_dim, 2 * h, rng, bias=False, dtype=dt)
        self.cross_out = nn.Linear(h, h, rng, bias=False, dtype=dt)
        self.cross_gate = nn.param(np.zeros(h), dt)
        self.ffn = nn.MLP(h, cfg.mlp_ratio * h, h, rng, dtype=dt)

    def modulation(self, c_global: Tensor) -> list[Tensor]:
        return _chunk(self.adaln(T.silu(c_global)), 6)

    def self_attention(self, x: Tensor, mods: list[Tensor], cos, sin,
                       probs_out: list | None = None) -> Tensor:
        shift, scale, gate = mods[0], mods[1], mods[2]
        h = modulate(T.layer_norm(x, self.cfg.ln_eps), shift, scale)
        d = self.cfg.hidden_size
        q, k, v = (C.split_heads(t, self.cfg.num_heads) for t in T.split(self.qkv(h), [d, d, d], -1))
        q, k = T.rotate_pairs(q, cos, sin), T.rotate_pairs(k, cos, sin)
        logits = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.cfg.head_dim))
        probs = T.softmax_lastdim(logits)
        if probs_out is not None:
            probs_out.append(probs.data)
        out = self.attn_out(C.merge_heads(T.matmul(probs, v)))
        return x + gate.reshape(gate.shape[0], 1, -1) * out

    def cross_attention(self, x: Tensor, text: Tensor, text_bias: np.ndarray | None, cos, sin,
                        rotate_text: bool = False) -> Tensor:
        if text.shape[-1] != self.cfg.clip_dim:
            raise T.DimensionError(f"text width {text.shape[-1]} != clip_dim {self.cfg.clip_dim}")
        heads, d = self.cfg.num_heads, self.cfg.hidden_size
        q = C.split_heads(self.cross_q(T.layer_norm(x, self.cfg.ln_eps)), heads)
        q = T.rotate_pairs(q, cos, sin)
        k, v = (C.split_heads(t, heads) for t in T.split(self.cross_kv(text), [d, d], -1))
        if rotate_text:
            # negative control only: text has no spatial coordinates
            pos = np.stack([np.arange(k.shape[2]), np.zeros(k.shape[2])], axis=1)
            k = rope_rotate(k, pos, self.cfg.rope_base)
        out = self.cross_out(C.merge_heads(C.attention(q, k, v, text_bias)))
        return x + self.cross_gate * out

    def feed_forward(self, x: Tensor, mods: list[Tensor]) -> Tensor:
        shift, scale, gate = mods[3], mods[4], mods[5]
        h = modulate(T.layer_norm(x, self.cfg.ln_eps), shift, scale)
        return x + gate.reshape(gate.shape[0], 1, -1) * self.ffn(h)

    def __call__(self, x: Tensor, c_global: Tensor, text: Tensor, text_bias, cos, sin,
                 rotate_text: bool = False) -> Tensor:
        mods = self.modulation(c_global)
        x = self.self_attention(x, mods, cos, sin)
        x = self.cross_attention(x, text, text_bias, cos, sin, rotate_text)
        return self.feed_forward(x, mods)


class FinalLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        h, p, dt = cfg.hidden_size, cfg.patch_size, cfg.dtype
        self.eps = cfg.ln_eps
        self.adaln = nn.Linear(h, 2 * h, rng, zero=True, dtype=dt)
        self.linear = nn.Linear(h, p * p * cfg.latent_channels, rng, zero=True, dtype=dt)

    def __call__(self, x: Tensor, c_global: Tensor) -> Tensor:
        shift, scale = _chunk(self.adaln(T.silu(c_global)), 2)
        return self.linear(modulate(T.layer_norm(x, self.eps), shift, scale))


@dataclass
class CondBatch:
    """Per-sample conditioning arrays, batch-first."""

    h_clip: np.ndarray  # (B, L_c, D_c)
    h_t5: np.ndarray  # (B, L_t, D_t)
    text_mask: np.ndarray  # (B, L_c + L_t)
    y_pooled: np.ndarray  # (B, D_t)
    v_res: np.ndarray  # (B, res_dim)
    amd: np.ndarray  # (B, amd_dim)

    def __len__(self) -> int:
        return self.h_clip.shape[0]

    def take(self, idx) -> CondBatch:
        return CondBatch(*(getattr(self, f)[idx] for f in self._fields()))

    def where(self, drop: np.ndarray, other: CondBatch) -> CondBatch:
        """Rows flagged in ``drop`` come from ``other`` (a batch of the same length)."""
        out = []
        for f in self._fields():
            a, b = getattr(self, f), getattr(other, f)
            m = drop.reshape((-1,) + (1,) * (a.ndim - 1))
            out.append(np.where(m, b, a))
        return CondBatch(*out)

    @staticmethod
    def _fields():
        return ("h_clip", "h_t5", "text_mask", "y_pooled", "v_res", "amd")

    @classmethod
    def stack(cls, items: list[CondBatch]) -> CondBatch:
        return cls(*(np.concatenate([getattr(i, f) for i in items]) for f in cls._fields()))

    def repeat(self, n: int) -> CondBatch:
        return CondBatch(*(np.repeat(getattr(self, f), n, axis=0) for f in self._fields()))


class ProgressionDiT(nn.Module):
    def __init__(self, cfg: ModelConfig, build_blocks: bool = True):
        rng = np.random.default_rng(cfg.seed)
        h, p, dt = cfg.hidden_size, cfg.patch_size, cfg.dtype
        self.cfg = cfg
        self.x_embed = nn.Linear(p * p * cfg.latent_channels, h, rng, dtype=dt)
        self.t_embed = C.TimestepEmbedder(h, rng, cfg.freq_dim, dtype=dt)
        self.text_proj = C.TextProjector(cfg.t5_dim, cfg.clip_dim, rng, dtype=dt)
        self.meta_embed = C.MetadataEmbedder(cfg.meta_dim, h, rng, dtype=dt)
        self.blocks = [DiTBlock(cfg, rng) for _ in range(cfg.depth)] if build_blocks else []
        self.final = FinalLayer(cfg, rng)

    @property
    def dtype(self) -> np.dtype:
        return T.resolve_dtype(self.cfg.dtype)

    def _t(self, a) -> Tensor:
        return Tensor(np.asarray(a, dtype=self.dtype))

    def condition(self, t, cond: CondBatch) -> tuple[Tensor, Tensor, np.ndarray]:
        """``(fused_text, c_global, text_bias)`` for a batch."""
        fused = C.fuse_text(self._t(cond.h_clip), self._t(cond.h_t5), self.text_proj)
        t_emb = self.t_embed(np.broadcast_to(np.asarray(t, dtype=np.float64), (len(cond),)))
        g = C.global_conditioning(self._t(cond.y_pooled), self._t(cond.v_res), self._t(cond.amd),
                                  t_emb, self.meta_embed)
        return fused, g.c_global, C.key_bias(cond.text_mask, self.dtype)

    def embed(self, z_t) -> tuple[Tensor, int, int]:
        grid = patchify(z_t if isinstance(z_t, Tensor) else self._t(z_t), self.cfg.patch_size)
        return self.x_embed(grid.tokens), grid.rows, grid.cols

    def head(self, x: Tensor, c_global: Tensor, rows: int, cols: int) -> Tensor:
        out = self.final(x, c_global)
        return unpatchify(TokenGrid(out, rows, cols), self.cfg.patch_size, self.cfg.latent_channels)

    def rope_tables(self, rows: int, cols: int):
        cos, sin = _grid_tables(rows, cols, self.cfg.head_dim, self.cfg.rope_base)
        return cos.astype(self.dtype), sin.astype(self.dtype)

    def backbone(self, z_t, fused_text: Tensor, c_global: Tensor, text_bias=None,
                 rotate_text: bool = False) -> Tensor:
        x, rows, cols = self.embed(z_t)
        cos, sin = self.rope_tables(rows, cols)
        for blk in self.blocks:
            x = blk(x, c_global, fused_text, text_bias, cos, sin, rotate_text)
        return self.head(x, c_global, rows, cols)

    def __call__(self, z_t, t, cond: CondBatch, rotate_text: bool = False) -> Tensor:
        """Velocity prediction with the same shape as ``z_t`` (B, C, H, W)."""
        shape = tuple(np.shape(z_t.data if isinstance(z_t, Tensor) else z_t))
        c = self.cfg
        if shape[1:] != (c.latent_channels, c.latent_h, c.latent_w):
            raise ConfigError(f"latent shape {shape[1:]} does not match config "
                              f"{(c.latent_channels, c.latent_h, c.latent_w)}")
        fused, c_global, bias = self.condition(t, cond)
        return self.backbone(z_t, fused, c_global, bias, rotate_text)


def block_parameter_count(cfg: ModelConfig) -> int:
    h, m = cfg.hidden_size, cfg.mlp_ratio
    adaln = h * 6 * h + 6 * h
    self_attn = h * 3 * h + 3 * h + h * h + h
    cross = h * h + h + cfg.clip_dim * 2 * h + h * h + h
    ffn = h * m * h + m * h + m * h * h + h
    return adaln + self_attn + cross + ffn


def shape_check(cfg: ModelConfig, batch: int = 1, seed: int = 0) -> dict:
    """One forward pass at ``cfg`` materializing a single block's weights at a time.

    Used for configurations whose full weight set exceeds memory; returns the
    output shape and the parameter count of everything constructed.
    """
    rng = np.random.default_rng(seed)
    dt = T.resolve_dtype(cfg.dtype)
    model = ProgressionDiT(cfg, build_blocks=False)
    n_params = model.num_parameters()
    z = rng.standard_normal((batch, cfg.latent_channels, cfg.latent_h, cfg.latent_w)).astype(dt)
    cond = CondBatch(
        rng.standard_normal((batch, cfg.clip_len, cfg.clip_dim)).astype(dt),
        rng.standard_normal((batch, cfg.t5_len, cfg.t5_dim)).astype(dt),
        np.ones((batch, cfg.clip_len + cfg.t5_len)),
        rng.standard_normal((batch, cfg.t5_dim)).astype(dt),
        rng.random((batch, cfg.res_dim)).astype(dt),
        rng.random((batch, cfg.amd_dim)).astype(dt),
    )
    with T.no_grad():
        fused, c_global, bias = model.condition(500.0, cond)
        x, rows, cols = model.embed(z)
        cos, sin = model.rope_tables(rows, cols)
        block_rng = np.random.default_rng(cfg.seed + 1)
        for _ in range(cfg.depth):
            blk = DiTBlock(cfg, block_rng)
            n_params += blk.num_parameters()
            x = blk(x, c_global, fused, bias, cos, sin)
            del blk
        out = model.head(x, c_global, rows, cols)
    return {"output_shape": tuple(out.shape), "parameters": int(n_params), "finite": bool(np.isfinite(out.data).all())}

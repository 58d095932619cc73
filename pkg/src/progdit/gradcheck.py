"""Finite-difference checks over every differentiable op and a depth-1 backbone.

Each case reduces its output against a fixed random weighting so that no
gradient is structurally zero, then compares analytic and central-difference
gradients in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import conditioning as C
from . import nn
from . import tensor as T
from .backbone import CondBatch, ModelConfig, ProgressionDiT, rope_rotate, grid_positions
from .tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _weighted(fn: Callable[[], Tensor], seed: int) -> Callable[[], Tensor]:
    cache: dict[str, np.ndarray] = {}

    def f():
        out = fn()
        if "w" not in cache:
            cache["w"] = np.random.default_rng(seed + 17).uniform(0.5, 1.5, out.shape)
        return (out * Tensor(cache["w"])).sum()
    return f


def _r(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), dtype="f64")


def tiny_config() -> ModelConfig:
    return ModelConfig(depth=1, hidden_size=16, num_heads=2, patch_size=2, latent_channels=4,
                       latent_h=4, latent_w=4, clip_len=3, clip_dim=8, t5_len=4, t5_dim=8,
                       res_dim=4, mlp_ratio=2, freq_dim=16, seed=3, dtype="f64")


def tiny_backbone(seed: int = 0):
    """Depth-1 model with randomized weights (so adaLN-Zero gates pass gradient) and inputs."""
    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    model = nn.randomize_(ProgressionDiT(cfg), rng, scale=0.3)
    b = 2
    z = Tensor(rng.standard_normal((b, cfg.latent_channels, cfg.latent_h, cfg.latent_w)), dtype="f64")
    mask = np.ones((b, cfg.clip_len + cfg.t5_len))
    mask[1, -2:] = 0.0
    cond = CondBatch(rng.standard_normal((b, cfg.clip_len, cfg.clip_dim)),
                     rng.standard_normal((b, cfg.t5_len, cfg.t5_dim)), mask,
                     rng.standard_normal((b, cfg.t5_dim)), rng.uniform(0, 1, (b, cfg.res_dim)),
                     rng.uniform(0, 1, (b, cfg.amd_dim)))
    t = np.array([37.0, 812.0])
    return model, z, t, cond


def cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor], int | None]]:
    """name -> (function of closed-over tensors, tensors to check, sampled coords or None)."""
    rng = np.random.default_rng(seed)
    a, b = _r(rng, 3, 4), _r(rng, 3, 4)
    pos = _r(rng, 3, 4, lo=0.5, hi=2.0)
    row = _r(rng, 4)
    m1, m2 = _r(rng, 2, 3, 5), _r(rng, 2, 5, 4)
    w2 = _r(rng, 5, 4)
    idx = np.array([0, 2, 2, 1])
    bias = np.zeros((3, 4))
    bias[1, 2] = -1e9
    q, k = _r(rng, 1, 2, 4, 6), _r(rng, 1, 2, 4, 6)
    ang = rng.uniform(-3, 3, (4, 3))
    cos, sin = np.cos(ang), np.sin(ang)
    x_ln = _r(rng, 2, 3, 8)
    lin = nn.Linear(4, 3, rng)
    out: dict[str, tuple] = {
        "add": (lambda: a + b, [a, b], None),
        "add_broadcast": (lambda: a + row, [a, row], None),
        "sub": (lambda: a - b, [a, b], None),
        "mul": (lambda: a * b, [a, b], None),
        "mul_broadcast": (lambda: a * row, [a, row], None),
        "div": (lambda: a / pos, [a, pos], None),
        "neg": (lambda: -a, [a], None),
        "power": (lambda: T.power(pos, 1.7), [pos], None),
        "exp": (lambda: T.exp(a), [a], None),
        "log": (lambda: T.log(pos), [pos], None),
        "sigmoid": (lambda: T.sigmoid(a * 3.0), [a], None),
        "silu": (lambda: T.silu(a * 3.0), [a], None),
        "sum_axis": (lambda: T.tsum(a, axis=1, keepdims=True), [a], None),
        "mean_axis": (lambda: T.mean(a, axis=0), [a], None),
        "reshape": (lambda: T.reshape(a, (4, 3)) * T.reshape(b, (4, 3)), [a, b], None),
        "transpose": (lambda: T.transpose(m1, (2, 0, 1)) * 1.5, [m1], None),
        "getitem_slice": (lambda: a[1:, ::2], [a], None),
        "getitem_fancy": (lambda: a[:, idx], [a], None),
        "concat": (lambda: T.concat([a, b * 2.0], axis=0), [a, b], None),
        "split": (lambda: T.split(a, [1, 3], axis=1)[1] * T.split(b, [1, 3], axis=1)[1], [a, b], None),
        "matmul_batched": (lambda: T.matmul(m1, m2), [m1, m2], None),
        "matmul_weight2d": (lambda: T.matmul(m1, w2), [m1, w2], None),
        "softmax": (lambda: T.softmax_lastdim(a * 2.0), [a], None),
        "softmax_masked": (lambda: T.softmax_lastdim(a * 2.0, bias), [a], None),
        "layer_norm": (lambda: T.layer_norm(x_ln), [x_ln], None),
        "rotate_pairs": (lambda: T.rotate_pairs(q, cos, sin), [q], None),
        "attention": (lambda: C.attention(q, k, q * 0.5 + k), [q, k], None),
        "rope_rotate": (lambda: rope_rotate(q, grid_positions(2, 2)), [q], None),
        "linear": (lambda: lin(a), [a, lin.weight, lin.bias], None),
    }
    model, z, t, cond = tiny_backbone(seed)
    params = list(model.parameters())
    out["backbone_input"] = (lambda: model(z, t, cond), [z], None)
    out["backbone_params"] = (lambda: model(z, t, cond), params, 4)
    return out


def run_suite(seed: int = 0, h: float = 1e-5, names: list[str] | None = None) -> list[CaseResult]:
    results = []
    for name, (fn, xs, coords) in cases(seed).items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        err = T.grad_check(_weighted(fn, seed), xs, h=h, coords=coords, seed=seed)
        results.append(CaseResult(name, err, time.perf_counter() - t0))
    return results

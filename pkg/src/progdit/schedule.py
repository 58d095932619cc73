"""Variance-preserving noise schedule, v-prediction algebra and Karras grids.

The forward process is ``z_t = alpha_t * z0 + sigma_t * eps`` with
``alpha_t**2 + sigma_t**2 == 1``. Samplers index noise by the ratio
``sigma_t / alpha_t`` (the Karras sigma); :meth:`NoiseSchedule.t_from_sigma`
inverts that ratio back to a (fractional) training timestep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    num_steps: int = 1000
    kind: str = "cosine"
    cosine_s: float = 0.008
    max_beta: float = 0.999


@dataclass
class NoiseSchedule:
    """Cumulative products ``alpha_bar[0..N]`` with ``alpha_bar[0] == 1``."""

    alpha_bar: np.ndarray
    config: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab[0] > 1.0 or ab[-1] <= 0.0 or np.any(np.diff(ab) >= 0):
            raise ParameterError("alpha_bar must start at <= 1, stay positive and strictly decrease")
        self.alpha_bar = ab
        self.alphas = np.sqrt(ab)
        self.sigmas = np.sqrt(1.0 - ab)
        with np.errstate(divide="ignore"):
            self._log_ratio = np.log(self.sigmas) - np.log(self.alphas)

    @classmethod
    def from_config(cls, cfg: ScheduleConfig | None = None) -> NoiseSchedule:
        cfg = cfg or ScheduleConfig()
        if cfg.kind != "cosine":
            raise ParameterError(f"unknown schedule kind {cfg.kind!r}")
        return cls(cosine_alpha_bar(cfg.num_steps, cfg.cosine_s, cfg.max_beta), cfg)

    @property
    def N(self) -> int:
        return len(self.alpha_bar) - 1

    def alpha_sigma(self, t) -> tuple:
        """``(alpha_t, sigma_t)`` for integer ``t`` (scalar or array) in ``[0, N]``."""
        ti = np.asarray(t)
        if np.any(ti < 0) or np.any(ti > self.N) or not np.issubdtype(ti.dtype, np.integer):
            raise IndexError(f"timestep {t!r} outside the integer range [0, {self.N}]")
        if ti.ndim == 0:
            return float(self.alphas[ti]), float(self.sigmas[ti])
        return self.alphas[ti], self.sigmas[ti]

    def sigma_ratio(self, t) -> np.ndarray:
        return np.exp(self._log_ratio[np.asarray(t)])

    def t_from_sigma(self, sigma) -> np.ndarray:
        """Fractional timestep whose ``sigma/alpha`` equals ``sigma`` (log-linear interpolation)."""
        s = np.asarray(sigma, dtype=np.float64)
        out = np.interp(np.log(np.maximum(s, 1e-300)), self._log_ratio[1:], np.arange(1, self.N + 1))
        return np.where(s <= 0, 0.0, out)

    @property
    def sigma_range(self) -> tuple[float, float]:
        return float(np.exp(self._log_ratio[1])), float(np.exp(self._log_ratio[-1]))

    # timestep-indexed forms of the module-level algebra
    def q_sample(self, z0, t, eps):
        return q_sample(z0, *self.alpha_sigma(t), eps)

    def v_target(self, z0, eps, t):
        return v_target(z0, eps, *self.alpha_sigma(t))

    def x0_from_v(self, z_t, v, t):
        return x0_from_v(z_t, v, *self.alpha_sigma(t))

    def eps_from_v(self, z_t, v, t):
        return eps_from_v(z_t, v, *self.alpha_sigma(t))


def cosine_alpha_bar(n: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    """Squared-cosine ``alpha_bar`` with per-step betas clipped at ``max_beta``."""
    if n < 1:
        raise ParameterError("schedule needs at least one step")
    t = np.arange(n + 1, dtype=np.float64) / n
    f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
    raw = f / f[0]
    betas = np.minimum(1.0 - raw[1:] / raw[:-1], max_beta)
    ab = np.empty(n + 1)
    ab[0] = 1.0
    ab[1:] = np.cumprod(1.0 - betas)
    return ab


def vp_from_sigma(sigma) -> tuple:
    """Convert a Karras sigma (noise/signal ratio) to VP ``(alpha, sigma)``."""
    s = np.asarray(sigma, dtype=np.float64)
    alpha = 1.0 / np.sqrt(1.0 + s * s)
    if s.ndim == 0:
        return float(alpha), float(s * alpha)
    return alpha, s * alpha


# -- v-prediction algebra ----------------------------------------------------
def _coef(c, like):
    # per-sample coefficients broadcast over the trailing non-batch axes
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 0:
        return float(c)
    shape = (c.shape[0],) + (1,) * (len(like.shape) - 1)
    dt = like.dtype if isinstance(like, (np.ndarray, Tensor)) else np.float64
    arr = c.reshape(shape).astype(dt)
    return Tensor(arr) if isinstance(like, Tensor) else arr


def _same_shape(a, b, op: str) -> None:
    if tuple(np.shape(a.data if isinstance(a, Tensor) else a)) != tuple(
            np.shape(b.data if isinstance(b, Tensor) else b)):
        raise DimensionError(f"{op}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def q_sample(z0, alpha, sigma, eps):
    """``alpha * z0 + sigma * eps``; works on arrays and Tensors alike."""
    _same_shape(z0, eps, "q_sample")
    return _coef(alpha, z0) * z0 + _coef(sigma, z0) * eps


def v_target(z0, eps, alpha, sigma):
    """Velocity ``alpha * eps - sigma * z0``."""
    _same_shape(z0, eps, "v_target")
    return _coef(alpha, z0) * eps - _coef(sigma, z0) * z0


def x0_from_v(z_t, v, alpha, sigma):
    _same_shape(z_t, v, "x0_from_v")
    return _coef(alpha, z_t) * z_t - _coef(sigma, z_t) * v


def eps_from_v(z_t, v, alpha, sigma):
    _same_shape(z_t, v, "eps_from_v")
    return _coef(sigma, z_t) * z_t + _coef(alpha, z_t) * v


# -- Karras grid --------------------------------------------------------------
@dataclass(frozen=True)
class SigmaGrid:
    sigmas: np.ndarray  # n_steps values from sigma_max to sigma_min, then a terminal 0
    rho: float
    n_steps: int

    def __len__(self) -> int:
        return len(self.sigmas)


def karras_sigmas(n: int, sigma_min: float, sigma_max: float, rho: float = 7.0) -> SigmaGrid:
    if n < 2:
        raise ParameterError(f"need n >= 2 sigmas, got {n}")
    if not (0 < sigma_min < sigma_max) or rho <= 0:
        raise ParameterError(f"invalid grid bounds sigma_min={sigma_min}, sigma_max={sigma_max}, rho={rho}")
    ramp = np.arange(n, dtype=np.float64) / (n - 1)
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    sig = (hi + ramp * (lo - hi)) ** rho
    sig[0], sig[-1] = sigma_max, sigma_min
    if np.any(np.diff(sig) >= 0):
        raise ParameterError("grid is not strictly decreasing; widen the sigma range or use fewer steps")
    return SigmaGrid(np.append(sig, 0.0), float(rho), n)

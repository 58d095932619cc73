"""DPM-Solver++(2M) on a Karras grid with classifier-free guidance.

Solver state lives in VP variables. ``lambda = log(alpha / sigma_vp)`` equals
``-log(s)`` for the Karras sigma ``s = sigma_vp / alpha``, so the grid maps
onto half-log-SNR directly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import CondBatch
from .codec import Latent
from .schedule import NoiseSchedule, SigmaGrid, eps_from_v, karras_sigmas, vp_from_sigma
from .tensor import ContractError, DimensionError

Denoiser = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 30
    cfg_scale: float = 4.5
    sigma_min: float = 0.01
    sigma_max: float = 20.0
    rho: float = 7.0
    strength: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must lie in [0, 1], got {self.strength}")

    def grid(self) -> SigmaGrid:
        if self.n_steps == 1:
            return SigmaGrid(np.array([self.sigma_max, 0.0]), self.rho, 1)
        return karras_sigmas(self.n_steps, self.sigma_min, self.sigma_max, self.rho)

    def start_index(self) -> int:
        return int(math.floor((1.0 - self.strength) * self.n_steps + 1e-12))

    def to_dict(self) -> dict:
        return asdict(self)


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray | None, s: float) -> np.ndarray:
    """``eps_u + s * (eps_c - eps_u)``; the endpoints return an input unchanged."""
    if s == 1.0 or eps_uncond is None:
        return eps_cond
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise DimensionError(f"cfg_combine: {np.shape(eps_cond)} vs {np.shape(eps_uncond)}")
    if s == 0.0:
        return eps_uncond
    return eps_uncond + s * (eps_cond - eps_uncond)


def _lam(sigma: float) -> float:
    return math.inf if sigma == 0 else -math.log(sigma)


def check_grid(sigmas: np.ndarray) -> None:
    s = np.asarray(sigmas, dtype=np.float64)
    if s.ndim != 1 or len(s) < 2 or np.any(np.diff(s) >= 0) or s[-1] < 0:
        raise ContractError("sigma grid must be a strictly decreasing 1-D array ending at >= 0")


def solver_step_2m(z: np.ndarray, x0_cur: np.ndarray, x0_prev: np.ndarray | None,
                   sigmas: np.ndarray, i: int) -> np.ndarray:
    """Move ``z`` from Karras sigma ``sigmas[i-1]`` to ``sigmas[i]``.

    ``x0_prev`` is the data prediction made at ``sigmas[i-2]``; pass ``None``
    on the first step. The step is first order there and when landing on 0.
    """
    check_grid(sigmas)
    if not 1 <= i < len(sigmas):
        raise IndexError(f"step index {i} outside [1, {len(sigmas) - 1}]")
    s_prev, s_next = float(sigmas[i - 1]), float(sigmas[i])
    if s_next == 0.0:
        return np.array(x0_cur, copy=True)
    a_next, sv_next = vp_from_sigma(s_next)
    _, sv_prev = vp_from_sigma(s_prev)
    h = _lam(s_next) - _lam(s_prev)
    if x0_prev is None or i < 2:
        d = x0_cur
    else:
        h_last = _lam(s_prev) - _lam(float(sigmas[i - 2]))
        r = h_last / h
        d = (1.0 + 1.0 / (2.0 * r)) * x0_cur - (1.0 / (2.0 * r)) * x0_prev
    return (sv_next / sv_prev) * z - a_next * math.expm1(-h) * d


def dpm_solver_2m(denoise: Denoiser, z: np.ndarray, sigmas: np.ndarray, start: int = 0,
                  stop: int | None = None, trace: list | None = None) -> np.ndarray:
    """Integrate from ``sigmas[start]`` down to ``sigmas[stop]`` (default: the last entry).

    ``denoise(z, s)`` returns the data prediction at Karras sigma ``s``.
    Visited sigmas are appended to ``trace`` when given.
    """
    sig = np.asarray(sigmas, dtype=np.float64)
    check_grid(sig)
    stop = len(sig) - 1 if stop is None else stop
    x0_prev = None
    for i in range(start + 1, stop + 1):
        x0 = denoise(z, float(sig[i - 1]))
        z = solver_step_2m(z, x0, x0_prev if i - 1 > start else None, sig, i)
        x0_prev = x0
        if trace is not None:
            trace.append(float(sig[i]))
    return z


# -- model wiring -------------------------------------------------------------------
def model_denoiser(model, schedule: NoiseSchedule, cond: CondBatch, uncond: CondBatch | None,
                   cfg_scale: float) -> Denoiser:
    """Wrap a v-predictor as a guided data-prediction function of ``(z, karras_sigma)``."""
    dt = model.dtype
    need_uncond = uncond is not None and cfg_scale != 1.0

    def v_of(z, t, c):
        with T.no_grad():
            return model(z.astype(dt), t, c).data.astype(np.float64)

    def denoise(z: np.ndarray, s: float) -> np.ndarray:
        alpha, sv = vp_from_sigma(s)
        t = float(schedule.t_from_sigma(s))
        eps_c = eps_from_v(z, v_of(z, t, cond), alpha, sv)
        eps_u = eps_from_v(z, v_of(z, t, uncond), alpha, sv) if need_uncond else None
        eps = cfg_combine(eps_c, eps_u, cfg_scale)
        return (z - sv * eps) / alpha

    return denoise


def initial_latent(cfg: SamplerConfig, shape: tuple, baseline: np.ndarray | None,
                   rng: np.random.Generator) -> tuple[np.ndarray, int]:
    grid = cfg.grid().sigmas
    eps = rng.standard_normal(shape)
    if baseline is None or cfg.strength >= 1.0:
        _, sv = vp_from_sigma(float(grid[0]))
        return sv * eps, 0
    j = cfg.start_index()
    alpha, sv = vp_from_sigma(float(grid[j]))
    return alpha * np.asarray(baseline, dtype=np.float64) + sv * eps, j


def sample(model, schedule: NoiseSchedule, cond: CondBatch, uncond: CondBatch | None = None,
           baseline: Latent | np.ndarray | None = None, cfg: SamplerConfig = SamplerConfig(),
           shape: tuple | None = None, trace: list | None = None) -> Latent:
    """Generate scaled latents for every row of ``cond``.

    With a baseline latent the trajectory starts part-way down the grid at
    ``floor((1 - strength) * n_steps)``; ``uncond=None`` disables guidance.
    """
    b = len(cond)
    mc = model.cfg
    lat_shape = (mc.latent_channels, mc.latent_h, mc.latent_w)
    base = None
    if baseline is not None:
        base = np.asarray(baseline.data if isinstance(baseline, Latent) else baseline, dtype=np.float64)
        if isinstance(baseline, Latent) and not baseline.scaled:
            raise ContractError("baseline latent must be scaled")
        base = base[None] if base.ndim == 3 else base
        if base.shape[1:] != lat_shape:
            raise DimensionError(f"baseline latent {base.shape[1:]} does not match model {lat_shape}")
        if len(base) == 1 and b > 1:
            base = np.repeat(base, b, axis=0)
        if len(base) != b:
            raise DimensionError(f"{len(base)} baselines for {b} conditioning rows")
    full = (b,) + lat_shape if shape is None else tuple(shape)
    if uncond is not None and len(uncond) == 1 and b > 1:
        uncond = uncond.repeat(b)
    rng = np.random.default_rng(cfg.seed)
    z, j = initial_latent(cfg, full, base, rng)
    grid = cfg.grid().sigmas
    denoise = model_denoiser(model, schedule, cond, uncond, cfg.cfg_scale)
    z = dpm_solver_2m(denoise, z, grid, start=j, trace=trace)
    return Latent(z, True)


# -- analytic Gaussian problem ---------------------------------------------------------
@dataclass(frozen=True)
class GaussianData:
    """Data ``x0 ~ N(mu, c**2 I)`` whose posterior mean is known in closed form."""

    mu: float = 0.7
    c: float = 0.5

    def denoiser(self) -> Denoiser:
        def d(z, s):
            alpha, sv = vp_from_sigma(s)
            gain = alpha * self.c ** 2 / (alpha ** 2 * self.c ** 2 + sv ** 2)
            return self.mu + gain * (z - alpha * self.mu)
        return d

    def exact_flow(self, z_start: np.ndarray, s_start: float, s_end: float) -> np.ndarray:
        """Probability-flow ODE solution carried from Karras sigma ``s_start`` to ``s_end``."""
        a0, _ = vp_from_sigma(s_start)
        a1, _ = vp_from_sigma(s_end)
        x = np.asarray(z_start) / a0
        ratio = math.sqrt(self.c ** 2 + s_end ** 2) / math.sqrt(self.c ** 2 + s_start ** 2)
        return a1 * (self.mu + (x - self.mu) * ratio)


def convergence_errors(data: GaussianData, step_counts, sigma_min: float = 0.01,
                       sigma_max: float = 20.0, rho: float = 7.0, n_points: int = 64,
                       seed: int = 0) -> list[float]:
    """Max error at ``sigma_min`` against the exact flow, one entry per step count."""
    _, sv = vp_from_sigma(sigma_max)
    z0 = sv * np.random.default_rng(seed).standard_normal(n_points)
    exact = data.exact_flow(z0, sigma_max, sigma_min)
    errs = []
    for n in step_counts:
        grid = karras_sigmas(n, sigma_min, sigma_max, rho).sigmas
        z = dpm_solver_2m(data.denoiser(), z0.copy(), grid, stop=n - 1)
        errs.append(float(np.max(np.abs(z - exact))))
    return errs

"""v-prediction training: decoupled-weight-decay Adam, warmup plus cosine warm restarts.

Every step draws its randomness from ``default_rng([seed, step])`` so a run
resumed from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from . import tnsr
from .backbone import CondBatch
from .schedule import NoiseSchedule, q_sample, v_target
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


class TrainingError(NumericError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    total_steps: int = 2000
    warmup_fraction: float = 0.05
    restart_fraction: float = 0.25  # first cycle length as a fraction of post-warmup steps
    t_mult: int = 2
    batch_size: int = 32
    cond_drop_prob: float = 0.1
    weighting: str = "constant"
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise ValueError("cond_drop_prob must lie in [0, 1]")
        if self.t_mult < 1 or self.batch_size < 1:
            raise ValueError("t_mult and batch_size must be >= 1")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    @property
    def warmup_steps(self) -> int:
        return max(1, round(self.warmup_fraction * self.total_steps))

    @property
    def first_cycle(self) -> int:
        return max(1, round(self.restart_fraction * max(1, self.total_steps - self.warmup_steps)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# -- learning rate ----------------------------------------------------------------
def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr``, then cosine cycles whose lengths grow by ``t_mult``."""
    w = cfg.warmup_steps
    if step <= w:
        return cfg.base_lr * step / w
    tau, period = step - w, cfg.first_cycle
    while tau >= period:
        tau -= period
        period *= cfg.t_mult
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * tau / period))


def restart_steps(cfg: TrainConfig) -> list[int]:
    """Steps at which the learning rate jumps back to ``base_lr``, up to ``total_steps``."""
    out, step, period = [], cfg.warmup_steps, cfg.first_cycle
    while step + period <= cfg.total_steps:
        step += period
        out.append(step)
        period *= cfg.t_mult
    return out


def cycle_ends(cfg: TrainConfig) -> list[int]:
    """Last step of each cosine cycle that completes within ``total_steps`` (its lr minimum).

    Stopping here, not at the restart one step later, keeps the final update small.
    """
    out, step, period = [], cfg.warmup_steps, cfg.first_cycle
    while step + period - 1 <= cfg.total_steps:
        out.append(step + period - 1)
        step += period
        period *= cfg.t_mult
    return out


# -- optimizer -------------------------------------------------------------------
@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Mapping[str, Tensor], state: OptimState, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> OptimState:
    """In-place decoupled-weight-decay Adam update; a missing grad counts as zero."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if g.shape != p.data.shape:
            raise T.DimensionError(f"{name}: grad shape {g.shape} != parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise T.DimensionError(f"{name}: moment shape {m.shape} != parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update += weight_decay * p.data
        p.data -= lr * update
    return state


class AdamW:
    def __init__(self, params: Mapping[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, state: OptimState | None = None):
        self.params = dict(params)
        self.betas, self.eps, self.weight_decay = tuple(betas), eps, weight_decay
        self.state = state or OptimState()

    def step(self, lr: float) -> None:
        adamw_step(self.params, self.state, lr, self.betas, self.eps, self.weight_decay)


# -- objective -------------------------------------------------------------------
WEIGHTINGS: dict[str, Callable[[np.ndarray, NoiseSchedule], np.ndarray]] = {
    "constant": lambda t, sched: np.ones(len(t)),
    # min(SNR, 1), a truncated signal-to-noise weighting
    "snr_trunc": lambda t, sched: np.minimum(1.0, sched.alpha_bar[t] / (1.0 - sched.alpha_bar[t])),
}


@dataclass
class TrainBatch:
    z0: np.ndarray  # (B, C, H, W) scaled latents
    cond: CondBatch


def draw_noise(rng: np.random.Generator, batch: int, shape: tuple, n_steps: int,
               drop_prob: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t = rng.integers(1, n_steps + 1, size=batch)
    eps = rng.standard_normal((batch,) + tuple(shape))
    drop = rng.random(batch) < drop_prob
    return t, eps, drop


def loss(model, batch: TrainBatch, schedule: NoiseSchedule, rng: np.random.Generator,
         uncond: CondBatch | None = None, cond_drop_prob: float = 0.0,
         weight: Callable | str | np.ndarray = "constant") -> Tensor:
    """Batch mean of ``w(t) * mean((v_t - f(z_t, t, c))**2)``."""
    z0 = np.asarray(batch.z0, dtype=np.float64)
    b = len(z0)
    t, eps, drop = draw_noise(rng, b, z0.shape[1:], schedule.N, cond_drop_prob)
    alpha, sigma = schedule.alpha_sigma(t)
    z_t = q_sample(z0, alpha, sigma, eps)
    v = v_target(z0, eps, alpha, sigma)
    cond = batch.cond
    if drop.any():
        if uncond is None:
            raise ValueError("conditioning dropout needs an unconditional context")
        cond = cond.where(drop, uncond.repeat(b) if len(uncond) == 1 else uncond)
    if isinstance(weight, str):
        w = WEIGHTINGS[weight](t, schedule)
    elif callable(weight):
        w = np.asarray(weight(t), dtype=np.float64)
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=np.float64), (b,))
    dt = model.dtype
    pred = model(z_t.astype(dt), t, cond)
    diff = pred - Tensor(v.astype(dt))
    per = (diff * diff).mean(axis=(1, 2, 3))
    out = (per * Tensor(w.astype(dt))).mean()
    if not np.isfinite(out.data):
        raise TrainingError(f"non-finite loss {float(out.data)}")
    return out


# -- checkpoints ------------------------------------------------------------------
def save_checkpoint(directory: str | Path, model, state: OptimState, step: int,
                    config: Mapping | None = None) -> Path:
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays.update({f"m/{k}": v for k, v in state.m.items()})
    arrays.update({f"v/{k}": v for k, v in state.v.items()})
    meta = {"step": int(step), "optim_step": int(state.step), "config": dict(config or {})}
    tnsr.save_table(directory, arrays, meta)
    return Path(directory)


def load_checkpoint(directory: str | Path, model=None) -> tuple[OptimState, dict, dict]:
    """Returns ``(optimizer state, metadata, parameter arrays)``; loads into ``model`` if given."""
    arrays, meta = tnsr.load_table(directory)
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    state = OptimState({k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m/")},
                       {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v/")},
                       int(meta["optim_step"]))
    if model is not None:
        model.load_state_dict(params)
    return state, meta, params


# -- loop -------------------------------------------------------------------------
@dataclass
class TrainResult:
    losses: list[float]
    lrs: list[float]
    checkpoints: list[Path]
    final_step: int


def smoothed(values, window: int = 50) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if len(x) == 0:
        return x
    k = min(window, len(x))
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[k:] - c[:-k]) / k


def train_loop(model, data: TrainBatch, schedule: NoiseSchedule, cfg: TrainConfig,
               uncond: CondBatch | None = None, out_dir: str | Path | None = None,
               resume: str | Path | None = None, stop_at: int | None = None,
               run_config: Mapping | None = None, progress: Callable | None = None) -> TrainResult:
    """Train on the full latent set ``data`` and write checkpoints under ``out_dir``.

    ``stop_at`` ends the loop early at that step (the schedule still spans
    ``cfg.total_steps``), which is how interrupted runs are reproduced.
    """
    params = model.named_parameters()
    opt = AdamW(params, cfg.betas, cfg.eps, cfg.weight_decay)
    start = 0
    if resume is not None:
        opt.state, meta, _ = load_checkpoint(resume, model)
        start = int(meta["step"])
        log.info("resumed from %s at step %d", resume, start)
    out = Path(out_dir) if out_dir is not None else None
    csv_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "loss.csv"
        if start == 0 or not csv_path.exists():
            csv_path.write_text("step,lr,loss\n")
        else:
            # drop rows logged after the checkpoint we resume from
            lines = csv_path.read_text().splitlines(keepends=True)
            keep = [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= start]
            csv_path.write_text(lines[0] + "".join(keep))
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    n = len(data.z0)
    bsz = min(cfg.batch_size, n)
    losses, lrs, ckpts = [], [], []
    last_ckpt = Path(resume) if resume is not None else None
    for step in range(start + 1, end + 1):
        rng = np.random.default_rng([cfg.seed, step])
        idx = np.sort(rng.choice(n, size=bsz, replace=False))
        batch = TrainBatch(data.z0[idx], data.cond.take(idx))
        model.zero_grad()
        try:
            value = loss(model, batch, schedule, rng, uncond, cfg.cond_drop_prob, cfg.weighting)
        except TrainingError as exc:
            raise TrainingError(f"step {step}: {exc}; last finite checkpoint: {last_ckpt}") from exc
        T.backward(value)
        lr = lr_at(step, cfg)
        opt.step(lr)
        lv = float(value.data)
        losses.append(lv)
        lrs.append(lr)
        if csv_path is not None:
            with open(csv_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([step, repr(lr), repr(lv)])
        if progress is not None:
            progress(step, lr, lv)
        if out is not None and (step % cfg.checkpoint_every == 0 or step == end):
            last_ckpt = save_checkpoint(out / f"step_{step:06d}", model, opt.state, step,
                                        {"train": cfg.to_dict(), **dict(run_config or {})})
            ckpts.append(last_ckpt)
    return TrainResult(losses, lrs, ckpts, end)


def read_loss_csv(path: str | Path) -> list[tuple[int, float, float]]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["lr"]), float(r["loss"])) for r in rows]


def dump_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

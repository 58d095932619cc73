"""Prompt rendering, toy dual text encoders, text fusion and metadata conditioning."""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

PROMPT_TEMPLATE_VERSION = "prompt-v1"
DIAGNOSES = ("CN", "MCI", "AD")
SEVERITY = {d: i for i, d in enumerate(DIAGNOSES)}
SCORE_NAMES = (
    "CDR-SB", "MMSE", "MoCA", "FAQ", "RAVLT-immediate", "RAVLT-learning",
    "RAVLT-forgetting", "RAVLT-perc-forgetting", "LDELTOTAL", "TRABSCOR",
    "ADAS11", "ADAS13", "ADASQ4",
)
DEMOGRAPHIC_NAMES = ("age", "sex", "education")
AMD_DIM = len(DEMOGRAPHIC_NAMES) + 1 + 2 * len(SCORE_NAMES)
PAD_ID = 0


class ValidationError(ValueError):
    pass


def _check_diagnosis(label: str) -> str:
    if label not in SEVERITY:
        raise ValidationError(f"unknown diagnosis label {label!r}; expected one of {DIAGNOSES}")
    return label


def _num(x: float) -> str:
    return f"{float(x):g}"


@dataclass
class PromptRecord:
    diagnosis_baseline: str
    diagnosis_target: str
    age_years: float
    sex: str
    education_years: float
    delta_t_months: float
    score_deltas: dict[str, float | None] = field(default_factory=dict)

    def __post_init__(self):
        _check_diagnosis(self.diagnosis_baseline)
        _check_diagnosis(self.diagnosis_target)
        if self.delta_t_months < 0:
            raise ValidationError(f"negative follow-up interval {self.delta_t_months}")
        unknown = set(self.score_deltas) - set(SCORE_NAMES)
        if unknown:
            raise ValidationError(f"unknown score names {sorted(unknown)}")

    @property
    def demographics(self) -> dict[str, float]:
        return {"age": float(self.age_years), "sex": sex_code(self.sex),
                "education": float(self.education_years)}

    @property
    def rendered_text(self) -> str:
        return build_prompt(self)


def sex_code(sex: str) -> float:
    s = str(sex).strip().lower()
    if s in ("f", "female"):
        return 1.0
    if s in ("m", "male"):
        return 0.0
    raise ValidationError(f"unknown sex label {sex!r}")


def build_prompt(rec: PromptRecord) -> str:
    sex = "female" if sex_code(rec.sex) == 1.0 else "male"
    changes = [f"{name}={_num(rec.score_deltas[name])}" for name in SCORE_NAMES
               if rec.score_deltas.get(name) is not None]
    return (
        f"Brain MRI axial slice. Diagnosis {rec.diagnosis_baseline} to {rec.diagnosis_target}. "
        f"Follow-up {_num(rec.delta_t_months)} months. "
        f"Age {_num(rec.age_years)}, {sex}, education {_num(rec.education_years)} years. "
        f"Changes: {' '.join(changes) if changes else 'none'}."
    )


# -- tokenizer ---------------------------------------------------------------------
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def token_id(token: str, vocab_size: int) -> int:
    h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return 1 + h % (vocab_size - 1)


def tokenize(text: str, max_len: int, vocab_size: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Case-folded word/punctuation ids padded or truncated to ``max_len``; id 0 is padding."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    toks = _TOKEN_RE.findall(text.casefold())[:max_len]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    mask = np.zeros(max_len, dtype=np.float64)
    ids[: len(toks)] = [token_id(t, vocab_size) for t in toks]
    mask[: len(toks)] = 1.0
    return ids, mask


# -- toy encoders ------------------------------------------------------------------
def attention(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over ``(B, heads, T, d)`` operands."""
    d = q.shape[-1]
    logits = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    return T.matmul(T.softmax_lastdim(logits, bias), v)


def key_bias(mask: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Additive logits bias (B, 1, 1, S): 0 for real keys, -1e9 for padding.

    Rows with no real key get no masking at all.
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 1:
        m = m[None]
    empty = m.sum(axis=-1, keepdims=True) == 0
    m = np.where(empty, 1.0, m)
    return ((1.0 - m) * -1e9).astype(dtype)[:, None, None, :]


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


class ToyTextEncoder(nn.Module):
    """Embedding table, learned positions and one pre-LN transformer block."""

    def __init__(self, vocab: int, max_len: int, dim: int, heads: int, rng: np.random.Generator,
                 dtype="f64"):
        if dim % heads:
            raise ValueError(f"encoder dim {dim} not divisible by {heads} heads")
        self.max_len, self.dim, self.heads = max_len, dim, heads
        self.tok = nn.Embedding(vocab, dim, rng, dtype=dtype)
        self.pos = nn.param(rng.standard_normal((max_len, dim)) * 0.02 * math.sqrt(dim), dtype)
        self.qkv = nn.Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = nn.Linear(dim, dim, rng, dtype=dtype)
        self.mlp = nn.MLP(dim, 4 * dim, dim, rng, dtype=dtype)

    def __call__(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        ids = np.atleast_2d(ids)
        x = self.tok(ids) + self.pos
        b, n, d = x.shape
        qkv = self.qkv(T.layer_norm(x))
        q, k, v = (split_heads(t, self.heads) for t in T.split(qkv, [d, d, d], axis=-1))
        x = x + self.proj(merge_heads(attention(q, k, v, key_bias(mask, x.dtype))))
        x = x + self.mlp(T.layer_norm(x))
        return T.layer_norm(x)


def masked_mean(h: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over real rows of ``h`` (B, L, D); all-pad rows fall back to the plain mean."""
    m = np.atleast_2d(np.asarray(mask, dtype=np.float64))
    m = np.where(m.sum(axis=-1, keepdims=True) == 0, 1.0, m)
    w = (m / m.sum(axis=-1, keepdims=True)).astype(h.dtype)[:, :, None]
    return T.tsum(h * w, axis=1)


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int = 4096
    clip_len: int = 16
    clip_dim: int = 64
    t5_len: int = 32
    t5_dim: int = 128
    heads: int = 4
    seed: int = 1234
    template_version: str = PROMPT_TEMPLATE_VERSION


@dataclass
class TextEmbeddings:
    h_clip: np.ndarray  # (L_c, D_c)
    h_t5: np.ndarray  # (L_t, D_t)
    clip_mask: np.ndarray
    t5_mask: np.ndarray
    y_pooled: np.ndarray  # (D_t,)


class TextEncoders:
    """Frozen stand-ins for the CLIP and T5 encoders, seeded from ``TextConfig``."""

    def __init__(self, cfg: TextConfig = TextConfig(), dtype="f64"):
        if cfg.template_version != PROMPT_TEMPLATE_VERSION:
            raise ValidationError(f"unsupported prompt template {cfg.template_version!r}")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.clip = ToyTextEncoder(cfg.vocab_size, cfg.clip_len, cfg.clip_dim, cfg.heads, rng, dtype)
        self.t5 = ToyTextEncoder(cfg.vocab_size, cfg.t5_len, cfg.t5_dim, cfg.heads, rng, dtype)
        self._cache: dict[str, TextEmbeddings] = {}

    def encode_clip(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        return self.clip(ids, mask)

    def encode_t5(self, ids: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        h = self.t5(ids, mask)
        return h, masked_mean(h, mask)

    def embed(self, text: str) -> TextEmbeddings:
        hit = self._cache.get(text)
        if hit is not None:
            return hit
        c = self.cfg
        cid, cmask = tokenize(text, c.clip_len, c.vocab_size)
        tid, tmask = tokenize(text, c.t5_len, c.vocab_size)
        with T.no_grad():
            h_clip = self.encode_clip(cid, cmask)
            h_t5, pooled = self.encode_t5(tid, tmask)
        out = TextEmbeddings(h_clip.data[0], h_t5.data[0], cmask, tmask, pooled.data[0])
        self._cache[text] = out
        return out


class TextProjector(nn.Module):
    """Two-layer SiLU MLP mapping T5 rows into the CLIP width (hidden width = D_c)."""

    def __init__(self, t5_dim: int, clip_dim: int, rng: np.random.Generator, dtype="f64"):
        self.mlp = nn.MLP(t5_dim, clip_dim, clip_dim, rng, dtype=dtype)
        self.clip_dim = clip_dim

    def __call__(self, h_t5: Tensor) -> Tensor:
        return self.mlp(h_t5)


def fuse_text(h_clip: Tensor, h_t5: Tensor, projector: TextProjector) -> Tensor:
    """``Concat(H_clip, MLP(H_t5))`` along the sequence axis."""
    proj = projector(h_t5)
    if proj.shape[-1] != h_clip.shape[-1]:
        raise T.ContractError(f"projected T5 width {proj.shape[-1]} != CLIP width {h_clip.shape[-1]}")
    return T.concat([h_clip, proj], axis=-2)


# -- metadata ----------------------------------------------------------------------
@dataclass
class FeatureRanges:
    """Per-feature min/max fitted on one split; ``fit_source`` names that split."""

    mins: dict[str, float]
    maxs: dict[str, float]
    fit_source: str = "train"
    degenerate: set[str] = field(default_factory=set)

    @classmethod
    def fit(cls, rows: Sequence[Mapping[str, float | None]], names: Sequence[str],
            fit_source: str = "train") -> FeatureRanges:
        mins, maxs, degenerate = {}, {}, set()
        for n in names:
            vals = [float(r[n]) for r in rows if r.get(n) is not None]
            lo, hi = (min(vals), max(vals)) if vals else (0.0, 0.0)
            mins[n], maxs[n] = lo, hi
            if hi <= lo:
                degenerate.add(n)
        return cls(mins, maxs, fit_source, degenerate)

    def save(self, path: str | Path) -> None:
        lines = [f"# fit_source={self.fit_source}", "# name\tmin\tmax"]
        lines += [f"{n}\t{self.mins[n]!r}\t{self.maxs[n]!r}" for n in self.mins]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> FeatureRanges:
        mins, maxs, source = {}, {}, "unknown"
        for line in Path(path).read_text().splitlines():
            if line.startswith("# fit_source="):
                source = line.split("=", 1)[1]
            elif line and not line.startswith("#"):
                n, lo, hi = line.split("\t")
                mins[n], maxs[n] = float(lo), float(hi)
        deg = {n for n in mins if maxs[n] <= mins[n]}
        return cls(mins, maxs, source, deg)


def minmax_normalize(value: float, ranges: FeatureRanges, name: str) -> float:
    lo, hi = ranges.mins[name], ranges.maxs[name]
    if hi <= lo:
        ranges.degenerate.add(name)
        return 0.5
    return float(min(1.0, max(0.0, (float(value) - lo) / (hi - lo))))


def amd_feature_names() -> list[str]:
    return list(DEMOGRAPHIC_NAMES) + ["delta_t"] + [f"d_{s}" for s in SCORE_NAMES]


@dataclass
class AuxMetadata:
    amd: np.ndarray
    ranges: FeatureRanges


def build_amd(demographics: Mapping[str, float], delta_t: float,
              delta_s: Mapping[str, float | None], ranges: FeatureRanges) -> AuxMetadata:
    """Normalized ``[D, dt, 13 score deltas, 13 presence bits]``; missing deltas sit at 0.5."""
    vals = [minmax_normalize(demographics[n], ranges, n) for n in DEMOGRAPHIC_NAMES]
    vals.append(minmax_normalize(delta_t, ranges, "delta_t"))
    present = []
    for s in SCORE_NAMES:
        d = delta_s.get(s)
        if d is None:
            vals.append(0.5)
            present.append(0.0)
        else:
            vals.append(minmax_normalize(d, ranges, f"d_{s}"))
            present.append(1.0)
    return AuxMetadata(np.array(vals + present), ranges)


def neutral_amd() -> np.ndarray:
    """Unconditional metadata: every value at 0.5, every presence bit off."""
    n = len(DEMOGRAPHIC_NAMES) + 1 + len(SCORE_NAMES)
    return np.concatenate([np.full(n, 0.5), np.zeros(len(SCORE_NAMES))])


def resolution_vector(src_hw: tuple[int, int], tgt_hw: tuple[int, int],
                      bounds: tuple[float, float] = (32.0, 512.0)) -> np.ndarray:
    lo, hi = bounds
    raw = np.array([*src_hw, *tgt_hw], dtype=np.float64)
    return np.clip((raw - lo) / (hi - lo), 0.0, 1.0)


def timestep_frequencies(t, dim: int = 256, max_period: float = 10000.0) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros_like(emb[:, :1])], axis=-1)
    return emb


class TimestepEmbedder(nn.Module):
    """Sinusoidal features of ``t`` projected to the hidden size by a SiLU MLP."""

    def __init__(self, hidden: int, rng: np.random.Generator, freq_dim: int = 256, dtype="f64"):
        self.freq_dim = freq_dim
        self.mlp = nn.MLP(freq_dim, hidden, hidden, rng, dtype=dtype)

    def __call__(self, t) -> Tensor:
        dt = self.mlp.fc1.weight.dtype
        return self.mlp(Tensor(timestep_frequencies(t, self.freq_dim).astype(dt)))


class MetadataEmbedder(nn.Module):
    """``v_meta -> 4*hidden -> hidden`` with SiLU between."""

    def __init__(self, meta_dim: int, hidden: int, rng: np.random.Generator, dtype="f64"):
        self.meta_dim = meta_dim
        self.mlp = nn.MLP(meta_dim, 4 * hidden, hidden, rng, dtype=dtype)

    def __call__(self, v_meta: Tensor) -> Tensor:
        if v_meta.shape[-1] != self.meta_dim:
            raise T.DimensionError(f"v_meta has length {v_meta.shape[-1]}, expected {self.meta_dim}")
        return self.mlp(v_meta)


@dataclass
class GlobalConditioning:
    c_global: Tensor
    t_emb: Tensor
    v_res: Tensor
    v_meta: Tensor


def global_conditioning(y_pooled: Tensor, v_res: Tensor, amd: Tensor, t_emb: Tensor,
                        embedder: MetadataEmbedder) -> GlobalConditioning:
    v_meta = T.concat([y_pooled, v_res, amd], axis=-1)
    c = t_emb + embedder(v_meta)
    return GlobalConditioning(c, t_emb, v_res, v_meta)

"""End-to-end stages shared by the CLI and the acceptance run.

A run directory produced by :func:`train_run` holds ``config.json``, the
trained codec under ``codec/``, ``feature_ranges.tsv``, ``loss.csv`` and
one ``step_NNNNNN/`` checkpoint table per save.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import conditioning as C
from . import dataio as D
from . import metrics as M
from . import trainer as TR
from .backbone import CondBatch, ProgressionDiT
from .codec import build_codec, load_codec, save_codec
from .config import DataConfig, RunConfig
from .sampler import SamplerConfig, sample
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)
RANGES_FILE = "feature_ranges.tsv"


class DataError(RuntimeError):
    pass


# -- dataset generation -------------------------------------------------------------
def _visit_image(params: D.PhantomParams, v: D.VisitRecord, index: int,
                 hist_ref: np.ndarray | None) -> np.ndarray:
    # noise keyed by visit index so a same-month repeat scan gets a fresh draw
    img = D.minmax_image(D.phantom_generate(params, v.diagnosis, v.visit_date,
                                            noise_seed=params.seed * 1000 + index))
    if hist_ref is not None:
        img = D.histogram_match(img, hist_ref)
    return img


def phantom_dataset(cfg: DataConfig, out_dir: str | Path) -> list[dict]:
    """Write phantom images, ``manifest.jsonl`` and ``feature_ranges.tsv`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    subjects = [f"S{i:04d}" for i in range(cfg.subjects)]
    split = D.participant_split(subjects, {"train": cfg.train_fraction, "test": 1.0 - cfg.train_fraction},
                                cfg.seed)
    hist_ref = None
    if cfg.histogram_match:
        ref_params = D.PhantomParams.random(cfg.seed * 100_003 + 99_991, cfg.image_size, cfg.noise)
        hist_ref = D.minmax_image(D.phantom_generate(ref_params, "CN", 0))
    rows = []
    for i, sid in enumerate(subjects):
        raw = D.synthetic_subject(i, cfg.visits_per_subject, cfg.seed, cfg.missing_rate, cfg.reversion_rate)
        visits = D.apply_qc(raw)
        pairs = D.pair_visits(visits, all_pairs=cfg.all_pairs)
        if not pairs:
            continue
        params = D.PhantomParams.random(cfg.seed * 100_003 + i, cfg.image_size, cfg.noise)
        names = {}
        for k, v in enumerate(visits):
            names[id(v)] = f"{sid}_v{k:02d}_m{v.visit_date:03d}"
            D.write_pgm(out / f"images/{names[id(v)]}.pgm", _visit_image(params, v, k, hist_ref))
        for p in pairs:
            rec = p.prompt_record()
            b, f = names[id(p.baseline)], names[id(p.followup)]
            rows.append({
                "subject_id": sid,
                "pair_id": f"{b}__{f.split('_', 1)[1]}",
                "slice_index": 0,
                "baseline_path": f"images/{b}.pgm",
                "target_path": f"images/{f}.pgm",
                "prompt": rec.rendered_text,
                "delta_t": p.delta_t_months,
                "diagnosis_baseline": p.baseline.diagnosis,
                "diagnosis_target": p.followup.diagnosis,
                "split": split[sid],
                "score_deltas": p.delta_scores,
                "masks": {s: int(p.delta_scores[s] is not None) for s in C.SCORE_NAMES},
                "demographics": {"age": p.baseline.age, "sex": p.baseline.sex,
                                 "education": p.baseline.education},
            })
    D.write_manifest(out / "manifest.jsonl", rows)
    train = [r for r in rows if r["split"] == "train"]
    if train:
        fit_ranges(train).save(out / RANGES_FILE)
    else:
        log.warning("no training pairs in %s; feature ranges not written", out)
    return rows


def _feature_row(row: dict) -> dict:
    dem = row["demographics"]
    out = {"age": dem["age"], "sex": C.sex_code(dem["sex"]), "education": dem["education"],
           "delta_t": row["delta_t"]}
    out.update({f"d_{s}": row["score_deltas"].get(s) for s in C.SCORE_NAMES})
    return out


def fit_ranges(train_rows: Sequence[dict]) -> C.FeatureRanges:
    if not train_rows:
        raise DataError("no training rows to fit metadata ranges on")
    return C.FeatureRanges.fit([_feature_row(r) for r in train_rows], C.amd_feature_names(), "train")


# -- conditioning ------------------------------------------------------------------
@dataclass
class Conditioner:
    encoders: C.TextEncoders
    ranges: C.FeatureRanges
    image_hw: tuple[int, int]

    def from_text(self, text: str, amd: np.ndarray) -> CondBatch:
        e = self.encoders.embed(text)
        v_res = C.resolution_vector(self.image_hw, self.image_hw)
        return CondBatch(e.h_clip[None], e.h_t5[None], np.concatenate([e.clip_mask, e.t5_mask])[None],
                         e.y_pooled[None], v_res[None], amd[None])

    def record(self, rec: C.PromptRecord) -> CondBatch:
        amd = C.build_amd(rec.demographics, rec.delta_t_months, rec.score_deltas, self.ranges).amd
        return self.from_text(rec.rendered_text, amd)

    def manifest_row(self, row: dict) -> CondBatch:
        return self.record(prompt_record(row))

    def rows(self, rows: Sequence[dict]) -> CondBatch:
        return CondBatch.stack([self.manifest_row(r) for r in rows])

    def unconditional(self) -> CondBatch:
        return self.from_text("", C.neutral_amd())


def prompt_record(row: dict, **overrides) -> C.PromptRecord:
    dem = row["demographics"]
    rec = C.PromptRecord(row["diagnosis_baseline"], row["diagnosis_target"], dem["age"], dem["sex"],
                         dem["education"], float(row["delta_t"]), dict(row["score_deltas"]))
    return replace(rec, **overrides) if overrides else rec


def check_dims(cfg: RunConfig) -> None:
    m, t = cfg.model, cfg.text
    if (m.clip_len, m.clip_dim, m.t5_len, m.t5_dim) != (t.clip_len, t.clip_dim, t.t5_len, t.t5_dim):
        raise ValueError("model text dimensions do not match the text encoder configuration")
    lat = cfg.data.image_size // cfg.codec.factor
    if (m.latent_h, m.latent_w, m.latent_channels) != (lat, lat, cfg.codec.latent_channels):
        raise ValueError(f"model latent {m.latent_channels}x{m.latent_h}x{m.latent_w} does not match "
                         f"codec output {cfg.codec.latent_channels}x{lat}x{lat}")


# -- loading helpers ----------------------------------------------------------------
def load_rows(manifest: str | Path, split: str | None = None) -> tuple[list[dict], Path]:
    path = Path(manifest)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    rows = D.read_manifest(path)
    if split is not None:
        rows = [r for r in rows if r["split"] == split]
    return rows, path.parent


def load_images(root: Path, rel_paths: Sequence[str]) -> np.ndarray:
    out = []
    for p in rel_paths:
        full = root / p
        if not full.exists():
            raise DataError(f"image referenced by manifest is missing: {full}")
        out.append(D.read_image(full))
    return np.stack(out)[:, None]


# -- training -----------------------------------------------------------------------
def train_run(cfg: RunConfig, manifest: str | Path, out_dir: str | Path,
              resume: str | Path | None = None, stop_at: int | None = None,
              progress: Callable | None = None, codec_from: str | Path | None = None) -> TR.TrainResult:
    """Train the codec (unless ``codec_from`` names a saved one) and then the diffusion model."""
    check_dims(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, root = load_rows(manifest, "train")
    if not rows:
        raise DataError("manifest has no training rows")
    cfg.save(out / "config.json")
    ranges_src = root / RANGES_FILE
    ranges = C.FeatureRanges.load(ranges_src) if ranges_src.exists() else fit_ranges(rows)
    ranges.save(out / RANGES_FILE)

    targets = load_images(root, [r["target_path"] for r in rows])
    codec_dir = out / "codec"
    if resume is not None and codec_dir.exists():
        codec = load_codec(codec_dir)
    elif codec_from is not None:
        codec = load_codec(codec_from)
        save_codec(codec, codec_dir)
    else:
        codec = build_codec(cfg.codec)
        uniq = sorted({r["baseline_path"] for r in rows} | {r["target_path"] for r in rows})
        info = codec.train(load_images(root, uniq))
        if info:
            log.info("codec final train mse %.3e", info["train_mse"][-1])
        save_codec(codec, codec_dir)
    z0 = codec.encode(targets).data

    cond = Conditioner(C.TextEncoders(cfg.text), ranges, targets.shape[-2:])
    model = ProgressionDiT(cfg.model)
    return TR.train_loop(model, TR.TrainBatch(z0, cond.rows(rows)), NoiseSchedule.from_config(cfg.schedule),
                         cfg.train, cond.unconditional(), out, resume, stop_at,
                         {"run": cfg.to_dict()}, progress)


@dataclass
class LoadedRun:
    cfg: RunConfig
    model: ProgressionDiT
    codec: object
    conditioner: Conditioner
    schedule: NoiseSchedule
    step: int


def load_run(checkpoint: str | Path) -> LoadedRun:
    ck = Path(checkpoint)
    if not (ck / "manifest.json").exists():
        raise DataError(f"not a checkpoint directory: {ck}")
    run_dir = ck.parent
    _, meta, params = TR.load_checkpoint(ck)
    cfg = RunConfig.from_dict(meta["config"]["run"])
    model = ProgressionDiT(cfg.model)
    model.load_state_dict(params)
    codec = load_codec(run_dir / "codec")
    ranges = C.FeatureRanges.load(run_dir / RANGES_FILE)
    hw = (cfg.data.image_size, cfg.data.image_size)
    return LoadedRun(cfg, model, codec, Conditioner(C.TextEncoders(cfg.text), ranges, hw),
                     NoiseSchedule.from_config(cfg.schedule), int(meta["step"]))


# -- generation -----------------------------------------------------------------------
def generate(run: LoadedRun, cond: CondBatch, baseline_images: np.ndarray | None,
             scfg: SamplerConfig) -> np.ndarray:
    """Decoded images ``(B, 1, H, W)`` for each conditioning row."""
    base = None if baseline_images is None else run.codec.encode(baseline_images)
    lat = sample(run.model, run.schedule, cond, run.conditioner.unconditional(), base, scfg)
    return run.codec.decode(lat)


@dataclass
class EvalResult:
    model: list[M.MetricSample]
    baseline: list[M.MetricSample]  # Out = In: the baseline image scored against its target
    images: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]  # pair -> (baseline, target, generated)


def evaluate(run: LoadedRun, manifest: str | Path, split: str = "test", scfg: SamplerConfig | None = None,
             max_pairs: int = 0, batch: int = 64) -> EvalResult:
    """Generate every pair of ``split`` and score it against its target."""
    rows, root = load_rows(manifest, split)
    if any(r["split"] != split for r in rows):
        raise AssertionError("split filter leaked foreign rows")
    if max_pairs:
        rows = rows[:max_pairs]
    if not rows:
        raise DataError(f"manifest has no rows in split {split!r}")
    scfg = scfg or run.cfg.sampler
    res = EvalResult([], [], {})
    for s in range(0, len(rows), batch):
        chunk = rows[s:s + batch]
        base = load_images(root, [r["baseline_path"] for r in chunk])
        tgt = load_images(root, [r["target_path"] for r in chunk])
        gen = generate(run, run.conditioner.rows(chunk), base, replace(scfg, seed=scfg.seed + s))
        for r, b, t, g in zip(chunk, base, tgt, gen):
            group = f"{r['diagnosis_baseline']}->{r['diagnosis_target']}"
            res.images[r["pair_id"]] = (b[0], t[0], g[0])
            res.model.append(M.score_pair(r["pair_id"], r["subject_id"], g[0], t[0], r["delta_t"], group))
            res.baseline.append(M.score_pair(r["pair_id"], r["subject_id"], b[0], t[0], r["delta_t"], group))
    return res


def sweep_row(rows: Sequence[dict]) -> dict:
    """Deterministic baseline for the interval sweep: first pair (by id) progressing to AD, else MCI."""
    for target in ("AD", "MCI", "CN"):
        cand = sorted((r for r in rows if r["diagnosis_target"] == target), key=lambda r: r["pair_id"])
        if cand:
            return cand[0]
    raise DataError("no rows available for the interval sweep")


def interval_sweep(run: LoadedRun, row: dict, root: Path, intervals: Sequence[float] = (0, 6, 12, 24, 36),
                   scfg: SamplerConfig | None = None) -> tuple[np.ndarray, list[int]]:
    """Generate from one baseline at each interval (score deltas masked) and measure ventricle area."""
    scfg = scfg or run.cfg.sampler
    recs = [prompt_record(row, delta_t_months=float(dt), score_deltas={}) for dt in intervals]
    cond = CondBatch.stack([run.conditioner.record(r) for r in recs])
    base = load_images(root, [row["baseline_path"]] * len(intervals))
    # one noise draw shared by every interval isolates the effect of the interval
    lat0 = run.codec.encode(base[:1])
    outs = []
    for k in range(len(intervals)):
        lat = sample(run.model, run.schedule, cond.take(slice(k, k + 1)), run.conditioner.unconditional(),
                     lat0, scfg)
        outs.append(run.codec.decode(lat)[0, 0])
    imgs = np.stack(outs)
    return imgs, [D.ventricle_area(im) for im in imgs]


def copy_config(run_dir: str | Path, dest: str | Path) -> None:
    shutil.copy(Path(run_dir) / "config.json", Path(dest) / "config.json")


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")

"""``progdit`` command line: phantom-gen, train, sample, eval, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. ``--deterministic`` pins BLAS to one thread; otherwise
``PROGDIT_THREADS`` sets the thread count when present.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio as D
from . import metrics as M
from . import plotting
from . import report as R
from . import tnsr
from .codec import CodecError
from .conditioning import ValidationError
from .pipeline import DataError
from .config import ConfigValidationError, RunConfig
from .tensor import NumericError

log = logging.getLogger("progdit")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads(deterministic: bool):
    from threadpoolctl import threadpool_limits

    if deterministic:
        return threadpool_limits(limits=1)
    n = os.environ.get("PROGDIT_THREADS")
    return threadpool_limits(limits=int(n)) if n else contextlib.nullcontext()


def _load_config(path: str | None) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _sampler_overrides(cfg: RunConfig, args) -> RunConfig:
    vals = {k: v for k, v in (("n_steps", args.steps), ("cfg_scale", args.cfg_scale),
                              ("strength", args.strength), ("seed", args.seed)) if v is not None}
    return cfg.override("sampler", **vals) if vals else cfg


# -- commands -----------------------------------------------------------------------
def cmd_phantom_gen(args) -> int:
    from .pipeline import phantom_dataset

    cfg = _load_config(args.config)
    vals = {"subjects": args.subjects, "visits_per_subject": args.visits_per_subject, "seed": args.seed,
            "image_size": args.image_size, "all_pairs": args.all_pairs or None,
            "histogram_match": args.histogram_match or None}
    cfg = cfg.override("data", **{k: v for k, v in vals.items() if v is not None})
    out = Path(args.out)
    rows = phantom_dataset(cfg.data, out)
    cfg.save(out / "config.json")
    n_train = sum(r["split"] == "train" for r in rows)
    print(f"wrote {len(rows)} pairs ({n_train} train, {len(rows) - n_train} test) to {out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import phantom_dataset, train_run

    cfg = _load_config(args.config)
    if args.steps is not None:
        cfg = cfg.override("train", total_steps=args.steps)
    out = Path(args.out)
    manifest = args.manifest
    if manifest is None:
        phantom_dataset(cfg.data, out / "data")
        manifest = out / "data" / "manifest.jsonl"

    def progress(step, lr, loss):
        if step % args.log_every == 0:
            log.info("step %d lr %.3e loss %.5f", step, lr, loss)

    res = train_run(cfg, manifest, out, resume=args.resume, stop_at=args.stop_at, progress=progress)
    if res.losses:
        steps = list(range(res.final_step - len(res.losses) + 1, res.final_step + 1))
        plotting.loss_curve(steps, res.losses, out / "loss.png")
    last = res.checkpoints[-1] if res.checkpoints else None
    print(f"trained to step {res.final_step}; last checkpoint {last}")
    return EXIT_OK


def cmd_sample(args) -> int:
    from .conditioning import PromptRecord
    from .pipeline import load_rows, load_run, load_images, prompt_record, generate

    run = load_run(args.checkpoint)
    cfg = _sampler_overrides(run.cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.pair_id:
        if not args.manifest:
            raise UsageError("--pair-id needs --manifest")
        rows, root = load_rows(args.manifest)
        match = [r for r in rows if r["pair_id"] == args.pair_id]
        if not match:
            raise D.ValidationError(f"pair {args.pair_id!r} not in {args.manifest}")
        row = match[0]
        over = {} if args.delta_t is None else {"delta_t_months": args.delta_t}
        cond = run.conditioner.record(prompt_record(row, **over))
        base = load_images(root, [row["baseline_path"]])
        stem = args.pair_id
    else:
        rec = PromptRecord(args.diagnosis_baseline, args.diagnosis_target, args.age, args.sex,
                           args.education, args.delta_t or 0.0, {})
        text = args.prompt if args.prompt else rec.rendered_text
        cond = run.conditioner.from_text(text, run.conditioner.record(rec).amd[0])
        base = D.read_image(args.baseline)[None, None] if args.baseline else None
        stem = "sample"
    from .sampler import sample as _sample

    lat = _sample(run.model, run.schedule, cond, run.conditioner.unconditional(),
                  None if base is None else run.codec.encode(base), cfg.sampler)
    img = run.codec.decode(lat)[0, 0]
    D.write_pgm(out / f"{stem}.pgm", img)
    tnsr.save(out / f"{stem}_latent.tnsr", lat.data[0].astype(np.float32))
    cfg.save(out / "config.json")
    print(f"wrote {out / (stem + '.pgm')} (ventricle area {D.ventricle_area(img)} px)")
    return EXIT_OK


def _score_pregenerated(rows, root):
    from .pipeline import load_images

    model, base = [], []
    for r in rows:
        g, t, b = (load_images(root, [r[k]])[0, 0] for k in ("generated_path", "target_path", "baseline_path"))
        group = f"{r['diagnosis_baseline']}->{r['diagnosis_target']}"
        model.append(M.score_pair(r["pair_id"], r["subject_id"], g, t, r["delta_t"], group))
        base.append(M.score_pair(r["pair_id"], r["subject_id"], b, t, r["delta_t"], group))
    return model, base, {}


def cmd_eval(args) -> int:
    from .pipeline import evaluate, interval_sweep, load_rows, load_run, sweep_row

    rep = Path(args.report)
    rep.mkdir(parents=True, exist_ok=True)
    rows, root = load_rows(args.manifest, args.split)
    if not rows:
        raise D.ValidationError(f"no rows in split {args.split!r}")
    summary: dict = {"split": args.split, "pairs": len(rows)}
    run = None
    if all("generated_path" in r for r in rows) and not args.checkpoint:
        model, base, images = _score_pregenerated(rows, root)
        cfg = _load_config(args.config)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint unless every manifest row has generated_path")
        run = load_run(args.checkpoint)
        cfg = _sampler_overrides(run.cfg, args)
        res = evaluate(run, args.manifest, args.split, cfg.sampler, args.max_pairs)
        model, base, images = res.model, res.baseline, res.images
    cfg.save(rep / "config.json")

    tables = {
        "comparison": R.comparison_report({"progdit": model, "Out = In": base}, "progdit",
                                             "generated vs target, against the unchanged baseline"),
        "by_group": R.stratified_report(model, "group", "by progression group"),
        "by_interval": R.stratified_report(model, "interval", "by follow-up interval (months)"),
    }
    text = []
    for name, t in tables.items():
        (rep / f"{name}.csv").write_text(R.to_csv(t))
        text.append(R.to_text(t))
    (rep / "report.txt").write_text("\n".join(text))
    (rep / "samples.csv").write_text(R.samples_csv(model))
    plotting.metric_bars(tables["by_interval"], "ssim", rep / "ssim_by_interval.png")
    plotting.metric_bars(tables["by_group"], "ssim", rep / "ssim_by_group.png")
    if images:
        ids = sorted(images)[: args.examples]
        plotting.example_grid([(i, *images[i]) for i in ids], rep / "examples.png")
        if args.error_maps:
            (rep / "error_maps").mkdir(exist_ok=True)
            for i in sorted(images):
                _, tgt, gen = images[i]
                D.write_pgm(rep / "error_maps" / f"{i}.pgm", M.absolute_error_map(gen, tgt))
    if run is not None and not args.no_sweep:
        row = sweep_row(rows)
        intervals = (0, 6, 12, 24, 36)
        imgs, areas = interval_sweep(run, row, root, intervals, cfg.sampler)
        plotting.interval_sweep(intervals, imgs, areas, rep / "interval_sweep.png")
        rho = M.spearman(intervals, areas)
        summary["sweep"] = {"pair_id": row["pair_id"], "intervals": list(intervals), "areas": areas,
                            "spearman": rho}
    bins = tables["by_interval"]
    summary["ssim_mean"] = M.mean_sd([s.ssim for s in model])[0]
    summary["ssim_by_interval"] = {r.label: (r.cells["ssim"].mean if r.cells["ssim"].n else None)
                                   for r in bins.rows}
    (rep / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print("\n".join(text), end="")
    print(f"report written to {rep}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(seed=args.seed)
    bad = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        bad += not r.passed
        print(f"{r.name:18s} max_rel_err={r.max_rel_error:.3e} {status}")
    print(f"{len(results) - bad}/{len(results)} cases below {TOLERANCE:g}")
    return EXIT_OK if bad == 0 else EXIT_NUMERIC


# -- parser -------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="progdit", description=__doc__.splitlines()[0])
    p.add_argument("--deterministic", action="store_true", help="single-threaded bit-exact mode")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("phantom-gen", help="write a synthetic longitudinal dataset")
    g.add_argument("--subjects", type=int)
    g.add_argument("--visits-per-subject", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--all-pairs", action="store_true")
    g.add_argument("--histogram-match", action="store_true")
    g.add_argument("--config")
    g.set_defaults(func=cmd_phantom_gen)

    t = sub.add_parser("train", help="train codec and diffusion model")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--manifest", help="default: generate phantoms from the config into OUT/data")
    t.add_argument("--steps", type=int)
    t.add_argument("--resume")
    t.add_argument("--stop-at", type=int)
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    def sampler_flags(q):
        q.add_argument("--steps", type=int)
        q.add_argument("--cfg-scale", type=float)
        q.add_argument("--strength", type=float)
        q.add_argument("--seed", type=int)

    s = sub.add_parser("sample", help="generate one follow-up image")
    s.add_argument("--checkpoint", required=True)
    src = s.add_mutually_exclusive_group()
    src.add_argument("--prompt")
    src.add_argument("--pair-id")
    s.add_argument("--manifest")
    s.add_argument("--baseline", help="baseline image (PGM or TNSR1) for --prompt mode")
    s.add_argument("--delta-t", type=float)
    s.add_argument("--diagnosis-baseline", default="MCI")
    s.add_argument("--diagnosis-target", default="AD")
    s.add_argument("--age", type=float, default=72.0)
    s.add_argument("--sex", default="F")
    s.add_argument("--education", type=float, default=16.0)
    s.add_argument("--out", required=True)
    sampler_flags(s)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="generate a split and write stratified reports")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--max-pairs", type=int, default=0)
    e.add_argument("--examples", type=int, default=6)
    e.add_argument("--error-maps", action="store_true")
    e.add_argument("--no-sweep", action="store_true")
    e.add_argument("--config")
    sampler_flags(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _threads(args.deterministic):
            return args.func(args)
    except (UsageError, ConfigValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, NotADirectoryError, PermissionError, ValidationError, CodecError,
            tnsr.FormatError, json.JSONDecodeError, KeyError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

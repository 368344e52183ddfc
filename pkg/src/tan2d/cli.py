"""``tan2d`` command line: generate, train, eval, predict, inspect-candidates, upper-bound."""
from __future__ import annotations

import os

# Thread caps must be in place before numpy loads its BLAS.
_THREADS = os.environ.get("TAN2D_THREADS")
if _THREADS and _THREADS.isdigit() and int(_THREADS) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import shutil  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, fields  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Sequence  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .clips import read_feature_file, read_manifest  # noqa: E402
from .errors import CheckpointError, ConfigError, DataError, EvalError, Tan2DError  # noqa: E402
from .evaluation import upper_bound  # noqa: E402
from .model import TAN  # noqa: E402
from .optim import Adam  # noqa: E402
from .synthetic import CorpusSpec, generate_synthetic_corpus  # noqa: E402
from .temporal_map import candidate_mask  # noqa: E402
from .text import Vocabulary, load_pretrained_embeddings  # noqa: E402
from .training import (  # noqa: E402
    METRIC_COLUMNS, TrainConfig, build_dataset, config_hash, evaluate, load_checkpoint,
    predict_top_n, save_checkpoint, train, write_metrics_csv,
)

log = logging.getLogger("tan2d")

TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
PATH_KEYS = {"corpus", "train_manifest", "val_manifest", "manifest", "out", "checkpoint", "embeddings", "resume"}
RUN_KEYS = TRAIN_KEYS | PATH_KEYS


# configuration -----------------------------------------------------------------------


def load_run_config(path: str | None) -> dict:
    """Read a JSON config. A previous ``run.json`` is accepted and its ``config`` block reused."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    if "command" in raw and "config" in raw:
        raw = raw["config"]
    for k in raw:
        if k not in RUN_KEYS:
            raise ConfigError(f"unknown config key {k!r}")
    return dict(raw)


def resolve(args: argparse.Namespace, overrides: dict) -> dict:
    cfg = load_run_config(getattr(args, "config", None))
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def split_config(cfg: dict) -> tuple[TrainConfig, dict]:
    train_cfg = TrainConfig.from_dict({k: v for k, v in cfg.items() if k in TRAIN_KEYS})
    return train_cfg, {k: v for k, v in cfg.items() if k in PATH_KEYS}


def parse_floats(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None
    if not vals:
        raise ConfigError("empty list")
    return vals


def parse_ints(text: str) -> list[int]:
    vals = parse_floats(text)
    if any(v != int(v) for v in vals):
        raise ConfigError(f"expected integers, got {text!r}")
    return [int(v) for v in vals]


def require_file(path: str | os.PathLike | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def prepare_out(path: str | os.PathLike) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out} is not writable: {exc}") from None
    return out


def write_run_json(out: Path, command: str, config: dict, seed: int | None, **extra) -> None:
    record = {"command": command, "tan2d_version": __version__, "seed": seed, "config": config}
    record.update(extra)
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def manifest_paths(paths: dict) -> tuple[Path, Path | None]:
    if paths.get("train_manifest"):
        train_p = require_file(paths["train_manifest"], "training manifest")
        val_p = require_file(paths["val_manifest"], "validation manifest") if paths.get("val_manifest") else None
        return train_p, val_p
    if paths.get("corpus"):
        root = Path(paths["corpus"])
        train_p = require_file(root / "train.jsonl", "training manifest")
        val_p = root / "val.jsonl"
        return train_p, val_p if val_p.is_file() else None
    raise ConfigError("train needs 'corpus' or 'train_manifest' (config key or --corpus)")


def read_metrics_csv(path: Path, upto_epoch: int) -> list[dict]:
    rows = []
    with path.open(encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            if int(rec["epoch"]) > upto_epoch:
                continue
            row: dict = {"epoch": int(rec["epoch"]), "split": rec["split"]}
            for col in METRIC_COLUMNS[2:]:
                if rec.get(col):
                    row[col] = float(rec[col])
            rows.append(row)
    return rows


def best_epoch(rows: Sequence[dict], key: str = "rank1@0.5") -> int:
    """Earliest epoch with the highest validation ``key``; the last epoch when nothing was validated."""
    val = [r for r in rows if r["split"] == "val" and key in r]
    if not val:
        return max((r["epoch"] for r in rows), default=0)
    top = max(r[key] for r in val)
    return min(r["epoch"] for r in val if r[key] == top)


# commands -----------------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    if args.videos < 1:
        raise ConfigError("--videos must be >= 1")
    lo, hi = args.min_clips, args.max_clips
    if not 1 <= lo <= hi:
        raise ConfigError("need 1 <= --min-clips <= --max-clips")
    spec = CorpusSpec(n_videos=args.videos, clip_range=(lo, hi), d_in=args.d_in)
    out = prepare_out(args.out)
    man = generate_synthetic_corpus(out, seed=args.seed, spec=spec)
    report = json.loads((out / "generation_report.json").read_text(encoding="utf-8"))
    config = {"videos": args.videos, "min_clips": lo, "max_clips": hi, "d_in": args.d_in, "out": str(out)}
    write_run_json(out, "generate", config, args.seed)
    print(f"wrote {len(man)} queries over {args.videos} videos to {out} {report['per_split']}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve(args, {"seed": args.seed, "out": args.out, "n_clips": args.n_clips, "epochs": args.epochs,
                         "lr": args.lr, "corpus": args.corpus, "resume": args.resume,
                         "embeddings": args.embeddings, "nms_threshold": args.nms_threshold})
    train_cfg, paths = split_config(cfg)
    train_p, val_p = manifest_paths(paths)
    resume = require_file(paths["resume"], "resume checkpoint") if paths.get("resume") else None
    emb = require_file(paths["embeddings"], "embedding file") if paths.get("embeddings") else None
    out = prepare_out(paths.get("out") or "tan2d_run")
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)

    train_man = read_manifest(train_p)
    train_man.validate()
    val_man = read_manifest(val_p) if val_p else None
    if val_man is not None:
        val_man.validate()

    model = optimizer = None
    start_epoch, prior_rows = 0, []
    if resume is not None:
        ck = load_checkpoint(resume)
        vocab, model, start_epoch = ck.vocab, ck.model, ck.epoch
        optimizer = Adam(model.parameters(), lr=train_cfg.lr)
        optimizer.load_state_arrays(ck.extra)
        if (out / "metrics.csv").is_file():
            prior_rows = read_metrics_csv(out / "metrics.csv", start_epoch)
        log.info("resuming from %s at epoch %d", resume, start_epoch)
    else:
        vocab = Vocabulary.build(a.query for a in train_man.annotations)

    train_ds = build_dataset(train_man, vocab, train_cfg)
    val_ds = build_dataset(val_man, vocab, train_cfg) if val_man is not None and len(val_man) else None
    if model is None:
        model = TAN(train_cfg.model_config(len(vocab), train_ds.clips.shape[2]), seed=train_cfg.seed)
        if emb is not None:
            load_pretrained_embeddings(emb, vocab, model.encoder.embedding)
    elif model.cfg != train_cfg.model_config(len(vocab), train_ds.clips.shape[2]):
        raise CheckpointError("resume checkpoint was trained with a different model configuration")

    def on_epoch(epoch, mdl, opt, history):
        save_checkpoint(ckdir / f"epoch_{epoch:03d}.ckpt", mdl, vocab, train_cfg, epoch, optimizer=opt)
        write_metrics_csv(out / "metrics.csv", prior_rows + history)

    res = train(train_cfg, train_ds, val_ds, len(vocab), on_epoch=on_epoch, model=model,
                optimizer=optimizer, start_epoch=start_epoch)
    rows = prior_rows + res.history
    write_metrics_csv(out / "metrics.csv", rows)
    best = best_epoch(rows)
    source = ckdir / f"epoch_{best:03d}.ckpt" if best else None
    if source is not None and source.is_file():
        shutil.copyfile(source, out / "best.ckpt")
    else:
        save_checkpoint(out / "best.ckpt", model, vocab, train_cfg, start_epoch + train_cfg.epochs)
    write_run_json(out, "train", cfg, train_cfg.seed, best_epoch=best, config_hash=config_hash(model.cfg, vocab))
    print(f"trained {train_cfg.epochs} epochs; best epoch {best}; checkpoint {out / 'best.ckpt'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve(args, {"checkpoint": args.checkpoint, "manifest": args.manifest, "out": args.out,
                         "nms_threshold": args.nms_threshold})
    ckpt = require_file(cfg.get("checkpoint"), "checkpoint")
    man_p = require_file(cfg.get("manifest"), "manifest")
    ns = parse_ints(args.ns)
    ms = parse_floats(args.iou_thresholds)
    if any(n < 1 for n in ns) or any(not 0 < m < 1 for m in ms):
        raise ConfigError("n must be >= 1 and IoU thresholds must lie in (0, 1)")
    out = prepare_out(cfg.get("out") or "tan2d_eval")

    ck = load_checkpoint(ckpt)
    model_keys = {k: v for k, v in cfg.items() if k in TRAIN_KEYS}
    if model_keys:
        merged = TrainConfig.from_dict({**asdict(ck.train_cfg), **model_keys})
        expected = config_hash(merged.model_config(len(ck.vocab), ck.model.cfg.d_in), ck.vocab)
        if expected != ck.config_hash:
            raise CheckpointError(f"{ckpt}: config hash {ck.config_hash[:12]} does not match the "
                                  f"requested configuration ({expected[:12]})")
    man = read_manifest(man_p)
    if len(man) == 0:
        raise EvalError(f"{man_p}: no annotations to evaluate")
    man.validate()
    tcfg = ck.train_cfg
    nms_th = float(cfg.get("nms_threshold", tcfg.nms_threshold))
    ds = build_dataset(man, ck.vocab, tcfg)
    rep = evaluate(ck.model, ds, ns=ns, ms=ms, nms_threshold=nms_th)
    cols = [rep.key(n, m) for n in ns for m in ms]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "epoch", "loss", *cols, "candidates", "queries"])
    w.writerow([man_p.stem, ck.epoch, f"{rep.loss:.6f}", *(f"{rep.ranks[(n, m)]:.6f}" for n in ns for m in ms),
                rep.candidates, rep.queries])
    (out / "eval.csv").write_text(buf.getvalue(), encoding="utf-8")
    (out / "eval.json").write_text(json.dumps(rep.as_dict(), indent=2) + "\n", encoding="utf-8")
    write_run_json(out, "eval", cfg, tcfg.seed, config_hash=ck.config_hash)
    for c in cols:
        print(f"{c:>10}  {rep.as_dict()[c]:6.2f}")
    print(f"C={rep.candidates} queries={rep.queries} seconds={rep.seconds:.2f}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = resolve(args, {"checkpoint": args.checkpoint, "out": args.out, "nms_threshold": args.nms_threshold})
    ckpt = require_file(cfg.get("checkpoint"), "checkpoint")
    feats = require_file(args.features, "feature file")
    if args.top_n < 1:
        raise ConfigError("--top-n must be >= 1")
    out = prepare_out(cfg.get("out") or "tan2d_predict")
    ck = load_checkpoint(ckpt)
    video = read_feature_file(feats)
    nms_th = float(cfg.get("nms_threshold", ck.train_cfg.nms_threshold))
    preds, scores = predict_top_n(ck.model, ck.vocab, video, args.query, n=args.top_n, nms_threshold=nms_th)
    records = [{"rank": i + 1, "a": p.span.a, "b": p.span.b, "start_sec": p.start_sec, "end_sec": p.end_sec,
                "score": p.score} for i, p in enumerate(preds)]
    (out / "predictions.json").write_text(json.dumps({"query": args.query, "predictions": records}, indent=2) + "\n",
                                          encoding="utf-8")
    if args.dump_scores:
        np.savetxt(out / "scores.csv", scores, delimiter=",", fmt="%.9f")
    write_run_json(out, "predict", cfg, ck.train_cfg.seed, query=args.query, features=str(feats),
                   top_n=args.top_n)
    for r in records:
        print(f"{r['rank']:>3}  [{r['start_sec']:.2f}s, {r['end_sec']:.2f}s]  clips {r['a']}-{r['b']}  "
              f"score {r['score']:.4f}")
    return 0


def cmd_inspect_candidates(args: argparse.Namespace) -> int:
    n = args.n_clips
    if n < 1:
        raise ConfigError("--n-clips must be >= 1")
    out = prepare_out(args.out)
    mask = candidate_mask(n, dense=args.dense)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["a", "b", "valid", "length"])
    for a in range(n):
        for b in range(a, n):
            w.writerow([a, b, int(mask.valid[a, b]), b - a + 1])
    (out / "candidates.csv").write_text(buf.getvalue(), encoding="utf-8")
    summary = {"n_clips": n, "dense": args.dense, "candidates": mask.count, "enumerated": n * (n + 1) // 2}
    (out / "candidates_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    write_run_json(out, "inspect-candidates", {"n_clips": n, "dense": args.dense, "out": str(out)}, None)
    print(f"N={n} C={mask.count}")
    return 0


def cmd_upper_bound(args: argparse.Namespace) -> int:
    cfg = resolve(args, {"manifest": args.manifest, "out": args.out})
    man_p = require_file(cfg.get("manifest"), "manifest")
    ns = parse_ints(args.n_clips)
    ms = parse_floats(args.iou_thresholds)
    out = prepare_out(cfg.get("out") or "tan2d_upper_bound")
    man = read_manifest(man_p)
    if len(man) == 0:
        raise EvalError(f"{man_p}: no annotations")
    man.validate()
    feats = man.load_features()
    gts = [(a.start_sec, a.end_sec, feats[a.video_id].duration) for a in man.annotations]
    table = {n: upper_bound(gts, candidate_mask(n), ms) for n in ns}
    order = sorted(ns)
    monotone = {m: all(table[lo][m] <= table[hi][m] for lo, hi in zip(order, order[1:])) for m in ms}
    for m, ok in monotone.items():
        if not ok:
            log.warning("upper bound at IoU %g is not monotone in N on this corpus", m)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_clips", "candidates", *(f"iou>{m:g}" for m in ms)])
    for n in ns:
        w.writerow([n, candidate_mask(n).count, *(f"{table[n][m]:.4f}" for m in ms)])
    (out / "upper_bound.csv").write_text(buf.getvalue(), encoding="utf-8")
    (out / "upper_bound.json").write_text(json.dumps(
        {"table": {str(n): {f"{m:g}": v for m, v in row.items()} for n, row in table.items()},
         "monotone_in_n": {f"{m:g}": ok for m, ok in monotone.items()}, "queries": len(gts)},
        indent=2) + "\n", encoding="utf-8")
    write_run_json(out, "upper-bound", cfg, None, n_clips=ns, iou_thresholds=ms)
    sys.stdout.write(buf.getvalue())
    return 0


# parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tan2d", description="2D temporal adjacent network for moment localization")
    p.add_argument("--version", action="version", version=f"tan2d {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic corpus")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--out", default="synthetic_corpus")
    g.add_argument("--videos", type=int, default=CorpusSpec.n_videos)
    g.add_argument("--min-clips", type=int, default=CorpusSpec.clip_range[0])
    g.add_argument("--max-clips", type=int, default=CorpusSpec.clip_range[1])
    g.add_argument("--d-in", type=int, default=CorpusSpec.d_in)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model, checkpointing every epoch")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--n-clips", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--nms-threshold", type=float)
    t.add_argument("--corpus", help="directory holding train.jsonl / val.jsonl")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--embeddings", help="text file of pretrained word vectors")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Rank n@m of a checkpoint on a manifest")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest")
    e.add_argument("--out")
    e.add_argument("--ns", default="1,5", help="comma-separated n values")
    e.add_argument("--iou-thresholds", default="0.3,0.5,0.7")
    e.add_argument("--nms-threshold", type=float)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="top moments for one query on one feature file")
    r.add_argument("--config")
    r.add_argument("--checkpoint")
    r.add_argument("--features", required=True)
    r.add_argument("--query", required=True)
    r.add_argument("--top-n", type=int, default=5)
    r.add_argument("--nms-threshold", type=float)
    r.add_argument("--out")
    r.add_argument("--dump-scores", action="store_true", help="also write the N x N score map as CSV")
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("inspect-candidates", help="dump the candidate mask for N clips")
    c.add_argument("--n-clips", type=int, default=16)
    c.add_argument("--dense", action="store_true")
    c.add_argument("--out", default="tan2d_candidates")
    c.set_defaults(func=cmd_inspect_candidates)

    u = sub.add_parser("upper-bound", help="oracle Rank1 limited by the clip grid and candidate mask")
    u.add_argument("--config")
    u.add_argument("--manifest")
    u.add_argument("--n-clips", default="16,32,64", help="comma-separated N values")
    u.add_argument("--iou-thresholds", default="0.3,0.5,0.7")
    u.add_argument("--out")
    u.set_defaults(func=cmd_upper_bound)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if _THREADS is not None and not (_THREADS.isdigit() and int(_THREADS) > 0):
        print(f"tan2d: error: TAN2D_THREADS must be a positive integer, got {_THREADS!r}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except Tan2DError as exc:
        print(f"tan2d: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"tan2d: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

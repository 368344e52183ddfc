"""Loss, dataset assembly, training loop, inference and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .clips import ClipFeatureSequence, CorpusManifest, sample_clips
from .errors import CheckpointError, ConfigError, DataError, QueryError, TrainingError
from .evaluation import DEFAULT_MS, DEFAULT_NS, EvalReport, build_report, nms_arrays
from .model import TAN, ModelConfig
from .optim import Adam
from .synthetic import is_ordinal
from .temporal_map import MomentSpan, candidate_mask, label_map, label_map_seconds, seconds_to_span
from .text import Vocabulary, tokenize

log = logging.getLogger(__name__)

CLAMP = 1e-7
METRIC_COLUMNS = ("epoch", "split", "loss", "rank1@0.3", "rank1@0.5", "rank1@0.7",
                  "rank5@0.3", "rank5@0.5", "rank5@0.7")


def bce_loss(p: Tensor, y: np.ndarray | Tensor) -> Tensor:
    """Mean binary cross-entropy between scores ``p`` and soft targets ``y`` (same shape)."""
    y = y if isinstance(y, Tensor) else ag.tensor(y)
    if p.shape != y.shape:
        raise ValueError(f"scores {p.shape} and labels {y.shape} differ in length")
    pc = ag.clip(p, CLAMP, 1.0 - CLAMP)
    ll = y * ag.log(pc) + (1.0 - y) * ag.log(1.0 - pc)
    return -ag.mean(ll)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 42
    t_min: float = 0.5
    t_max: float = 1.0
    n_clips: int = 16
    layers: int = 8
    kernel: int = 5
    d_s: int = 512
    d_v: int = 512
    d_o: int = 512
    nms_threshold: float = 0.5
    map_type: str = "pool"
    dense_mask: bool = False
    fusion_norm: str = "channel"
    label_iou: str = "seconds"
    train_embeddings: bool = True

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.t_min < self.t_max <= 1:
            raise ConfigError("need 0 <= t_min < t_max <= 1")
        if not 0 < self.nms_threshold <= 1:
            raise ConfigError("nms_threshold must lie in (0, 1]")
        if self.label_iou not in ("seconds", "clips"):
            raise ConfigError("label_iou must be 'seconds' or 'clips'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def model_config(self, vocab_size: int, d_in: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, d_in=d_in, n_clips=self.n_clips, d_s=self.d_s, d_v=self.d_v,
            d_o=self.d_o, layers=self.layers, kernel=self.kernel, map_type=self.map_type,
            dense_mask=self.dense_mask, fusion_norm=self.fusion_norm,
            train_embeddings=self.train_embeddings,
        )


# data ------------------------------------------------------------------------------


@dataclass
class Dataset:
    tokens: list[list[int]]
    clips: np.ndarray  # (Q, N, d_in)
    labels: np.ndarray  # (Q, N, N)
    gts: list[tuple[float, float]]
    durations: np.ndarray
    queries: list[str]
    video_ids: list[str]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def taus(self) -> np.ndarray:
        return self.durations / self.clips.shape[1]

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = list(idx)
        return Dataset([self.tokens[i] for i in idx], self.clips[idx], self.labels[idx],
                       [self.gts[i] for i in idx], self.durations[idx],
                       [self.queries[i] for i in idx], [self.video_ids[i] for i in idx])

    def ordinal_index(self) -> list[int]:
        return [i for i, q in enumerate(self.queries) if is_ordinal(q)]


def build_dataset(manifest: CorpusManifest, vocab: Vocabulary, cfg: TrainConfig,
                  features: dict[str, ClipFeatureSequence] | None = None) -> Dataset:
    if len(manifest) == 0:
        raise DataError("manifest has no annotations")
    features = features if features is not None else manifest.load_features()
    mask = candidate_mask(cfg.n_clips, dense=cfg.dense_mask)
    toks, clips, labels, gts, durs, queries, vids = [], [], [], [], [], [], []
    sampled: dict[str, np.ndarray] = {}
    for ann in manifest.annotations:
        seq = features[ann.video_id]
        if ann.end_sec > seq.duration + 1e-9:
            raise DataError(f"{ann.video_id}: annotation ends after the video ({ann.end_sec} > {seq.duration})")
        if ann.video_id not in sampled:
            sampled[ann.video_id] = sample_clips(seq, cfg.n_clips).features
        t = tokenize(ann.query, vocab)
        if not t:
            raise QueryError(f"empty query for {ann.video_id}")
        tau = seq.duration / cfg.n_clips
        if cfg.label_iou == "seconds":
            lm = label_map_seconds(ann.start_sec, ann.end_sec, tau, mask, cfg.t_min, cfg.t_max)
        else:
            span = seconds_to_span(ann.start_sec, ann.end_sec, tau, cfg.n_clips)
            lm = label_map(span, mask, cfg.t_min, cfg.t_max)
        toks.append(t)
        clips.append(sampled[ann.video_id])
        labels.append(lm.y)
        gts.append((ann.start_sec, ann.end_sec))
        durs.append(seq.duration)
        queries.append(ann.query)
        vids.append(ann.video_id)
    return Dataset(toks, np.stack(clips), np.stack(labels), gts, np.array(durs), queries, vids)


# training --------------------------------------------------------------------------


def batch_loss(model: TAN, ds: Dataset, idx: Sequence[int]) -> Tensor:
    idx = list(idx)
    scores = model([ds.tokens[i] for i in idx], ds.clips[idx])
    flat = model.mask.flat_index
    B, N = len(idx), model.cfg.n_clips
    p = ag.reshape(scores, (B, N * N))[:, flat]
    y = ds.labels[idx].reshape(B, N * N)[:, flat]
    return bce_loss(p, y)


@dataclass
class TrainResult:
    model: TAN
    history: list[dict]
    best_epoch: int
    best_state: dict[str, np.ndarray]
    optimizer: Adam | None = None


def _param_norms(model: TAN) -> str:
    return ", ".join(f"{k}={np.linalg.norm(p.data):.3g}" for k, p in model.parameters().items())


def train(cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset | None, vocab_size: int,
          on_epoch: Callable[[int, TAN, Adam, list[dict]], None] | None = None,
          model: TAN | None = None, optimizer: Adam | None = None, start_epoch: int = 0,
          select: tuple[int, float] = (1, 0.5)) -> TrainResult:
    """Mini-batch Adam on BCE; model selection by validation Rank n@m (``select``)."""
    cfg.validate()
    if len(train_ds) == 0:
        raise DataError("training split is empty")
    model = model or TAN(cfg.model_config(vocab_size, train_ds.clips.shape[2]), seed=cfg.seed)
    opt = optimizer or Adam(model.parameters(), lr=cfg.lr)
    history: list[dict] = []
    best_score, best_epoch = -1.0, start_epoch
    best_state = {k: p.data.copy() for k, p in model.state_tensors().items()}
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_ds))
        total, count = 0.0, 0
        for bi in range(0, len(order), cfg.batch_size):
            idx = order[bi:bi + cfg.batch_size]
            loss = batch_loss(model, train_ds, idx)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {bi // cfg.batch_size}; "
                                    f"parameter norms: {_param_norms(model)}")
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "split": "train", "loss": total / count}
        history.append(row)
        log.info("epoch %d train loss %.5f", epoch, row["loss"])
        if val_ds is not None and len(val_ds):
            rep = evaluate(model, val_ds, nms_threshold=cfg.nms_threshold)
            vrow = {"epoch": epoch, "split": "val", "loss": rep.loss}
            vrow.update({rep.key(n, m): v for (n, m), v in rep.ranks.items()})
            history.append(vrow)
            score = rep.ranks[select]
            log.info("epoch %d val %s", epoch, vrow)
            if score > best_score:
                best_score, best_epoch = score, epoch
                best_state = {k: p.data.copy() for k, p in model.state_tensors().items()}
        else:
            best_epoch = epoch
            best_state = {k: p.data.copy() for k, p in model.state_tensors().items()}
        if on_epoch is not None:
            on_epoch(epoch, model, opt, history)
    return TrainResult(model, history, best_epoch, best_state, opt)


def load_state(model: TAN, state: dict[str, np.ndarray]) -> None:
    for k, t in model.state_tensors().items():
        if k not in state or state[k].shape != t.shape:
            raise CheckpointError(f"checkpoint lacks a compatible tensor for {k}")
        t.data[...] = state[k]


# inference and evaluation --------------------------------------------------------------


def score_maps(model: TAN, ds: Dataset, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(ds), batch_size):
        idx = list(range(i, min(i + batch_size, len(ds))))
        out.append(model([ds.tokens[j] for j in idx], ds.clips[idx]).data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.n_clips, model.cfg.n_clips))


def rank_predictions(scores: np.ndarray, mask, taus: np.ndarray, nms_threshold: float, top: int):
    pairs = mask.pairs
    preds = []
    for s, tau in zip(scores, taus):
        vals = s[pairs[:, 0], pairs[:, 1]]
        keep = nms_arrays(pairs, vals, nms_threshold, limit=top)
        preds.append([(pairs[k, 0] * tau, (pairs[k, 1] + 1) * tau) for k in keep])
    return preds


def evaluate(model: TAN, ds: Dataset, ns=DEFAULT_NS, ms=DEFAULT_MS, nms_threshold: float = 0.5,
             scores: np.ndarray | None = None) -> EvalReport:
    t0 = time.perf_counter()
    if len(ds) == 0:
        raise DataError("nothing to evaluate")
    scores = score_maps(model, ds) if scores is None else scores
    preds = rank_predictions(scores, model.mask, ds.taus, nms_threshold, max(ns))
    rep = build_report(preds, ds.gts, ns, ms, model.mask.count)
    flat = model.mask.flat_index
    p = np.clip(scores.reshape(len(ds), -1)[:, flat], CLAMP, 1 - CLAMP)
    y = ds.labels.reshape(len(ds), -1)[:, flat]
    rep.loss = float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())
    rep.seconds = time.perf_counter() - t0
    return rep


@dataclass
class Prediction:
    span: MomentSpan
    score: float
    start_sec: float
    end_sec: float


def predict_top_n(model: TAN, vocab: Vocabulary, video: ClipFeatureSequence, query: str, n: int = 5,
                  nms_threshold: float = 0.5) -> tuple[list[Prediction], np.ndarray]:
    """Ranked moments for one query, plus the raw ``(N, N)`` score map."""
    toks = tokenize(query, vocab)
    if not toks:
        raise QueryError("query has no tokens")
    clips = sample_clips(video, model.cfg.n_clips)
    scores = model([toks], clips.features[None]).data[0]
    pairs = model.mask.pairs
    vals = scores[pairs[:, 0], pairs[:, 1]]
    keep = nms_arrays(pairs, vals, nms_threshold, limit=n)
    tau = clips.clip_duration
    out = [Prediction(MomentSpan(int(pairs[k, 0]), int(pairs[k, 1])), float(vals[k]),
                      pairs[k, 0] * tau, (pairs[k, 1] + 1) * tau) for k in keep]
    return out, scores


def write_metrics_csv(path: str | Path, history: Sequence[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in history:
        vals = []
        for col in METRIC_COLUMNS:
            v = row.get(col, "")
            vals.append(f"{v:.6f}" if isinstance(v, float) else v)
        w.writerow(vals)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# checkpoints ----------------------------------------------------------------------------

CKPT_MAGIC = b"TAN2DCKP"
CKPT_VERSION = 1


def config_hash(model_cfg: ModelConfig, vocab: Vocabulary) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "vocab": vocab.to_list()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path: str | Path, model: TAN, vocab: Vocabulary, train_cfg: TrainConfig,
                    epoch: int, optimizer: Adam | None = None,
                    state: dict[str, np.ndarray] | None = None) -> None:
    """Header + JSON metadata + raw little-endian float64 tensors."""
    tensors = dict(state) if state is not None else {k: t.data for k, t in model.state_tensors().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
    names = sorted(tensors)
    meta = {
        "config_hash": config_hash(model.cfg, vocab),
        "model": model.cfg.to_dict(),
        "train": asdict(train_cfg),
        "vocab": vocab.to_list(),
        "epoch": epoch,
        "tensors": [[k, list(tensors[k].shape)] for k in names],
    }
    mb = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(mb)), mb]
    parts += [np.ascontiguousarray(tensors[k], dtype="<f8").tobytes() for k in names]
    Path(path).write_bytes(b"".join(parts))


@dataclass
class Checkpoint:
    model: TAN
    vocab: Vocabulary
    train_cfg: TrainConfig
    epoch: int
    config_hash: str
    extra: dict[str, np.ndarray] = field(default_factory=dict)


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(raw) < 16 or raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(raw[16:16 + mlen])
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt metadata block") from None
    if expected_hash is not None and meta["config_hash"] != expected_hash:
        raise CheckpointError(f"{path}: config hash {meta['config_hash'][:12]} does not match "
                              f"expected {expected_hash[:12]}")
    off = 16 + mlen
    arrays = {}
    for name, shape in meta["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data for {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing or missing tensor bytes")
    mcfg = ModelConfig(**meta["model"])
    vocab = Vocabulary.from_list(meta["vocab"])
    if config_hash(mcfg, vocab) != meta["config_hash"]:
        raise CheckpointError(f"{path}: stored config hash is inconsistent with its metadata")
    model = TAN(mcfg)
    load_state(model, arrays)
    extra = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return Checkpoint(model, vocab, TrainConfig(**meta["train"]), meta["epoch"], meta["config_hash"], extra)

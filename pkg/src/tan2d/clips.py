"""Clip features: on-disk format, fixed-interval sampling, projection, manifests."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DataError, FormatError

MAGIC = b"TAN2DFTR"
VERSION = 1
_HEADER = struct.Struct("<8sIIId")


@dataclass
class ClipFeatureSequence:
    features: np.ndarray  # (n_clips, d_in)
    clip_duration: float
    video_id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"{self.video_id or 'sequence'}: need at least one clip, got shape {self.features.shape}")
        if not self.clip_duration > 0:
            raise DataError(f"{self.video_id or 'sequence'}: clip duration must be positive")
        if not np.isfinite(self.features).all():
            raise DataError(f"{self.video_id or 'sequence'}: non-finite feature values")

    @property
    def n_clips(self) -> int:
        return self.features.shape[0]

    @property
    def duration(self) -> float:
        return self.n_clips * self.clip_duration


@dataclass
class SampledClips:
    features: np.ndarray  # (N, d_in)
    clip_duration: float
    source_start: np.ndarray  # first covered source clip per row
    source_stop: np.ndarray  # one past the last covered source clip

    @property
    def n(self) -> int:
        return self.features.shape[0]


def sample_clips(seq: ClipFeatureSequence, n: int) -> SampledClips:
    """Resample to exactly ``n`` clips at stride ``n_clips / n``.

    Each output row is the channel-wise max of the source rows in its
    stride window; when the source is shorter than ``n`` the nearest source
    clip is repeated.
    """
    if n < 1:
        raise ConfigError("number of sampled clips must be >= 1")
    src = seq.features
    total = src.shape[0]
    if total < 1:
        raise DataError("empty clip sequence")
    i = np.arange(n)
    lo = (i * total) // n
    hi = ((i + 1) * total) // n
    empty = hi <= lo
    near = np.minimum(((2 * i + 1) * total) // (2 * n), total - 1)
    lo = np.where(empty, near, lo)
    hi = np.where(empty, near + 1, hi)
    if total % n == 0:
        out = src.reshape(n, total // n, -1).max(axis=1)
    else:
        out = np.stack([src[a:b].max(axis=0) for a, b in zip(lo, hi)])
    return SampledClips(out, seq.duration / n, lo, hi)


def project_clip_features(clips: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-clip fully connected layer ``(..., N, d_in) -> (..., N, d_v)``."""
    if clips.shape[-1] != weight.shape[0]:
        raise ConfigError(f"clip features have {clips.shape[-1]} channels, projection expects {weight.shape[0]}")
    return ag.affine(clips, weight, bias)


# binary feature files ---------------------------------------------------------


def write_feature_file(path: str | Path, seq: ClipFeatureSequence) -> None:
    feats = np.ascontiguousarray(seq.features, dtype="<f4")
    header = _HEADER.pack(MAGIC, VERSION, feats.shape[0], feats.shape[1], float(seq.clip_duration))
    Path(path).write_bytes(header + feats.tobytes())


def read_feature_file(path: str | Path, video_id: str | None = None) -> ClipFeatureSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n_clips, d_in, tau = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n_clips == 0 or d_in == 0:
        raise DataError(f"{path}: header declares an empty feature matrix ({n_clips}x{d_in})")
    expected = _HEADER.size + 4 * n_clips * d_in
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    feats = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n_clips, d_in)
    return ClipFeatureSequence(feats.astype(np.float64), tau, video_id or Path(path).stem)


# manifests ------------------------------------------------------------------------


@dataclass
class Annotation:
    video_id: str
    feature_path: str
    query: str
    start_sec: float
    end_sec: float
    split: str = "train"

    def to_json(self) -> str:
        return json.dumps(
            {
                "video_id": self.video_id,
                "feature_path": self.feature_path,
                "query": self.query,
                "start_sec": self.start_sec,
                "end_sec": self.end_sec,
                "split": self.split,
            }
        )


@dataclass
class CorpusManifest:
    annotations: list[Annotation]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.annotations)

    def split(self, name: str) -> "CorpusManifest":
        return CorpusManifest([a for a in self.annotations if a.split == name], self.root)

    def feature_path(self, ann: Annotation) -> Path:
        p = Path(ann.feature_path)
        return p if p.is_absolute() else self.root / p

    def load_features(self) -> dict[str, ClipFeatureSequence]:
        cache: dict[str, ClipFeatureSequence] = {}
        for ann in self.annotations:
            if ann.video_id not in cache:
                cache[ann.video_id] = read_feature_file(self.feature_path(ann), ann.video_id)
        return cache

    def validate(self) -> None:
        for ann in self.annotations:
            if not self.feature_path(ann).exists():
                raise DataError(f"missing feature file for {ann.video_id}: {self.feature_path(ann)}")


def write_manifest(path: str | Path, annotations: Iterable[Annotation]) -> None:
    Path(path).write_text("".join(a.to_json() + "\n" for a in annotations), encoding="utf-8")


def read_manifest(path: str | Path) -> CorpusManifest:
    path = Path(path)
    anns = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            ann = Annotation(
                str(rec["video_id"]), str(rec["feature_path"]), str(rec["query"]),
                float(rec["start_sec"]), float(rec["end_sec"]), str(rec.get("split", "train")),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad manifest record ({exc})") from None
        if not 0 <= ann.start_sec < ann.end_sec:
            raise DataError(f"{path}:{lineno}: invalid span [{ann.start_sec}, {ann.end_sec}]")
        anns.append(ann)
    return CorpusManifest(anns, path.parent)

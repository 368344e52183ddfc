"""Synthetic corpus with planted activity segments and ordinal queries.

Each video is Gaussian background noise. One to three segments are planted,
each adding a fixed unit direction (one per activity) scaled by
``amplitude``. When one activity is planted twice, its queries carry an
ordinal: "for the first time" targets the earlier occurrence, "again" and
"for the second time" the later one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clips import Annotation, ClipFeatureSequence, CorpusManifest, write_feature_file, write_manifest

ACTIVITIES = (
    "plays the saxophone",
    "opens the door",
    "sits down on the couch",
    "drinks a cup of coffee",
    "throws a ball",
    "reads a book",
    "waves at the camera",
    "washes the dishes",
)
SUBJECTS = ("a person", "the person", "a guy", "someone")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CorpusSpec:
    n_videos: int = 1000
    clip_range: tuple[int, int] = (64, 128)
    d_in: int = 32
    clip_duration: float = 0.5
    noise: float = 0.5
    amplitude: float = 1.5
    length_range: tuple[float, float] = (0.2, 0.3)
    repeat_prob: float = 0.5
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)


def activity_directions(d_in: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if n > d_in:
        raise ValueError("need d_in >= number of activities for orthogonal directions")
    q, _ = np.linalg.qr(rng.standard_normal((d_in, d_in)))
    return q[:, :n].T.copy()


def _place(rng: np.random.Generator, n_clips: int, lengths: list[int]) -> list[int]:
    slack = n_clips - sum(lengths) - (len(lengths) - 1)
    cuts = np.sort(rng.integers(0, slack + 1, size=len(lengths)))
    starts, pos = [], 0
    prev = 0
    for ln, c in zip(lengths, cuts):
        pos += int(c - prev)
        prev = c
        starts.append(pos)
        pos += ln + 1
    return starts


def _query(rng: np.random.Generator, activity: str, ordinal: str | None) -> str:
    subject = SUBJECTS[rng.integers(len(SUBJECTS))]
    if ordinal is None:
        return f"{subject} {activity}"
    if ordinal == "first":
        return f"{subject} {activity} for the first time"
    if ordinal == "again":
        return f"{subject} {activity} again"
    return f"{subject} {activity} for the second time"


def generate_synthetic_corpus(out_dir: str | Path, seed: int = 42, spec: CorpusSpec | None = None) -> CorpusManifest:
    spec = spec or CorpusSpec()
    if spec.n_videos < 1:
        raise ValueError("n_videos must be >= 1")
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    dirs = activity_directions(spec.d_in, len(ACTIVITIES), rng)

    order = rng.permutation(spec.n_videos)
    n_train = int(round(spec.split_fractions[0] * spec.n_videos))
    n_val = int(round(spec.split_fractions[1] * spec.n_videos))
    split_of = np.empty(spec.n_videos, dtype=object)
    split_of[order[:n_train]] = "train"
    split_of[order[n_train:n_train + n_val]] = "val"
    split_of[order[n_train + n_val:]] = "test"

    anns: list[Annotation] = []
    plan: dict[str, list[dict]] = {}
    for v in range(spec.n_videos):
        vid = f"vid{v:05d}"
        n_clips = int(rng.integers(spec.clip_range[0], spec.clip_range[1] + 1))
        n_seg = int(rng.integers(1, 4))
        acts = [int(a) for a in rng.choice(len(ACTIVITIES), size=n_seg, replace=False)]
        if n_seg >= 2 and rng.random() < spec.repeat_prob:
            acts[1] = acts[0]
            perm = rng.permutation(n_seg)
            acts = [acts[i] for i in perm]
        lo, hi = spec.length_range
        lengths = [max(1, int(round(rng.uniform(lo, hi) * n_clips))) for _ in range(n_seg)]
        starts = _place(rng, n_clips, lengths)

        feats = spec.noise * rng.standard_normal((n_clips, spec.d_in))
        for a, s, ln in zip(acts, starts, lengths):
            feats[s:s + ln] += spec.amplitude * dirs[a]
        seq = ClipFeatureSequence(feats.astype(np.float32).astype(np.float64), spec.clip_duration, vid)
        rel = f"features/{vid}.bin"
        write_feature_file(out / rel, seq)

        plan[vid] = [{"activity": ACTIVITIES[a], "start_clip": s, "n_clips": ln}
                     for a, s, ln in sorted(zip(acts, starts, lengths), key=lambda t: t[1])]
        tau = spec.clip_duration
        for a in sorted(set(acts)):
            occ = [(s, ln) for act, s, ln in zip(acts, starts, lengths) if act == a]
            if len(occ) == 1:
                targets = [(None, occ[0])]
            else:
                second = ("again", "second")[int(rng.integers(2))]
                targets = [("first", occ[0]), (second, occ[1])]
            for ordinal, (s, ln) in targets:
                anns.append(Annotation(vid, rel, _query(rng, ACTIVITIES[a], ordinal),
                                       s * tau, (s + ln) * tau, str(split_of[v])))

    write_manifest(out / "manifest.jsonl", anns)
    for name in SPLITS:
        write_manifest(out / f"{name}.jsonl", [a for a in anns if a.split == name])
    report = {
        "seed": seed,
        "videos": spec.n_videos,
        "queries": len(anns),
        "per_split": {name: sum(a.split == name for a in anns) for name in SPLITS},
        "ordinal_queries": sum(is_ordinal(a.query) for a in anns),
    }
    (out / "plan.json").write_text(json.dumps(plan, sort_keys=True) + "\n", encoding="utf-8")
    (out / "generation_report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return CorpusManifest(anns, out)


def is_ordinal(query: str) -> bool:
    words = query.lower().split()
    return any(w in ("first", "again", "second") for w in words)


def planted_direction(query: str, d_in: int, seed: int) -> np.ndarray:
    """Recover the direction used for the activity named in ``query``."""
    rng = np.random.default_rng(seed)
    dirs = activity_directions(d_in, len(ACTIVITIES), rng)
    for i, act in enumerate(ACTIVITIES):
        if act in query:
            return dirs[i]
    raise KeyError(f"no known activity in {query!r}")

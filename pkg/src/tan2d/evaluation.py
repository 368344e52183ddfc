"""NMS, Rank n@m and the discretisation upper bound."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EvalError
from .temporal_map import CandidateMask, MomentSpan, iou, seconds_iou_grid

DEFAULT_NS = (1, 5)
DEFAULT_MS = (0.3, 0.5, 0.7)


def nms(candidates: Sequence[tuple[MomentSpan, float]], threshold: float) -> list[tuple[MomentSpan, float]]:
    """Greedy suppression: keep the best remaining span, drop those with IoU >= threshold to it."""
    order = sorted(candidates, key=lambda c: (-c[1], c[0].a, c[0].b))
    kept: list[tuple[MomentSpan, float]] = []
    while order:
        best = order.pop(0)
        kept.append(best)
        order = [c for c in order if iou(c[0], best[0]) < threshold]
    return kept


def nms_arrays(pairs: np.ndarray, scores: np.ndarray, threshold: float, limit: int | None = None) -> np.ndarray:
    """Vectorised :func:`nms` on ``(C, 2)`` spans; returns survivor row indices in selection order."""
    order = np.lexsort((pairs[:, 1], pairs[:, 0], -scores))
    a, b = pairs[order, 0], pairs[order, 1]
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(order[i])
        if limit is not None and len(kept) >= limit:
            break
        inter = np.maximum(0, np.minimum(b, b[i]) - np.maximum(a, a[i]) + 1)
        union = (b - a + 1) + (b[i] - a[i] + 1) - inter
        alive &= inter / union < threshold
    return np.asarray(kept, dtype=np.intp)


def rank_n_at_m(predictions: Sequence[Sequence[tuple[float, float]]], gts: Sequence[tuple[float, float]],
                n: int, m: float) -> float:
    """Percent of queries whose top-``n`` predictions contain one with IoU > ``m``."""
    if len(predictions) != len(gts):
        raise EvalError(f"{len(predictions)} predictions for {len(gts)} ground truths")
    if not gts:
        raise EvalError("no queries to evaluate")
    if n < 1:
        raise EvalError("n must be >= 1")
    hits = 0
    for preds, gt in zip(predictions, gts):
        if any(_iou_sec(p, gt) > m for p in list(preds)[:n]):
            hits += 1
    return 100.0 * hits / len(gts)


def _iou_sec(x, y) -> float:
    inter = max(0.0, min(x[1], y[1]) - max(x[0], y[0]))
    union = (x[1] - x[0]) + (y[1] - y[0]) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class EvalReport:
    ranks: dict[tuple[int, float], float]
    candidates: int
    queries: int
    seconds: float = 0.0
    loss: float | None = None
    extra: dict = field(default_factory=dict)

    def check(self) -> None:
        ns = sorted({n for n, _ in self.ranks})
        ms = sorted({m for _, m in self.ranks})
        for (n, m), v in self.ranks.items():
            if not 0.0 <= v <= 100.0:
                raise EvalError(f"Rank{n}@{m} = {v} outside [0, 100]")
        for m in ms:
            for lo, hi in zip(ns, ns[1:]):
                if self.ranks[(lo, m)] > self.ranks[(hi, m)]:
                    raise EvalError(f"Rank{lo}@{m} exceeds Rank{hi}@{m}")
        for n in ns:
            for lo, hi in zip(ms, ms[1:]):
                if self.ranks[(n, lo)] < self.ranks[(n, hi)]:
                    raise EvalError(f"Rank{n}@{hi} exceeds Rank{n}@{lo}")

    def key(self, n: int, m: float) -> str:
        return f"rank{n}@{m:g}"

    def as_dict(self) -> dict:
        out = {self.key(n, m): v for (n, m), v in sorted(self.ranks.items())}
        out.update(candidates=self.candidates, queries=self.queries, seconds=round(self.seconds, 3))
        if self.loss is not None:
            out["loss"] = self.loss
        out.update(self.extra)
        return out


def build_report(predictions, gts, ns=DEFAULT_NS, ms=DEFAULT_MS, candidates: int = 0) -> EvalReport:
    ranks = {(n, m): rank_n_at_m(predictions, gts, n, m) for n in ns for m in ms}
    rep = EvalReport(ranks, candidates, len(gts))
    rep.check()
    return rep


def best_candidate_iou(start: float, end: float, duration: float, mask: CandidateMask) -> float:
    tau = duration / mask.n
    return float(seconds_iou_grid(mask, tau, start, end).max())


def upper_bound(gts: Sequence[tuple[float, float, float]], mask: CandidateMask,
                thresholds: Sequence[float] = DEFAULT_MS) -> dict[float, float]:
    """Score of an oracle that always picks the valid candidate closest to the truth.

    ``gts`` holds ``(start_sec, end_sec, video_duration)``; clips are
    ``duration / N`` seconds long.
    """
    if not gts:
        raise EvalError("no ground truths")
    best = np.array([best_candidate_iou(s, e, d, mask) for s, e, d in gts])
    return {m: 100.0 * float((best > m).mean()) for m in thresholds}

"""2D temporal map: candidate mask, moment feature maps, IoU labels."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import AnnotationError, ConfigError

DENSE_LIMIT = 16
# float slack so that exact clip boundaries survive the seconds round trip
_EDGE = 1e-9


@dataclass(frozen=True)
class MomentSpan:
    a: int
    b: int

    def __post_init__(self):
        if not 0 <= self.a <= self.b:
            raise AnnotationError(f"invalid span ({self.a}, {self.b})")

    @property
    def length(self) -> int:
        return self.b - self.a + 1

    def seconds(self, tau: float) -> tuple[float, float]:
        return span_to_seconds(self, tau)


def sparse_step(a: int, b: int) -> tuple[int, int]:
    """Stride ``s`` and offset ``s'`` for a span; k is clamped to >= 1."""
    length = b - a + 1
    k = max(1, math.ceil(math.log2(length / 8)))
    s = 2 ** (k - 1)
    s_off = 0 if k == 1 else 2 ** (k + 2) - 1
    return s, s_off


def is_candidate(a: int, b: int, n: int) -> bool:
    if not 0 <= a <= b < n:
        return False
    if n <= DENSE_LIMIT:
        return True
    s, s_off = sparse_step(a, b)
    return a % s == 0 and (b - s_off) % s == 0


@dataclass(frozen=True)
class CandidateMask:
    valid: np.ndarray  # (N, N) bool
    pairs: np.ndarray  # (C, 2) row-major (a, b)

    @property
    def n(self) -> int:
        return self.valid.shape[0]

    @property
    def count(self) -> int:
        return len(self.pairs)

    @property
    def flat_index(self) -> np.ndarray:
        return self.pairs[:, 0] * self.n + self.pairs[:, 1]


@lru_cache(maxsize=64)
def _mask_cached(n: int, dense: bool) -> CandidateMask:
    valid = np.zeros((n, n), dtype=bool)
    for a in range(n):
        for b in range(a, n):
            valid[a, b] = True if dense else is_candidate(a, b, n)
    valid.setflags(write=False)
    pairs = np.argwhere(valid)
    pairs.setflags(write=False)
    return CandidateMask(valid, pairs)


def candidate_mask(n: int, dense: bool = False) -> CandidateMask:
    """Valid (a, b) cells. ``dense=True`` enumerates every a <= b regardless of N."""
    if n < 1:
        raise ConfigError("N must be >= 1")
    return _mask_cached(int(n), bool(dense))


# feature maps ------------------------------------------------------------------------


def build_map_pool(clips: Tensor, mask: CandidateMask) -> Tensor:
    """Max-pool clip features into a ``(..., N, N, d)`` map.

    Gradient goes to the per-channel argmax clip; ties go to the earliest clip.
    """
    squeeze = clips.data.ndim == 2
    x = clips.data[None] if squeeze else clips.data
    B, N, d = x.shape
    if N != mask.n:
        raise ConfigError(f"map expects {mask.n} clips, got {N}")
    out = np.zeros((B, N, N, d))
    arg = np.zeros((B, N, N, d), dtype=np.intp)
    run = x.copy()
    run_arg = np.broadcast_to(np.arange(N)[None, :, None], (B, N, d)).copy()
    for length in range(1, N + 1):
        starts = N - length + 1
        if length > 1:
            nxt = x[:, length - 1:, :]
            better = nxt > run[:, :starts]
            run = np.where(better, nxt, run[:, :starts])
            run_arg = np.where(better, np.arange(length - 1, N)[None, :, None], run_arg[:, :starts])
        a = np.arange(starts)
        out[:, a, a + length - 1] = run
        arg[:, a, a + length - 1] = run_arg
    keep = mask.valid[None, :, :, None]
    out *= keep
    arg = np.where(keep, arg, -1)

    def backward(g):
        g = g.reshape(B, N, N, d)
        sel = arg >= 0
        rows = np.broadcast_to(np.arange(B)[:, None, None, None], arg.shape)[sel]
        chans = np.broadcast_to(np.arange(d), arg.shape)[sel]
        flat = (rows * N + arg[sel]) * d + chans
        gx = np.bincount(flat, weights=g[sel], minlength=B * N * d).reshape(B, N, d)
        return (gx[0] if squeeze else gx,)

    result = out[0] if squeeze else out
    return Tensor.from_op(result, (clips,), backward, "map_pool")


class MapConvStack:
    """Stack of kernel-2, stride-1, unpadded 1-D convolutions over clips.

    Layer ``j`` output at offset ``a`` represents the span ``(a, a + j)``.
    """

    def __init__(self, dim: int, depth: int, rng: np.random.Generator | None = None):
        if depth < 1:
            raise ConfigError("conv map stack needs depth >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(2 * dim)
        self.depth = depth
        self.dim = dim
        self.weights = [ag.parameter(rng.uniform(-bound, bound, (2 * dim, dim)), f"mapconv{i}.weight")
                        for i in range(depth)]
        self.biases = [ag.parameter(np.zeros(dim), f"mapconv{i}.bias") for i in range(depth)]

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (*self.weights, *self.biases)}

    def outputs(self, clips: Tensor) -> list[Tensor]:
        """Per-length features; entry ``j`` has shape ``(..., N - j, d)``."""
        n = clips.shape[-2]
        if self.depth > n:
            raise ConfigError(f"conv map stack depth {self.depth} exceeds N={n}")
        outs = [clips]
        cur = clips
        for w, b in zip(self.weights, self.biases):
            m = cur.shape[-2]
            if m < 2:
                break
            pair = ag.concat([cur[..., : m - 1, :], cur[..., 1:, :]], axis=-1)
            cur = ag.affine(pair, w, b)
            outs.append(cur)
        return outs


def build_map_conv(clips: Tensor, stack: MapConvStack, mask: CandidateMask) -> Tensor:
    """Moment map from stacked convolutions; longer spans than the stack reaches are max-pooled."""
    squeeze = clips.data.ndim == 2
    x = ag.reshape(clips, (1, *clips.shape)) if squeeze else clips
    B, N, d = x.shape
    pooled = build_map_pool(x, mask)
    outs = stack.outputs(x)
    covered = np.zeros((N, N), dtype=bool)
    pieces = []
    flat_idx = []
    for j, o in enumerate(outs):
        a = np.arange(N - j)
        pieces.append(o)
        flat_idx.append(a * N + a + j)
        covered[a, a + j] = True
    stacked = ag.concat(pieces, axis=1)  # (B, sum_j (N - j), d)
    idx = np.concatenate(flat_idx)
    target = np.zeros(N * N, dtype=bool)
    target[idx] = True
    order = np.full(N * N, -1, dtype=np.intp)
    order[idx] = np.arange(len(idx))

    def scatter_fwd(src: np.ndarray) -> np.ndarray:
        out = np.zeros((B, N * N, d))
        out[:, idx] = src
        return out.reshape(B, N, N, d)

    conv_map = Tensor.from_op(
        scatter_fwd(stacked.data), (stacked,),
        lambda g: (g.reshape(B, N * N, d)[:, idx],), "scatter_diag",
    )
    keep_conv = (covered & mask.valid)[None, :, :, None]
    keep_pool = (~covered & mask.valid)[None, :, :, None]
    out = ag.masked(conv_map, keep_conv) + ag.masked(pooled, keep_pool)
    return ag.reshape(out, (N, N, d)) if squeeze else out


# IoU and labels ----------------------------------------------------------------------


def iou(x: MomentSpan, y: MomentSpan) -> float:
    inter = max(0, min(x.b, y.b) - max(x.a, y.a) + 1)
    union = x.length + y.length - inter
    return inter / union


def iou_seconds(x: tuple[float, float], y: tuple[float, float]) -> float:
    inter = max(0.0, min(x[1], y[1]) - max(x[0], y[0]))
    union = (x[1] - x[0]) + (y[1] - y[0]) - inter
    return inter / union if union > 0 else 0.0


def scale_iou(o, t_min: float, t_max: float):
    """Piecewise-linear rescale of IoU between two thresholds; works on scalars and arrays."""
    if not 0 <= t_min < t_max <= 1:
        raise ConfigError(f"need 0 <= t_min < t_max <= 1, got {t_min}, {t_max}")
    o_arr = np.asarray(o, dtype=np.float64)
    y = np.where(o_arr <= t_min, 0.0, np.where(o_arr >= t_max, 1.0, (o_arr - t_min) / (t_max - t_min)))
    return float(y) if y.ndim == 0 else y


def _iou_grid(pairs: np.ndarray, a: int, b: int) -> np.ndarray:
    inter = np.maximum(0, np.minimum(pairs[:, 1], b) - np.maximum(pairs[:, 0], a) + 1)
    union = (pairs[:, 1] - pairs[:, 0] + 1) + (b - a + 1) - inter
    return inter / union


@dataclass
class LabelMap:
    y: np.ndarray  # (N, N)
    iou: np.ndarray  # (N, N)


def label_map(gt: MomentSpan, mask: CandidateMask, t_min: float, t_max: float) -> LabelMap:
    n = mask.n
    if gt.b >= n:
        raise AnnotationError(f"ground truth {gt} outside a {n}-clip map")
    o = np.zeros((n, n))
    y = np.zeros((n, n))
    pr = mask.pairs
    vals = _iou_grid(pr, gt.a, gt.b)
    o[pr[:, 0], pr[:, 1]] = vals
    y[pr[:, 0], pr[:, 1]] = scale_iou(vals, t_min, t_max)
    return LabelMap(y, o)


def candidate_seconds(mask: CandidateMask, tau: float) -> np.ndarray:
    """(C, 2) start/end seconds of every valid candidate."""
    return np.stack([mask.pairs[:, 0] * tau, (mask.pairs[:, 1] + 1) * tau], axis=1)


def seconds_iou_grid(mask: CandidateMask, tau: float, start: float, end: float) -> np.ndarray:
    cs = candidate_seconds(mask, tau)
    inter = np.maximum(0.0, np.minimum(cs[:, 1], end) - np.maximum(cs[:, 0], start))
    union = (cs[:, 1] - cs[:, 0]) + (end - start) - inter
    return inter / union


def label_map_seconds(start: float, end: float, tau: float, mask: CandidateMask,
                      t_min: float, t_max: float) -> LabelMap:
    """Like :func:`label_map` but IoU is measured against the unquantised annotation."""
    if not 0 <= start < end:
        raise AnnotationError(f"invalid annotation [{start}, {end}]")
    n = mask.n
    o = np.zeros((n, n))
    y = np.zeros((n, n))
    pr = mask.pairs
    vals = seconds_iou_grid(mask, tau, start, end)
    o[pr[:, 0], pr[:, 1]] = vals
    y[pr[:, 0], pr[:, 1]] = scale_iou(vals, t_min, t_max)
    return LabelMap(y, o)


def seconds_to_span(start_sec: float, end_sec: float, tau: float, n: int) -> MomentSpan:
    if not start_sec < end_sec:
        raise AnnotationError(f"annotation start {start_sec} is not before end {end_sec}")
    if start_sec < 0:
        raise AnnotationError(f"negative annotation start {start_sec}")
    a = min(max(math.floor(start_sec / tau + _EDGE), 0), n - 1)
    b = min(max(math.ceil(end_sec / tau - _EDGE) - 1, a), n - 1)
    return MomentSpan(a, b)


def span_to_seconds(span: MomentSpan, tau: float) -> tuple[float, float]:
    return span.a * tau, (span.b + 1) * tau

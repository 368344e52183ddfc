"""Fusion, masked temporal-adjacent convolutions, score head and the full network."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .clips import project_clip_features
from .errors import ConfigError, Tan2DError
from .temporal_map import CandidateMask, MapConvStack, MomentSpan, build_map_conv, build_map_pool, candidate_mask
from .text import QueryEncoder


# fusion -------------------------------------------------------------------------


def fuse(sentence: Tensor, moment_map: Tensor, w_sentence: Tensor, w_map: Tensor,
         mask: CandidateMask, eps: float = 1e-8, norm: str = "channel") -> Tensor:
    """Project both modalities, take their Hadamard product and l2-normalise.

    ``sentence`` is ``(B, d_s)``, ``moment_map`` is ``(B, N, N, d_v)``.
    ``norm="channel"`` normalises each map cell; ``"frobenius"`` divides
    each sample's whole map by its Frobenius norm.
    """
    if sentence.shape[-1] != w_sentence.shape[0] or moment_map.shape[-1] != w_map.shape[0]:
        raise ConfigError("fusion projections do not match input feature sizes")
    if w_sentence.shape[1] != w_map.shape[1]:
        raise ConfigError("fusion projections disagree on the joint dimension")
    B, N = moment_map.shape[0], moment_map.shape[1]
    d_o = w_map.shape[1]
    s = ag.affine(sentence, w_sentence)
    s = ag.broadcast_to(ag.reshape(s, (B, 1, 1, d_o)), (B, N, N, d_o))
    m = ag.affine(moment_map, w_map)
    joint = ag.masked(s * m, mask.valid[None, :, :, None])
    if norm == "channel":
        return ag.l2_normalize_channels(joint, eps)
    if norm == "frobenius":
        return ag.l2_normalize_whole(joint, eps)
    raise ConfigError(f"unknown fusion norm {norm!r}")


# masked convolution ---------------------------------------------------------------


@lru_cache(maxsize=64)
def _window_tables(valid_bytes: bytes, n: int, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flat indices into a zero-padded ``(n + 2r)^2`` grid for every valid cell.

    Returns ``(cells, forward, flipped)``: ``forward[q, o]`` is the input
    read by kernel offset ``o`` at cell ``q``; ``flipped`` is the same window
    mirrored, used to route output gradients back to inputs.
    """
    valid = np.frombuffer(valid_bytes, dtype=bool).reshape(n, n)
    r = (k - 1) // 2
    side = n + 2 * r
    cells = np.argwhere(valid)
    i, j = np.divmod(np.arange(k * k), k)
    ca, cb = cells[:, :1], cells[:, 1:]
    forward = (ca + i) * side + (cb + j)
    flipped = (ca + 2 * r - i) * side + (cb + 2 * r - j)
    return (cells[:, 0] * side + cells[:, 1] + r * side + r), forward, flipped


def _padded(x: np.ndarray, valid: np.ndarray, r: int) -> np.ndarray:
    B, N, _, c = x.shape
    xp = np.zeros((B, N + 2 * r, N + 2 * r, c))
    xp[:, r:r + N, r:r + N] = x * valid
    return xp.reshape(B, -1, c)


def masked_conv2d(x: Tensor, weight: Tensor, bias: Tensor, mask: CandidateMask, k: int) -> Tensor:
    """One KxK convolution evaluated only at valid cells, reading only valid cells.

    ``x`` is ``(B, N, N, c_in)``; ``weight`` is ``(k*k*c_in, c_out)`` laid out
    as (row offset, column offset, channel). Cells outside the mask, or
    outside the map, contribute zero and the output there is zero.
    """
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    B, N, _, c_in = x.shape
    c_out = weight.shape[1]
    if weight.shape[0] != k * k * c_in:
        raise ConfigError(f"conv weight {weight.shape} does not fit kernel {k} with {c_in} channels")
    r = (k - 1) // 2
    _, fwd, flip = _window_tables(mask.valid.tobytes(), N, k)
    va, vb = mask.pairs[:, 0], mask.pairs[:, 1]
    valid = mask.valid[None, :, :, None]
    cols = np.take(_padded(x.data, valid, r), fwd, axis=1).reshape(B * len(va), k * k * c_in)
    wd = weight.data
    y = cols @ wd + bias.data
    out = np.zeros((B, N, N, c_out))
    out[:, va, vb] = y.reshape(B, len(va), c_out)

    def backward(g):
        gv = g[:, va, vb].reshape(-1, c_out)
        gw = cols.T @ gv
        gb = gv.sum(axis=0)
        gcols = np.take(_padded(g, valid, r), flip, axis=1).reshape(B * len(va), k * k * c_out)
        w_flip = wd.reshape(k * k, c_in, c_out).transpose(0, 2, 1).reshape(k * k * c_out, c_in)
        gx = np.zeros((B, N, N, c_in))
        gx[:, va, vb] = (gcols @ w_flip).reshape(B, len(va), c_in)
        return gx, gw, gb

    return Tensor.from_op(out, (x, weight, bias), backward, "masked_conv")


class TanConvStack:
    def __init__(self, dim: int, layers: int, kernel: int, rng: np.random.Generator | None = None):
        if kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel}")
        if layers < 1:
            raise ConfigError("need at least one conv layer")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernel = kernel
        self.layers = []
        fan_in = kernel * kernel * dim
        bound = 1.0 / math.sqrt(fan_in)
        for i in range(layers):
            w = ag.parameter(rng.uniform(-bound, bound, (fan_in, dim)), f"tan.conv{i}.weight")
            b = ag.parameter(np.zeros(dim), f"tan.conv{i}.bias")
            self.layers.append((w, b))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for w, b in self.layers:
            out[w.name] = w
            out[b.name] = b
        return out


def masked_conv_forward(x: Tensor, stack: TanConvStack, mask: CandidateMask) -> Tensor:
    """Apply every layer (conv then ReLU); invalid cells are zero after each layer."""
    h = x
    for w, b in stack.layers:
        h = ag.relu(masked_conv2d(h, w, b, mask, stack.kernel))
    return h


def score_head(h: Tensor, weight: Tensor, bias: Tensor, mask: CandidateMask) -> Tensor:
    """Per-cell linear map to a logit, sigmoid, zero outside the mask. Returns ``(B, N, N)``."""
    B, N = h.shape[0], h.shape[1]
    logits = ag.reshape(ag.affine(h, weight, bias), (B, N, N))
    return ag.masked(ag.sigmoid(logits), mask.valid[None])


def best_moment(scores: np.ndarray, mask: CandidateMask) -> MomentSpan:
    """Highest-scoring valid cell, ties to the smaller start then smaller end."""
    if mask.count == 0:
        raise Tan2DError("candidate mask is empty")
    scores = np.asarray(scores)
    vals = scores[mask.pairs[:, 0], mask.pairs[:, 1]]
    a, b = mask.pairs[int(np.argmax(vals))]
    return MomentSpan(int(a), int(b))


# full network ---------------------------------------------------------------------


@dataclass
class ModelConfig:
    vocab_size: int
    d_in: int
    n_clips: int = 16
    d_s: int = 512
    d_v: int = 512
    d_o: int = 512
    layers: int = 8
    kernel: int = 5
    map_type: str = "pool"  # or "conv"
    map_conv_depth: int = 15
    dense_mask: bool = False
    fusion_norm: str = "channel"
    norm_eps: float = 1e-8
    train_embeddings: bool = True

    def validate(self) -> None:
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.map_type not in ("pool", "conv"):
            raise ConfigError(f"map_type must be 'pool' or 'conv', got {self.map_type!r}")
        if self.fusion_norm not in ("channel", "frobenius"):
            raise ConfigError(f"fusion_norm must be 'channel' or 'frobenius', got {self.fusion_norm!r}")
        for key in ("vocab_size", "d_in", "n_clips", "d_s", "d_v", "d_o", "layers"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class TAN:
    """Query encoder, clip projection, moment map, fusion, conv stack, head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.mask = candidate_mask(cfg.n_clips, dense=cfg.dense_mask)
        self.encoder = QueryEncoder(cfg.vocab_size, cfg.d_s, rng, cfg.train_embeddings)
        bound = 1.0 / math.sqrt(cfg.d_in)
        self.clip_w = ag.parameter(rng.uniform(-bound, bound, (cfg.d_in, cfg.d_v)), "clip.weight")
        self.clip_b = ag.parameter(np.zeros(cfg.d_v), "clip.bias")
        self.map_conv = MapConvStack(cfg.d_v, min(cfg.map_conv_depth, cfg.n_clips - 1) or 1, rng) \
            if cfg.map_type == "conv" else None
        self.fuse_s = ag.parameter(rng.uniform(-1, 1, (cfg.d_s, cfg.d_o)) / math.sqrt(cfg.d_s), "fuse.sentence")
        self.fuse_m = ag.parameter(rng.uniform(-1, 1, (cfg.d_v, cfg.d_o)) / math.sqrt(cfg.d_v), "fuse.map")
        self.conv = TanConvStack(cfg.d_o, cfg.layers, cfg.kernel, rng)
        self.head_w = ag.parameter(rng.uniform(-1, 1, (cfg.d_o, 1)) / math.sqrt(cfg.d_o), "head.weight")
        self.head_b = ag.parameter(np.zeros(1), "head.bias")

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors by name."""
        out = dict(self.encoder.parameters())
        out.update({t.name: t for t in (self.clip_w, self.clip_b)})
        if self.map_conv is not None:
            out.update(self.map_conv.parameters())
        out.update({t.name: t for t in (self.fuse_s, self.fuse_m)})
        out.update(self.conv.parameters())
        out.update({t.name: t for t in (self.head_w, self.head_b)})
        return out

    def state_tensors(self) -> dict[str, Tensor]:
        """Everything saved in a checkpoint, trainable or not."""
        out = self.parameters()
        out.update(self.encoder.state_tensors())
        return dict(sorted(out.items()))

    def moment_map(self, clips: Tensor) -> Tensor:
        feats = project_clip_features(clips, self.clip_w, self.clip_b)
        if self.map_conv is not None:
            return build_map_conv(feats, self.map_conv, self.mask)
        return build_map_pool(feats, self.mask)

    def forward(self, tokens: Sequence[Sequence[int]], clips: np.ndarray | Tensor) -> Tensor:
        """Score maps ``(B, N, N)`` for a batch of queries and ``(B, N, d_in)`` clip features."""
        clips = clips if isinstance(clips, Tensor) else ag.tensor(clips)
        if clips.data.ndim != 3 or clips.shape[1] != self.cfg.n_clips or clips.shape[2] != self.cfg.d_in:
            raise ConfigError(f"expected clips of shape (B, {self.cfg.n_clips}, {self.cfg.d_in}), got {clips.shape}")
        sentence = self.encoder.encode_batch(tokens)
        fmap = self.moment_map(clips)
        fused = fuse(sentence, fmap, self.fuse_s, self.fuse_m, self.mask, self.cfg.norm_eps, self.cfg.fusion_norm)
        hidden = masked_conv_forward(fused, self.conv, self.mask)
        return score_head(hidden, self.head_w, self.head_b, self.mask)

    __call__ = forward

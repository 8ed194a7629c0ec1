"""Encoder block families: multi-scale deformable, shifted-window, ConvNeXt.

Token maps are channel-last throughout: (B, N, d) token lists for the
deformable family and (B, H, W, d) grids for the other two.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import (
    FFN,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    ffn_params,
    linear_params,
    mha_params,
    sine_embedding,
    xavier,
)
from .tensor import Tensor

BLOCK_KINDS = ("none", "deformable", "window", "convnext")


def reference_points(shapes) -> np.ndarray:
    """Normalised cell centres (x, y) of every level, concatenated row-major."""
    refs = []
    for h, w in shapes:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        refs.append(np.stack([xs.ravel(), ys.ravel()], axis=-1))
    return np.concatenate(refs, axis=0)


class MSDeformAttn(Module):
    """Each token reads heads x levels x points bilinear samples around its reference point."""

    def __init__(self, d: int, heads: int, levels: int, points: int, rng: np.random.Generator):
        if d % heads:
            raise ConfigError(f"d={d} not divisible by heads={heads}")
        self.heads, self.levels, self.points = heads, levels, points
        self.sampling_offsets = Linear(d, heads * levels * points * 2, rng, init="zero")
        theta = np.arange(heads) * (2.0 * math.pi / heads)
        grid = np.stack([np.cos(theta), np.sin(theta)], -1)
        grid = grid / np.abs(grid).max(-1, keepdims=True)
        grid = np.tile(grid[:, None, None, :], (1, levels, points, 1))
        grid *= (np.arange(points) + 1.0)[None, None, :, None]
        self.sampling_offsets.bias.data = grid.reshape(-1)
        self.attention_weights = Linear(d, heads * levels * points, rng, init="zero")
        self.value_proj = Linear(d, d, rng)
        self.output_proj = Linear(d, d, rng)

    def __call__(self, query: Tensor, value_in: Tensor, ref: np.ndarray, shapes) -> Tensor:
        B, N, d = query.shape
        H, L, P = self.heads, self.levels, self.points
        if len(shapes) != L:
            raise ConfigError(f"block built for {L} levels, got {len(shapes)}")
        dh = d // H
        value = self.value_proj(value_in)
        off = self.sampling_offsets(query).reshape(B, N, H, L, P, 2)
        attn = T.softmax(self.attention_weights(query).reshape(B, N, H, L * P), axis=-1)
        attn = attn.reshape(B, N, H, L, P)
        out, start = None, 0
        for lvl, (h, w) in enumerate(shapes):
            v = value[:, start:start + h * w].reshape(B, h, w, H, dh)
            v = v.transpose(0, 3, 1, 2, 4).reshape(B * H, h, w, dh)
            start += h * w
            base = ref * np.array([w, h], dtype=np.float64)  # level pixel units
            loc = off[:, :, :, lvl] + base[None, :, None, None, :]  # (B, N, H, P, 2)
            pts = loc.transpose(0, 2, 1, 3, 4).reshape(B * H, N * P, 2)
            sampled = T.sample(v, pts).reshape(B, H, N, P, dh)
            a = attn[:, :, :, lvl].transpose(0, 2, 1, 3).reshape(B, H, N, 1, P)
            contrib = (a @ sampled).reshape(B, H, N, dh)
            out = contrib if out is None else out + contrib
        out = out.transpose(0, 2, 1, 3).reshape(B, N, d)
        return self.output_proj(out)


class DeformableBlock(Module):
    """MSDeformAttn -> LayerNorm -> FFN -> LayerNorm (post-norm residuals)."""

    def __init__(self, d, heads, levels, points, ffn_dim, rng):
        self.attn = MSDeformAttn(d, heads, levels, points, rng)
        self.norm1 = LayerNorm(d)
        self.ffn = FFN(d, ffn_dim, rng)
        self.norm2 = LayerNorm(d)

    def __call__(self, x: Tensor, pos: np.ndarray, ref: np.ndarray, shapes) -> Tensor:
        x = self.norm1(x + self.attn(x + pos, x, ref, shapes))
        return self.norm2(x + self.ffn(x))


def deformable_block_params(d, heads, levels, points, ffn_dim) -> int:
    hlp = heads * levels * points
    return (linear_params(d, 2 * hlp) + linear_params(d, hlp) + 2 * linear_params(d, d)
            + 4 * d + ffn_params(d, ffn_dim))


def relative_position_index(ws: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(ws), np.arange(ws), indexing="ij")).reshape(2, -1)
    rel = (coords[:, :, None] - coords[:, None, :]).transpose(1, 2, 0) + (ws - 1)
    return rel[..., 0] * (2 * ws - 1) + rel[..., 1]


def window_partition(x: Tensor, ws: int) -> Tensor:
    """(B, Hp, Wp, d) -> (B, nW, ws*ws, d)."""
    B, Hp, Wp, d = x.shape
    x = x.reshape(B, Hp // ws, ws, Wp // ws, ws, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (Hp // ws) * (Wp // ws), ws * ws, d)


def window_merge(x: Tensor, ws: int, Hp: int, Wp: int) -> Tensor:
    B, _, _, d = x.shape
    x = x.reshape(B, Hp // ws, Wp // ws, ws, ws, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, Hp, Wp, d)


def shift_mask(Hp: int, Wp: int, ws: int, shift: int) -> np.ndarray:
    """Additive (nW, n, n) mask blocking attention across rolled-region seams."""
    label = np.zeros((Hp, Wp))
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            label[hs, wsl] = cnt
            cnt += 1
    lw = label.reshape(Hp // ws, ws, Wp // ws, ws).transpose(0, 2, 1, 3).reshape(-1, ws * ws)
    return np.where(lw[:, :, None] != lw[:, None, :], -1e9, 0.0)


class WindowBlock(Module):
    """LayerNorm -> W-MSA (optionally half-window shifted) -> LayerNorm -> FFN."""

    def __init__(self, d, heads, window, shifted, ffn_dim, rng):
        self.window, self.shifted, self.heads = window, shifted, heads
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.rel_bias = Parameter(np.clip(rng.normal(0, 0.02, ((2 * window - 1) ** 2, heads)),
                                          -0.04, 0.04))
        self.norm2 = LayerNorm(d)
        self.ffn = FFN(d, ffn_dim, rng)
        self._index = relative_position_index(window)

    def position_bias(self) -> Tensor:
        n = self.window ** 2
        return self.rel_bias[self._index.reshape(-1)].reshape(n, n, self.heads).transpose(2, 0, 1)

    def __call__(self, x: Tensor) -> Tensor:
        B, H, W, d = x.shape
        ws = self.window
        shift = ws // 2 if self.shifted and min(H, W) > ws else 0
        Hp, Wp = -(-H // ws) * ws, -(-W // ws) * ws
        h = T.pad(self.norm1(x), ((0, 0), (0, Hp - H), (0, Wp - W), (0, 0)))
        if shift:
            h = T.roll(h, (-shift, -shift), axis=(1, 2))
        win = window_partition(h, ws)
        bias = self.position_bias()  # (heads, n, n)
        if shift:
            bias = bias + shift_mask(Hp, Wp, ws, shift)[:, None]
        h = window_merge(self.attn(win, win, win, bias), ws, Hp, Wp)
        if shift:
            h = T.roll(h, (shift, shift), axis=(1, 2))
        x = x + h[:, :H, :W]
        return x + self.ffn(self.norm2(x))


def window_block_params(d, heads, window, ffn_dim) -> int:
    return 4 * d + mha_params(d) + (2 * window - 1) ** 2 * heads + ffn_params(d, ffn_dim)


class ConvNeXtBlock(Module):
    """7x7 depthwise conv -> channel-last LayerNorm -> FFN, residual."""

    def __init__(self, d, ffn_dim, rng, kernel: int = 7):
        self.kernel = kernel
        self.dw_weight = Parameter(xavier(rng, kernel * kernel, kernel * kernel, (d, 1, kernel, kernel)))
        self.dw_bias = Parameter(np.zeros(d))
        self.norm = LayerNorm(d)
        self.ffn = FFN(d, ffn_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        B = x.shape[0]
        pad = self.kernel // 2
        ys = []
        for b in range(B):
            xb = x[b].transpose(2, 0, 1)
            yb = T.conv2d(xb, self.dw_weight, self.dw_bias, stride=1, pad=pad, depthwise=True)
            ys.append(yb.transpose(1, 2, 0))
        y = T.stack(ys, axis=0)
        return x + self.ffn(self.norm(y))


def convnext_block_params(d, ffn_dim, kernel: int = 7) -> int:
    return kernel * kernel * d + d + 2 * d + ffn_params(d, ffn_dim)


def block_params(kind: str, d: int, heads: int, levels: int, points: int, ffn_dim: int,
                 window: int) -> int:
    if kind == "deformable":
        return deformable_block_params(d, heads, levels, points, ffn_dim)
    if kind == "window":
        return window_block_params(d, heads, window, ffn_dim)
    if kind == "convnext":
        return convnext_block_params(d, ffn_dim)
    if kind == "none":
        return 0
    raise ConfigError(f"unknown block kind {kind!r}")


class FeatureEncoder(Module):
    """A stack of ``depth`` blocks of one family over a set of feature levels.

    Deformable stacks take every level; window and ConvNeXt stacks refine
    only the first (highest-resolution) level.
    """

    def __init__(self, kind: str, depth: int, d: int, *, heads: int = 8, levels: int = 4,
                 points: int = 4, ffn_dim: int | None = None, window: int = 8,
                 rng: np.random.Generator):
        if kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {kind!r}")
        if depth < 0:
            raise ConfigError("depth must be >= 0")
        if kind != "none" and d % heads:
            raise ConfigError(f"d={d} not divisible by heads={heads}")
        self.kind = kind if depth > 0 else "none"
        self.depth = depth if kind != "none" else 0
        self.levels = levels
        ffn_dim = ffn_dim or 4 * d
        for i in range(self.depth):
            if kind == "deformable":
                blk = DeformableBlock(d, heads, levels, points, ffn_dim, rng)
            elif kind == "window":
                blk = WindowBlock(d, heads, window, shifted=bool(i % 2), ffn_dim=ffn_dim, rng=rng)
            else:
                blk = ConvNeXtBlock(d, ffn_dim, rng)
            setattr(self, f"layer{i}", blk)

    def blocks(self) -> list[Module]:
        return [getattr(self, f"layer{i}") for i in range(self.depth)]

    def encode_tokens(self, x: Tensor, shapes) -> Tensor:
        """Deformable path over (B, N, d) tokens stacked from ``shapes``."""
        ref = reference_points(shapes)
        pos = sine_embedding(ref, x.shape[-1])
        for blk in self.blocks():
            x = blk(x, pos, ref, shapes)
        return x

    def encode_grid(self, x: Tensor) -> Tensor:
        """Window / ConvNeXt path over a (B, H, W, d) grid."""
        for blk in self.blocks():
            x = blk(x)
        return x

    def __call__(self, maps: list[Tensor]) -> list[Tensor]:
        """Refine channel-first maps [(B, d, h, w), ...]; returns the same layout."""
        if self.kind == "none":
            return list(maps)
        if self.kind == "deformable":
            used = maps[: self.levels]
            B, d = used[0].shape[:2]
            shapes = [m.shape[2:] for m in used]
            tokens = T.concat([m.reshape(B, d, -1).transpose(0, 2, 1) for m in used], axis=1)
            tokens = self.encode_tokens(tokens, shapes)
            out, start = [], 0
            for h, w in shapes:
                t = tokens[:, start:start + h * w]
                out.append(t.transpose(0, 2, 1).reshape(B, d, h, w))
                start += h * w
            return out + list(maps[self.levels:])
        first = maps[0].transpose(0, 2, 3, 1)
        refined = self.encode_grid(first).transpose(0, 3, 1, 2)
        return [refined] + list(maps[1:])

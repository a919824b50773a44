"""Multi-scale scanning: channel split, window tokenization, per-scale SS2D.

A feature map is split into equal channel slabs, each slab is tokenized at
its own window scale (pixels of an s x s patch appended channel-wise, in
row-major patch order), scanned, inverted, and the slabs concatenated back.
All reorderings are pure index permutations, so round trips are bit-exact.

The dilated variant keeps one token per window (top-left), scans the coarse
grid at the original slab width, and restores resolution with bilinear
interpolation between the sampled anchors; sampling and interpolation are
fixed index/weight plans and contribute no learnable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .ssm import (
    SSMParams,
    chw_to_tokens,
    init_ss2d_params,
    ss2d,
    ss2d_flops,
    ss2d_param_count,
    tokens_to_chw,
)
from .tensor import Tensor


@dataclass
class ScaleConfig:
    """Branch layout of one multi-scale scan block over C-channel maps."""

    channels: int
    scales: tuple[int, ...]
    n_state: int
    dilated: bool
    branch_params: list[list[SSMParams]]  # one 4-head set per branch

    @property
    def branch_width(self) -> int:
        return self.channels // len(self.scales)


def _validate_split(channels: int, n_branches: int) -> int:
    if n_branches < 1 or channels % n_branches != 0:
        raise ConfigError(f"{channels} channels not divisible into {n_branches} branches")
    return channels // n_branches


def branch_head_dim(channels: int, scales: tuple[int, ...], scale: int, dilated: bool) -> int:
    m = _validate_split(channels, len(scales))
    return m if (dilated and scale > 1) else m * scale * scale


def build_scale_config(
    channels: int,
    scales: tuple[int, ...],
    n_state: int,
    rng: np.random.Generator,
    dilated: bool = False,
) -> ScaleConfig:
    _validate_split(channels, len(scales))
    branch_params = [
        init_ss2d_params(branch_head_dim(channels, scales, s, dilated), n_state, rng)
        for s in scales
    ]
    return ScaleConfig(channels, tuple(scales), n_state, dilated, branch_params)


def channel_split(x: Tensor, n_branches: int) -> list[Tensor]:
    """Contiguous channel slabs, in order; concatenating restores the input."""
    m = _validate_split(x.shape[0], n_branches)
    return [T.slice_axis(x, 0, i * m, (i + 1) * m) for i in range(n_branches)]


def channel_concat(parts: list[Tensor]) -> Tensor:
    return T.concat(parts, axis=0)


@lru_cache(maxsize=None)
def _window_perm(c: int, h: int, w: int, s: int) -> np.ndarray:
    """Flat gather map for (c,h,w) -> (c*s*s, h/s, w/s) window tokenization."""
    hs, ws = h // s, w // s
    q, ch, i2, j2 = np.meshgrid(
        np.arange(s * s), np.arange(c), np.arange(hs), np.arange(ws), indexing="ij"
    )
    di, dj = q // s, q % s
    src = (ch * h + i2 * s + di) * w + (j2 * s + dj)
    # output laid out as (q*c + ch, i2, j2) row-major
    perm = np.empty(c * h * w, dtype=np.int64)
    out_idx = ((q * c + ch) * hs + i2) * ws + j2
    perm[out_idx.reshape(-1)] = src.reshape(-1)
    perm.flags.writeable = False
    return perm


def window_tokenize(x: Tensor, s: int) -> Tensor:
    """Stack each s x s patch channel-wise: (m,H,W) -> (m*s*s, H/s, W/s)."""
    if x.ndim != 3:
        raise ShapeError(f"window_tokenize expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    if s == 1:
        return x
    if h % s or w % s:
        raise ConfigError(f"grid {h}x{w} not divisible by window scale {s}")
    perm = _window_perm(c, h, w, s)
    flat = T.gather_permute(T.reshape(x, (c * h * w,)), perm)
    return T.reshape(flat, (c * s * s, h // s, w // s))


def window_untokenize(x: Tensor, s: int) -> Tensor:
    """Exact inverse of window_tokenize."""
    if x.ndim != 3:
        raise ShapeError(f"window_untokenize expects (C, H, W), got {x.shape}")
    cs, hs, ws = x.shape
    if s == 1:
        return x
    if cs % (s * s) != 0:
        raise ConfigError(f"channel extent {cs} not divisible by {s}x{s}")
    c, h, w = cs // (s * s), hs * s, ws * s
    inv = T.invert_permutation(np.asarray(_window_perm(c, h, w, s)))
    flat = T.gather_permute(T.reshape(x, (cs * hs * ws,)), inv)
    return T.reshape(flat, (c, h, w))


@lru_cache(maxsize=None)
def _dilated_sample_rows(h: int, w: int, s: int) -> np.ndarray:
    """Row indices (into an HW-token matrix) of each window's top-left pixel."""
    ii, jj = np.meshgrid(np.arange(0, h, s), np.arange(0, w, s), indexing="ij")
    rows = (ii * w + jj).reshape(-1)
    rows.flags.writeable = False
    return rows


@lru_cache(maxsize=None)
def _bilinear_plan(h: int, w: int, s: int):
    """Corner indices and weights mapping a coarse (h/s, w/s) grid, anchored at
    window top-left corners, back onto the full grid; constant extension past
    the last anchor."""
    hs, ws = h // s, w // s
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    u = np.minimum(yy / s, hs - 1.0)
    v = np.minimum(xx / s, ws - 1.0)
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    i1 = np.minimum(i0 + 1, hs - 1)
    j1 = np.minimum(j0 + 1, ws - 1)
    fy, fx = u - i0, v - j0
    idxs, wts = [], []
    for ci, cj, wy, wx in (
        (i0, j0, 1 - fy, 1 - fx),
        (i0, j1, 1 - fy, fx),
        (i1, j0, fy, 1 - fx),
        (i1, j1, fy, fx),
    ):
        idxs.append(np.ascontiguousarray((ci * ws + cj).reshape(-1)))
        wts.append(Tensor((wy * wx).reshape(-1, 1)))
    return idxs, wts


def _bilinear_upsample_tokens(coarse: Tensor, h: int, w: int, s: int) -> Tensor:
    idxs, wts = _bilinear_plan(h, w, s)
    out = None
    for idx, wt in zip(idxs, wts):
        term = T.mul(T.take(coarse, idx, axis=0), wt)
        out = term if out is None else T.add(out, term)
    return out


def _check_cfg(x: Tensor, cfg: ScaleConfig, dilated: bool) -> None:
    if x.ndim != 3 or x.shape[0] != cfg.channels:
        raise ShapeError(f"input {x.shape} does not match config C={cfg.channels}")
    if cfg.dilated != dilated:
        raise ConfigError("ScaleConfig was built for the other scan variant")
    for s in cfg.scales:
        if x.shape[1] % s or x.shape[2] % s:
            raise ConfigError(f"grid {x.shape[1]}x{x.shape[2]} not divisible by scale {s}")


def ms_scan(x: Tensor, cfg: ScaleConfig) -> Tensor:
    """Per-branch window tokenize / SS2D / untokenize, concatenated back."""
    _check_cfg(x, cfg, dilated=False)
    outs = []
    for part, s, heads in zip(channel_split(x, len(cfg.scales)), cfg.scales, cfg.branch_params):
        outs.append(window_untokenize(ss2d(window_tokenize(part, s), heads), s))
    return channel_concat(outs)


def dms_scan(x: Tensor, cfg: ScaleConfig) -> Tensor:
    """Dilated variant: scan one token per window, interpolate back."""
    _check_cfg(x, cfg, dilated=True)
    h, w = x.shape[1], x.shape[2]
    outs = []
    for part, s, heads in zip(channel_split(x, len(cfg.scales)), cfg.scales, cfg.branch_params):
        if s == 1:
            outs.append(ss2d(part, heads))
            continue
        tokens = chw_to_tokens(part)
        coarse = T.take(tokens, _dilated_sample_rows(h, w, s), axis=0)
        scanned = ss2d(tokens_to_chw(coarse, h // s, w // s), heads)
        fine = _bilinear_upsample_tokens(chw_to_tokens(scanned), h, w, s)
        outs.append(tokens_to_chw(fine, h, w))
    return channel_concat(outs)


def multi_scale_param_count(channels: int, scales: tuple[int, ...], n_state: int,
                            dilated: bool) -> int:
    return sum(
        ss2d_param_count(branch_head_dim(channels, tuple(scales), s, dilated), n_state)
        for s in scales
    )


def multi_scale_flops(channels: int, scales: tuple[int, ...], n_state: int,
                      h: int, w: int, dilated: bool) -> int:
    """Scan flops of all branches, plus 7 flops per interpolated output value
    (4 weight multiplies, 3 adds) for dilated branches."""
    total = 0
    m = _validate_split(channels, len(scales))
    for s in scales:
        d = branch_head_dim(channels, tuple(scales), s, dilated)
        total += ss2d_flops(d, h // s, w // s, n_state)
        if dilated and s > 1:
            total += 7 * h * w * m
    return total

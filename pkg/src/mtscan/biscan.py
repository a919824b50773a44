"""Cross-task serialization and the bidirectional interaction scan.

All task maps are flattened into one global token sequence so the scan
state crosses task boundaries.  Two serialization modes exist:

* task-first: each task's map is serialized by a spatial pattern, then the
  per-task subsequences are concatenated in task order (length T*H*W);
* position-first: at each spatial position the T task tokens are laid out
  in task order, positions following the pattern (length H*W*T).

Viewing the task-first map as a (T, H*W) index matrix, the position-first
map is exactly its transpose.  Every sequence carries the permutation that
produced it, so deserialization is an exact inverse scatter.

The bidirectional form splits channels in half: the first half is scanned
with the configured task order, the second with the task list reversed;
the halves are concatenated back per task.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ProtocolError, ShapeError
from .msscan import window_tokenize, window_untokenize
from .ssm import (
    DIRECTIONS,
    SSMParams,
    chw_to_tokens,
    direction_indices,
    init_ssm_params,
    scan_flops,
    selective_scan,
    ssm_param_count,
    tokens_to_chw,
)
from .tensor import Tensor

MODE_ORDERS = ("tf_then_pf", "pf_then_tf", "tf_only", "pf_only")

TaskFeatureSet = Sequence[Tensor]


def validate_task_order(order: Sequence[int], n_tasks: int) -> tuple[int, ...]:
    order = tuple(int(t) for t in order)
    if sorted(order) != list(range(n_tasks)):
        raise ConfigError(f"task order {order} is not a permutation of 0..{n_tasks - 1}")
    return order


def reverse_task_order(order: Sequence[int]) -> tuple[int, ...]:
    """Order equivalent to reversing the task list before and after a scan."""
    n = len(order)
    return tuple(n - 1 - t for t in order)


@dataclass
class ScanSequence:
    """Serialized tokens plus the index map that produced them."""

    tokens: Tensor               # (L, d)
    perm: np.ndarray | None      # source slot of every sequence position
    n_tasks: int
    height: int
    width: int


@dataclass
class BiScanConfig:
    channels: int                     # per-task map channels entering bi_scan
    n_state: int
    directions: tuple[str, ...] = DIRECTIONS
    pattern_scales: tuple[int, ...] = (1, 1, 1, 1)
    mode_order: str = "tf_then_pf"
    bidirectional: bool = True
    # (half index, pattern index, mode) -> head; shared across tasks
    params: dict[tuple[int, int, str], SSMParams] = field(default_factory=dict)

    @property
    def n_halves(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def half_width(self) -> int:
        return self.channels // 2 if self.bidirectional else self.channels

    def modes(self) -> tuple[str, ...]:
        return {
            "tf_then_pf": ("tf", "pf"),
            "pf_then_tf": ("pf", "tf"),
            "tf_only": ("tf",),
            "pf_only": ("pf",),
        }[self.mode_order]


def build_biscan_config(
    channels: int,
    n_state: int,
    rng: np.random.Generator,
    directions: tuple[str, ...] = DIRECTIONS,
    pattern_scales: tuple[int, ...] | None = None,
    mode_order: str = "tf_then_pf",
    bidirectional: bool = True,
) -> BiScanConfig:
    if mode_order not in MODE_ORDERS:
        raise ConfigError(f"unknown mode order '{mode_order}'")
    if pattern_scales is None:
        pattern_scales = (1,) * len(directions)
    if len(pattern_scales) != len(directions):
        raise ConfigError("need one window scale per scan pattern")
    if bidirectional and channels % 2 != 0:
        raise ConfigError("bidirectional scan needs an even channel extent")
    cfg = BiScanConfig(channels, n_state, tuple(directions), tuple(pattern_scales),
                       mode_order, bidirectional)
    for half in range(cfg.n_halves):
        for i, s in enumerate(cfg.pattern_scales):
            d = cfg.half_width * s * s
            for mode in cfg.modes():
                cfg.params[(half, i, mode)] = init_ssm_params(d, n_state, rng)
    return cfg


def _check_task_set(fs: TaskFeatureSet) -> tuple[int, int, int, int]:
    if not fs:
        raise ShapeError("empty task feature set")
    shape = fs[0].shape
    if len(shape) != 3:
        raise ShapeError(f"task maps must be (C, H, W), got {shape}")
    for f in fs[1:]:
        if f.shape != shape:
            raise ShapeError(f"task map shapes differ: {f.shape} vs {shape}")
    return len(fs), *shape


def _tf_index_matrix(direction: str, order: Sequence[int], n_tasks: int,
                     h: int, w: int) -> np.ndarray:
    """Task-first map as a (T, H*W) matrix of base slot ids (task*HW + pos)."""
    sp = np.asarray(direction_indices(direction, h, w))
    order = validate_task_order(order, n_tasks)
    return np.asarray(order, dtype=np.int64)[:, None] * (h * w) + sp[None, :]


def task_first_index_map(direction, order, n_tasks, h, w) -> np.ndarray:
    return _tf_index_matrix(direction, order, n_tasks, h, w).reshape(-1)


def position_first_index_map(direction, order, n_tasks, h, w) -> np.ndarray:
    return _tf_index_matrix(direction, order, n_tasks, h, w).T.reshape(-1)


def _base_tokens(fs: TaskFeatureSet) -> Tensor:
    """Stack all tasks' tokens: row t*HW + p holds task t, row-major position p."""
    return T.concat([chw_to_tokens(f) for f in fs], axis=0)


def task_first_serialize(fs: TaskFeatureSet, direction: str,
                         order: Sequence[int]) -> ScanSequence:
    n_tasks, _, h, w = _check_task_set(fs)
    perm = task_first_index_map(direction, order, n_tasks, h, w)
    return ScanSequence(T.gather_permute(_base_tokens(fs), perm), perm, n_tasks, h, w)


def position_first_serialize(fs: TaskFeatureSet, direction: str,
                             order: Sequence[int]) -> ScanSequence:
    n_tasks, _, h, w = _check_task_set(fs)
    perm = position_first_index_map(direction, order, n_tasks, h, w)
    return ScanSequence(T.gather_permute(_base_tokens(fs), perm), perm, n_tasks, h, w)


def deserialize(seq: ScanSequence) -> list[Tensor]:
    """Exact inverse scatter back to one (C, H, W) map per task."""
    if seq.perm is None:
        raise ProtocolError("sequence does not carry its producing permutation")
    base = T.gather_permute(seq.tokens, T.invert_permutation(seq.perm))
    hw = seq.height * seq.width
    return [
        tokens_to_chw(T.slice_axis(base, 0, t * hw, (t + 1) * hw), seq.height, seq.width)
        for t in range(seq.n_tasks)
    ]


def forward_scan(fs: TaskFeatureSet, cfg: BiScanConfig, order: Sequence[int],
                 half: int = 0) -> list[Tensor]:
    """One directional pass: per pattern, run the configured serialize/scan
    modes in sequence and sum the restored pattern outputs elementwise."""
    n_tasks, c, _, _ = _check_task_set(fs)
    if c != cfg.half_width:
        raise ShapeError(f"task maps have {c} channels, scan heads expect {cfg.half_width}")
    order = validate_task_order(order, n_tasks)
    total: list[Tensor] | None = None
    for i, (direction, scale) in enumerate(zip(cfg.directions, cfg.pattern_scales)):
        cur = [window_tokenize(f, scale) for f in fs]
        for mode in cfg.modes():
            serialize = task_first_serialize if mode == "tf" else position_first_serialize
            seq = serialize(cur, direction, order)
            y = selective_scan(seq.tokens, cfg.params[(half, i, mode)])
            cur = deserialize(ScanSequence(y, seq.perm, seq.n_tasks, seq.height, seq.width))
        restored = [window_untokenize(f, scale) for f in cur]
        total = restored if total is None else [T.add(a, b) for a, b in zip(total, restored)]
    return total


def bi_scan(fs: TaskFeatureSet, cfg: BiScanConfig, order: Sequence[int]) -> list[Tensor]:
    """Split channels in half, scan the halves in opposite task orders, concat."""
    n_tasks, c, _, _ = _check_task_set(fs)
    if c != cfg.channels:
        raise ShapeError(f"task maps have {c} channels, config expects {cfg.channels}")
    order = validate_task_order(order, n_tasks)
    if not cfg.bidirectional:
        return forward_scan(fs, cfg, order, half=0)
    if c % 2 != 0:
        raise ConfigError("bidirectional scan needs an even channel extent")
    lo = [T.slice_axis(f, 0, 0, c // 2) for f in fs]
    hi = [T.slice_axis(f, 0, c // 2, c) for f in fs]
    out_lo = forward_scan(lo, cfg, order, half=0)
    out_hi = forward_scan(hi, cfg, reverse_task_order(order), half=1)
    return [T.concat([a, b], axis=0) for a, b in zip(out_lo, out_hi)]


def flop_count(cfg: BiScanConfig, n_tasks: int, channels: int, h: int, w: int) -> int:
    """Mult/adds of every scan in one bi_scan call; exactly linear in T.

    Serializations are pure index moves and contribute nothing.  A pattern
    at window scale s sees T*(H/s)*(W/s) tokens of width (C_half)*s*s, so
    its cost is scale-invariant.
    """
    if channels != cfg.channels:
        raise ConfigError(f"config is sized for {cfg.channels} channels")
    total = 0
    for _half in range(cfg.n_halves):
        for s in cfg.pattern_scales:
            length = n_tasks * (h // s) * (w // s)
            d = cfg.half_width * s * s
            total += len(cfg.modes()) * scan_flops(length, d, cfg.n_state)
    return total


def param_count(cfg: BiScanConfig) -> int:
    total = 0
    for _half in range(cfg.n_halves):
        for s in cfg.pattern_scales:
            d = cfg.half_width * s * s
            total += len(cfg.modes()) * ssm_param_count(d, cfg.n_state)
    return total

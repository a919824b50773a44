"""End-to-end multi-task architecture.

A hierarchical patch-merge encoder (stride 4/8/16/32, channels C/2C/4C/8C,
each stage mixed by a four-direction scan) feeds three feature-refinement
stages.  Each stage runs one gated multi-scale scan block per task followed
by one shared cross-task refine block, then task heads expand stride-4
features back to full resolution with a linear projection and pixel
shuffle.

Checkpoints are a flat binary container of named float64 parameter blobs
(magic "BIMCKPT1", little-endian).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import tensor as T
from .biscan import BiScanConfig, bi_scan, build_biscan_config
from .biscan import flop_count as biscan_flop_count
from .biscan import param_count as biscan_param_count
from .errors import ConfigError, FormatError, ShapeError
from .msscan import (
    ScaleConfig,
    build_scale_config,
    dms_scan,
    ms_scan,
    multi_scale_flops,
    multi_scale_param_count,
    window_tokenize,
)
from .ssm import (
    DIRECTIONS,
    SSMParams,
    chw_to_tokens,
    init_ss2d_params,
    ss2d,
    ss2d_flops,
    ss2d_param_count,
    tokens_to_chw,
)
from .tensor import Tensor

CHECKPOINT_MAGIC = b"BIMCKPT1"

N_ENCODER_STAGES = 4
N_MFR_STAGES = 3
HEAD_UPSCALE = 4  # stride-4 features -> full resolution


@dataclass(frozen=True)
class TaskSpec:
    name: str
    out_channels: int
    loss: str  # "l1" | "cross_entropy"
    weight: float = 1.0


DEFAULT_TASKS = (
    TaskSpec("semseg", 5, "cross_entropy"),
    TaskSpec("depth", 1, "l1"),
    TaskSpec("normal", 3, "l1"),
    TaskSpec("boundary", 2, "cross_entropy"),
)


@dataclass(frozen=True)
class ModelConfig:
    tasks: tuple[TaskSpec, ...] = DEFAULT_TASKS
    base_channels: int = 16
    n_state: int = 8
    partition_size: int = 4
    scan_scales: tuple[tuple[int, ...], ...] = ((1, 4), (1, 4), (1, 4))
    decoder_channels: int = 96
    task_order: tuple[int, ...] | None = None  # None: declaration order
    mode_order: str = "tf_then_pf"
    bidirectional: bool = True
    cross_task: bool = True            # shared refine runs the cross-task scan
    ms_patterns_in_biscan: bool = True  # reuse stage scales as pattern scales
    dilated: bool = False              # dilated multi-scale branches

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def order(self) -> tuple[int, ...]:
        return self.task_order if self.task_order is not None else tuple(range(self.n_tasks))

    def stage_channels(self, i: int) -> int:
        """Encoder stage channels, 1-indexed: C, 2C, 4C, 8C."""
        return self.base_channels * (1 << (i - 1))

    def mfr_channels(self, i: int) -> int:
        """Refinement stage channels, 1-indexed: 4C, 2C, C."""
        return self.base_channels * (1 << (N_MFR_STAGES - i))

    def biscan_pattern_scales(self, stage: int) -> tuple[int, ...]:
        scales = self.scan_scales[stage - 1]
        if self.ms_patterns_in_biscan and len(scales) > 1:
            return tuple(scales[i % len(scales)] for i in range(len(DIRECTIONS)))
        return (1,) * len(DIRECTIONS)


def mfr_grid(cfg: ModelConfig, stage: int, h: int, w: int) -> tuple[int, int]:
    stride = cfg.partition_size * (1 << (N_MFR_STAGES - stage))
    return h // stride, w // stride


def validate_config(cfg: ModelConfig, h: int, w: int) -> None:
    if len(cfg.scan_scales) != N_MFR_STAGES:
        raise ConfigError("need one scan-scale set per refinement stage")
    stride = cfg.partition_size * (1 << N_MFR_STAGES)
    if h % stride or w % stride:
        raise ConfigError(f"input {h}x{w} must be divisible by {stride}")
    if cfg.decoder_channels % (HEAD_UPSCALE * HEAD_UPSCALE) != 0:
        raise ConfigError("decoder channels must divide into the head pixel shuffle")
    if cfg.mode_order not in ("tf_then_pf", "pf_then_tf", "tf_only", "pf_only"):
        raise ConfigError(f"unknown mode order '{cfg.mode_order}'")
    names = [t.name for t in cfg.tasks]
    if len(set(names)) != len(names):
        raise ConfigError("task names must be unique")
    for t in cfg.tasks:
        if t.loss not in ("l1", "cross_entropy"):
            raise ConfigError(f"unknown loss kind '{t.loss}' for task {t.name}")
        if t.weight <= 0:
            raise ConfigError(f"loss weight for task {t.name} must be positive")
    if cfg.task_order is not None and sorted(cfg.task_order) != list(range(cfg.n_tasks)):
        raise ConfigError("task_order must be a permutation of the task indices")
    for i in range(1, N_MFR_STAGES + 1):
        c = cfg.mfr_channels(i)
        gh, gw = mfr_grid(cfg, i, h, w)
        scales = cfg.scan_scales[i - 1]
        if c % len(scales) != 0:
            raise ConfigError(f"stage {i}: {c} channels not divisible into {len(scales)} branches")
        for s in list(scales) + list(cfg.biscan_pattern_scales(i)):
            if gh % s or gw % s:
                raise ConfigError(f"stage {i}: grid {gh}x{gw} not divisible by scale {s}")
        if cfg.cross_task and cfg.bidirectional and c % 2 != 0:
            raise ConfigError(f"stage {i}: bidirectional scan needs even channels, got {c}")


# ---------------------------------------------------------------------------
# blocks


@dataclass
class EncoderStage:
    merge_w: Tensor | None
    merge_b: Tensor | None
    ln_g: Tensor
    ln_b: Tensor
    heads: list[SSMParams]
    proj_w: Tensor
    proj_b: Tensor


@dataclass
class MsstPass:
    ln_g: Tensor
    ln_b: Tensor
    gate_w: Tensor
    gate_b: Tensor
    proj_w: Tensor  # bias-free so a dead gate leaves the residual untouched
    scales: ScaleConfig


@dataclass
class BcfrBlock:
    ln_g: Tensor
    ln_b: Tensor
    gate_w: Tensor
    gate_b: Tensor
    biscan: BiScanConfig | None
    ss2d_heads: list[SSMParams] | None


@dataclass
class MfrStage:
    up_w: Tensor
    up_b: Tensor
    msst: list[list[MsstPass]]  # [task][pass]
    bcfr: BcfrBlock


@dataclass
class TaskHead:
    psi_w: Tensor
    psi_b: Tensor
    out_w: Tensor
    out_b: Tensor


# ---------------------------------------------------------------------------
# index plans


@lru_cache(maxsize=None)
def _upsample_rows(h: int, w: int) -> np.ndarray:
    """Token rows for 2x nearest-neighbour upsampling of an (h, w) grid."""
    yy, xx = np.meshgrid(np.arange(2 * h), np.arange(2 * w), indexing="ij")
    rows = ((yy // 2) * w + xx // 2).reshape(-1)
    rows.flags.writeable = False
    return rows


@lru_cache(maxsize=None)
def _pixel_shuffle_perm(c_in: int, h: int, w: int, r: int) -> np.ndarray:
    """Flat permutation for (c_in, h, w) -> (c_in/r^2, r*h, r*w)."""
    c_out = c_in // (r * r)
    g, y, x = np.meshgrid(
        np.arange(c_out), np.arange(r * h), np.arange(r * w), indexing="ij"
    )
    i, di = y // r, y % r
    j, dj = x // r, x % r
    src = ((g * r * r + di * r + dj) * h + i) * w + j
    perm = src.reshape(-1)
    perm.flags.writeable = False
    return perm


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    c, h, w = x.shape
    if c % (r * r) != 0:
        raise ShapeError(f"pixel shuffle needs channels divisible by {r * r}")
    flat = T.gather_permute(T.reshape(x, (c * h * w,)), _pixel_shuffle_perm(c, h, w, r))
    return T.reshape(flat, (c // (r * r), r * h, r * w))


# ---------------------------------------------------------------------------
# model


class Model:
    def __init__(self, cfg: ModelConfig, seed: int, input_hw: tuple[int, int] = (64, 64)):
        validate_config(cfg, *input_hw)
        self.cfg = cfg
        self.input_hw = input_hw
        self.order_override: tuple[int, ...] | None = None  # per-step task order
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        self.encoder = self._build_encoder(rng)
        self.mfrs = [self._build_mfr(i, rng) for i in range(1, N_MFR_STAGES + 1)]
        self.heads = {t.name: self._build_head(t, rng) for t in cfg.tasks}

    # -- parameter registry helpers

    def _param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        if name in self.params:
            raise ConfigError(f"duplicate parameter name '{name}'")
        self.params[name] = t
        return t

    def _linear(self, name: str, fan_in: int, fan_out: int, rng,
                bias: bool = True) -> tuple[Tensor, Tensor | None]:
        k = 1.0 / np.sqrt(fan_in)
        w = self._param(f"{name}.w", rng.uniform(-k, k, (fan_in, fan_out)))
        b = self._param(f"{name}.b", np.zeros(fan_out)) if bias else None
        return w, b

    def _norm(self, name: str, c: int) -> tuple[Tensor, Tensor]:
        return (self._param(f"{name}.gamma", np.ones(c)),
                self._param(f"{name}.beta", np.zeros(c)))

    def _register_ssm(self, name: str, p: SSMParams) -> SSMParams:
        for f, t in p.tensors().items():
            t.requires_grad = True
            if f"{name}.{f}" in self.params:
                raise ConfigError(f"duplicate parameter name '{name}.{f}'")
            self.params[f"{name}.{f}"] = t
        return p

    def _register_heads(self, name: str, heads: list[SSMParams]) -> list[SSMParams]:
        for d, p in zip(DIRECTIONS, heads):
            self._register_ssm(f"{name}.{d}", p)
        return heads

    # -- builders

    def _build_encoder(self, rng):
        cfg = self.cfg
        w = cfg.partition_size
        embed = self._linear("encoder.embed", 3 * w * w, cfg.base_channels, rng)
        stages = []
        for i in range(1, N_ENCODER_STAGES + 1):
            c = cfg.stage_channels(i)
            merge_w = merge_b = None
            if i > 1:
                merge_w, merge_b = self._linear(
                    f"encoder.stage{i}.merge", 4 * cfg.stage_channels(i - 1), c, rng
                )
            ln_g, ln_b = self._norm(f"encoder.stage{i}.norm", c)
            heads = self._register_heads(
                f"encoder.stage{i}.ssm", init_ss2d_params(c, cfg.n_state, rng)
            )
            proj_w, proj_b = self._linear(f"encoder.stage{i}.proj", c, c, rng)
            stages.append(EncoderStage(merge_w, merge_b, ln_g, ln_b, heads, proj_w, proj_b))
        return embed, stages

    def _build_msst(self, name: str, c: int, stage: int, rng) -> list[MsstPass]:
        cfg = self.cfg
        passes = []
        for k in range(2):
            ln_g, ln_b = self._norm(f"{name}.pass{k}.norm", c)
            gate_w, gate_b = self._linear(f"{name}.pass{k}.gate", c, c, rng)
            proj_w, _ = self._linear(f"{name}.pass{k}.proj", c, c, rng, bias=False)
            sc = build_scale_config(c, cfg.scan_scales[stage - 1], cfg.n_state, rng,
                                    dilated=cfg.dilated)
            for j, heads in enumerate(sc.branch_params):
                self._register_heads(f"{name}.pass{k}.ms.branch{j}", heads)
            passes.append(MsstPass(ln_g, ln_b, gate_w, gate_b, proj_w, sc))
        return passes

    def _build_mfr(self, stage: int, rng) -> MfrStage:
        cfg = self.cfg
        c = cfg.mfr_channels(stage)
        c_prev = 2 * c
        up_w, up_b = self._linear(f"mfr{stage}.up", c_prev, c, rng)
        msst = [
            self._build_msst(f"mfr{stage}.task{t}.msst", c, stage, rng)
            for t in range(cfg.n_tasks)
        ]
        ln_g, ln_b = self._norm(f"mfr{stage}.bcfr.norm", c)
        gate_w, gate_b = self._linear(f"mfr{stage}.bcfr.gate", c, c, rng)
        biscan = heads = None
        if cfg.cross_task:
            biscan = build_biscan_config(
                c, cfg.n_state, rng,
                pattern_scales=cfg.biscan_pattern_scales(stage),
                mode_order=cfg.mode_order,
                bidirectional=cfg.bidirectional,
            )
            for key, p in biscan.params.items():
                half, pat, mode = key
                self._register_ssm(f"mfr{stage}.bcfr.biscan.h{half}.p{pat}.{mode}", p)
        else:
            heads = self._register_heads(
                f"mfr{stage}.bcfr.ss2d", init_ss2d_params(c, cfg.n_state, rng)
            )
        return MfrStage(up_w, up_b, msst, BcfrBlock(ln_g, ln_b, gate_w, gate_b, biscan, heads))

    def _build_head(self, t: TaskSpec, rng) -> TaskHead:
        cfg = self.cfg
        psi_w, psi_b = self._linear(f"head.{t.name}.psi", cfg.base_channels,
                                    cfg.decoder_channels, rng)
        out_w, out_b = self._linear(
            f"head.{t.name}.out", cfg.decoder_channels // (HEAD_UPSCALE ** 2),
            t.out_channels, rng
        )
        return TaskHead(psi_w, psi_b, out_w, out_b)

    # -- forward

    def forward(self, image: Tensor) -> dict[str, Tensor]:
        return model_forward(self, image)


# ---------------------------------------------------------------------------
# forward ops


def encoder_forward(model: Model, image: Tensor) -> list[Tensor]:
    """Patch embed + per-stage (patch merge, scan-mix) pyramid."""
    cfg = model.cfg
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {image.shape}")
    h, w = image.shape[1], image.shape[2]
    validate_config(cfg, h, w)
    (embed_w, embed_b), stages = model.encoder

    x = window_tokenize(image, cfg.partition_size)
    gh, gw = h // cfg.partition_size, w // cfg.partition_size
    x = tokens_to_chw(T.linear(chw_to_tokens(x), embed_w, embed_b), gh, gw)

    outputs = []
    for i, st in enumerate(stages, start=1):
        if i > 1:
            x = window_tokenize(x, 2)
            gh, gw = gh // 2, gw // 2
            x = tokens_to_chw(T.linear(chw_to_tokens(x), st.merge_w, st.merge_b), gh, gw)
        tokens = chw_to_tokens(x)
        normed = T.layer_norm(tokens, st.ln_g, st.ln_b)
        scanned = ss2d(tokens_to_chw(normed, gh, gw), st.heads)
        proj = T.linear(chw_to_tokens(scanned), st.proj_w, st.proj_b)
        x = T.add(x, tokens_to_chw(proj, gh, gw))
        outputs.append(x)
    return outputs


def msst_forward(x: Tensor, passes: list[MsstPass]) -> Tensor:
    """Gated multi-scale scan with residual, applied once per pass."""
    h, w = x.shape[1], x.shape[2]
    for p in passes:
        tokens = chw_to_tokens(x)
        normed = T.layer_norm(tokens, p.ln_g, p.ln_b)
        scan = dms_scan if p.scales.dilated else ms_scan
        scanned = scan(tokens_to_chw(normed, h, w), p.scales)
        gate = T.silu(T.linear(normed, p.gate_w, p.gate_b))
        gated = T.mul(chw_to_tokens(scanned), gate)
        x = T.add(x, tokens_to_chw(T.matmul(gated, p.proj_w), h, w))
    return x


def bcfr_forward(fs: list[Tensor], blk: BcfrBlock, order: tuple[int, ...]) -> list[Tensor]:
    """Shared refine: F_t + G_t * F_sh[t] + (1 - G_t) * norm(F_t)."""
    h, w = fs[0].shape[1], fs[0].shape[2]
    normed_tokens = []
    gates = []
    for f in fs:
        tn = T.layer_norm(chw_to_tokens(f), blk.ln_g, blk.ln_b)
        normed_tokens.append(tn)
        gates.append(T.sigmoid(T.linear(tn, blk.gate_w, blk.gate_b)))
    normed = [tokens_to_chw(tn, h, w) for tn in normed_tokens]
    if blk.biscan is not None:
        shared = bi_scan(normed, blk.biscan, order)
    else:
        shared = [ss2d(fn, blk.ss2d_heads) for fn in normed]
    one = Tensor(1.0)
    outs = []
    for f, tn, g, sh in zip(fs, normed_tokens, gates, shared):
        mixed = T.add(T.mul(g, chw_to_tokens(sh)), T.mul(T.sub(one, g), tn))
        outs.append(T.add(f, tokens_to_chw(mixed, h, w)))
    return outs


def mfr_forward(model: Model, stage: int, fs: list[Tensor], skip: Tensor) -> list[Tensor]:
    """Upsample 2x + channel halve + encoder skip, per-task refine, shared refine."""
    if not 1 <= stage <= N_MFR_STAGES:
        raise ShapeError(f"refinement stage must be 1..{N_MFR_STAGES}")
    st = model.mfrs[stage - 1]
    c, h, w = fs[0].shape
    if skip.shape != (c // 2, 2 * h, 2 * w):
        raise ShapeError(f"skip {skip.shape} does not match upsampled {(c // 2, 2 * h, 2 * w)}")
    rows = _upsample_rows(h, w)
    refined = []
    for t, f in enumerate(fs):
        up = T.take(chw_to_tokens(f), rows, axis=0)
        up = T.linear(up, st.up_w, st.up_b)
        x = T.add(tokens_to_chw(up, 2 * h, 2 * w), skip)
        refined.append(msst_forward(x, st.msst[t]))
    order = model.order_override if model.order_override is not None else model.cfg.order()
    return bcfr_forward(refined, st.bcfr, order)


def head_forward(f: Tensor, head: TaskHead, out_channels: int) -> Tensor:
    """Expand a stride-4 map to full resolution: linear, pixel shuffle, project."""
    h4, w4 = f.shape[1], f.shape[2]
    u = T.linear(chw_to_tokens(f), head.psi_w, head.psi_b)
    full = pixel_shuffle(tokens_to_chw(u, h4, w4), HEAD_UPSCALE)
    out = T.linear(chw_to_tokens(full), head.out_w, head.out_b)
    return T.reshape(out, (HEAD_UPSCALE * h4, HEAD_UPSCALE * w4, out_channels))


def model_forward(model: Model, image: Tensor) -> dict[str, Tensor]:
    cfg = model.cfg
    stages = encoder_forward(model, image)
    fs = [stages[-1]] * cfg.n_tasks
    for i in range(1, N_MFR_STAGES + 1):
        fs = mfr_forward(model, i, fs, stages[N_MFR_STAGES - i])
    return {
        t.name: head_forward(f, model.heads[t.name], t.out_channels)
        for t, f in zip(cfg.tasks, fs)
    }


# ---------------------------------------------------------------------------
# analytic complexity
#
# Convention: a linear over L tokens costs L*(din*dout + dout); layer norm
# costs 5*L*C; each elementwise combine costs one flop per value (silu 2);
# scans are costed by ssm.scan_flops; index moves (serialization, window
# and pixel shuffles, nearest upsampling) are free.


def _linear_flops(length: int, din: int, dout: int) -> int:
    return length * (din * dout + dout)


def _msst_flops(cfg: ModelConfig, stage: int, c: int, gh: int, gw: int) -> int:
    scales = cfg.scan_scales[stage - 1]
    hw = gh * gw
    per_pass = (
        5 * hw * c
        + multi_scale_flops(c, scales, cfg.n_state, gh, gw, cfg.dilated)
        + _linear_flops(hw, c, c)      # gate
        + 2 * hw * c                   # silu
        + hw * c                       # gate multiply
        + hw * c * c                   # bias-free projection
        + hw * c                       # residual add
    )
    return 2 * per_pass


def _bcfr_flops(cfg: ModelConfig, stage: int, c: int, gh: int, gw: int) -> int:
    hw = gh * gw
    n_tasks = cfg.n_tasks
    per_task = 5 * hw * c + _linear_flops(hw, c, c) + hw * c  # norm, gate, sigmoid
    per_task += 5 * hw * c  # two gated multiplies, 1-G, two adds
    if cfg.cross_task:
        scan_cfg = BiScanConfig(
            c, cfg.n_state, DIRECTIONS, cfg.biscan_pattern_scales(stage),
            cfg.mode_order, cfg.bidirectional,
        )
        shared = biscan_flop_count(scan_cfg, n_tasks, c, gh, gw)
    else:
        shared = n_tasks * ss2d_flops(c, gh, gw, cfg.n_state)
    return n_tasks * per_task + shared


def count_flops(cfg: ModelConfig, h: int, w: int) -> int:
    """Forward-pass flops under the convention above; affine in the task count."""
    validate_config(cfg, h, w)
    pw = cfg.partition_size
    total = _linear_flops((h // pw) * (w // pw), 3 * pw * pw, cfg.base_channels)
    gh, gw = h // pw, w // pw
    for i in range(1, N_ENCODER_STAGES + 1):
        c = cfg.stage_channels(i)
        if i > 1:
            gh, gw = gh // 2, gw // 2
            total += _linear_flops(gh * gw, 4 * cfg.stage_channels(i - 1), c)
        hw = gh * gw
        total += 5 * hw * c + ss2d_flops(c, gh, gw, cfg.n_state)
        total += _linear_flops(hw, c, c) + hw * c  # proj + residual
    if cfg.n_tasks == 0:
        return total
    for i in range(1, N_MFR_STAGES + 1):
        c = cfg.mfr_channels(i)
        gh, gw = mfr_grid(cfg, i, h, w)
        hw = gh * gw
        total += cfg.n_tasks * (_linear_flops(hw, 2 * c, c) + hw * c)  # up proj + skip add
        total += cfg.n_tasks * _msst_flops(cfg, i, c, gh, gw)
        total += _bcfr_flops(cfg, i, c, gh, gw)
    hw4 = (h // pw) * (w // pw)
    for t in cfg.tasks:
        total += _linear_flops(hw4, cfg.base_channels, cfg.decoder_channels)
        total += _linear_flops(h * w, cfg.decoder_channels // (HEAD_UPSCALE ** 2),
                               t.out_channels)
    return total


def count_params(cfg: ModelConfig) -> int:
    """Learnable scalar count; matches the built model's registry exactly."""
    pw = cfg.partition_size
    c0 = cfg.base_channels
    total = 3 * pw * pw * c0 + c0
    for i in range(1, N_ENCODER_STAGES + 1):
        c = cfg.stage_channels(i)
        if i > 1:
            total += 4 * cfg.stage_channels(i - 1) * c + c
        total += 2 * c                                  # norm
        total += ss2d_param_count(c, cfg.n_state)
        total += c * c + c                              # proj
    if cfg.n_tasks == 0:
        return total
    for i in range(1, N_MFR_STAGES + 1):
        c = cfg.mfr_channels(i)
        total += 2 * c * c + c                          # up projection
        per_pass = 2 * c + (c * c + c) + c * c          # norm, gate, proj
        per_pass += multi_scale_param_count(c, cfg.scan_scales[i - 1], cfg.n_state,
                                            cfg.dilated)
        total += cfg.n_tasks * 2 * per_pass
        total += 2 * c + c * c + c                      # shared norm + gate
        if cfg.cross_task:
            scan_cfg = BiScanConfig(
                c, cfg.n_state, DIRECTIONS, cfg.biscan_pattern_scales(i),
                cfg.mode_order, cfg.bidirectional,
            )
            total += biscan_param_count(scan_cfg)
        else:
            total += ss2d_param_count(c, cfg.n_state)
    dec = cfg.decoder_channels
    for t in cfg.tasks:
        total += c0 * dec + dec
        total += (dec // (HEAD_UPSCALE ** 2)) * t.out_channels + t.out_channels
    return total


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    off = len(CHECKPOINT_MAGIC)

    def pull(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise FormatError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (count,) = pull("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = pull("<H")
        if off + nlen > len(blob):
            raise FormatError("truncated checkpoint")
        name = blob[off:off + nlen].decode()
        off += nlen
        (rank,) = pull("<B")
        shape = pull(f"<{rank}I")
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        size = 8 * n
        if off + size > len(blob):
            raise FormatError("truncated checkpoint")
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += size
    if off != len(blob):
        raise FormatError("trailing bytes in checkpoint")
    return out


def load_checkpoint(path, model: Model) -> None:
    blobs = read_checkpoint(path)
    if set(blobs) != set(model.params):
        raise FormatError("checkpoint parameter names do not match the model")
    for name, t in model.params.items():
        if blobs[name].shape != t.shape:
            raise FormatError(f"shape mismatch for '{name}'")
        t.data = np.ascontiguousarray(blobs[name])


def mtl_baseline_config(cfg: ModelConfig) -> ModelConfig:
    """Plain shared-decoder arm: single-scale scans, no cross-task interaction."""
    return replace(cfg, scan_scales=((1,),) * N_MFR_STAGES, cross_task=False,
                   ms_patterns_in_biscan=False)


def biscan_only_config(cfg: ModelConfig) -> ModelConfig:
    return replace(cfg, scan_scales=((1,),) * N_MFR_STAGES, cross_task=True,
                   ms_patterns_in_biscan=False)


def msscan_only_config(cfg: ModelConfig) -> ModelConfig:
    return replace(cfg, cross_task=False)


def single_task_config(cfg: ModelConfig, task_index: int) -> ModelConfig:
    """One task, plain decoder: the per-task reference arm."""
    base = mtl_baseline_config(cfg)
    return replace(base, tasks=(cfg.tasks[task_index],), task_order=None)

"""Synthetic multi-task scenes, a portable tensor file format, iteration.

Scenes are composed analytically: a slanted ground plane plus randomly
placed slanted rectangles and spherical caps, z-buffered per pixel.  Class
ids, depth, and surface normals all derive from the same closed-form
surfaces, and the boundary map is exactly the set of pixels whose 4-
neighbourhood crosses a class edge, so every label pair is consistent by
construction.

Tensor files: magic "MTSN1", u32 rank, u32 extents (little-endian), then a
float64 or u16 payload; the element type is inferred from the payload
length.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, FormatError
from .tensor import Tensor

TENSOR_MAGIC = b"MTSN1"

# fixed, class-id-indexed palette; wraps for high class counts
_PALETTE = np.array([
    [0.35, 0.55, 0.30],
    [0.80, 0.25, 0.20],
    [0.20, 0.40, 0.80],
    [0.85, 0.75, 0.25],
    [0.60, 0.30, 0.70],
    [0.25, 0.75, 0.70],
    [0.80, 0.50, 0.20],
    [0.55, 0.55, 0.55],
])

_LIGHT = np.array([0.4, 0.6, 0.8]) / np.linalg.norm([0.4, 0.6, 0.8])


@dataclass
class SceneSample:
    image: np.ndarray     # (3, H, W) in [0, 1]
    semseg: np.ndarray    # (H, W) class ids
    depth: np.ndarray     # (H, W) positive
    normals: np.ndarray   # (3, H, W) unit vectors
    boundary: np.ndarray  # (H, W) in {0, 1}

    @property
    def hw(self) -> tuple[int, int]:
        return self.semseg.shape


def _normalize_field(zx: np.ndarray, zy: np.ndarray) -> np.ndarray:
    """Unit normals of the surface z(x, y) from its gradient field."""
    n = np.stack([-zx, -zy, np.ones_like(zx)])
    return n / np.linalg.norm(n, axis=0, keepdims=True)


def boundary_from_labels(semseg: np.ndarray) -> np.ndarray:
    """Pixels whose class differs from any 4-neighbour."""
    b = np.zeros(semseg.shape, dtype=np.uint8)
    dv = semseg[1:, :] != semseg[:-1, :]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    dh = semseg[:, 1:] != semseg[:, :-1]
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b


def generate_scene(seed: int, h: int, w: int, n_objects: int = 5,
                   num_classes: int = 5) -> SceneSample:
    """Render one scene; deterministic in the seed."""
    if h % 32 or w % 32:
        raise DataError(f"scene extents must be divisible by 32, got {h}x{w}")
    if num_classes < 2:
        raise DataError("need at least a ground class and one object class")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij")

    gx, gy = rng.uniform(-0.008, 0.008, 2)
    depth = rng.uniform(4.0, 6.0) + gx * xx + gy * yy
    zx = np.full((h, w), gx)
    zy = np.full((h, w), gy)
    semseg = np.zeros((h, w), dtype=np.int64)

    for i in range(n_objects):
        cls = 1 + i % (num_classes - 1)
        cx = rng.uniform(0.15, 0.85) * w
        cy = rng.uniform(0.15, 0.85) * h
        if rng.random() < 0.5:
            sx = rng.uniform(0.08, 0.25) * w
            sy = rng.uniform(0.08, 0.25) * h
            mask = (np.abs(xx - cx) <= sx) & (np.abs(yy - cy) <= sy)
            ox, oy = rng.uniform(-0.02, 0.02, 2)
            z = rng.uniform(1.5, 3.5) + ox * (xx - cx) + oy * (yy - cy)
            ozx = np.full((h, w), ox)
            ozy = np.full((h, w), oy)
        else:
            radius = rng.uniform(0.12, 0.30) * min(h, w)
            alpha = rng.uniform(0.02, 0.06)
            rho2 = (xx - cx) ** 2 + (yy - cy) ** 2
            mask = rho2 <= (0.9 * radius) ** 2
            s = np.sqrt(np.maximum(radius**2 - rho2, 1e-9))
            z = rng.uniform(2.0, 4.0) - alpha * s
            ozx = alpha * (xx - cx) / s
            ozy = alpha * (yy - cy) / s
        wins = mask & (z < depth)
        depth[wins] = z[wins]
        zx[wins] = ozx[wins]
        zy[wins] = ozy[wins]
        semseg[wins] = cls

    normals = _normalize_field(zx, zy)
    boundary = boundary_from_labels(semseg)

    lambert = np.clip(np.einsum("c,chw->hw", _LIGHT, normals), 0.0, 1.0)
    znorm = (depth - depth.min()) / (depth.max() - depth.min() + 1e-9)
    color = _PALETTE[semseg % len(_PALETTE)].transpose(2, 0, 1)
    image = 0.15 + 0.5 * color * (0.35 + 0.65 * lambert) + 0.25 * (1.0 - znorm)
    image = np.clip(image + rng.normal(0.0, 0.01, (3, h, w)), 0.0, 1.0)
    return SceneSample(image, semseg, depth, normals, boundary.astype(np.int64))


def generate_dataset(seed_start: int, count: int, h: int, w: int,
                     n_objects: int = 5, num_classes: int = 5) -> list[SceneSample]:
    return [generate_scene(seed_start + i, h, w, n_objects, num_classes)
            for i in range(count)]


# ---------------------------------------------------------------------------
# augmentation


def flip_sample(s: SceneSample) -> SceneSample:
    """Horizontal flip of every modality; the normal x-component negates."""
    normals = s.normals[:, :, ::-1].copy()
    normals[0] = -normals[0]
    return SceneSample(
        image=np.ascontiguousarray(s.image[:, :, ::-1]),
        semseg=np.ascontiguousarray(s.semseg[:, ::-1]),
        depth=np.ascontiguousarray(s.depth[:, ::-1]),
        normals=normals,
        boundary=np.ascontiguousarray(s.boundary[:, ::-1]),
    )


def crop_sample(s: SceneSample, y0: int, x0: int, ch: int, cw: int) -> SceneSample:
    h, w = s.hw
    if y0 < 0 or x0 < 0 or y0 + ch > h or x0 + cw > w:
        raise DataError("crop window outside the sample")
    sl = (slice(y0, y0 + ch), slice(x0, x0 + cw))
    return SceneSample(
        image=np.ascontiguousarray(s.image[:, sl[0], sl[1]]),
        semseg=np.ascontiguousarray(s.semseg[sl]),
        depth=np.ascontiguousarray(s.depth[sl]),
        normals=np.ascontiguousarray(s.normals[:, sl[0], sl[1]]),
        boundary=np.ascontiguousarray(s.boundary[sl]),
    )


def dataset_iter(samples: Sequence[SceneSample], batch_size: int, seed: int,
                 augment: bool = True,
                 crop_hw: tuple[int, int] | None = None) -> Iterator[list[SceneSample]]:
    """Endless stream of batches, reshuffled every epoch from one seed."""
    if not samples:
        raise DataError("empty dataset")
    rng = np.random.default_rng(seed)
    n = len(samples)
    while True:
        order = rng.permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            batch = []
            for idx in order[lo:lo + batch_size]:
                s = samples[int(idx)]
                if crop_hw is not None:
                    ch, cw = crop_hw
                    h, w = s.hw
                    if ch > h or cw > w:
                        raise DataError("crop larger than sample")
                    y0 = int(rng.integers(0, h - ch + 1))
                    x0 = int(rng.integers(0, w - cw + 1))
                    s = crop_sample(s, y0, x0, ch, cw)
                if augment and rng.random() < 0.5:
                    s = flip_sample(s)
                batch.append(s)
            yield batch


# ---------------------------------------------------------------------------
# tensor files


def write_tensor(path, value) -> None:
    """Float data is stored as little-endian float64, integer data as u16."""
    if isinstance(value, Tensor):
        arr = value.data
    else:
        arr = np.asarray(value)
    if arr.ndim < 1 or any(e <= 0 for e in arr.shape):
        raise FormatError(f"refusing to write tensor with extents {arr.shape}")
    if np.issubdtype(arr.dtype, np.floating):
        payload = np.ascontiguousarray(arr, dtype="<f8")
    elif np.issubdtype(arr.dtype, np.integer):
        if arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max:
            raise FormatError("integer payload outside the u16 range")
        payload = np.ascontiguousarray(arr, dtype="<u2")
    else:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(payload.tobytes())


def read_tensor_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise FormatError(f"bad magic in {path}")
    off = len(TENSOR_MAGIC)
    if off + 4 > len(blob):
        raise FormatError("truncated header")
    (rank,) = struct.unpack_from("<I", blob, off)
    off += 4
    if rank < 1 or off + 4 * rank > len(blob):
        raise FormatError("truncated or empty extent list")
    shape = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    if any(e == 0 for e in shape):
        raise FormatError("zero extent")
    n = int(np.prod(shape, dtype=np.int64))
    remaining = len(blob) - off
    if remaining == 8 * n:
        dtype = "<f8"
    elif remaining == 2 * n:
        dtype = "<u2"
    else:
        raise FormatError(f"payload of {remaining} bytes fits neither f64 nor u16")
    return np.frombuffer(blob, dtype=dtype, count=n, offset=off).reshape(shape).copy()


def read_tensor(path) -> Tensor:
    return Tensor(read_tensor_raw(path).astype(np.float64))


_SAMPLE_FIELDS = ("image", "semseg", "depth", "normals", "boundary")


def save_sample(prefix, s: SceneSample) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    for f in _SAMPLE_FIELDS:
        write_tensor(prefix.with_suffix(f".{f}.mtsn"), getattr(s, f))


def load_sample(prefix) -> SceneSample:
    prefix = Path(prefix)
    arrays = {}
    for f in _SAMPLE_FIELDS:
        p = prefix.with_suffix(f".{f}.mtsn")
        if not p.exists():
            raise DataError(f"missing sample file {p}")
        arr = read_tensor_raw(p)
        arrays[f] = arr.astype(np.int64) if arr.dtype == np.uint16 else arr
    return SceneSample(**arrays)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class GeneratorSpec:
    seed_start: int
    count: int
    height: int
    width: int
    n_objects: int = 5
    num_classes: int = 5


def load_manifest(path) -> list[SceneSample]:
    """Manifest JSON: either {"generator": {...}} or {"files": [prefix, ...]}."""
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(spec, dict) or len(spec) != 1:
        raise DataError("manifest must hold exactly one of 'generator' or 'files'")
    if "generator" in spec:
        allowed = set(GeneratorSpec.__dataclass_fields__)
        unknown = set(spec["generator"]) - allowed
        if unknown:
            raise DataError(f"unknown generator keys: {sorted(unknown)}")
        g = GeneratorSpec(**spec["generator"])
        return generate_dataset(g.seed_start, g.count, g.height, g.width,
                                g.n_objects, g.num_classes)
    if "files" in spec:
        return [load_sample(path.parent / p) for p in spec["files"]]
    raise DataError("manifest must hold 'generator' or 'files'")

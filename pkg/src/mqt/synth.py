"""Procedural multi-task scenes with exact, mutually consistent labels."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialization
from .nn import bilinear_matrix
from .tensor import ContractError

# Fixed per-class colors so the class of a pixel is recoverable from its color.
_PALETTE = np.array(
    [
        [0.15, 0.15, 0.15],
        [0.90, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.35, 0.95],
        [0.95, 0.85, 0.20],
        [0.80, 0.30, 0.85],
        [0.25, 0.85, 0.85],
        [0.95, 0.55, 0.15],
    ]
)


class DatasetError(ValueError):
    """Scene directory is missing, incomplete or inconsistent."""


def class_colors(num_classes: int) -> np.ndarray:
    if num_classes <= len(_PALETTE):
        return _PALETTE[:num_classes].copy()
    extra = num_classes - len(_PALETTE)
    hue = np.arange(extra) / extra
    more = 0.5 + 0.4 * np.stack([np.cos(2 * np.pi * (hue + k / 3)) for k in range(3)], axis=1)
    return np.concatenate([_PALETTE, more])


@dataclass
class SyntheticScene:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    seg: np.ndarray  # H x W int64
    depth: np.ndarray  # H x W float32
    normals: np.ndarray  # H x W x 3 float32, unit length
    edge: np.ndarray  # H x W uint8
    sal: np.ndarray  # H x W uint8
    seed: int
    num_classes: int
    d_min: float = 1.0
    d_max: float = 5.0
    valid: np.ndarray | None = None  # H x W bool; None means every pixel is labelled

    @property
    def shape(self) -> tuple[int, int]:
        return self.seg.shape

    def target(self, kind: str) -> np.ndarray:
        if kind == "seg":
            return self.seg
        if kind in ("depth", "normals", "edge", "sal"):
            return getattr(self, kind)
        raise DatasetError(f"synthetic scenes have no {kind!r} labels")


def normals_from_depth(depth: np.ndarray) -> np.ndarray:
    """normalize(-dz/dx, -dz/dy, 1) with central differences (one-sided at borders)."""
    depth = np.asarray(depth, dtype=np.float64)
    dzdy, dzdx = np.gradient(depth)
    n = np.stack([-dzdx, -dzdy, np.ones_like(depth)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def seg_boundaries(seg: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of a different class."""
    seg = np.asarray(seg)
    edge = np.zeros(seg.shape, dtype=bool)
    dv = seg[1:, :] != seg[:-1, :]
    dh = seg[:, 1:] != seg[:, :-1]
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    return edge.astype(np.uint8)


def generate_scene(
    seed: int,
    H: int = 64,
    W: int = 64,
    num_classes: int = 3,
    primitives: tuple[int, int] = (1, 4),
    d_min: float = 1.0,
    d_max: float = 5.0,
) -> SyntheticScene:
    if H < 16 or W < 16:
        raise ContractError(f"scene size {H}x{W} must be at least 16x16")
    if num_classes < 2:
        raise ContractError("need at least one foreground class")
    lo, hi = primitives
    if lo < 0 or hi < lo:
        raise ContractError(f"bad primitive count range {primitives}")
    rng = np.random.default_rng(seed)
    span = d_max - d_min
    seg = np.zeros((H, W), dtype=np.int64)
    depth = np.full((H, W), d_min + span * rng.uniform(0.7, 0.95))
    sal = np.zeros((H, W), dtype=bool)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    for _ in range(int(rng.integers(lo, hi + 1))):
        cls = int(rng.integers(1, num_classes))
        h = rng.uniform(0.2, 0.5) * H
        w = rng.uniform(0.2, 0.5) * W
        cy, cx = rng.uniform(0.15, 0.85) * H, rng.uniform(0.15, 0.85) * W
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
        else:
            mask = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
        base = d_min + span * rng.uniform(0.25, 0.6)
        gy, gx = rng.uniform(-0.02, 0.02, size=2) * span / 4
        plane = base + gy * (yy - cy) + gx * (xx - cx)
        seg[mask] = cls
        depth[mask] = plane[mask]
        sal |= mask

    depth = np.clip(depth, d_min, d_max).astype(np.float32)
    image = class_colors(num_classes)[seg].astype(np.float32)
    return SyntheticScene(
        image=image,
        seg=seg,
        depth=depth,
        normals=normals_from_depth(depth).astype(np.float32),
        edge=seg_boundaries(seg),
        sal=sal.astype(np.uint8),
        seed=int(seed),
        num_classes=num_classes,
        d_min=d_min,
        d_max=d_max,
    )


def _resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    squeeze = x.ndim == 2
    x3 = x[..., None] if squeeze else x
    h, w, c = x3.shape
    ry, rx = bilinear_matrix(h, out_h), bilinear_matrix(w, out_w)
    rows = (ry @ x3.reshape(h, w * c).astype(np.float64)).reshape(out_h, w, c)
    out = np.matmul(rx, rows)
    return out[..., 0] if squeeze else out


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def augment(
    scene: SyntheticScene,
    seed: int,
    out_size: tuple[int, int] | None = None,
    scale_range: tuple[float, float] = (0.5, 2.0),
    center: bool = False,
    pad: bool = False,
) -> SyntheticScene:
    """Random rescale then random crop; depth is divided by the scale factor.

    With ``pad`` a rescaled image smaller than the crop is zero-padded and the
    padding is marked invalid in ``valid`` instead of raising.
    """
    rng = np.random.default_rng(seed)
    H, W = scene.shape
    out_h, out_w = out_size or (H, W)
    factor = float(rng.uniform(*scale_range))
    new_h, new_w = max(1, int(round(H * factor))), max(1, int(round(W * factor)))
    if not pad and (out_h > new_h or out_w > new_w):
        raise ContractError(f"crop {out_h}x{out_w} larger than rescaled image {new_h}x{new_w}")
    valid = np.ones(scene.shape, dtype=bool) if scene.valid is None else scene.valid

    if (new_h, new_w) == (H, W):
        image, depth, normals = scene.image, scene.depth.astype(np.float64), scene.normals
        seg, edge, sal = scene.seg, scene.edge, scene.sal
    else:
        image = _resize_bilinear(scene.image, new_h, new_w)
        depth = _resize_bilinear(scene.depth, new_h, new_w)
        normals = _resize_bilinear(scene.normals, new_h, new_w)
        normals = normals / np.maximum(np.linalg.norm(normals, axis=-1, keepdims=True), 1e-12)
        iy, ix = _nearest_index(H, new_h), _nearest_index(W, new_w)
        seg, edge, sal, valid = (m[np.ix_(iy, ix)] for m in (scene.seg, scene.edge, scene.sal, valid))

    fields = {"image": image, "depth": depth, "normals": normals, "seg": seg, "edge": edge, "sal": sal, "valid": valid}
    ph, pw = max(out_h - new_h, 0), max(out_w - new_w, 0)
    if ph or pw:
        for k, v in fields.items():
            fields[k] = np.pad(v, ((0, ph), (0, pw)) + ((0, 0),) * (v.ndim - 2))
        fields["normals"][new_h:, :, 2] = 1.0
        fields["normals"][:, new_w:, 2] = 1.0
        new_h, new_w = new_h + ph, new_w + pw

    if center:
        top, left = (new_h - out_h) // 2, (new_w - out_w) // 2
    else:
        top = int(rng.integers(0, new_h - out_h + 1))
        left = int(rng.integers(0, new_w - out_w + 1))
    win = (slice(top, top + out_h), slice(left, left + out_w))
    crop = {k: v[win] for k, v in fields.items()}
    all_valid = bool(crop["valid"].all())
    return SyntheticScene(
        image=np.asarray(crop["image"], dtype=np.float32),
        seg=np.array(crop["seg"]),
        depth=np.asarray(crop["depth"] / factor, dtype=np.float32),
        normals=np.asarray(crop["normals"], dtype=np.float32),
        edge=np.array(crop["edge"]),
        sal=np.array(crop["sal"]),
        seed=scene.seed,
        num_classes=scene.num_classes,
        d_min=scene.d_min / factor,
        d_max=scene.d_max / factor,
        valid=None if all_valid and scene.valid is None else np.array(crop["valid"]),
    )


_FIELDS = ("image", "seg", "depth", "normals", "edge", "sal")
_LABEL_DTYPES = {"seg": np.int64, "edge": np.uint8, "sal": np.uint8}


def write_dataset(directory: str | os.PathLike, scenes: list[SyntheticScene]) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    files = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}.mqt"
        tensors = {}
        for f in _FIELDS:
            arr = getattr(scene, f)
            tensors[f] = arr if arr.dtype in (np.float32, np.float64) else arr.astype(np.float32)
        header = {
            "seed": scene.seed,
            "num_classes": scene.num_classes,
            "d_min": scene.d_min,
            "d_max": scene.d_max,
        }
        serialization.save(root / name, tensors, header)
        files.append(name)
    manifest = {
        "format": "mqt-scenes/1",
        "count": len(scenes),
        "files": files,
        "seeds": [s.seed for s in scenes],
        "shapes": [list(s.shape) for s in scenes],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_dataset(directory: str | os.PathLike) -> list[SyntheticScene]:
    root = Path(directory)
    path = root / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(path.read_text())
        files, seeds, shapes = manifest["files"], manifest["seeds"], manifest["shapes"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"unreadable manifest {path}: {exc}") from exc
    if not (len(files) == len(seeds) == len(shapes) == manifest.get("count")):
        raise DatasetError("manifest count does not match its file list")
    scenes = []
    for name, seed, shape in zip(files, seeds, shapes):
        tensors, header = serialization.load(root / name)
        missing = [f for f in _FIELDS if f not in tensors]
        if missing or header is None:
            raise DatasetError(f"{name}: missing fields {missing}")
        arrays = {
            f: tensors[f].astype(_LABEL_DTYPES[f]) if f in _LABEL_DTYPES else tensors[f] for f in _FIELDS
        }
        scene = SyntheticScene(
            **arrays,
            seed=header["seed"],
            num_classes=header["num_classes"],
            d_min=header["d_min"],
            d_max=header["d_max"],
        )
        if scene.seed != seed or list(scene.shape) != list(shape):
            raise DatasetError(f"{name}: manifest entry disagrees with stored scene")
        scenes.append(scene)
    return scenes

"""Label-preserving augmentations and the per-class balancing planner."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import SkinLesionError, ValidationError
from .imaging import as_image, load_image, load_mask, resize, save_image, save_mask, to_u8
from .tensor import derive_seed, seeded_rng

GEOMETRIC = ("rotate", "scale", "flip_h", "flip_v", "shear", "crop")
PHOTOMETRIC = ("contrast", "brightness", "cutout")
ALL_KINDS = GEOMETRIC + PHOTOMETRIC
# op set used when synthesising images for under-represented classes
BALANCE_KINDS = ("rotate", "crop", "scale", "flip_h", "flip_v", "shear", "contrast")
_ARITY = {"rotate": 1, "scale": 1, "flip_h": 0, "flip_v": 0, "shear": 1, "contrast": 1,
          "brightness": 1, "crop": 4, "cutout": 4}

MANIFEST_COLUMNS = ("out_path", "src_id", "class", "op_chain", "seed")


@dataclass(frozen=True)
class AugmentOp:
    """One augmentation step.

    ``crop`` and ``cutout`` take a rectangle ``(top, left, height, width)`` in
    fractions of the image size, so a plan can be made before image sizes
    are known.
    """

    kind: str
    params: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in _ARITY:
            raise ValidationError(f"unknown augmentation {self.kind!r}")
        if len(self.params) != _ARITY[self.kind]:
            raise ValidationError(f"{self.kind} takes {_ARITY[self.kind]} parameter(s), got {self.params}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.kind == "scale" and not self.params[0] > 0:
            raise ValidationError("scale factor must be > 0")
        if self.kind == "contrast" and not self.params[0] > 0:
            raise ValidationError("contrast gain must be > 0")
        if self.kind in ("crop", "cutout"):
            top, left, h, w = self.params
            if min(self.params) < 0 or h <= 0 or w <= 0 or top + h > 1 + 1e-9 or left + w > 1 + 1e-9:
                raise ValidationError(f"{self.kind} rectangle {self.params} leaves the image")

    def serialize(self) -> str:
        return f"{self.kind}:" + ",".join(repr(p) for p in self.params)

    @classmethod
    def parse(cls, text: str) -> "AugmentOp":
        kind, _, rest = text.partition(":")
        params = tuple(float(v) for v in rest.split(",")) if rest else ()
        return cls(kind, params)


def serialize_chain(ops: Sequence[AugmentOp]) -> str:
    return "|".join(op.serialize() for op in ops)


def parse_chain(text: str) -> tuple[AugmentOp, ...]:
    return tuple(AugmentOp.parse(t) for t in text.split("|")) if text else ()


def pixel_rect(params, h: int, w: int) -> tuple[int, int, int, int]:
    """Resolve a fractional rectangle to pixel ``(top, left, height, width)``."""
    top, left, fh, fw = params
    r0 = min(int(round(top * h)), h - 1)
    c0 = min(int(round(left * w)), w - 1)
    hh = min(max(1, int(round(fh * h))), h - r0)
    ww = min(max(1, int(round(fw * w))), w - c0)
    return r0, c0, hh, ww


# --- applying ops ------------------------------------------------------------


def _warp(img: np.ndarray, inverse: np.ndarray) -> np.ndarray:
    """Sample ``img`` at ``inverse @ (p - c) + c`` for every output pixel, black outside."""
    h, w, ch = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    sy = inverse[0, 0] * yy + inverse[0, 1] * xx + cy
    sx = inverse[1, 0] * yy + inverse[1, 1] * xx + cx

    padded = np.zeros((h + 2, w + 2, ch))
    padded[1:-1, 1:-1] = img
    sy = np.clip(sy, -1.0, h) + 1.0
    sx = np.clip(sx, -1.0, w) + 1.0
    y0 = np.minimum(np.floor(sy).astype(np.intp), h)
    x0 = np.minimum(np.floor(sx).astype(np.intp), w)
    fy = (sy - y0)[..., None]
    fx = (sx - x0)[..., None]
    out = (
        padded[y0, x0] * (1 - fy) * (1 - fx)
        + padded[y0, x0 + 1] * (1 - fy) * fx
        + padded[y0 + 1, x0] * fy * (1 - fx)
        + padded[y0 + 1, x0 + 1] * fy * fx
    )
    return to_u8(out)


def apply_augment(img, op: AugmentOp) -> np.ndarray:
    """Apply one op; the output always has the input's dimensions."""
    a = as_image(img)
    h, w, _ = a.shape
    kind, p = op.kind, op.params
    if kind == "flip_h":
        return a[:, ::-1].copy()
    if kind == "flip_v":
        return a[::-1].copy()
    if kind == "rotate":
        t = math.radians(p[0] % 360.0)
        if t == 0.0:
            return a.copy()
        c, s = math.cos(t), math.sin(t)
        # rows grow downwards, so a positive angle turns the picture clockwise
        return _warp(a, np.array([[c, -s], [s, c]]))
    if kind == "scale":
        return _warp(a, np.eye(2) / p[0])
    if kind == "shear":
        return _warp(a, np.array([[1.0, 0.0], [-p[0], 1.0]]))
    if kind == "crop":
        r0, c0, hh, ww = pixel_rect(p, h, w)
        return resize(a[r0 : r0 + hh, c0 : c0 + ww], h, w)
    if kind == "cutout":
        r0, c0, hh, ww = pixel_rect(p, h, w)
        out = a.copy()
        out[r0 : r0 + hh, c0 : c0 + ww] = 0
        return out
    if kind == "contrast":
        f = a.astype(np.float64)
        m = f.mean()
        return to_u8((f - m) * p[0] + m)
    if kind == "brightness":
        return to_u8(a.astype(np.float64) + p[0])
    raise ValidationError(f"unknown augmentation {kind!r}")


def apply_chain(img, ops: Sequence[AugmentOp]) -> np.ndarray:
    out = as_image(img)
    for op in ops:
        out = apply_augment(out, op)
    return out


def apply_chain_to_mask(mask, ops: Sequence[AugmentOp]) -> np.ndarray:
    """Replay the geometric part of a chain on a binary mask."""
    m = (np.asarray(mask) != 0).astype(np.uint8) * 255
    for op in ops:
        if op.kind in GEOMETRIC:
            m = apply_augment(m, op)[:, :, 0]
    return (m >= 128).astype(np.uint8)


# --- random op sampling ------------------------------------------------------


@dataclass(frozen=True)
class AugmentRanges:
    rotate_deg: float = 45.0
    scale_min: float = 0.8
    scale_max: float = 1.2
    shear: float = 0.2
    contrast_min: float = 0.7
    contrast_max: float = 1.3
    brightness: float = 30.0
    cutout_min: float = 0.05
    cutout_max: float = 0.25
    crop_min: float = 0.8
    max_chain: int = 3


def _r4(v: float) -> float:
    return round(float(v), 4)


def sample_op(kind: str, rng: np.random.Generator, ranges: AugmentRanges = AugmentRanges()) -> AugmentOp:
    if kind in ("flip_h", "flip_v"):
        return AugmentOp(kind)
    if kind == "rotate":
        return AugmentOp(kind, (_r4(rng.uniform(-ranges.rotate_deg, ranges.rotate_deg)),))
    if kind == "scale":
        return AugmentOp(kind, (_r4(rng.uniform(ranges.scale_min, ranges.scale_max)),))
    if kind == "shear":
        return AugmentOp(kind, (_r4(rng.uniform(-ranges.shear, ranges.shear)),))
    if kind == "contrast":
        return AugmentOp(kind, (_r4(rng.uniform(ranges.contrast_min, ranges.contrast_max)),))
    if kind == "brightness":
        return AugmentOp(kind, (_r4(rng.uniform(-ranges.brightness, ranges.brightness)),))
    if kind == "crop":
        fh = _r4(rng.uniform(ranges.crop_min, 1.0))
        fw = _r4(rng.uniform(ranges.crop_min, 1.0))
        return AugmentOp(kind, (_r4(rng.uniform(0, 1 - fh)), _r4(rng.uniform(0, 1 - fw)), fh, fw))
    if kind == "cutout":
        fh = _r4(rng.uniform(ranges.cutout_min, ranges.cutout_max))
        fw = _r4(rng.uniform(ranges.cutout_min, ranges.cutout_max))
        return AugmentOp(kind, (_r4(rng.uniform(0, 1 - fh)), _r4(rng.uniform(0, 1 - fw)), fh, fw))
    raise ValidationError(f"unknown augmentation {kind!r}")


def sample_chain(rng: np.random.Generator, ranges: AugmentRanges = AugmentRanges(),
                 kinds: Sequence[str] = BALANCE_KINDS) -> tuple[AugmentOp, ...]:
    """1 to ``max_chain`` distinct ops drawn uniformly from ``kinds``."""
    n = int(rng.integers(1, ranges.max_chain + 1))
    picked = rng.choice(len(kinds), size=min(n, len(kinds)), replace=False)
    return tuple(sample_op(kinds[i], rng, ranges) for i in picked)


# --- balancing ---------------------------------------------------------------


@dataclass
class SynthItem:
    src_index: int
    seed: int
    ops: tuple[AugmentOp, ...]


@dataclass
class ClassPlan:
    name: str
    source_count: int
    target: int
    seed: int
    keep: list[int] = field(default_factory=list)
    synth: list[SynthItem] = field(default_factory=list)

    @property
    def synthesize(self) -> int:
        return len(self.synth)


@dataclass
class BalancePlan:
    target: int
    seed: int
    classes: list[ClassPlan]

    @property
    def total(self) -> int:
        return sum(len(c.keep) + c.synthesize for c in self.classes)

    def synthesize_counts(self) -> dict[str, int]:
        return {c.name: c.synthesize for c in self.classes}


def plan_balance(class_counts: Mapping[str, int], target: int = 2000, seed: int = 0,
                 ranges: AugmentRanges = AugmentRanges()) -> BalancePlan:
    """Bring every class to exactly ``target`` images.

    Classes below target keep all their images and get ``target - count``
    augmented copies, cycling through a seeded shuffle of their sources.
    Classes at or above target are subsampled without replacement.
    """
    if target < 1:
        raise ValidationError(f"target must be >= 1, got {target}")
    plans = []
    for name, count in class_counts.items():
        count = int(count)
        if count < 1:
            raise ValidationError(f"class {name!r} has no images")
        cseed = derive_seed(seed, "balance", name)
        rng = seeded_rng(cseed)
        cp = ClassPlan(name, count, target, cseed)
        if count >= target:
            cp.keep = sorted(int(i) for i in rng.choice(count, size=target, replace=False))
        else:
            cp.keep = list(range(count))
            order = rng.permutation(count)
            for j in range(target - count):
                item_seed = derive_seed(cseed, j)
                ops = sample_chain(seeded_rng(item_seed), ranges)
                cp.synth.append(SynthItem(int(order[j % count]), item_seed, ops))
        plans.append(cp)
    return BalancePlan(target, seed, plans)


@dataclass(frozen=True)
class SourceImage:
    id: str
    path: str
    mask_path: str | None = None


@dataclass(frozen=True)
class ManifestRow:
    out_path: str
    src_id: str
    cls: str
    op_chain: str
    seed: int
    mask_path: str | None = None

    def as_csv(self) -> list[str]:
        return [self.out_path, self.src_id, self.cls, self.op_chain, str(self.seed)]


def execute_plan(plan: BalancePlan, source: Mapping[str, Sequence[SourceImage]], out_dir,
                 manifest_path=None) -> list[ManifestRow]:
    """Materialise a plan: write augmented images (and masks) plus the manifest.

    ``source[class]`` lists that class's images in the order the plan's
    indices refer to. Kept originals are referenced in place, not copied.
    Augmented masks, when the source has one, are written next to the image
    as ``<stem>_mask.png``.
    """
    out_dir = Path(out_dir)
    rows: list[ManifestRow] = []
    for cp in plan.classes:
        items = list(source[cp.name])
        if len(items) != cp.source_count:
            raise ValidationError(f"class {cp.name!r}: plan expects {cp.source_count} sources, got {len(items)}")
        for idx in cp.keep:
            s = items[idx]
            rows.append(ManifestRow(str(s.path), s.id, cp.name, "", cp.seed, s.mask_path))
        for j, item in enumerate(cp.synth):
            s = items[item.src_index]
            try:
                img = load_image(s.path)
            except (OSError, ValueError) as exc:
                raise SkinLesionError(f"cannot read source image {s.id!r} at {s.path}: {exc}") from exc
            out_path = out_dir / cp.name / f"{s.id}_aug{j:05d}.png"
            save_image(apply_chain(img, item.ops), out_path)
            mask_out = None
            if s.mask_path:
                mask_out = out_path.with_name(out_path.stem + "_mask.png")
                save_mask(apply_chain_to_mask(load_mask(s.mask_path), item.ops), mask_out)
            rows.append(ManifestRow(str(out_path), s.id, cp.name, serialize_chain(item.ops),
                                    item.seed, None if mask_out is None else str(mask_out)))
    if manifest_path is not None:
        write_manifest(rows, manifest_path)
    return rows


def write_manifest(rows: Sequence[ManifestRow], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_COLUMNS)
        for r in rows:
            wr.writerow(r.as_csv())


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValidationError(f"{path}: expected columns {MANIFEST_COLUMNS}, got {rd.fieldnames}")
        return [ManifestRow(r["out_path"], r["src_id"], r["class"], r["op_chain"], int(r["seed"]))
                for r in rd]

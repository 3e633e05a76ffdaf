"""ISIC-layout ingestion, the dataset manifest, and lazy network-input loading."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import MissingArtifactError, ValidationError
from .imaging import apply_mask, as_image, image_to_array, load_image, load_mask, mask_to_tensor, save_image, \
    save_mask, to_grayscale
from .models import CLASS_NAMES, N_CLASSES

# ground-truth columns in file order; each maps onto CLASS_NAMES at the same index
ISIC_COLUMNS = ("MEL", "NV", "BCC", "AK", "BKL", "DF", "VASC", "SCC")
OPTIONAL_COLUMNS = ("UNK",)
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
MANIFEST_FIELDS = ("image_id", "path", "class_id", "class", "split", "mask_path")


@dataclass(frozen=True)
class DatasetRow:
    image_id: str
    path: str
    class_id: int
    split: str = ""
    mask_path: str = ""

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]


@dataclass
class DatasetManifest:
    rows: list[DatasetRow]

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.class_id for r in self.rows], dtype=np.int64)

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=N_CLASSES)
        return {name: int(c) for name, c in zip(CLASS_NAMES, counts)}

    def counts_report(self) -> str:
        lines = [f"{name:<4} {count:>6}" for name, count in self.class_counts().items()]
        lines.append(f"{'all':<4} {len(self):>6}")
        return "\n".join(lines)

    def with_rows(self, rows: Sequence[DatasetRow]) -> "DatasetManifest":
        return DatasetManifest(list(rows))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(MANIFEST_FIELDS)
            for r in self.rows:
                wr.writerow([r.image_id, r.path, r.class_id, r.class_name, r.split, r.mask_path])

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(path)
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            if tuple(rd.fieldnames or ()) != MANIFEST_FIELDS:
                raise ValidationError(f"{path}: expected columns {MANIFEST_FIELDS}, got {rd.fieldnames}")
            rows = [DatasetRow(r["image_id"], r["path"], int(r["class_id"]), r["split"], r["mask_path"])
                    for r in rd]
        return cls(rows)


def _find_image(image_dir: Path, image_id: str) -> Path | None:
    direct = image_dir / image_id
    if direct.suffix.lower() in IMAGE_EXTENSIONS and direct.is_file():
        return direct
    for ext in IMAGE_EXTENSIONS:
        p = image_dir / f"{image_id}{ext}"
        if p.is_file():
            return p
    return None


def _find_mask(mask_dir: Path, image_id: str) -> Path | None:
    for name in (f"{image_id}_mask.png", f"{image_id}_segmentation.png", f"{image_id}.png"):
        p = mask_dir / name
        if p.is_file():
            return p
    return None


def _one_hot_class(row: dict, lineno: int, columns: Sequence[str]) -> int:
    values = []
    for col in columns:
        raw = (row.get(col) or "").strip()
        try:
            v = float(raw)
        except ValueError:
            raise ValidationError(f"row {lineno}: column {col} has non-numeric value {raw!r}") from None
        if v not in (0.0, 1.0):
            raise ValidationError(f"row {lineno}: column {col} must be 0 or 1, got {raw!r}")
        values.append(v)
    hot = [i for i, v in enumerate(values) if v == 1.0]
    if len(hot) != 1:
        kind = "all-zero" if not hot else "multi-hot"
        raise ValidationError(f"row {lineno}: {kind} label row ({len(hot)} classes set)")
    if hot[0] >= len(ISIC_COLUMNS):
        raise ValidationError(f"row {lineno}: labelled {columns[hot[0]]}, which is not one of the 8 classes")
    return hot[0]


def ingest(labels_csv, image_dir, mask_dir=None) -> DatasetManifest:
    """Validate an ISIC-2019-style ground-truth CSV against an image folder.

    Row numbers in errors count the header as row 1, matching a spreadsheet
    view of the file. Masks, when ``mask_dir`` is given, are optional per image.
    """
    labels_csv, image_dir = Path(labels_csv), Path(image_dir)
    if not labels_csv.is_file():
        raise MissingArtifactError(labels_csv, "pass the ground-truth CSV")
    if not image_dir.is_dir():
        raise MissingArtifactError(image_dir, "pass the image directory")
    with open(labels_csv, newline="") as fh:
        rd = csv.DictReader(fh)
        header = [h.strip() for h in (rd.fieldnames or [])]
        if not header:
            raise ValidationError(f"{labels_csv}: empty file")
        expected = ["image", *ISIC_COLUMNS]
        if header[: len(expected)] != expected or any(h not in OPTIONAL_COLUMNS for h in header[len(expected):]):
            raise ValidationError(f"{labels_csv}: header must be {','.join(expected)} (optionally ,UNK); "
                                  f"got {','.join(header)}")
        rd.fieldnames = header
        columns = header[1:]
        rows, seen = [], set()
        for lineno, rec in enumerate(rd, start=2):
            if None in rec or any(rec.get(h) is None for h in header):
                raise ValidationError(f"row {lineno}: expected {len(header)} fields")
            image_id = rec["image"].strip()
            if not image_id:
                raise ValidationError(f"row {lineno}: empty image id")
            if image_id in seen:
                raise ValidationError(f"row {lineno}: duplicate image id {image_id!r}")
            seen.add(image_id)
            cls = _one_hot_class(rec, lineno, columns)
            path = _find_image(image_dir, image_id)
            if path is None:
                raise ValidationError(f"row {lineno}: no image file for {image_id!r} in {image_dir}")
            mask = _find_mask(Path(mask_dir), image_id) if mask_dir is not None else None
            rows.append(DatasetRow(image_id, str(path), cls, "", str(mask) if mask else ""))
    if not rows:
        raise ValidationError(f"{labels_csv}: no data rows")
    return DatasetManifest(rows)


def write_isic_layout(root, images: Sequence, labels: Sequence[int], masks: Sequence | None = None,
                      prefix: str = "SYN") -> Path:
    """Write ``labels.csv``, ``images/`` and optionally ``masks/`` in the layout ``ingest`` reads."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if masks is not None:
        (root / "masks").mkdir(parents=True, exist_ok=True)
    csv_path = root / "labels.csv"
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["image", *ISIC_COLUMNS])
        for i, (img, lab) in enumerate(zip(images, labels)):
            image_id = f"{prefix}_{i:07d}"
            save_image(img, root / "images" / f"{image_id}.png")
            if masks is not None:
                save_mask(masks[i], root / "masks" / f"{image_id}_mask.png")
            wr.writerow([image_id, *("1.0" if c == lab else "0.0" for c in range(N_CLASSES))])
    return csv_path


# --- network inputs ----------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    """One training/evaluation item: an image path, optional mask path, class."""
    path: str
    mask_path: str
    class_id: int
    group: str


def network_input(img, mask, model: str, use_mask: bool = False) -> list[np.ndarray]:
    """Per-path ``[C, H, W]`` float arrays for one image, following the model's input recipe.

    ``m1`` sees grayscale (masked when ``use_mask``), ``m2-one`` the masked
    colour image, ``m2-dual`` the colour image plus the mask on three channels.
    """
    img = as_image(img)
    if model == "m1":
        if use_mask:
            img = apply_mask(img, mask)
        return [image_to_array(to_grayscale(img))]
    if model == "m2-one":
        return [image_to_array(apply_mask(img, mask))]
    if model == "m2-dual":
        return [image_to_array(img), mask_to_tensor(mask)]
    raise ValidationError(f"unknown model {model!r}")


def needs_mask(model: str, use_mask: bool) -> bool:
    return model != "m1" or use_mask


class LazyInputs:
    """Per-path array views over samples, decoded from disk on indexing.

    ``paths()[p][idx]`` stacks path ``p`` for the selected samples. When the
    whole set fits in ``cache_bytes`` it is decoded once and held in memory.
    """

    def __init__(self, samples: Sequence[Sample], model: str, use_mask: bool = False,
                 cache_bytes: int = 512 * 2**20):
        if not samples:
            raise ValidationError("no samples")
        self.samples = list(samples)
        self.model = model
        self.use_mask = use_mask
        first = self._load(0)
        self.n_paths = len(first)
        per_item = sum(a.nbytes for a in first)
        self._cache = None
        if per_item * len(self.samples) <= cache_bytes:
            loaded = [first] + [self._load(i) for i in range(1, len(self.samples))]
            self._cache = [np.stack([item[p] for item in loaded]) for p in range(self.n_paths)]

    def _load(self, i: int) -> list[np.ndarray]:
        s = self.samples[i]
        img = load_image(s.path)
        mask = None
        if needs_mask(self.model, self.use_mask):
            if not s.mask_path:
                raise MissingArtifactError(s.path + " (mask)", "run the segment stage first")
            mask = load_mask(s.mask_path)
        return network_input(img, mask, self.model, self.use_mask)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.class_id for s in self.samples], dtype=np.int64)

    @property
    def groups(self) -> list[str]:
        return [s.group for s in self.samples]

    def paths(self) -> list:
        if self._cache is not None:
            return list(self._cache)
        return [_PathView(self, p) for p in range(self.n_paths)]

    def shape(self) -> tuple[int, ...]:
        return self._load(0)[0].shape


class _PathView:
    def __init__(self, owner: LazyInputs, path: int):
        self.owner = owner
        self.path = path

    def __len__(self) -> int:
        return len(self.owner)

    def __getitem__(self, idx):
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return np.stack([self.owner._load(int(i))[self.path] for i in idx])


def manifest_samples(manifest: DatasetManifest) -> list[Sample]:
    return [Sample(r.path, r.mask_path, r.class_id, r.image_id) for r in manifest.rows]


def relabel_split(manifest: DatasetManifest, train_ids: set[str]) -> DatasetManifest:
    return manifest.with_rows([replace(r, split="train" if r.image_id in train_ids else "val") for r in manifest.rows])

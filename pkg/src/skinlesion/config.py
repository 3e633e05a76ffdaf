"""Run configuration: typed defaults, a flat ``key = value`` file format, run-dir naming.

Example file::

    # comments and blank lines are ignored
    model = m2-dual
    folds = 10
    lr = 0.001
    input_size = none
"""

from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .augmentation import AugmentRanges
from .errors import ValidationError
from .imaging import DEFAULT_CROP_THRESHOLD, PiecewiseParams
from .models import DEFAULT_EPOCHS, DEFAULT_INPUT_SIZE, MODEL_BUILDERS
from .segmentation import DEFAULT_SEG_THRESHOLD, UNetConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: str = "m2-dual"
    folds: int = 10
    # None means the architecture's default
    epochs: int | None = None
    input_size: int | None = None
    batch_size: int = 75
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_fraction: float = 0.9
    use_mask: bool = False
    # preprocessing
    crop_threshold: int = DEFAULT_CROP_THRESHOLD
    sog_p: float = 6.0
    r1: int = 70
    s1: int = 0
    r2: int = 140
    s2: int = 255
    # segmentation
    segmenter: str = "threshold"
    seg_threshold: int = DEFAULT_SEG_THRESHOLD
    unet_depth: int = 3
    unet_base: int = 8
    unet_size: int = 64
    unet_epochs: int = 30
    unet_lr: float = 3e-3
    unet_batch: int = 8
    # balancing / augmentation
    balance_target: int = 2000
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

    def __post_init__(self):
        if self.model not in MODEL_BUILDERS:
            raise ValidationError(f"model must be one of {sorted(MODEL_BUILDERS)}, got {self.model!r}")
        if self.segmenter not in ("threshold", "unet"):
            raise ValidationError(f"segmenter must be 'threshold' or 'unet', got {self.segmenter!r}")
        if self.folds < 2:
            raise ValidationError(f"folds must be >= 2, got {self.folds}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        for name in ("batch_size", "balance_target", "unet_epochs", "unet_batch"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.epochs is not None and self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.input_size is not None and self.input_size < 8:
            raise ValidationError(f"input_size must be >= 8, got {self.input_size}")
        # constructing these validates their own invariants
        self.piecewise
        self.augment_ranges
        self.unet_config

    # --- derived views ---

    @property
    def resolved_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.model] if self.epochs is None else self.epochs

    @property
    def resolved_input_size(self) -> int:
        return DEFAULT_INPUT_SIZE[self.model] if self.input_size is None else self.input_size

    @property
    def grayscale(self) -> bool:
        return self.model == "m1"

    @property
    def piecewise(self) -> PiecewiseParams:
        return PiecewiseParams(self.r1, self.s1, self.r2, self.s2)

    @property
    def augment_ranges(self) -> AugmentRanges:
        return AugmentRanges(**{f.name: getattr(self, f.name) for f in fields(AugmentRanges)})

    @property
    def unet_config(self) -> UNetConfig:
        return UNetConfig(self.unet_depth, self.unet_base, self.unet_size)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # --- serialisation ---

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return (base or cls()).replace(**parse_pairs(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def config_hash(self) -> str:
        """Digest of everything except the seed, which is named separately."""
        body = "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self) if f.name != "seed")
        return hashlib.sha256(body.encode()).hexdigest()[:10]

    def run_dir_name(self) -> str:
        return f"run-{self.config_hash()}-s{self.seed}"


_HINTS = typing.get_type_hints(RunConfig)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _base_type(hint):
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        return args[0], True
    return hint, False


def coerce(key: str, raw: str):
    """Convert one textual value to the field's declared type."""
    if key not in _HINTS:
        raise ValidationError(f"unknown config key {key!r}")
    typ, optional = _base_type(_HINTS[key])
    text = raw.strip()
    if optional and text.lower() == "none":
        return None
    try:
        if typ is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        return typ(text)
    except ValueError as exc:
        raise ValidationError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_pairs(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        if key in out:
            raise ValidationError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = coerce(key, value)
    return out

"""Domain types shared across the package: images, masks, loss weights."""

from __future__ import annotations

from dataclasses import dataclass, fields
from enum import Enum
from typing import Optional

import numpy as np

NUM_CLASSES = 5
CLASS_NAMES = ("background", "AA", "LAC", "LVC", "MYO")
FOREGROUND = CLASS_NAMES[1:]


class InvalidInputError(ValueError):
    pass


class InvalidLabelError(ValueError):
    pass


class ConfigError(ValueError):
    """Raised for bad configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class DomainTag(str, Enum):
    SOURCE = "source"
    TARGET = "target"
    SYNTHESIZED_TARGET = "synthesized_target"
    RECONSTRUCTED_SOURCE = "reconstructed_source"


@dataclass(frozen=True)
class Image:
    data: np.ndarray
    domain: DomainTag = DomainTag.SOURCE

    def __post_init__(self):
        if self.data.ndim != 2:
            raise InvalidInputError(f"image must be 2D, got shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMask:
    data: np.ndarray
    K: int = NUM_CLASSES

    def __post_init__(self):
        if self.data.ndim != 2:
            raise InvalidInputError(f"mask must be 2D, got shape {self.data.shape}")
        if self.data.size and (self.data.min() < 0 or self.data.max() >= self.K):
            raise InvalidLabelError(f"labels must lie in [0, {self.K})")


@dataclass(frozen=True)
class Sample:
    image: Image
    mask: Optional[LabelMask] = None

    def __post_init__(self):
        if self.mask is not None and self.mask.data.shape != self.image.data.shape:
            raise InvalidInputError(
                f"mask shape {self.mask.data.shape} != image shape {self.image.data.shape}"
            )


@dataclass
class LossWeights:
    """Trade-off coefficients of the total objective.

    ``alpha`` weighs the Dice term inside the segmentation loss. Defaults are
    configuration: the cycle weight follows the CycleGAN convention of 10,
    and the two feature-level adversarial terms are kept at 0.1 so they do not
    overpower segmentation through the shared encoder.
    """

    lambda_adv_s: float = 1.0
    lambda_cyc: float = 10.0
    lambda_seg: float = 1.0
    lambda_adv_p: float = 0.1
    lambda_adv_s_tilde: float = 0.1
    alpha: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def validate_loss_weights(w: LossWeights) -> None:
    for f in fields(w):
        v = getattr(w, f.name)
        if not np.isfinite(v) or v < 0:
            raise ConfigError(f.name, f"must be a finite nonnegative number, got {v}")
    if w.lambda_seg <= 0:
        raise ConfigError("lambda_seg", "must be > 0, otherwise there is no supervised signal")


def normalize_zscore(image: Image | np.ndarray) -> Image | np.ndarray:
    """Zero-mean, unit-variance scaling with the population std.

    Constant inputs map to zeros. Accepts a bare array and returns the same kind.
    """
    data = image.data if isinstance(image, Image) else np.asarray(image)
    if data.size == 0:
        raise InvalidInputError("cannot normalize an empty image")
    x = data.astype(np.float64)
    std = x.std()
    # relative threshold: float rounding makes constant images show std ~ 1e-16 * |mean|
    if std <= 1e-12 * max(1.0, float(np.abs(x).max())):
        out = np.zeros_like(x)
    else:
        out = (x - x.mean()) / std
    out = out.astype(data.dtype if np.issubdtype(data.dtype, np.floating) else np.float64)
    if isinstance(image, Image):
        return Image(out, image.domain)
    return out


def one_hot(mask: LabelMask | np.ndarray, K: int = NUM_CLASSES) -> np.ndarray:
    """H×W integer mask -> H×W×K float array with a single 1 per pixel."""
    data = mask.data if isinstance(mask, LabelMask) else np.asarray(mask)
    if data.size and (data.min() < 0 or data.max() >= K):
        raise InvalidLabelError(f"labels must lie in [0, {K}), got max {data.max()}")
    return (data[..., None] == np.arange(K)).astype(np.float64)

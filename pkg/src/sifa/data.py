"""Synthetic two-domain phantoms, sample files, augmentation and splitting."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from sifa.core import DomainTag, Image, InvalidInputError, LabelMask, NUM_CLASSES, Sample, normalize_zscore

MAGIC = b"SIFA"
FORMAT_VERSION = 1
FLAG_HAS_MASK = 0x01
DTYPE_FLOAT32 = 1
HEADER = struct.Struct("<4sHHII")

AA, LAC, LVC, MYO = 1, 2, 3, 4


class SampleFileError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class FormatError(SampleFileError):
    pass


class ConsistencyError(SampleFileError):
    pass


class GeometryError(RuntimeError):
    pass


@dataclass
class Dataset:
    samples: list[Sample]
    domain: DomainTag
    split: Optional[str] = None
    scene_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.scene_ids:
            self.scene_ids = list(range(len(self.samples)))
        if len(self.scene_ids) != len(self.samples):
            raise InvalidInputError("scene_ids must align with samples")
        shapes = {s.image.data.shape for s in self.samples}
        if len(shapes) > 1:
            raise InvalidInputError(f"samples differ in shape: {sorted(shapes)}")

    def __len__(self):
        return len(self.samples)

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image.data for s in self.samples])

    @property
    def masks(self) -> np.ndarray:
        if any(s.mask is None for s in self.samples):
            raise InvalidInputError(f"{self.domain.value}/{self.split} dataset has unlabeled samples")
        return np.stack([s.mask.data for s in self.samples])


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class Appearance:
    """How one domain renders a label geometry.

    ``intensity`` gives the base value of air, body tissue, AA, LAC, LVC, MYO.
    """

    intensity: tuple[float, float, float, float, float, float] = (0.0, 0.35, 0.9, 0.75, 0.85, 0.5)
    invert: bool = False
    gamma: float = 1.0
    bias_amplitude: float = 0.0
    noise_std: float = 0.0
    blur_sigma: float = 0.0


SOURCE_APPEARANCE = Appearance(
    intensity=(0.0, 0.3, 0.95, 0.75, 0.85, 0.45), gamma=1.0, bias_amplitude=0.1, noise_std=0.03, blur_sigma=0.6
)
TARGET_APPEARANCE = Appearance(
    intensity=(0.0, 0.45, 0.8, 0.7, 0.75, 0.3), invert=True, gamma=1.3, bias_amplitude=0.25, noise_std=0.06, blur_sigma=0.6
)


@dataclass
class SyntheticSceneSpec:
    canvas: tuple[int, int] = (64, 64)
    source: Appearance = field(default_factory=lambda: replace(SOURCE_APPEARANCE))
    target: Appearance = field(default_factory=lambda: replace(TARGET_APPEARANCE))
    seed: int = 0


@dataclass
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    theta: float = 0.0

    def inside(self, yy, xx, grow: float = 0.0) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        dy, dx = yy - self.cy, xx - self.cx
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / (self.rx + grow)) ** 2 + (v / (self.ry + grow)) ** 2 <= 1.0

    def area(self, grow: float = 0.0) -> float:
        return math.pi * (self.rx + grow) * (self.ry + grow)


@dataclass
class SceneGeometry:
    labels: np.ndarray
    body: np.ndarray
    shapes: dict[str, Ellipse]
    myo_thickness: float

    def analytic_areas(self) -> dict[int, float]:
        lv = self.shapes["LVC"]
        return {
            AA: self.shapes["AA"].area(),
            LAC: self.shapes["LAC"].area(),
            LVC: lv.area(),
            MYO: lv.area(self.myo_thickness) - lv.area(),
        }


def _pixel_grid(h: int, w: int):
    # pixel centres at integer coordinates
    return np.mgrid[0:h, 0:w].astype(np.float64)


def sample_geometry(canvas: tuple[int, int], rng: np.random.Generator, max_attempts: int = 100) -> SceneGeometry:
    """Draw AA, LAC, LVC (with a MYO ring) and a body outline.

    Shapes are rejected and redrawn until every class has area and no two
    structures touch.
    """
    h, w = canvas
    yy, xx = _pixel_grid(h, w)
    s = min(h, w)
    for _ in range(max_attempts):
        lv = Ellipse(
            cy=h * rng.uniform(0.55, 0.65), cx=w * rng.uniform(0.52, 0.62),
            ry=s * rng.uniform(0.09, 0.13), rx=s * rng.uniform(0.09, 0.13), theta=rng.uniform(0, math.pi),
        )
        thick = s * rng.uniform(0.045, 0.07)
        la = Ellipse(
            cy=h * rng.uniform(0.30, 0.38), cx=w * rng.uniform(0.58, 0.70),
            ry=s * rng.uniform(0.07, 0.10), rx=s * rng.uniform(0.09, 0.13), theta=rng.uniform(0, math.pi),
        )
        r_aa = s * rng.uniform(0.05, 0.075)
        aa = Ellipse(cy=h * rng.uniform(0.28, 0.38), cx=w * rng.uniform(0.30, 0.40), ry=r_aa, rx=r_aa * rng.uniform(0.9, 1.1))
        body = Ellipse(cy=h * 0.5, cx=w * 0.5, ry=h * rng.uniform(0.42, 0.47), rx=w * rng.uniform(0.42, 0.47))

        regions = {
            AA: aa.inside(yy, xx),
            LAC: la.inside(yy, xx),
            LVC: lv.inside(yy, xx),
            MYO: lv.inside(yy, xx, thick) & ~lv.inside(yy, xx),
        }
        # one-pixel margin between distinct structures
        heart = lv.inside(yy, xx, thick + 1.0)
        if (aa.inside(yy, xx, 1.0) & la.inside(yy, xx, 1.0)).any():
            continue
        if (heart & (aa.inside(yy, xx) | la.inside(yy, xx))).any():
            continue
        if any(r.sum() == 0 for r in regions.values()):
            continue
        body_mask = body.inside(yy, xx)
        if not all((r & ~body_mask).sum() == 0 for r in regions.values()):
            continue
        labels = np.zeros((h, w), dtype=np.uint8)
        for k, r in regions.items():
            labels[r] = k
        return SceneGeometry(labels, body_mask, {"AA": aa, "LAC": la, "LVC": lv, "body": body}, thick)
    raise GeometryError(f"no valid geometry after {max_attempts} attempts on a {h}x{w} canvas")


def _bias_field(shape, rng: np.random.Generator) -> np.ndarray:
    """Smooth field in [-1, 1] from a few low-frequency cosines."""
    h, w = shape
    yy, xx = _pixel_grid(h, w)
    f = np.zeros(shape)
    for _ in range(3):
        fy, fx = rng.uniform(0.2, 1.0, size=2)
        py, px = rng.uniform(0, 2 * math.pi, size=2)
        f += np.cos(math.pi * fy * yy / h + py) * np.cos(math.pi * fx * xx / w + px)
    m = np.abs(f).max()
    return f / m if m > 0 else f


def render(geom: SceneGeometry, app: Appearance, rng: np.random.Generator) -> np.ndarray:
    air, tissue, *structures = app.intensity
    img = np.full(geom.labels.shape, air, dtype=np.float64)
    img[geom.body] = tissue
    for k, v in enumerate(structures, start=1):
        img[geom.labels == k] = v
    if app.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, app.blur_sigma, mode="nearest")
    if app.invert:
        img = 1.0 - img
    img = np.clip(img, 0.0, None) ** app.gamma
    if app.bias_amplitude > 0:
        img = img * (1.0 + app.bias_amplitude * _bias_field(img.shape, rng))
    if app.noise_std > 0:
        img = img + rng.normal(0.0, app.noise_std, img.shape)
    return img.astype(np.float32)


def generate_synthetic(spec: SyntheticSceneSpec, n_scenes: int) -> tuple[Dataset, Dataset]:
    """Render ``n_scenes`` label geometries once per domain.

    Every scene draws from its own stream seeded by (seed, scene index), so
    the output does not depend on how scenes are distributed over workers.
    """
    if n_scenes < 1:
        raise InvalidInputError("n_scenes must be >= 1")
    h, w = spec.canvas
    if h % 8 or w % 8 or h <= 0 or w <= 0:
        raise InvalidInputError(f"canvas {h}x{w} must be positive and divisible by 8")
    src, tgt = [], []
    for i in range(n_scenes):
        geo_rng, src_rng, tgt_rng = (np.random.default_rng([spec.seed, i, j]) for j in range(3))
        geom = sample_geometry((h, w), geo_rng)
        mask = LabelMask(geom.labels.copy())
        src.append(Sample(Image(render(geom, spec.source, src_rng), DomainTag.SOURCE), mask))
        tgt.append(Sample(Image(render(geom, spec.target, tgt_rng), DomainTag.TARGET), LabelMask(geom.labels.copy())))
    ids = list(range(n_scenes))
    return Dataset(src, DomainTag.SOURCE, scene_ids=ids), Dataset(tgt, DomainTag.TARGET, scene_ids=list(ids))


# ---------------------------------------------------------------------------
# preprocessing and augmentation
# ---------------------------------------------------------------------------

INPUT_CLIP = 3.0


def to_network_range(data: np.ndarray, clip: float = INPUT_CLIP) -> np.ndarray:
    """Per-slice z-score, then scale by ``clip`` and clip into the tanh range [-1, 1]."""
    z = normalize_zscore(np.asarray(data, dtype=np.float64))
    return np.clip(z / clip, -1.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 0.0
    scale: float = 1.0
    shear_deg: float = 0.0

    @classmethod
    def draw(cls, rng: np.random.Generator, max_rotation=15.0, scale_range=(0.9, 1.1), max_shear=5.0):
        return cls(
            float(rng.uniform(-max_rotation, max_rotation)),
            float(rng.uniform(*scale_range)),
            float(rng.uniform(-max_shear, max_shear)),
        )

    def matrix(self) -> np.ndarray:
        """Forward map in (row, col) coordinates about the image centre."""
        t = math.radians(self.rotation_deg)
        sh = math.tan(math.radians(self.shear_deg))
        c, s = math.cos(t), math.sin(t)
        if abs(c) < 1e-12:
            c = 0.0
        if abs(s) < 1e-12:
            s = 0.0
        rot = np.array([[c, -s], [s, c]])
        shear = np.array([[1.0, 0.0], [sh, 1.0]])
        return self.scale * rot @ shear


def _warp(arr: np.ndarray, params: AugmentParams, order: int, mode: str, cval: float = 0.0) -> np.ndarray:
    h, w = arr.shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    inv = np.linalg.inv(params.matrix())
    offset = centre - inv @ centre
    return ndimage.affine_transform(arr, inv, offset=offset, order=order, mode=mode, cval=cval, output_shape=(h, w))


def augment(sample: Sample, rng: Optional[np.random.Generator] = None, params: Optional[AugmentParams] = None) -> Sample:
    """Apply one random rotation/scale/shear to image (bilinear) and mask (nearest)."""
    if params is None:
        params = AugmentParams.draw(rng if rng is not None else np.random.default_rng())
    img = sample.image.data
    out_img = _warp(img.astype(np.float64), params, order=1, mode="nearest").astype(img.dtype)
    out_mask = None
    if sample.mask is not None:
        m = _warp(sample.mask.data.astype(np.float64), params, order=0, mode="constant", cval=0.0)
        out_mask = LabelMask(np.rint(m).astype(sample.mask.data.dtype), sample.mask.K)
    return Sample(Image(out_img, sample.image.domain), out_mask)


def split_dataset(ds: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Partition by scene into train (first ceil(n * ratio) of a seeded permutation) and test.

    Target-domain training samples lose their masks.
    """
    if not 0.0 < ratio < 1.0:
        raise InvalidInputError(f"ratio must lie in (0, 1), got {ratio}")
    scenes = sorted(set(ds.scene_ids))
    n = len(scenes)
    if n < 2:
        raise InvalidInputError("need at least two scenes to split")
    n_train = math.ceil(n * ratio - 1e-9)
    perm = np.random.default_rng(seed).permutation(n)
    train_scenes = {scenes[i] for i in perm[:n_train]}

    def pick(keep_train: bool, split: str) -> Dataset:
        samples, ids = [], []
        for s, sid in zip(ds.samples, ds.scene_ids):
            if (sid in train_scenes) == keep_train:
                if split == "train" and ds.domain == DomainTag.TARGET:
                    s = Sample(s.image, None)
                samples.append(s)
                ids.append(sid)
        return Dataset(samples, ds.domain, split, ids)

    return pick(True, "train"), pick(False, "test")


# ---------------------------------------------------------------------------
# sample files and manifest
# ---------------------------------------------------------------------------


def encode_sample(sample: Sample) -> bytes:
    img = np.ascontiguousarray(sample.image.data, dtype="<f4")
    h, w = img.shape
    flags = FLAG_HAS_MASK if sample.mask is not None else 0
    version = FORMAT_VERSION | (flags << 8)
    parts = [HEADER.pack(MAGIC, version, DTYPE_FLOAT32, h, w), img.tobytes()]
    if sample.mask is not None:
        m = sample.mask.data
        if m.max(initial=0) > 255 or m.min(initial=0) < 0:
            raise InvalidInputError("mask labels must fit in u8")
        parts.append(np.ascontiguousarray(m, dtype=np.uint8).tobytes())
    return b"".join(parts)


def _matching_shape(payload: int, per_pixel: int, h: int, w: int):
    """A shape sharing a side with h x w whose sample would be exactly ``payload`` bytes.

    Such a payload is a complete sample whose header disagrees with it rather
    than a truncated file; anything else is treated as corruption.
    """
    if payload <= 0 or payload % per_pixel:
        return None
    px = payload // per_pixel
    if px % w == 0:
        return (px // w, w)
    if px % h == 0:
        return (h, px // h)
    return None


def decode_sample(buf: bytes, domain: DomainTag = DomainTag.SOURCE, K: int = NUM_CLASSES) -> Sample:
    if len(buf) < HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER.size} bytes", len(buf))
    magic, version, dtype, h, w = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version & 0xFF != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version & 0xFF}", 4)
    flags = version >> 8
    if flags & ~FLAG_HAS_MASK:
        raise FormatError(f"unknown flag bits {flags:#x}", 5)
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"unsupported dtype code {dtype}", 6)
    if h == 0 or w == 0:
        raise FormatError(f"empty shape {h}x{w}", 8)
    has_mask = bool(flags & FLAG_HAS_MASK)
    per_pixel = 4 + (1 if has_mask else 0)
    payload = len(buf) - HEADER.size
    expected = h * w * per_pixel
    if payload != expected:
        other = _matching_shape(payload, per_pixel, h, w)
        if other is not None:
            raise ConsistencyError(f"header declares {h}x{w} but payload is a {other[0]}x{other[1]} sample", HEADER.size)
        raise FormatError(f"payload has {payload} bytes, expected {expected}", min(len(buf), HEADER.size + expected))
    img = np.frombuffer(buf, dtype="<f4", count=h * w, offset=HEADER.size).reshape(h, w).astype(np.float32)
    mask = None
    if has_mask:
        m = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=HEADER.size + 4 * h * w).reshape(h, w).copy()
        if m.max(initial=0) >= K:
            raise FormatError(f"mask label {m.max()} >= {K}", HEADER.size + 4 * h * w + int(np.argmax(m.ravel() >= K)))
        mask = LabelMask(m, K)
    return Sample(Image(img, domain), mask)


def save_sample(sample: Sample, path) -> None:
    Path(path).write_bytes(encode_sample(sample))


def load_sample(path, domain: DomainTag = DomainTag.SOURCE, K: int = NUM_CLASSES) -> Sample:
    return decode_sample(Path(path).read_bytes(), domain, K)


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    domain: str
    split: str
    volume: Optional[str] = None

    def line(self) -> str:
        base = f"{self.path},{self.domain},{self.split}"
        return base if self.volume is None else f"{base},{self.volume}"


def write_manifest(records: Sequence[ManifestRecord], path) -> None:
    Path(path).write_text("".join(r.line() + "\n" for r in records))


def read_manifest(path) -> list[ManifestRecord]:
    """Parse ``<path>,<domain>,<split>[,<volume>]`` lines; blank lines and ``#`` comments skipped."""
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) not in (3, 4):
            raise InvalidInputError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(parts)}")
        if parts[1] not in ("source", "target"):
            raise InvalidInputError(f"{path}:{lineno}: unknown domain {parts[1]!r}")
        if parts[2] not in ("train", "test"):
            raise InvalidInputError(f"{path}:{lineno}: unknown split {parts[2]!r}")
        out.append(ManifestRecord(*parts))
    return out


def write_dataset_dir(out_dir, datasets: Sequence[Dataset]) -> list[ManifestRecord]:
    """Write samples under ``out_dir/<domain>/<split>/`` and a ``manifest.csv``."""
    out = Path(out_dir)
    records = []
    for ds in datasets:
        sub = out / ds.domain.value / (ds.split or "all")
        sub.mkdir(parents=True, exist_ok=True)
        for s, sid in zip(ds.samples, ds.scene_ids):
            rel = Path(ds.domain.value) / (ds.split or "all") / f"scene{sid:05d}.sifa"
            save_sample(s, out / rel)
            records.append(ManifestRecord(rel.as_posix(), ds.domain.value, ds.split or "train", f"scene{sid:05d}"))
    write_manifest(records, out / "manifest.csv")
    return records


def load_dataset_dir(root, domain: str, split: str) -> tuple[Dataset, list[str]]:
    """Load one (domain, split) subset listed in ``root/manifest.csv``.

    Returns the dataset and per-sample volume ids (falling back to the path).
    """
    root = Path(root)
    tag = DomainTag(domain)
    samples, volumes = [], []
    for rec in read_manifest(root / "manifest.csv"):
        if rec.domain == domain and rec.split == split:
            s = load_sample(root / rec.path, tag)
            if split == "train" and tag == DomainTag.TARGET:
                s = Sample(s.image, None)
            samples.append(s)
            volumes.append(rec.volume or rec.path)
    vol_index = {v: i for i, v in enumerate(dict.fromkeys(volumes))}
    return Dataset(samples, tag, split, [vol_index[v] for v in volumes]), volumes

"""Dice and average surface distance (ASD) per structure, with the N/A convention.

A volume is an ordered list of 2D label slices. Single-slice volumes are
treated as 2D images: the slice axis does not contribute surface voxels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from sifa.core import CLASS_NAMES, InvalidInputError
from sifa.metrics import _kernels
from sifa.metrics._kernels import nearest_distances

NA = None


@dataclass
class VolumePrediction:
    slices: Sequence[np.ndarray]
    reference: Sequence[np.ndarray]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.slices) != len(self.reference) or len(self.slices) == 0:
            raise InvalidInputError("prediction and reference need equal, nonzero slice counts")
        for p, g in zip(self.slices, self.reference):
            if np.shape(p) != np.shape(g):
                raise InvalidInputError(f"slice shape mismatch: {np.shape(p)} vs {np.shape(g)}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InvalidInputError("spacing must be three positive numbers")

    @property
    def pred(self) -> np.ndarray:
        return np.stack([np.asarray(s) for s in self.slices])

    @property
    def ref(self) -> np.ndarray:
        return np.stack([np.asarray(s) for s in self.reference])


def _volume(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3:
        raise InvalidInputError(f"expected a 2D or 3D mask, got {m.ndim}D")
    return m


def surface_voxels(mask, k: int) -> np.ndarray:
    """Coordinates (N x 3, z/y/x) of class-``k`` voxels with a face neighbour of another class.

    6-connectivity in 3D; a single slice uses in-plane 4-connectivity.
    """
    vol = _volume(mask)
    surf = _kernels.surface_mask(vol == k, check_z=vol.shape[0] > 1)
    return np.argwhere(surf)


def dice_coefficient(pred: VolumePrediction | np.ndarray, k: int, reference: Optional[np.ndarray] = None) -> float:
    """Percent overlap 100 * 2|P & G| / (|P| + |G|); 100 if both are empty."""
    p, g = _pair(pred, reference)
    pk, gk = p == k, g == k
    denom = int(pk.sum()) + int(gk.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * int((pk & gk).sum()) / denom


def _pair(pred, reference):
    if isinstance(pred, VolumePrediction):
        return pred.pred, pred.ref
    p, g = _volume(pred), _volume(reference)
    if p.shape != g.shape:
        raise InvalidInputError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def asd(pred: VolumePrediction | np.ndarray, k: int, reference: Optional[np.ndarray] = None, spacing=None) -> Optional[float]:
    """Symmetric average surface distance for class ``k``, or None (N/A)
    when either the prediction or the reference lacks the class."""
    if isinstance(pred, VolumePrediction):
        spacing = pred.spacing if spacing is None else spacing
    p, g = _pair(pred, reference)
    spacing = np.asarray((1.0, 1.0, 1.0) if spacing is None else spacing, dtype=np.float64)
    check_z = p.shape[0] > 1
    sp = _kernels.surface_mask(p == k, check_z)
    sg = _kernels.surface_mask(g == k, check_z)
    if not sp.any() or not sg.any():
        return NA
    pts_p, pts_g = np.argwhere(sp), np.argwhere(sg)
    d_pg = nearest_distances(pts_p, sg, spacing)
    d_gp = nearest_distances(pts_g, sp, spacing)
    return 0.5 * (float(d_pg.mean()) + float(d_gp.mean()))


@dataclass
class MetricReport:
    classes: tuple[str, ...]
    dice: dict[str, float]
    asd: dict[str, Optional[float]]
    n_volumes: int = 0
    dice_avg: float = field(init=False)
    asd_avg: Optional[float] = field(init=False)

    def __post_init__(self):
        self.dice_avg = float(np.mean([self.dice[c] for c in self.classes]))
        vals = [self.asd[c] for c in self.classes]
        self.asd_avg = NA if any(v is NA for v in vals) else float(np.mean(vals))

    def to_csv(self) -> str:
        """One ``<class>,<dice>,<asd|NA>`` line per class, then the average."""
        lines = []
        for c in self.classes:
            lines.append(f"{c},{self.dice[c]:.4f},{_fmt_asd(self.asd[c], 4)}")
        lines.append(f"Average,{self.dice_avg:.4f},{_fmt_asd(self.asd_avg, 4)}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        cols = list(self.classes) + ["Average"]
        head = f"{'':6s}" + "".join(f"{c:>9s}" for c in cols)
        dice = f"{'Dice':6s}" + "".join(f"{v:9.1f}" for v in [self.dice[c] for c in self.classes] + [self.dice_avg])
        asds = [self.asd[c] for c in self.classes] + [self.asd_avg]
        asd_row = f"{'ASD':6s}" + "".join(f"{_fmt_asd(v, 1):>9s}" for v in asds)
        return "\n".join([head, dice, asd_row]) + "\n"


def _fmt_asd(v: Optional[float], digits: int) -> str:
    return "NA" if v is NA else f"{v:.{digits}f}"


def evaluate(preds: Sequence[VolumePrediction], class_names: Sequence[str] = CLASS_NAMES) -> MetricReport:
    """Average per-class Dice and ASD over volumes (foreground classes only).

    A class with N/A ASD in any volume is N/A in aggregate, and any N/A class
    makes the ASD average N/A.
    """
    if not preds:
        raise InvalidInputError("evaluate needs at least one volume")
    fg = tuple(class_names[1:])
    dice, dist = {}, {}
    for k, name in enumerate(fg, start=1):
        dice[name] = float(np.mean([dice_coefficient(v, k) for v in preds]))
        vals = [asd(v, k) for v in preds]
        dist[name] = NA if any(x is NA for x in vals) else float(np.mean(vals))
    return MetricReport(fg, dice, dist, n_volumes=len(preds))

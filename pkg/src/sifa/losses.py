"""Training objectives.

Every function takes torch tensors (or anything ``torch.as_tensor`` accepts)
and returns scalar tensors, so the same code serves training and testing.
Discriminator outputs are raw logits; the sigmoid is applied here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, NamedTuple

import torch
import torch.nn.functional as F

from sifa.core import InvalidInputError, InvalidLabelError, LossWeights

PROB_CLAMP = 1e-7
DICE_EPS = 1e-6

LOG_LO = math.log(PROB_CLAMP)
LOG_HI = math.log1p(-PROB_CLAMP)

COMPONENTS = ("adv_t", "adv_s", "cyc", "seg", "adv_p", "adv_s_tilde")


class NumericalError(ArithmeticError):
    def __init__(self, component: str, value=None):
        self.component = component
        super().__init__(f"non-finite loss in {component}: {value}")


class AdvPair(NamedTuple):
    generator_loss: torch.Tensor
    discriminator_loss: torch.Tensor


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _log_sigmoid(x):
    # log(clamp(sigmoid(x), eps, 1 - eps)), stable for large |x|
    return F.logsigmoid(x).clamp(LOG_LO, LOG_HI)


def gen_term(d_fake, variant: str = "bce") -> torch.Tensor:
    """Non-saturating generator side: push D(fake) toward the real label."""
    d_fake = _t(d_fake)
    if variant == "lsgan":
        return ((d_fake - 1.0) ** 2).mean()
    return -_log_sigmoid(d_fake).mean()


def disc_term(d_real, d_fake, variant: str = "bce") -> torch.Tensor:
    d_real, d_fake = _t(d_real), _t(d_fake)
    if variant == "lsgan":
        return ((d_real - 1.0) ** 2).mean() + (d_fake**2).mean()
    # log(1 - sigmoid(x)) == logsigmoid(-x)
    return -_log_sigmoid(d_real).mean() - _log_sigmoid(-d_fake).mean()


def adv_loss(d_on_real, d_on_fake, variant: str = "bce") -> AdvPair:
    d_on_real, d_on_fake = _t(d_on_real), _t(d_on_fake)
    if d_on_real.shape != d_on_fake.shape:
        raise InvalidInputError(f"score maps differ in shape: {tuple(d_on_real.shape)} vs {tuple(d_on_fake.shape)}")
    return AdvPair(gen_term(d_on_fake, variant), disc_term(d_on_real, d_on_fake, variant))


def adv_loss_p(dp_on_syn_pred, dp_on_target_pred, variant: str = "bce") -> AdvPair:
    """Prediction-space alignment. Predictions on synthesized target images
    play the "real" role, predictions on real target images the "fake" one."""
    return adv_loss(dp_on_syn_pred, dp_on_target_pred, variant)


def adv_loss_aux_s(ds_aux_on_rec_syn, ds_aux_on_gen_from_target, variant: str = "bce") -> AdvPair:
    """Generated-image-space alignment through the auxiliary head of D_s:
    reconstructions of x^{s->t} are "real", images generated from x^t "fake"."""
    return adv_loss(ds_aux_on_rec_syn, ds_aux_on_gen_from_target, variant)


def cycle_loss(x_s, rec_s, x_t, rec_t) -> torch.Tensor:
    x_s, rec_s, x_t, rec_t = map(_t, (x_s, rec_s, x_t, rec_t))
    if x_s.shape != rec_s.shape or x_t.shape != rec_t.shape:
        raise InvalidInputError("cycle inputs and reconstructions must match in shape")
    return (rec_s - x_s).abs().mean() + (rec_t - x_t).abs().mean()


def _as_nkhw(logits: torch.Tensor, mask: torch.Tensor):
    # a lone H x W x K map is the documented single-image layout
    if logits.ndim == 3:
        logits = logits.permute(2, 0, 1).unsqueeze(0)
    if mask.ndim == 2:
        mask = mask.unsqueeze(0)
    if logits.ndim != 4 or mask.ndim != 3:
        raise InvalidInputError("expected logits N x K x H x W (or H x W x K) and mask N x H x W (or H x W)")
    if logits.shape[0] != mask.shape[0] or logits.shape[2:] != mask.shape[1:]:
        raise InvalidInputError(f"logits {tuple(logits.shape)} incompatible with mask {tuple(mask.shape)}")
    return logits, mask


def dice_loss(probs: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    """1 - mean over classes of smoothed soft Dice; sums run over batch and pixels."""
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return 1.0 - ((2.0 * inter + DICE_EPS) / (denom + DICE_EPS)).mean()


def seg_loss_terms(logits, mask) -> tuple[torch.Tensor, torch.Tensor]:
    """(cross-entropy, Dice loss) for logits and an integer mask."""
    logits, mask = _as_nkhw(_t(logits), torch.as_tensor(mask))
    K = logits.shape[1]
    mask = mask.long()
    if mask.numel() and (mask.min() < 0 or mask.max() >= K):
        raise InvalidLabelError(f"labels must lie in [0, {K})")
    ce = F.cross_entropy(logits, mask)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(mask, K).permute(0, 3, 1, 2).to(probs.dtype)
    return ce, dice_loss(probs, onehot)


def seg_loss(logits, mask, alpha: float = 1.0) -> torch.Tensor:
    if alpha < 0:
        raise InvalidInputError(f"alpha must be >= 0, got {alpha}")
    ce, dl = seg_loss_terms(logits, mask)
    return ce + alpha * dl


@dataclass
class LossReport:
    adv_t: float = 0.0
    adv_s: float = 0.0
    cyc: float = 0.0
    seg: float = 0.0
    adv_p: float = 0.0
    adv_s_tilde: float = 0.0
    total: float = 0.0

    def csv_line(self, step: int) -> str:
        vals = [getattr(self, f.name) for f in fields(self)]
        return ",".join([str(step)] + [repr(float(v)) for v in vals])

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(["step"] + [f.name for f in fields(cls)])


def total_loss(components: Mapping[str, float] | LossReport, w: LossWeights) -> float:
    if isinstance(components, LossReport):
        components = {c: getattr(components, c) for c in COMPONENTS}
    vals = {}
    for name in COMPONENTS:
        v = float(components.get(name, 0.0))
        if not math.isfinite(v):
            raise NumericalError(name, v)
        vals[name] = v
    return (
        vals["adv_t"]
        + w.lambda_adv_s * vals["adv_s"]
        + w.lambda_cyc * vals["cyc"]
        + w.lambda_seg * vals["seg"]
        + w.lambda_adv_p * vals["adv_p"]
        + w.lambda_adv_s_tilde * vals["adv_s_tilde"]
    )

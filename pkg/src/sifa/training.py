"""Synergistic training loop: seven sequential sub-updates per iteration around
one shared encoder, plus optimizers, checkpoints, ablations and inference."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np
import torch
import torch.nn as nn

from sifa import losses as L
from sifa import networks as N
from sifa.core import ConfigError, InvalidInputError, LossWeights, NUM_CLASSES, validate_loss_weights
from sifa.data import AugmentParams, Dataset, _warp, to_network_range
from sifa.metrics import MetricReport, VolumePrediction, evaluate

logger = logging.getLogger(__name__)

UPDATE_ORDER = ("G_t", "D_t", "E", "C", "U", "D_s", "D_p")


class AblationMode(str, Enum):
    NO_ADAPT = "no_adapt"
    IMAGE_ONLY = "image_only"
    IMAGE_PLUS_FAP = "image_plus_fap"
    FULL = "full"


ABLATION_LABELS = {
    AblationMode.NO_ADAPT: "W/o adaptation",
    AblationMode.IMAGE_ONLY: "+Image adaptation",
    AblationMode.IMAGE_PLUS_FAP: "+FA-P",
    AblationMode.FULL: "+FA-I",
}


@dataclass
class OptimizerSchedule:
    adversarial_lr: float = 2e-4
    segmentation_lr: float = 1e-3
    decay: float = 0.9
    decay_every: int = 2
    adversarial_betas: tuple[float, float] = (0.5, 0.999)
    segmentation_betas: tuple[float, float] = (0.9, 0.999)

    def validate(self):
        for name in ("adversarial_lr", "segmentation_lr", "decay"):
            v = getattr(self, name)
            if not v > 0:
                raise ConfigError(name, f"must be > 0, got {v}")
        if self.decay_every < 1:
            raise ConfigError("decay_every", "must be >= 1")

    def segmentation_lr_at(self, epoch: int) -> float:
        return self.segmentation_lr * self.decay ** (epoch // self.decay_every)


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationMode = AblationMode.FULL
    schedule: OptimizerSchedule = field(default_factory=OptimizerSchedule)
    width: float = 1.0
    num_classes: int = NUM_CLASSES
    in_channels: int = 1
    batch_size: int = 8
    epochs: int = 40
    seed: int = 0
    adv_variant: str = "bce"
    # prediction-space adversarial gradient also updates C
    dp_updates_classifier: bool = False
    # "split": adversarial/cycle phase on E, then a segmentation phase with its own optimizer;
    # "fused": one optimizer step for all of E's terms
    encoder_update: str = "split"
    augment: bool = True
    replay_buffer: int = 0
    checkpoint_every: int = 500
    deterministic: bool = True
    prefetch: bool = False

    def validate(self):
        validate_loss_weights(self.weights)
        self.schedule.validate()
        self.ablation = AblationMode(self.ablation)
        if self.adv_variant not in ("bce", "lsgan"):
            raise ConfigError("adv_variant", f"unknown variant {self.adv_variant!r}")
        if self.encoder_update not in ("fused", "split"):
            raise ConfigError("encoder_update", f"unknown mode {self.encoder_update!r}")
        if not self.width > 0:
            raise ConfigError("width", "must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes", "must be >= 2")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every", "must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablation"] = AblationMode(self.ablation).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        sched = dict(d.get("schedule", {}))
        for k in ("adversarial_betas", "segmentation_betas"):
            if k in sched:
                sched[k] = tuple(sched[k])
        d["schedule"] = OptimizerSchedule(**sched)
        d["ablation"] = AblationMode(d.get("ablation", "full"))
        return cls(**d)


def configure_ablation(mode: AblationMode, w: LossWeights) -> tuple[LossWeights, tuple[str, ...]]:
    """Effective weights and the sub-networks that get updated under ``mode``."""
    mode = AblationMode(mode)
    if mode == AblationMode.FULL:
        return dataclasses.replace(w), UPDATE_ORDER
    if mode == AblationMode.IMAGE_PLUS_FAP:
        return dataclasses.replace(w, lambda_adv_s_tilde=0.0), UPDATE_ORDER
    if mode == AblationMode.IMAGE_ONLY:
        active = tuple(n for n in UPDATE_ORDER if n != "D_p")
        return dataclasses.replace(w, lambda_adv_p=0.0, lambda_adv_s_tilde=0.0), active
    zeroed = LossWeights(0.0, 0.0, w.lambda_seg, 0.0, 0.0, w.alpha)
    return zeroed, ("E", "C")


class ImagePool:
    """History of generated images fed to discriminators (CycleGAN practice)."""

    def __init__(self, size: int, seed: int):
        self.size = size
        self.images: list[torch.Tensor] = []
        self.rng = np.random.default_rng([seed, 7])

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return batch
        out = []
        for img in batch:
            img = img.unsqueeze(0)
            if len(self.images) < self.size:
                self.images.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                i = int(self.rng.integers(self.size))
                out.append(self.images[i].clone())
                self.images[i] = img.clone()
            else:
                out.append(img)
        return torch.cat(out)

    def state_dict(self):
        return {"images": self.images, "rng": self.rng.bit_generator.state}

    def load_state_dict(self, d):
        self.images = list(d["images"])
        self.rng.bit_generator.state = d["rng"]


class TrainState:
    """All sub-networks, their optimizers and the step/epoch counters.

    E is one module object; every path that needs the encoder uses it.
    ``versions`` counts optimizer steps per group; ``trace`` lists the
    groups updated during the most recent step, in order.
    """

    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config
        g = torch.Generator().manual_seed(config.seed)
        K, c, w = config.num_classes, config.in_channels, config.width
        self.nets = nn.ModuleDict(
            {
                "G_t": N.build_generator_t(c, w, generator=g),
                "E": N.build_encoder(c, w, generator=g),
                "U": N.build_decoder_u(c, w, generator=g),
                "C": N.build_classifier_c(K, w, generator=g),
                "D_t": N.build_patch_discriminator(c, w, name="D_t", generator=g),
                "D_s": N.build_patch_discriminator(c, w, aux_head=True, name="D_s", generator=g),
                "D_p": N.build_patch_discriminator(K, w, name="D_p", generator=g),
            }
        )
        self.weights, self.active = configure_ablation(config.ablation, config.weights)
        self.optimizers = make_optimizers(config.schedule, self)
        self.step = 0
        self.epoch = 0
        self.versions = {name: 0 for name in self.optimizers}
        self.trace: list[str] = []
        self.pools = {"D_t": ImagePool(config.replay_buffer, config.seed), "D_s": ImagePool(config.replay_buffer, config.seed + 1)}
        self.set_epoch(0)

    def __getitem__(self, name) -> N.Network:
        return self.nets[name]

    def set_epoch(self, epoch: int):
        self.epoch = epoch
        lr = self.config.schedule.segmentation_lr_at(epoch)
        for name in segmentation_groups(self.config):
            for pg in self.optimizers[name].param_groups:
                pg["lr"] = lr

    def spec_hash(self) -> str:
        h = hashlib.sha256()
        for name in UPDATE_ORDER:
            h.update(self.nets[name].spec.digest().encode())
        return h.hexdigest()[:16]

    def param_checksums(self) -> dict[str, str]:
        out = {}
        for name, net in self.nets.items():
            h = hashlib.sha256()
            for _, t in sorted(net.state_dict().items()):
                h.update(t.detach().cpu().numpy().tobytes())
            out[name] = h.hexdigest()
        return out

    def state_dict(self) -> dict:
        return {
            "nets": {k: v.state_dict() for k, v in self.nets.items()},
            "optimizers": {k: v.state_dict() for k, v in self.optimizers.items()},
            "versions": dict(self.versions),
            "pools": {k: v.state_dict() for k, v in self.pools.items()},
            "step": self.step,
            "epoch": self.epoch,
            "config": self.config.to_dict(),
        }

    def load_state_dict(self, d: dict):
        for k, sd in d["nets"].items():
            self.nets[k].load_state_dict(sd)
        for k, sd in d["optimizers"].items():
            self.optimizers[k].load_state_dict(sd)
        for k, sd in d.get("pools", {}).items():
            self.pools[k].load_state_dict(sd)
        self.versions = dict(d["versions"])
        self.step = int(d["step"])
        self.set_epoch(int(d["epoch"]))


def segmentation_groups(config: TrainConfig) -> tuple[str, ...]:
    if config.encoder_update == "split":
        return ("E_seg", "C")
    return ("E", "C")


def make_optimizers(schedule: OptimizerSchedule, state: TrainState) -> dict[str, torch.optim.Optimizer]:
    """One Adam per update group; groups never share optimizer state.

    With the fused encoder update E has a single group on the segmentation
    schedule; with the split update it has an adversarial group (E_adv) and a
    segmentation group (E_seg) over the same parameters.
    """
    adv = dict(lr=schedule.adversarial_lr, betas=schedule.adversarial_betas)
    seg = dict(lr=schedule.segmentation_lr, betas=schedule.segmentation_betas)
    nets = state.nets
    opts = {name: torch.optim.Adam(nets[name].parameters(), **adv) for name in ("G_t", "D_t", "U", "D_s", "D_p")}
    opts["C"] = torch.optim.Adam(nets["C"].parameters(), **seg)
    if state.config.encoder_update == "split":
        opts["E_adv"] = torch.optim.Adam(nets["E"].parameters(), **adv)
        opts["E_seg"] = torch.optim.Adam(nets["E"].parameters(), **seg)
    else:
        opts["E"] = torch.optim.Adam(nets["E"].parameters(), **seg)
    return opts


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------


def _check(name: str, value: torch.Tensor):
    if not torch.isfinite(value).all():
        raise L.NumericalError(name, float(value.detach()))


def _apply(state: TrainState, group: str, net_name: str, loss: torch.Tensor, hook=None):
    _check(group, loss)
    params = [p for p in state.nets[net_name].parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = g
    state.optimizers[group].step()
    for p in params:
        p.grad = None
    state.versions[group] += 1
    state.trace.append(group)
    if hook is not None:
        hook(group, state)


def train_step(
    state: TrainState,
    x_s: torch.Tensor,
    y_s: torch.Tensor,
    x_t: torch.Tensor,
    hook: Optional[Callable[[str, TrainState], None]] = None,
) -> L.LossReport:
    """One iteration: G_t -> D_t -> E -> C -> U -> D_s -> D_p.

    Each slot recomputes the activations it needs after the previous
    parameter change. ``hook(group, state)`` fires after every optimizer step.
    Returns the losses of this iteration (discriminator-side values for the
    adversarial components).
    """
    if x_s.shape[0] == 0 or x_t.shape[0] == 0:
        raise InvalidInputError("empty batch")
    if y_s is None:
        raise InvalidInputError("source batch needs masks")
    cfg, w = state.config, state.weights
    net = state.nets
    for n in net.values():
        n.train()
    state.trace = []
    rep = L.LossReport()
    alpha, variant = w.alpha, cfg.adv_variant
    gen = lambda d: L.gen_term(d, variant)  # noqa: E731
    disc = lambda r, f: L.disc_term(r, f, variant)  # noqa: E731
    zero = torch.zeros(())

    if cfg.ablation == AblationMode.NO_ADAPT:
        seg = L.seg_loss(net["C"](net["E"](x_s)), y_s, alpha)
        _encoder_update(state, adv=None, seg=w.lambda_seg * seg, hook=hook)
        with torch.no_grad():
            feat = net["E"](x_s)
        seg = L.seg_loss(net["C"](feat), y_s, alpha)
        _apply(state, "C", "C", w.lambda_seg * seg, hook)
        rep.seg = float(seg.detach())
        rep.total = L.total_loss(rep.__dict__, w)
        state.step += 1
        return rep

    G, E, U, C, D_t, D_s, D_p = (net[k] for k in UPDATE_ORDER[:1] + ("E", "U", "C", "D_t", "D_s", "D_p"))
    lam_p, lam_st = w.lambda_adv_p, w.lambda_adv_s_tilde

    # G_t: adversarial generator term + cycle consistency
    with torch.no_grad():
        fake_s = U(E(x_t))
    fake_t = G(x_s)
    cyc = L.cycle_loss(x_s, U(E(fake_t)), x_t, G(fake_s))
    loss = gen(D_t(fake_t)) + w.lambda_cyc * cyc
    _apply(state, "G_t", "G_t", loss, hook)

    # D_t: real target vs synthesized target
    with torch.no_grad():
        fake_t = G(x_s)
    adv_t = disc(D_t(x_t), D_t(state.pools["D_t"].query(fake_t)))
    _apply(state, "D_t", "D_t", adv_t, hook)
    rep.adv_t = float(adv_t.detach())

    # E: every term routed through the shared encoder
    feat_t = E(x_t)
    feat_st = E(fake_t)
    fake_s = U(feat_t)
    rec_s = U(feat_st)
    cyc = L.cycle_loss(x_s, rec_s, x_t, G(fake_s))
    d_main, d_aux = D_s.forward_both(fake_s)
    logits_st = C(feat_st)
    seg = L.seg_loss(logits_st, y_s, alpha)
    adv_terms = w.lambda_adv_s * gen(d_main) + w.lambda_cyc * cyc
    if lam_p > 0:
        adv_terms = adv_terms + lam_p * gen(D_p(torch.softmax(C(feat_t), 1)))
    if lam_st > 0:
        adv_terms = adv_terms + lam_st * gen(d_aux)
    _encoder_update(
        state, adv=adv_terms, seg=w.lambda_seg * seg, hook=hook,
        seg_fn=lambda: w.lambda_seg * L.seg_loss(C(E(fake_t)), y_s, alpha),
    )
    rep.cyc = float(cyc.detach())

    # C: segmentation on synthesized target images
    with torch.no_grad():
        feat_t = E(x_t)
        feat_st = E(fake_t)
    seg = L.seg_loss(C(feat_st), y_s, alpha)
    loss = w.lambda_seg * seg
    if cfg.dp_updates_classifier and lam_p > 0:
        loss = loss + lam_p * gen(D_p(torch.softmax(C(feat_t), 1)))
    _apply(state, "C", "C", loss, hook)
    rep.seg = float(seg.detach())

    # U: source-domain generator term + cycle consistency
    fake_s = U(feat_t)
    cyc = L.cycle_loss(x_s, U(feat_st), x_t, G(fake_s))
    loss = w.lambda_adv_s * gen(D_s(fake_s)) + w.lambda_cyc * cyc
    _apply(state, "U", "U", loss, hook)

    # D_s: real source vs generated source, plus the auxiliary head
    with torch.no_grad():
        fake_s = U(feat_t)
        rec_s = U(feat_st)
    adv_s = disc(D_s(x_s), D_s(state.pools["D_s"].query(fake_s)))
    loss = adv_s
    adv_st = zero
    if lam_st > 0:
        adv_st = disc(D_s.forward_aux(rec_s), D_s.forward_aux(fake_s))
        loss = loss + lam_st * adv_st
    _apply(state, "D_s", "D_s", loss, hook)
    rep.adv_s, rep.adv_s_tilde = float(adv_s.detach()), float(adv_st.detach())

    # D_p: predictions on synthesized ("real") vs real target ("fake") images
    if "D_p" in state.active and lam_p > 0:
        with torch.no_grad():
            p_st = torch.softmax(C(feat_st), 1)
            p_t = torch.softmax(C(feat_t), 1)
        adv_p = disc(D_p(p_st), D_p(p_t))
        _apply(state, "D_p", "D_p", adv_p, hook)
        rep.adv_p = float(adv_p.detach())

    rep.total = L.total_loss(rep.__dict__, w)
    state.step += 1
    return rep


def _encoder_update(state: TrainState, adv, seg, hook, seg_fn=None):
    """Fused: one step on adv + seg. Split: adversarial phase, then the
    segmentation phase on a fresh forward pass (``seg_fn``) through the moved E."""
    if state.config.encoder_update == "split":
        if adv is not None:
            _apply(state, "E_adv", "E", adv, hook)
            seg = seg_fn()
        _apply(state, "E_seg", "E", seg, hook)
    else:
        _apply(state, "E", "E", seg if adv is None else adv + seg, hook)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def _prepare(images: np.ndarray, masks: Optional[np.ndarray], params: Optional[list[AugmentParams]]):
    xs, ys = [], []
    for i, img in enumerate(images):
        m = None if masks is None else masks[i]
        if params is not None:
            p = params[i]
            img = _warp(img.astype(np.float64), p, order=1, mode="nearest")
            if m is not None:
                m = np.rint(_warp(m.astype(np.float64), p, order=0, mode="constant")).astype(np.int64)
        xs.append(to_network_range(img))
        if m is not None:
            ys.append(m.astype(np.int64))
    x = torch.from_numpy(np.stack(xs)[:, None])
    y = torch.from_numpy(np.stack(ys)) if masks is not None else None
    return x, y


def steps_per_epoch(n_source: int, n_target: int, batch_size: int) -> int:
    return max(1, max(n_source, n_target) // batch_size)


def epoch_batches(source: Dataset, target: Dataset, config: TrainConfig, epoch: int, start: int = 0) -> Iterator:
    """Batches of one epoch as a pure function of (seed, epoch).

    Source and target are shuffled independently, so pairs within a batch are
    unaligned. ``start`` skips already-consumed batches (resumption).
    """
    bs = config.batch_size
    n_s, n_t = len(source), len(target)
    n_steps = steps_per_epoch(n_s, n_t, bs)
    rng = np.random.default_rng([config.seed, epoch, 11])
    need = n_steps * bs
    order_s = np.concatenate([rng.permutation(n_s) for _ in range(math.ceil(need / n_s))])[:need]
    order_t = np.concatenate([rng.permutation(n_t) for _ in range(math.ceil(need / n_t))])[:need]
    src_img, src_mask, tgt_img = source.images, source.masks, target.images
    for b in range(start, n_steps):
        sl = slice(b * bs, (b + 1) * bs)
        ps = pt = None
        if config.augment:
            arng = np.random.default_rng([config.seed, epoch, b, 13])
            ps = [AugmentParams.draw(arng) for _ in range(bs)]
            pt = [AugmentParams.draw(arng) for _ in range(bs)]
        x_s, y_s = _prepare(src_img[order_s[sl]], src_mask[order_s[sl]], ps)
        x_t, _ = _prepare(tgt_img[order_t[sl]], None, pt)
        yield x_s, y_s, x_t


def _prefetched(it: Iterator, depth: int = 2) -> Iterator:
    """Run ``it`` on a worker thread feeding a bounded queue; order is preserved."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def work():
        try:
            for item in it:
                q.put(item)
        except BaseException as exc:  # surfaced to the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=work, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict_logits(state: TrainState, x: torch.Tensor) -> torch.Tensor:
    E, C = state.nets["E"], state.nets["C"]
    E.eval()
    C.eval()
    try:
        return C(E(x))
    finally:
        E.train()
        C.train()


def infer_segmentation(state: TrainState, x_t, batch_size: int = 32) -> np.ndarray:
    """argmax_k softmax(C(E(x))) for raw target slices; no generator involved.

    Accepts one H x W slice or an N x H x W stack; returns labels of the same
    spatial shape.
    """
    arr = np.asarray(x_t.data if hasattr(x_t, "data") and not isinstance(x_t, np.ndarray) else x_t)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    h, w = arr.shape[-2:]
    if h % 8 or w % 8:
        raise N.ShapeError(f"input {h}x{w} must be divisible by 8")
    out = []
    for i in range(0, len(arr), batch_size):
        x = torch.from_numpy(np.stack([to_network_range(a) for a in arr[i : i + batch_size]])[:, None])
        out.append(predict_logits(state, x).argmax(1).numpy().astype(np.uint8))
    labels = np.concatenate(out)
    return labels[0] if single else labels


def evaluate_state(state: TrainState, test: Dataset) -> MetricReport:
    """Metrics on a labeled dataset, grouping slices into volumes by scene id."""
    preds = infer_segmentation(state, test.images)
    refs = test.masks
    volumes: dict[int, list[int]] = {}
    for i, sid in enumerate(test.scene_ids):
        volumes.setdefault(sid, []).append(i)
    vps = [VolumePrediction([preds[i] for i in idx], [refs[i] for i in idx]) for idx in volumes.values()]
    return evaluate(vps)


# ---------------------------------------------------------------------------
# checkpoints and the run driver
# ---------------------------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(state: TrainState, directory) -> Path:
    """Write ``state.pt`` (named tensors and optimizer state) and ``manifest.json``."""
    d = Path(directory)
    tmp = d.with_name(d.name + ".partial")
    try:
        tmp.mkdir(parents=True, exist_ok=True)
        torch.save(state.state_dict(), tmp / "state.pt")
        manifest = {
            "spec_hash": state.spec_hash(),
            "step": state.step,
            "rng_seed": state.config.seed,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "epoch": state.epoch,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        if d.exists():
            for f in d.iterdir():
                f.unlink()
            d.rmdir()
        tmp.rename(d)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {d}: {exc}") from exc
    return d


def load_checkpoint(directory, config: Optional[TrainConfig] = None) -> TrainState:
    d = Path(directory)
    if not (d / "manifest.json").exists() or not (d / "state.pt").exists():
        raise CheckpointError(f"{d} is not a checkpoint directory")
    manifest = json.loads((d / "manifest.json").read_text())
    blob = torch.load(d / "state.pt", weights_only=False)
    state = TrainState(config or TrainConfig.from_dict(blob["config"]))
    if state.spec_hash() != manifest["spec_hash"]:
        raise CheckpointError(f"spec hash mismatch: checkpoint {manifest['spec_hash']} vs config {state.spec_hash()}")
    state.load_state_dict(blob)
    return state


def latest_checkpoint(run_dir) -> Optional[Path]:
    ckpts = sorted(Path(run_dir).glob("ckpt-*"), key=lambda p: int(p.name.split("-")[1]) if p.name.split("-")[1].isdigit() else -1)
    ckpts = [c for c in ckpts if (c / "manifest.json").exists()]
    return ckpts[-1] if ckpts else None


@dataclass
class RunArtifacts:
    run_dir: Path
    checkpoints: list[Path]
    log_path: Path
    steps: int
    report: Optional[MetricReport]
    state: TrainState


def _truncate_log(path: Path, steps: int):
    if not path.exists():
        return
    lines = [l for l in path.read_text().splitlines() if l and int(l.split(",")[0]) <= steps]
    path.write_text("".join(l + "\n" for l in lines))


def run_training(
    config: TrainConfig,
    source_train: Dataset,
    target_train: Dataset,
    run_dir,
    target_test: Optional[Dataset] = None,
    resume: Optional[Path] = None,
    max_steps: Optional[int] = None,
    on_step: Optional[Callable[[int, L.LossReport], None]] = None,
) -> RunArtifacts:
    """Train for ``config.epochs`` epochs (or ``max_steps`` total steps).

    The loss log holds one CSV line per executed step:
    step,adv_t,adv_s,cyc,seg,adv_p,adv_s_tilde,total.
    """
    config.validate()
    if len(source_train) == 0 or len(target_train) == 0:
        raise InvalidInputError("training needs source and target samples")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "losses.csv"
    torch.use_deterministic_algorithms(config.deterministic)

    if resume is not None:
        state = load_checkpoint(resume, config)
        _truncate_log(log_path, state.step)
        checkpoints = [Path(resume)]
    else:
        state = TrainState(config)
        log_path.write_text("")
        checkpoints = [save_checkpoint(state, run_dir / "ckpt-0")]

    per_epoch = steps_per_epoch(len(source_train), len(target_train), config.batch_size)
    total = config.epochs * per_epoch if max_steps is None else min(max_steps, config.epochs * per_epoch)
    with log_path.open("a") as log:
        while state.step < total:
            epoch, start = divmod(state.step, per_epoch)
            state.set_epoch(epoch)
            batches = epoch_batches(source_train, target_train, config, epoch, start)
            if config.prefetch and not config.deterministic:
                batches = _prefetched(batches)
            for x_s, y_s, x_t in batches:
                rep = train_step(state, x_s, y_s, x_t)
                log.write(rep.csv_line(state.step) + "\n")
                if on_step is not None:
                    on_step(state.step, rep)
                epoch_end = state.step % per_epoch == 0
                if state.step % config.checkpoint_every == 0 or epoch_end or state.step == total:
                    log.flush()
                    checkpoints.append(save_checkpoint(state, run_dir / f"ckpt-{state.step}"))
                if state.step >= total:
                    break
            if state.step % per_epoch == 0:
                state.set_epoch(state.step // per_epoch)

    report = None
    if target_test is not None and len(target_test):
        report = evaluate_state(state, target_test)
        (run_dir / "report.txt").write_text(report.to_text())
        (run_dir / "report.csv").write_text(report.to_csv())
    return RunArtifacts(run_dir, checkpoints, log_path, state.step, report, state)

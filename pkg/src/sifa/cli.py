"""Command-line entry point: ``sifa {gen-data,train,eval,ablate,plot}``.

Exit codes: 0 success, 2 usage/config/data error, 3 numerical abort.

Every command accepts ``--config FILE``, a flat ``key = value`` file whose
keys are the long option names with dashes replaced by underscores
(``lambda_cyc = 10``). Command-line flags override file values.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import statistics
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

logger = logging.getLogger("sifa")

# key -> (type, default); shared by the config file and the flags
OPTIONS: dict[str, tuple[type, object]] = {
    "data": (str, "data"),
    "runs": (str, "runs"),
    "name": (str, None),
    "scenes": (int, 200),
    "size": (int, 64),
    "seed": (int, 0),
    "split_ratio": (float, 0.8),
    "width": (float, 0.0625),
    "batch_size": (int, 8),
    "epochs": (int, 40),
    "ablation": (str, "full"),
    "lambda_adv_s": (float, 1.0),
    "lambda_cyc": (float, 10.0),
    "lambda_seg": (float, 1.0),
    "lambda_adv_p": (float, 0.1),
    "lambda_adv_s_tilde": (float, 0.1),
    "alpha": (float, 1.0),
    "adversarial_lr": (float, 2e-4),
    "segmentation_lr": (float, 1e-3),
    "lr_decay": (float, 0.9),
    "lr_decay_every": (int, 2),
    "adv_variant": (str, "bce"),
    "dp_updates_classifier": (bool, False),
    "encoder_update": (str, "split"),
    "augment": (bool, True),
    "replay_buffer": (int, 0),
    "checkpoint_every": (int, 500),
    "deterministic": (bool, True),
    "seeds": (str, "0,1,2"),
}


class UsageError(Exception):
    pass


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


def _coerce(key: str, value):
    typ = OPTIONS[key][0]
    try:
        return _parse_bool(value) if typ is bool else typ(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{key}: cannot parse {value!r} as {typ.__name__}") from exc


def read_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string("[run]\n" + p.read_text())
    out = {}
    for key, value in cp["run"].items():
        if key not in OPTIONS:
            raise UsageError(f"{p}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve(args: argparse.Namespace, keys: Sequence[str]) -> dict:
    """Defaults < config file < explicit flags."""
    cfg = {k: OPTIONS[k][1] for k in keys}
    if getattr(args, "config", None):
        cfg.update({k: v for k, v in read_config_file(args.config).items() if k in cfg})
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = _coerce(k, v)
    return cfg


def _add(p: argparse.ArgumentParser, *keys: str):
    for k in keys:
        typ = OPTIONS[k][0]
        flag = "--" + k.replace("_", "-")
        p.add_argument(flag, dest=k, default=None, type=str if typ is bool else typ, metavar=k.upper())


TRAIN_KEYS = (
    "data", "runs", "name", "seed", "width", "batch_size", "epochs", "ablation",
    "lambda_adv_s", "lambda_cyc", "lambda_seg", "lambda_adv_p", "lambda_adv_s_tilde", "alpha",
    "adversarial_lr", "segmentation_lr", "lr_decay", "lr_decay_every", "adv_variant",
    "dp_updates_classifier", "encoder_update", "augment", "replay_buffer", "checkpoint_every", "deterministic",
)


def build_train_config(cfg: dict, **overrides):
    from sifa.core import LossWeights
    from sifa.training import AblationMode, OptimizerSchedule, TrainConfig

    try:
        ablation = AblationMode(overrides.pop("ablation", cfg["ablation"]))
    except ValueError as exc:
        raise UsageError(f"ablation: {exc}") from exc
    tc = TrainConfig(
        weights=LossWeights(
            cfg["lambda_adv_s"], cfg["lambda_cyc"], cfg["lambda_seg"], cfg["lambda_adv_p"], cfg["lambda_adv_s_tilde"], cfg["alpha"]
        ),
        ablation=ablation,
        schedule=OptimizerSchedule(cfg["adversarial_lr"], cfg["segmentation_lr"], cfg["lr_decay"], cfg["lr_decay_every"]),
        width=cfg["width"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=overrides.pop("seed", cfg["seed"]),
        adv_variant=cfg["adv_variant"],
        dp_updates_classifier=cfg["dp_updates_classifier"],
        encoder_update=cfg["encoder_update"],
        augment=cfg["augment"],
        replay_buffer=cfg["replay_buffer"],
        checkpoint_every=cfg["checkpoint_every"],
        deterministic=cfg["deterministic"],
    )
    tc.validate()
    return tc


def _load_split(data_dir: Path, domain: str, split: str):
    from sifa.data import load_dataset_dir

    ds, _ = load_dataset_dir(data_dir, domain, split)
    if len(ds) == 0:
        raise UsageError(f"{data_dir}: no {domain}/{split} samples in manifest")
    return ds


def _check_data(data_dir: Path):
    if not (data_dir / "manifest.csv").is_file():
        raise UsageError(f"no dataset manifest at {data_dir / 'manifest.csv'}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from sifa.data import SyntheticSceneSpec, generate_synthetic, split_dataset, write_dataset_dir

    cfg = resolve(args, ("data", "scenes", "size", "seed", "split_ratio"))
    if cfg["scenes"] < 1:
        raise UsageError("--scenes must be >= 1")
    if cfg["size"] < 8 or cfg["size"] % 8:
        raise UsageError("--size must be a positive multiple of 8")
    if not 0 < cfg["split_ratio"] < 1:
        raise UsageError("--split-ratio must lie in (0, 1)")
    if cfg["scenes"] < 2:
        raise UsageError("--scenes must be >= 2 to form a train/test split")
    out = Path(cfg["data"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from exc
    spec = SyntheticSceneSpec(canvas=(cfg["size"], cfg["size"]), seed=cfg["seed"])
    src, tgt = generate_synthetic(spec, cfg["scenes"])
    parts = []
    for ds in (src, tgt):
        parts += split_dataset(ds, cfg["split_ratio"], cfg["seed"])
    write_dataset_dir(out, parts)
    for ds in parts:
        print(f"{ds.domain.value:7s} {ds.split:5s} {len(ds):5d}")
    print(f"source {len(src)} scenes, target {len(tgt)} scenes -> {out / 'manifest.csv'}")
    return EXIT_OK


def _train_one(cfg: dict, tc, run_name: str, data_dir: Path, resume: Optional[Path] = None, quiet=False):
    from sifa.training import run_training

    s_tr = _load_split(data_dir, "source", "train")
    t_tr = _load_split(data_dir, "target", "train")
    t_te = _load_split(data_dir, "target", "test")
    run_dir = Path(cfg["runs"]) / run_name

    def progress(step, rep):
        if not quiet and step % 50 == 0:
            logger.info("step %d  %s", step, rep.csv_line(step))

    return run_training(tc, s_tr, t_tr, run_dir, target_test=t_te, resume=resume, on_step=progress)


def cmd_train(args) -> int:
    cfg = resolve(args, TRAIN_KEYS)
    tc = build_train_config(cfg)
    data_dir = Path(cfg["data"])
    _check_data(data_dir)
    resume = Path(args.resume) if args.resume else None
    if resume is not None and not (resume / "manifest.json").is_file():
        raise UsageError(f"--resume: {resume} is not a checkpoint")
    name = cfg["name"] or f"{tc.ablation.value}-seed{tc.seed}"
    art = _train_one(cfg, tc, name, data_dir, resume)
    print(f"{art.steps} steps -> {art.run_dir}")
    if art.report is not None:
        print(art.report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    from sifa.training import CheckpointError, evaluate_state, load_checkpoint

    cfg = resolve(args, ("data",))
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    data_dir = Path(cfg["data"])
    _check_data(data_dir)
    if args.format not in ("text", "csv"):
        raise UsageError("--format must be text or csv")
    try:
        state = load_checkpoint(ckpt)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    report = evaluate_state(state, _load_split(data_dir, "target", "test"))
    text = report.to_csv() if args.format == "csv" else report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def ablation_table(rows: list[dict]) -> str:
    lines = [f"{'Methods':20s} {'IA':>3s} {'FA-P':>5s} {'FA-I':>5s}  {'Average Dice':>12s}  per-seed"]
    for r in rows:
        mark = lambda b: "x" if b else ""  # noqa: E731
        seeds = " ".join(f"{d:.1f}" for d in r["dice"])
        lines.append(f"{r['label']:20s} {mark(r['ia']):>3s} {mark(r['fap']):>5s} {mark(r['fai']):>5s}  {r['median']:12.1f}  {seeds}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    from sifa.training import ABLATION_LABELS, AblationMode

    cfg = resolve(args, TRAIN_KEYS + ("seeds",))
    try:
        seeds = [int(s) for s in str(cfg["seeds"]).split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--seeds: {exc}") from exc
    if not seeds:
        raise UsageError("--seeds must list at least one seed")
    modes = list(AblationMode)
    if args.modes:
        try:
            modes = [AblationMode(m) for m in args.modes.split(",")]
        except ValueError as exc:
            raise UsageError(f"--modes: {exc}") from exc
    configs = {(m, s): build_train_config(cfg, ablation=m.value, seed=s) for m in modes for s in seeds}
    data_dir = Path(cfg["data"])
    _check_data(data_dir)
    prefix = cfg["name"] or "ablate"
    rows = []
    for m in modes:
        dice = []
        for s in seeds:
            art = _train_one(cfg, configs[(m, s)], f"{prefix}-{m.value}-seed{s}", data_dir, quiet=True)
            dice.append(art.report.dice_avg)
            logger.info("%s seed %d: average Dice %.2f", m.value, s, dice[-1])
        rows.append(
            {
                "mode": m.value, "label": ABLATION_LABELS[m], "dice": dice, "median": statistics.median(dice),
                "ia": m != AblationMode.NO_ADAPT,
                "fap": m in (AblationMode.IMAGE_PLUS_FAP, AblationMode.FULL),
                "fai": m == AblationMode.FULL,
            }
        )
    table = ablation_table(rows)
    out = Path(cfg["runs"]) / f"{prefix}-table.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    csv_lines = ["mode,median_dice," + ",".join(f"seed{s}" for s in seeds)]
    csv_lines += [f"{r['mode']},{r['median']:.4f}," + ",".join(f"{d:.4f}" for d in r["dice"]) for r in rows]
    (Path(cfg["runs"]) / f"{prefix}-table.csv").write_text("\n".join(csv_lines) + "\n")
    print(table, end="")
    return EXIT_OK


# AA blue, LAC red, LVC purple, MYO yellow
CLASS_COLORS = np.array([[0, 0, 0], [40, 90, 255], [230, 30, 30], [150, 60, 200], [250, 220, 40]], dtype=np.uint8)


def _gray(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    g = np.zeros_like(img, dtype=np.float64) if hi <= lo else (img - lo) / (hi - lo)
    return np.repeat((g * 255).astype(np.uint8)[..., None], 3, axis=2)


def overlay(img: np.ndarray, labels: np.ndarray, alpha: float = 0.55) -> np.ndarray:
    base = _gray(img).astype(np.float64)
    col = CLASS_COLORS[labels].astype(np.float64)
    fg = (labels > 0)[..., None]
    return np.where(fg, (1 - alpha) * base + alpha * col, base).astype(np.uint8)


def cmd_plot(args) -> int:
    import torch
    from PIL import Image as PILImage

    from sifa.data import to_network_range
    from sifa.training import CheckpointError, infer_segmentation, load_checkpoint

    cfg = resolve(args, ("data", "seed"))
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    data_dir = Path(cfg["data"])
    _check_data(data_dir)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.kind not in ("segmentation", "translation"):
        raise UsageError("--kind must be segmentation or translation")
    try:
        state = load_checkpoint(ckpt)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    target = _load_split(data_dir, "target", "test")
    idx = np.sort(rng.choice(len(target), size=min(args.n, len(target)), replace=False))
    written = []
    if args.kind == "segmentation":
        imgs, refs = target.images[idx], target.masks[idx]
        preds = infer_segmentation(state, imgs)
        for i, j in enumerate(idx):
            panel = np.concatenate([_gray(imgs[i]), overlay(imgs[i], preds[i]), overlay(imgs[i], refs[i])], axis=1)
            path = out / f"seg-{j:04d}.png"
            PILImage.fromarray(panel).save(path)
            written.append(path)
    else:
        source = _load_split(data_dir, "source", "test")
        sidx = np.sort(rng.choice(len(source), size=min(args.n, len(source)), replace=False))
        G = state.nets["G_t"].eval()
        for i, j in zip(sidx, idx):
            xs = to_network_range(source.images[i])
            with torch.no_grad():
                fake = G(torch.from_numpy(xs)[None, None])[0, 0].numpy()
            panel = np.concatenate([_gray(xs), _gray(fake), _gray(to_network_range(target.images[j]))], axis=1)
            path = out / f"translation-{i:04d}.png"
            PILImage.fromarray(panel).save(path)
            written.append(path)
    for p in written:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sifa", description="Synergistic image and feature adaptation for 2D segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic two-domain dataset and manifest")
    g.add_argument("--config")
    _add(g, "data", "scenes", "size", "seed", "split_ratio")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    _add(t, *TRAIN_KEYS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the target test split")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--format", default="text")
    e.add_argument("--out")
    _add(e, "data")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train every ablation mode over several seeds")
    a.add_argument("--config")
    a.add_argument("--modes", help="comma-separated subset of no_adapt,image_only,image_plus_fap,full")
    _add(a, *TRAIN_KEYS, "seeds")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="write prediction or translation panels")
    pl.add_argument("--config")
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--n", type=int, default=4)
    pl.add_argument("--kind", default="segmentation")
    _add(pl, "data", "seed")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    from sifa.core import ConfigError, InvalidInputError
    from sifa.data import SampleFileError
    from sifa.losses import NumericalError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, InvalidInputError, SampleFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical abort: {exc.component}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

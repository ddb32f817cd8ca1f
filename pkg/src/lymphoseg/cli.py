"""Command line: generate -> train -> eval -> explain over an on-disk dataset."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import explain, io, pipeline, segnet
from . import train as training
from .datagen import SlideSpec, generate_slide
from .labels import CLASS_NAMES, NUM_CLASSES, POSITIVE_CLASSES
from .metrics import format_report

log = logging.getLogger("lymphoseg")

SLIDE_CHANNELS = ("nuclear", "cd20", "cd8", "cd3")
MANIFEST = "manifest.txt"
MANIFEST_SEPARATOR = "---"
CHECKPOINT_NAME = "model.hseg"


@dataclass
class RunConfig:
    # training
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    # dataset
    slides: int = 6
    slide_size: int = 384
    patch_size: int = 64
    overlap: float = 0.5
    counts: tuple = (52, 52, 52, 52, 40)  # per class, vocabulary order
    split_mode: str = "random"
    ratios: tuple = (0.8, 0.1, 0.1)
    holdout_slide: int = -1  # -1: last slide
    # network
    widths: tuple = (8, 16, 32)
    # paths
    data: str = "data"
    out: str = "out"
    checkpoint: str = ""
    # eval
    split: str = "test"
    hard: bool = False
    # explain
    mode: str = "optimize"
    steps: int = 1000
    explain_lr: float = 0.01
    output: str = "softmax"
    patches: int = 1
    min_cell: int = 1
    threshold: str = "mean"

    def validate(self) -> "RunConfig":
        for name in ("epochs", "batch_size", "lr", "slides", "slide_size", "patch_size", "patches", "min_cell"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0; got {getattr(self, name)}")
        for name in ("weight_decay", "steps", "explain_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0; got {getattr(self, name)}")
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1) > 1e-9:
            raise ValueError(f"ratios must be three shares summing to 1; got {self.ratios}")
        if len(self.counts) != NUM_CLASSES:
            raise ValueError(f"counts needs {NUM_CLASSES} entries; got {self.counts}")
        if not 0 <= self.overlap < 1:
            raise ValueError(f"overlap must be in [0, 1); got {self.overlap}")
        choices = {"split_mode": ("random", "holdout"), "split": ("train", "val", "test"),
                   "mode": ("optimize", "saliency"), "output": ("softmax", "logits"),
                   "threshold": ("mean", "mid-range", "none")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}; got {getattr(self, name)!r}")
        return self

    def network(self) -> segnet.NetworkConfig:
        return segnet.NetworkConfig(num_classes=NUM_CLASSES, widths=tuple(self.widths), seed=self.seed)


def _coerce(kind, text: str, key: str):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(float(t) if "." in t else int(t) for t in text.replace(",", " ").split())
        return kind(text)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {text!r}") from None


_TYPES = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}


def load_config(path: Optional[str] = None, **overrides) -> RunConfig:
    """Defaults, then the ``key = value`` file, then non-None overrides. Unknown keys are errors."""
    fields = {f.name: _TYPES[f.type] for f in dataclasses.fields(RunConfig)}
    values = {}
    if path:
        for key, text in io.parse_kv(Path(path).read_text(), str(path)).items():
            if key not in fields:
                raise ValueError(f"{path}: unknown config key {key!r}")
            values[key] = _coerce(fields[key], text, key)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values).validate()


# ------------------------------------------------------------------ dataset


def _split_name(split: pipeline.DatasetSplit) -> dict:
    names = {}
    for name in ("train", "val", "test"):
        for pid in getattr(split, name):
            names[pid] = name
    return names


def run_generate(cfg: RunConfig) -> Path:
    root = Path(cfg.data)
    try:
        (root / "patches").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValueError(f"cannot write dataset to {root}: {exc}") from exc
    counts = dict(enumerate(cfg.counts))
    patches = []
    for s in range(cfg.slides):
        spec = SlideSpec(width=cfg.slide_size, height=cfg.slide_size, counts=counts, seed=cfg.seed * 1000 + s)
        stack, labels = generate_slide(spec)
        slide_dir = root / "slides" / str(s)
        slide_dir.mkdir(parents=True, exist_ok=True)
        for name, arr in stack.as_dict().items():
            io.write_raster(slide_dir / f"{name}.img", arr)
        io.write_raster(slide_dir / "labels.lbl", labels)
        for p in pipeline.extract_patches(stack.nuclear, labels, cfg.patch_size, cfg.overlap, slide_id=s):
            io.write_raster(root / "patches" / f"{p.patch_id}.img", p.image[0].astype(np.uint16))
            io.write_raster(root / "patches" / f"{p.patch_id}.lbl", p.target)
            patches.append(p)
    holdout = None if cfg.holdout_slide < 0 else cfg.holdout_slide
    split = pipeline.split_dataset(patches, cfg.ratios, mode=cfg.split_mode, seed=cfg.seed, holdout_slide=holdout)
    header = {
        "seed": cfg.seed,
        "slides": cfg.slides,
        "slide_size": cfg.slide_size,
        "patch_size": cfg.patch_size,
        "overlap": cfg.overlap,
        "num_classes": NUM_CLASSES,
        "counts": ",".join(str(c) for c in cfg.counts),
        "split_mode": cfg.split_mode,
        "ratios": ",".join(str(r) for r in cfg.ratios),
        "patch_count": len(patches),
        "train": len(split.train),
        "val": len(split.val),
        "test": len(split.test),
    }
    names = _split_name(split)
    lines = [io.format_kv(header), MANIFEST_SEPARATOR + "\n"]
    lines += [f"{p.patch_id} {names[p.patch_id]}\n" for p in patches]
    (root / MANIFEST).write_text("".join(lines))
    log.info("wrote %d patches from %d slides to %s", len(patches), cfg.slides, root)
    return root


@dataclass
class Dataset:
    header: dict
    splits: dict = field(default_factory=dict)  # split name -> [PatchPair]

    def __getitem__(self, name):
        return self.splits[name]


def read_manifest(root) -> tuple[dict, list]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise ValueError(f"{path}: missing dataset manifest")
    text = path.read_text()
    if f"\n{MANIFEST_SEPARATOR}\n" not in text:
        raise ValueError(f"{path}: corrupt manifest (no patch table)")
    head, body = text.split(f"\n{MANIFEST_SEPARATOR}\n", 1)
    header = io.parse_kv(head, str(path))
    entries = []
    for n, line in enumerate(body.splitlines(), 1):
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("train", "val", "test"):
            raise ValueError(f"{path}: bad patch entry {line!r}")
        entries.append((parts[0], parts[1]))
    if len(entries) != int(header.get("patch_count", -1)):
        raise ValueError(f"{path}: manifest lists {len(entries)} patches, header says {header.get('patch_count')}")
    return dict(header), entries


def load_dataset(root, splits=("train", "val", "test")) -> Dataset:
    root = Path(root)
    header, entries = read_manifest(root)
    data = Dataset(header, {s: [] for s in splits})
    for pid, name in entries:
        if name not in data.splits:
            continue
        slide, x, y = (int(t) for t in pid.split("_"))
        try:
            img = io.read_raster(root / "patches" / f"{pid}.img")
            lbl = io.read_raster(root / "patches" / f"{pid}.lbl")
        except (OSError, io.FormatError) as exc:
            raise ValueError(f"corrupt dataset: {exc}") from exc
        if img.shape != lbl.shape:
            raise ValueError(f"corrupt dataset: {pid} image {img.shape} and labels {lbl.shape} differ")
        pair = pipeline.PatchPair(img[None].astype(np.float32), lbl, slide, (x, y))
        data.splits[name].append(pipeline.normalize_patch(pair))
    return data


# ------------------------------------------------------------------ training


def run_train(cfg: RunConfig) -> Path:
    data = load_dataset(cfg.data, ("train", "val"))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    params = segnet.build_network(cfg.network())
    log_path = out / "train_log.csv"
    with open(log_path, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")

        def record(rec):
            fh.write(f"{rec.epoch},{rec.train_loss:.6f},{rec.val_loss:.6f}\n")
            fh.flush()
            log.info("epoch %d/%d  train %.4f  val %.4f", rec.epoch, cfg.epochs, rec.train_loss, rec.val_loss)

        result = training.train(params, data["train"], data["val"], epochs=cfg.epochs, batch_size=cfg.batch_size,
                                lr=cfg.lr, weight_decay=cfg.weight_decay, seed=cfg.seed, on_epoch=record)
    ckpt = out / CHECKPOINT_NAME
    io.save_checkpoint(ckpt, result.params, epoch=result.best_epoch)
    log.info("best epoch %d -> %s", result.best_epoch, ckpt)
    return ckpt


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / CHECKPOINT_NAME


def run_eval(cfg: RunConfig) -> Path:
    params, _ = io.load_checkpoint(_checkpoint_path(cfg))
    data = load_dataset(cfg.data, (cfg.split,))
    declared = int(data.header.get("num_classes", NUM_CLASSES))
    if params.config.num_classes != declared:
        raise ValueError(f"checkpoint predicts {params.config.num_classes} classes, dataset has {declared}")
    patches = data[cfg.split]
    if not patches:
        raise ValueError(f"split {cfg.split!r} is empty")
    pix, cen = training.evaluate_patches(params, patches, split=cfg.split, hard=cfg.hard)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"report_{cfg.split}.csv"
    path.write_text(format_report([pix, cen]))
    for rep in (pix, cen):
        p, r, f = rep.average
        log.info("%s %s macro P %.3f R %.3f F1 %.3f", cfg.split, rep.regime, p, r, f)
    return path


def _export(out: Path, stem: str, values: np.ndarray) -> None:
    lo, hi = io.write_pgm(out / f"{stem}.pgm", values)
    (out / f"{stem}.range.txt").write_text(io.format_kv({"min": repr(lo), "max": repr(hi)}))
    np.save(out / f"{stem}.npy", np.asarray(values, dtype=np.float32))


def run_explain(cfg: RunConfig) -> list[Path]:
    params, _ = io.load_checkpoint(_checkpoint_path(cfg))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if cfg.mode == "optimize":
        data = load_dataset(cfg.data, ("train",))
        init = explain.mean_training_image(data["train"])
        res = explain.optimize_input(params, init, steps=cfg.steps, lr=cfg.explain_lr, mode=cfg.output)
        _export(out, "quadrant", res.image[0])
        trace = out / "quadrant_loss.csv"
        trace.write_text("step,loss\n" + "".join(f"{k},{v:.8f}\n" for k, v in enumerate(res.losses)))
        written += [out / "quadrant.pgm", trace]
        log.info("quadrant means %s", np.round(explain.in_quadrant_means(params, res.image, mode=cfg.output), 4))
    elif cfg.mode == "saliency":
        data = load_dataset(cfg.data, (cfg.split,))
        model = explain.network_model(params, cfg.batch_size)
        for patch in data[cfg.split][:cfg.patches]:
            for c, name in enumerate(CLASS_NAMES):
                sal = explain.hipe_saliency(model, patch.image, c, cfg.min_cell, cfg.threshold)
                stem = f"saliency_{patch.patch_id}_{name}"
                _export(out, stem, sal.values)
                written.append(out / f"{stem}.pgm")
    else:
        raise ValueError(f"unknown explain mode {cfg.mode!r}")
    return written


# ------------------------------------------------------------------ entry


COMMANDS = {"generate": run_generate, "train": run_train, "eval": run_eval, "explain": run_explain}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lymphoseg", description="Lymphocyte class segmentation from a nuclear stain.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; unknown keys are errors")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--out", help="output directory (dataset root for generate)")
        p.add_argument("--data", help="dataset root")
        p.add_argument("--checkpoint")
        if name == "eval":
            p.add_argument("--split", choices=("train", "val", "test"))
        if name == "explain":
            p.add_argument("--mode", choices=("optimize", "saliency"))
            p.add_argument("--steps", type=int)
            p.add_argument("--patches", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    if args.command == "generate" and args.out is not None:
        overrides["data"] = overrides.pop("out")
    try:
        cfg = load_config(args.config, **overrides)
        result = COMMANDS[args.command](cfg)
    except (ValueError, OSError) as exc:
        print(f"lymphoseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    if isinstance(result, list):
        for p in result:
            print(p)
    else:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())

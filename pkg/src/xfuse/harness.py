"""Two-step pipeline: segmenter training, lesion-map generation, classifier
training, evaluation reports and the fusion x transfer ablation grid.

Every artifact is a pure function of the configuration: data, splits,
initial weights, batch order, augmentation and dropout all come from named
streams keyed by ``cfg.seed``.
"""

from __future__ import annotations

import io
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as D
from .checkpoint import (
    Checkpoint,
    atomic_write_text,
    join_u64,
    load_checkpoint,
    params_to_arrays,
    save_checkpoint,
    split_u64,
)
from .cls import Variant, ablation_variant, build_cls_params, cls_predict, cls_train_step, trainable_params
from .config import RunConfig, parse_cells
from .errors import ConfigError, DivergenceError, KindError, ManifestError, TransferError
from .metrics import (
    ConfusionMatrix,
    auc,
    confusion,
    confusion_to_csv,
    dice,
    iou,
    optimal_index,
    roc_curve,
    roc_to_csv,
    tpr_tnr_acc,
)
from .optim import SgdState
from .plot import confusion_svg, roc_svg
from .rng import stream
from .seg import generate_lesion_map, init_seg_params, seg_train_step
from .tensor import Tensor

log = logging.getLogger(__name__)

SEG_FILE = "seg.xfus"
CLS_FILE = "cls.xfus"
MANIFEST_FILE = "manifest.csv"
FALLBACK_THRESHOLD = 0.5


# ------------------------------------------------------------------ plumbing


def thread_count() -> int:
    """``XFUSE_THREADS`` if set, else the available parallelism."""
    env = os.environ.get("XFUSE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"XFUSE_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("XFUSE_THREADS must be >= 1")
        return n
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def fan_out(fn: Callable[[slice], np.ndarray], n: int, chunk: int = 32) -> np.ndarray:
    """Apply ``fn`` to fixed index chunks, in parallel, and concatenate in order.

    Chunk boundaries do not depend on the thread count, so results are
    identical for any ``XFUSE_THREADS``.
    """
    parts = _chunks(n, chunk)
    workers = min(thread_count(), len(parts))
    if workers <= 1:
        outs = [fn(s) for s in parts]
    else:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(fn, parts))
    return np.concatenate(outs) if outs else np.zeros((0,))


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_cell(v) for v in row) + "\n")
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "nan"
    return str(v)


def _hash_meta(cfg: RunConfig) -> dict[str, float]:
    hi, lo = split_u64(cfg.hash64())
    return {"config_hash_hi": hi, "config_hash_lo": lo}


def config_hash_of(ckpt: Checkpoint) -> int | None:
    if "config_hash_hi" not in ckpt.meta:
        return None
    return join_u64(ckpt.meta["config_hash_hi"], ckpt.meta["config_hash_lo"])


def _params(ckpt: Checkpoint) -> dict[str, Tensor]:
    return {name: Tensor(arr.copy()) for name, arr in ckpt.tensors.items()}


def _check_finite(loss: float, stage: str, epoch: int, step: int) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(
            f"{stage}: loss became {loss} at epoch {epoch}, step {step}; "
            "lower lr or check inputs for NaN/inf"
        )


# ------------------------------------------------------------------ datasets


@dataclass
class Dataset:
    samples: list[D.Sample]
    splits: dict[str, list[int]]

    def ids(self, split: str) -> list[str]:
        return [self.samples[i].id for i in self.splits[split]]

    def images(self, split: str, size: int) -> np.ndarray:
        idx = self.splits[split]
        if not idx:
            return np.zeros((0, 3, size, size))
        return np.stack([D.preprocess(self.samples[i].image, size) for i in idx])

    def masks(self, split: str, size: int) -> np.ndarray:
        idx = self.splits[split]
        if not idx:
            return np.zeros((0, 1, size, size))
        return np.stack([self.samples[i].mask for i in idx])

    def labels(self, split: str) -> np.ndarray:
        return np.array([self.samples[i].label for i in self.splits[split]], dtype=np.int64)


def seg_dataset(cfg: RunConfig) -> Dataset:
    sc = D.SynthConfig.pixel_labeled(seed=cfg.seed, size=cfg.size)
    samples = [D.generate(sc, i, "pixel") for i in range(cfg.seg_samples)]
    return Dataset(samples, D.make_splits(len(samples), cfg.seg_splits, cfg.seed))


def cls_dataset(cfg: RunConfig) -> Dataset:
    ic = D.SynthConfig.image_labeled(seed=cfg.seed, size=cfg.size)
    samples = [D.generate(ic, i, "image") for i in range(cfg.cls_samples)]
    return Dataset(samples, D.make_splits(len(samples), cfg.cls_splits, cfg.seed))


def write_manifest(ds: Dataset) -> str:
    split_of = {i: name for name, idx in ds.splits.items() for i in idx}
    rows = [(s.id, split_of[i], s.label) for i, s in enumerate(ds.samples)]
    return csv_text(("id", "split", "label"), rows)


def read_manifest(text: str) -> list[tuple[str, str, int]]:
    lines = text.splitlines()
    if not lines or lines[0] != "id,split,label":
        raise ManifestError(["<manifest header>"])
    out = []
    for line in lines[1:]:
        if line:
            sid, split, label = line.split(",")
            out.append((sid, split, int(label)))
    return out


def export_samples(ds: Dataset, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    for s in ds.samples:
        tensors = {"image": s.image}
        if s.mask is not None:
            tensors["mask"] = s.mask
        save_checkpoint(Checkpoint("sample", tensors, {"label": float(s.label)}), out_dir / f"{s.id}.xfus")
    atomic_write_text(out_dir / MANIFEST_FILE, write_manifest(ds))


def import_sample(path: str | Path) -> D.Sample:
    ck = load_checkpoint(path, expect_kind="sample")
    return D.Sample(ck.tensors["image"], ck.tensors.get("mask"), int(ck.meta["label"]), Path(path).stem)


# -------------------------------------------------------------- segmentation


@dataclass
class SegResult:
    checkpoint: Checkpoint
    log_rows: list[tuple]
    best_epoch: int
    val_dice: float


SEG_LOG_HEADER = ("epoch", "lr", "train_loss", "val_dice", "val_iou")


def pooled_overlap(params, images: np.ndarray, masks: np.ndarray, cfg: RunConfig) -> tuple[float, float]:
    """Dice and IoU over all pixels of a split at the 0.5 probability cut."""
    if len(images) == 0:
        return float("nan"), float("nan")
    probs = fan_out(lambda s: generate_lesion_map(params, images[s], cfg), len(images))
    pred = probs >= 0.5
    return dice(pred, masks), iou(pred, masks)


def train_seg(cfg: RunConfig, out_dir: str | Path | None = None, ds: Dataset | None = None) -> SegResult:
    """Train the segmenter; keep the weights of the best validation-Dice epoch."""
    ds = ds or seg_dataset(cfg)
    train_idx = ds.splits["train"]
    val_x, val_m = ds.images("val", cfg.size), ds.masks("val", cfg.size)
    params = init_seg_params(cfg)
    state = SgdState.for_params(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    best = params_to_arrays(params)
    best_epoch, best_dice = -1, -math.inf
    rows = []
    for epoch in range(cfg.seg_epochs):
        state.lr = cfg.lr_at(epoch, cfg.seg_epochs)
        order = stream(cfg.seed, "seg-order", epoch).permutation(len(train_idx))
        losses = []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [ds.samples[train_idx[j]] for j in order[start : start + cfg.batch_size]]
            if cfg.augment:
                rng = stream(cfg.seed, "seg-augment", epoch, step)
                batch = [D.augment(rng, s) for s in batch]
            imgs = np.stack([D.preprocess(s.image, cfg.size) for s in batch])
            masks = np.stack([s.mask for s in batch])
            loss = seg_train_step(params, state, imgs, masks, cfg, stream(cfg.seed, "seg-dropout", epoch, step))
            _check_finite(loss, "train-seg", epoch, step)
            losses.append(loss)
        vd, vi = pooled_overlap(params, val_x, val_m, cfg)
        rows.append((epoch, state.lr, float(np.mean(losses)) if losses else float("nan"), vd, vi))
        log.info("seg epoch %d lr %.4g loss %.4f val dice %.4f", epoch, state.lr, rows[-1][2], vd)
        score = vd if math.isfinite(vd) else -float(np.mean(losses))
        if score > best_dice:
            best, best_epoch, best_dice = params_to_arrays(params), epoch, score
    meta = {"epoch": float(best_epoch), "seed": float(cfg.seed), "val_dice": float(best_dice), **_hash_meta(cfg)}
    ckpt = Checkpoint("segmentation", best, meta)
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(ckpt, out_dir / SEG_FILE)
        atomic_write_text(out_dir / "seg_log.csv", csv_text(SEG_LOG_HEADER, rows))
    return SegResult(ckpt, rows, best_epoch, best_dice)


def evaluate_seg(cfg: RunConfig, seg_ckpt: Checkpoint, split: str = "test", ds: Dataset | None = None):
    """Held-out pooled (Dice, IoU) of a segmentation checkpoint."""
    ds = ds or seg_dataset(cfg)
    return pooled_overlap(_params(seg_ckpt), ds.images(split, cfg.size), ds.masks(split, cfg.size), cfg)


# ------------------------------------------------------------- lesion maps


def gen_maps(cfg: RunConfig, seg_ckpt: Checkpoint, out_dir: str | Path, ds: Dataset | None = None) -> Path:
    """One ``<id>.xfus`` lesion map per image-labeled sample plus a manifest."""
    if seg_ckpt.kind != "segmentation":
        raise KindError(f"gen-maps needs a segmentation checkpoint, got {seg_ckpt.kind}")
    ds = ds or cls_dataset(cfg)
    params = _params(seg_ckpt)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(ds.samples)
    if n:
        imgs = np.stack([D.preprocess(s.image, cfg.size) for s in ds.samples])
        maps = fan_out(lambda s: generate_lesion_map(params, imgs[s], cfg), n)
        for s, m in zip(ds.samples, maps):
            save_checkpoint(Checkpoint("lesion-map", {"map": m}, {"label": float(s.label)}), out_dir / f"{s.id}.xfus")
    atomic_write_text(out_dir / MANIFEST_FILE, write_manifest(ds))
    return out_dir


def load_maps(map_dir: str | Path, ids: Sequence[str], size: int) -> np.ndarray:
    map_dir = Path(map_dir)
    missing = [sid for sid in ids if not (map_dir / f"{sid}.xfus").is_file()]
    if missing:
        raise ManifestError(missing)
    if not ids:
        return np.zeros((0, 1, size, size))
    return np.stack([load_checkpoint(map_dir / f"{sid}.xfus", "lesion-map").tensors["map"] for sid in ids])


# ------------------------------------------------------------ classification


@dataclass
class ClsResult:
    checkpoint: Checkpoint
    log_rows: list[tuple]
    best_epoch: int
    threshold: float | None


CLS_LOG_HEADER = ("epoch", "lr", "train_loss", "val_auc")


def _roc_or_none(scores, labels):
    labels = np.asarray(labels)
    if len(labels) == 0 or labels.min() == labels.max():
        return None
    return roc_curve(scores, labels)


def train_cls(
    cfg: RunConfig,
    map_dir: str | Path | None,
    seg_ckpt: Checkpoint | None = None,
    out_dir: str | Path | None = None,
    ds: Dataset | None = None,
) -> ClsResult:
    """Train one ablation cell; keep the best validation-AUC epoch and its ROC threshold."""
    variant = ablation_variant(cfg)
    if variant.transfer and seg_ckpt is None:
        raise TransferError(["transfer is on but no segmentation checkpoint was given"])
    if seg_ckpt is not None and seg_ckpt.kind != "segmentation":
        raise KindError(f"transfer source must be a segmentation checkpoint, got {seg_ckpt.kind}")
    ds = ds or cls_dataset(cfg)
    seg_params = _params(seg_ckpt) if variant.transfer else None
    params, manifest = build_cls_params(cfg, variant, seg_params)
    trainable = trainable_params(params, manifest, cfg.freeze_encoder)
    state = SgdState.for_params(trainable, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    train_idx = ds.splits["train"]
    maps = {}
    if variant.fusion:
        if map_dir is None:
            raise ManifestError(ds.ids("train") + ds.ids("val"))
        for split in ("train", "val"):
            maps[split] = load_maps(map_dir, ds.ids(split), cfg.size)
    val_x, val_y = ds.images("val", cfg.size), ds.labels("val")
    val_m = maps.get("val")

    best = params_to_arrays(params)
    best_epoch, best_auc, best_thr = -1, -math.inf, None
    rows = []
    for epoch in range(cfg.cls_epochs):
        state.lr = cfg.lr_at(epoch, cfg.cls_epochs)
        order = stream(cfg.seed, "cls-order", epoch).permutation(len(train_idx))
        losses = []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            pos = order[start : start + cfg.batch_size]
            batch = [ds.samples[train_idx[j]] for j in pos]
            bmaps = [maps["train"][j] for j in pos] if variant.fusion else None
            if cfg.augment:
                rng = stream(cfg.seed, "cls-augment", epoch, step)
                out_s, out_m = [], []
                for k, s in enumerate(batch):
                    a = D.draw_augment(rng, cfg.size)
                    if bmaps is None:
                        out_s.append(D.augment(rng, s, params=a))
                    else:
                        s2, (m2,) = D.augment(rng, s, [bmaps[k]], params=a)
                        out_s.append(s2)
                        out_m.append(m2)
                batch, bmaps = out_s, (out_m if bmaps is not None else None)
            imgs = np.stack([D.preprocess(s.image, cfg.size) for s in batch])
            labels = np.array([s.label for s in batch])
            m = np.stack(bmaps) if bmaps is not None else None
            loss = cls_train_step(
                params, state, imgs, m, labels, cfg, stream(cfg.seed, "cls-dropout", epoch, step), trainable
            )
            _check_finite(loss, "train-cls", epoch, step)
            losses.append(loss)
        probs = predict(params, val_x, val_m, cfg)
        curve = _roc_or_none(probs, val_y)
        v_auc = auc(curve) if curve is not None else float("nan")
        rows.append((epoch, state.lr, float(np.mean(losses)) if losses else float("nan"), v_auc))
        log.info("cls epoch %d lr %.4g loss %.4f val auc %.4f", epoch, state.lr, rows[-1][2], v_auc)
        score = v_auc if math.isfinite(v_auc) else -float(np.mean(losses))
        if score > best_auc:
            best, best_epoch, best_auc = params_to_arrays(params), epoch, score
            best_thr = float(curve.thresholds[optimal_index(curve)]) if curve is not None else None
    if cfg.cls_epochs == 0:
        curve = _roc_or_none(predict(params, val_x, val_m, cfg), val_y)
        best_thr = float(curve.thresholds[optimal_index(curve)]) if curve is not None else None

    meta = {
        "epoch": float(best_epoch),
        "seed": float(cfg.seed),
        "fusion": float(variant.fusion),
        "transfer": float(variant.transfer),
        **_hash_meta(cfg),
    }
    if best_thr is not None:
        meta["threshold"] = best_thr
    ckpt = Checkpoint("classification", best, meta)
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(ckpt, out_dir / CLS_FILE)
        atomic_write_text(out_dir / "cls_log.csv", csv_text(CLS_LOG_HEADER, rows))
        atomic_write_text(
            out_dir / "transfer_manifest.csv",
            csv_text(("name", "origin"), [(n, "copied") for n in manifest.copied] + [(n, "fresh") for n in manifest.fresh]),
        )
    return ClsResult(ckpt, rows, best_epoch, best_thr)


def predict(params, images: np.ndarray, maps: np.ndarray | None, cfg: RunConfig) -> np.ndarray:
    if len(images) == 0:
        return np.zeros(0)
    return fan_out(lambda s: cls_predict(params, images[s], None if maps is None else maps[s], cfg), len(images))


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    acc: float
    auc: float
    tpr: float | None
    tnr: float | None
    dice: float
    iou: float
    threshold: float
    threshold_fallback: bool
    n: int
    config_hash: int | None

    HEADER = ("acc", "auc", "tpr", "tnr", "dice", "iou", "threshold", "threshold_fallback", "n", "config_hash")

    def row(self) -> tuple:
        h = None if self.config_hash is None else f"{self.config_hash:016x}"
        return (self.acc, self.auc, self.tpr, self.tnr, self.dice, self.iou, self.threshold,
                int(self.threshold_fallback), self.n, h)  # fmt: skip

    def to_csv(self) -> str:
        return csv_text(self.HEADER, [self.row()])


def evaluate(
    cfg: RunConfig,
    cls_ckpt: Checkpoint,
    map_dir: str | Path | None,
    out_dir: str | Path | None = None,
    split: str = "test",
    ds: Dataset | None = None,
    svg: bool = True,
) -> EvalReport:
    """All metrics at the checkpoint's stored operating threshold."""
    if cls_ckpt.kind != "classification":
        raise KindError(f"eval needs a classification checkpoint, got {cls_ckpt.kind}")
    ds = ds or cls_dataset(cfg)
    params = _params(cls_ckpt)
    fusion = "fuse.attn.w_q" in params
    x, y = ds.images(split, cfg.size), ds.labels(split)
    maps = None
    if fusion or map_dir is not None:
        if map_dir is None:
            raise ManifestError(ds.ids(split))
        maps = load_maps(map_dir, ds.ids(split), cfg.size)
    probs = predict(params, x, maps if fusion else None, cfg)

    fallback = "threshold" not in cls_ckpt.meta
    if fallback:
        log.warning("checkpoint has no operating threshold; falling back to %.1f", FALLBACK_THRESHOLD)
    thr = FALLBACK_THRESHOLD if fallback else cls_ckpt.meta["threshold"]
    cm = confusion(probs, y, thr)
    rates = tpr_tnr_acc(cm)
    curve = _roc_or_none(probs, y)
    if maps is not None and len(maps):
        d, j = dice(maps >= 0.5, ds.masks(split, cfg.size)), iou(maps >= 0.5, ds.masks(split, cfg.size))
    else:
        d = j = float("nan")
    report = EvalReport(
        acc=rates.acc,
        auc=auc(curve) if curve is not None else float("nan"),
        tpr=rates.tpr,
        tnr=rates.tnr,
        dice=d,
        iou=j,
        threshold=float(thr),
        threshold_fallback=fallback,
        n=len(y),
        config_hash=config_hash_of(cls_ckpt),
    )
    if out_dir is not None:
        write_eval_outputs(out_dir, report, curve, cm, svg)
    return report


def write_eval_outputs(out_dir, report: EvalReport, curve, cm: ConfusionMatrix, svg: bool = True) -> None:
    out_dir = Path(out_dir)
    atomic_write_text(out_dir / "report.csv", report.to_csv())
    atomic_write_text(out_dir / "confusion.csv", confusion_to_csv(cm, report.threshold))
    if curve is not None:
        atomic_write_text(out_dir / "roc.csv", roc_to_csv(curve))
    if svg:
        if curve is not None:
            atomic_write_text(out_dir / "roc.svg", roc_svg(curve))
        atomic_write_text(out_dir / "confusion.svg", confusion_svg(cm, report.threshold))


# ------------------------------------------------------------------ ablation

ABLATION_SEED_HEADER = ("seed", "fusion", "transfer", "acc", "auc", "tpr", "tnr", "threshold")
ABLATION_HEADER = ("fusion", "transfer", "acc", "auc", "auc_std", "seeds")


def cell_dir(fusion: bool, transfer: bool) -> str:
    return f"fusion-{'on' if fusion else 'off'}_transfer-{'on' if transfer else 'off'}"


def ablate(cfg: RunConfig, out_dir: str | Path | None = None) -> tuple[list[tuple], list[tuple]]:
    """Run the selected fusion x transfer cells for ``cfg.seeds`` consecutive seeds.

    Per seed the segmenter and the lesion maps are built once and shared by
    every cell, and all cells see the same data, batch order and
    augmentation draws. Returns (per-seed rows, aggregated rows).
    """
    cells = parse_cells(cfg.cells)
    if out_dir is None:
        with tempfile.TemporaryDirectory(prefix="xfuse-ablate-") as tmp:
            return _ablate(cfg, cells, Path(tmp), keep=False)
    return _ablate(cfg, cells, Path(out_dir), keep=True)


def _ablate(cfg: RunConfig, cells, out: Path, keep: bool) -> tuple[list[tuple], list[tuple]]:
    per_seed: list[tuple] = []
    for seed in range(cfg.seed, cfg.seed + cfg.seeds):
        scfg = cfg.replace(seed=seed)
        sdir = out / f"seed-{seed}"
        ds = cls_dataset(scfg)
        seg = None
        if any(f or t for f, t in cells):
            seg = train_seg(scfg, sdir / "seg" if keep else None).checkpoint
        map_dir = None
        if any(f for f, _ in cells):
            map_dir = gen_maps(scfg, seg, sdir / "maps", ds)
        for fusion, transfer in cells:
            ccfg = scfg.replace(fusion=fusion, transfer=transfer)
            cdir = sdir / cell_dir(fusion, transfer) if keep else None
            res = train_cls(ccfg, map_dir, seg if transfer else None, cdir, ds)
            rep = evaluate(ccfg, res.checkpoint, map_dir if fusion else None, cdir, "test", ds)
            per_seed.append((seed, fusion, transfer, rep.acc, rep.auc, rep.tpr, rep.tnr, rep.threshold))
            log.info("seed %d %s acc %.4f auc %.4f", seed, Variant(fusion, transfer).label, rep.acc, rep.auc)
    agg = aggregate(per_seed, cells)
    if keep:
        atomic_write_text(out / "ablation_seeds.csv", csv_text(ABLATION_SEED_HEADER, per_seed))
        atomic_write_text(out / "ablation.csv", csv_text(ABLATION_HEADER, agg))
    return per_seed, agg


def aggregate(per_seed: Sequence[tuple], cells) -> list[tuple]:
    rows = []
    for fusion, transfer in cells:
        mine = [r for r in per_seed if r[1] == fusion and r[2] == transfer]
        accs = np.array([r[3] for r in mine])
        aucs = np.array([r[4] for r in mine])
        rows.append((fusion, transfer, float(accs.mean()), float(aucs.mean()), float(aucs.std()), len(mine)))
    return rows

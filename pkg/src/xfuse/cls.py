"""Dual-stream referable-DR classifier with cross-attention fusion.

The image stream and the lesion-map stream each run a windowed-attention
encoder. At the final stage, image tokens query the map tokens:

    fused = CrossAttn(LN(x), LN(y))      (Q from x; K, V from y)

There is no residual around the block, so every fused token is a mixture of
map-stream values selected by image-stream queries. This is followed by LN, global average pooling over tokens, dropout and a single
fully connected logit. With fusion disabled the map stream and the fusion
block are absent and ``fused = x``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import ops
from .attention import AttentionParams, cross_attention
from .config import RunConfig
from .errors import ShapeError, TransferError
from .optim import SgdState
from .seg import Params, check_binary, check_input, encode, init_encoder, make_init, train_step
from .tensor import Tensor, no_grad

SEG_ENCODER_PREFIX = "enc."
IMAGE_PREFIX = "img."
MAP_PREFIX = "map."


@dataclass(frozen=True)
class Variant:
    """One cell of the fusion x transfer ablation grid."""

    fusion: bool = True
    transfer: bool = True

    @property
    def label(self) -> str:
        return f"fusion={'on' if self.fusion else 'off'},transfer={'on' if self.transfer else 'off'}"


@dataclass
class TransferManifest:
    copied: list[str]
    fresh: list[str]


def final_width(cfg: RunConfig) -> int:
    return cfg.embed_dim * 2 ** (len(cfg.depths) - 1)


def ablation_variant(cfg: RunConfig) -> Variant:
    return Variant(fusion=cfg.fusion, transfer=cfg.transfer)


def init_cls_params(cfg: RunConfig, variant: Variant, seed: int | None = None) -> Params:
    """Fresh (random) parameters for every tensor of the given variant."""
    seed = cfg.seed if seed is None else seed
    init = make_init(seed)
    table: Params = {}
    init_encoder(table, IMAGE_PREFIX, cfg, 3, seed)
    d = final_width(cfg)
    if variant.fusion:
        init_encoder(table, MAP_PREFIX, cfg, 1, seed)
        for ln in ("fuse.ln_x.", "fuse.ln_y."):
            table[ln + "g"] = Tensor(np.ones(d))
            table[ln + "b"] = Tensor(np.zeros(d))
        for w in ("w_q", "w_k", "w_v", "w_out"):
            table["fuse.attn." + w] = init("fuse.attn." + w, (d, d), d)
    table["head.ln.g"] = Tensor(np.ones(d))
    table["head.ln.b"] = Tensor(np.zeros(d))
    table["head.w"] = init("head.w", (d, 1), d)
    table["head.b"] = Tensor(np.zeros(1))
    return table


def init_from_seg_encoder(
    seg_params: Mapping[str, Tensor], cfg: RunConfig, variant: Variant, seed: int | None = None
) -> tuple[Params, TransferManifest]:
    """Classifier parameters whose image stream is a copy of the segmentation encoder."""
    table = init_cls_params(cfg, variant, seed)
    copied, bad = [], []
    for name in table:
        if not name.startswith(IMAGE_PREFIX):
            continue
        src = SEG_ENCODER_PREFIX + name[len(IMAGE_PREFIX) :]
        if src not in seg_params:
            bad.append(f"{name} (no {src} in source)")
        elif seg_params[src].shape != table[name].shape:
            bad.append(f"{name} {table[name].shape} vs {src} {seg_params[src].shape}")
        else:
            copied.append(name)
    if bad:
        raise TransferError(bad)
    for name in copied:
        table[name] = Tensor(seg_params[SEG_ENCODER_PREFIX + name[len(IMAGE_PREFIX) :]].data.copy())
    fresh = [n for n in table if n not in set(copied)]
    return table, TransferManifest(copied=copied, fresh=fresh)


def build_cls_params(
    cfg: RunConfig, variant: Variant, seg_params: Mapping[str, Tensor] | None = None, seed: int | None = None
) -> tuple[Params, TransferManifest]:
    if variant.transfer:
        if seg_params is None:
            raise TransferError(["transfer enabled but no segmentation parameters supplied"])
        return init_from_seg_encoder(seg_params, cfg, variant, seed)
    table = init_cls_params(cfg, variant, seed)
    return table, TransferManifest(copied=[], fresh=list(table))


def center_map(lm: Tensor) -> Tensor:
    """Map probabilities in [0, 1] to [-1, 1].

    An all-zero background would embed to constant tokens, and LayerNorm of a
    constant vector back-propagates through 1/sqrt(eps), compounding per layer.
    """
    return ops.sub(ops.mul(lm, 2.0), 1.0)


def has_fusion(params: Mapping[str, Tensor]) -> bool:
    return "fuse.attn.w_q" in params


def cls_forward(
    params: Mapping[str, Tensor],
    img,
    lesion_map,
    cfg: RunConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Referable-DR logits: [3,S,S] -> scalar, or [N,3,S,S] -> [N]."""
    img = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    check_input(img.shape, cfg, 3)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[None]
    tokens, _, _ = encode(params, IMAGE_PREFIX, Tensor(img), cfg, rng, training)[-1]
    if has_fusion(params):
        if lesion_map is None:
            raise ShapeError("fusion model needs a lesion map")
        lm = lesion_map if isinstance(lesion_map, Tensor) else Tensor(np.asarray(lesion_map, dtype=np.float64))
        if lm.ndim == 3:
            lm = ops.reshape(lm, (1,) + lm.shape)
        if lm.shape != (img.shape[0], 1) + img.shape[2:]:
            raise ShapeError(f"lesion map {lm.shape} does not match image {img.shape}")
        y, _, _ = encode(params, MAP_PREFIX, center_map(lm), cfg, rng, training)[-1]
        attn = AttentionParams.from_table(params, "fuse.attn.", cfg.heads[-1])
        xq = ops.layer_norm(tokens, params["fuse.ln_x.g"], params["fuse.ln_x.b"])
        ykv = ops.layer_norm(y, params["fuse.ln_y.g"], params["fuse.ln_y.b"])
        tokens = cross_attention(xq, ykv, attn)
    tokens = ops.layer_norm(tokens, params["head.ln.g"], params["head.ln.b"])
    pooled = ops.mean(tokens, axis=1)
    pooled = ops.dropout(pooled, cfg.head_dropout, rng, training)
    logits = ops.linear(pooled, params["head.w"], params["head.b"])  # N, 1
    logits = ops.reshape(logits, (logits.shape[0],))
    return ops.reshape(logits, ()) if squeeze else logits


def cls_loss(params, imgs, maps, labels, cfg: RunConfig, rng=None, training=False) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    check_binary(labels, "labels")
    logits = cls_forward(params, imgs, maps, cfg, rng, training)
    return ops.bce_with_logits(logits, labels)


def cls_train_step(
    params: Mapping[str, Tensor],
    state: SgdState,
    imgs: np.ndarray,
    maps: np.ndarray | None,
    labels,
    cfg: RunConfig,
    rng: np.random.Generator | None = None,
    trainable: Mapping[str, Tensor] | None = None,
) -> float:
    """One SGD step; ``trainable`` (default: all params) is the optimised subset."""
    trainable = params if trainable is None else trainable
    for name, p in params.items():
        p.requires_grad = name in trainable
    return train_step(cls_loss(params, imgs, maps, labels, cfg, rng, training=True), trainable, state)


def cls_predict(params: Mapping[str, Tensor], imgs, maps, cfg: RunConfig, batch: int = 64) -> np.ndarray:
    """Eval-mode probabilities for a stack of images."""
    out = []
    with no_grad():
        for i in range(0, len(imgs), batch):
            m = None if maps is None else maps[i : i + batch]
            out.append(cls_forward(params, imgs[i : i + batch], m, cfg).data.reshape(-1))
    return ops.sigmoid_np(np.concatenate(out)) if out else np.zeros(0)


def trainable_params(params: Params, manifest: TransferManifest, freeze_encoder: bool) -> Params:
    if not freeze_encoder:
        return params
    frozen = set(manifest.copied)
    return {n: p for n, p in params.items() if n not in frozen}

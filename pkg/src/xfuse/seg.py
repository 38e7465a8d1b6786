"""Windowed-attention U-Net lesion segmenter and lesion-map generation.

Encoder: patch embedding, then stages of Swin blocks separated by patch
merging (width doubles, grid halves). Decoder: repeated nearest 2x
upsampling, concatenation of the skip feature at that resolution (an
encoder stage output, or the input image average-pooled to that size when
no encoder stage lives there), and two 3x3 conv + ReLU. A final 1x1 conv
emits one logit per pixel.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from . import ops
from .attention import WindowLayout, gather_2x2, init_swin_block, patch_embed, swin_block
from .config import RunConfig
from .errors import ShapeError, ValidationError
from .optim import SgdState, grads_of, sgd_step
from .rng import stream
from .tensor import Tensor, no_grad

Params = dict[str, Tensor]

# logit of a ~5% lesion prior; keeps early training off the all-background plateau
OUT_BIAS_INIT = -3.0


def make_init(seed: int):
    """Name-keyed initialiser: N(0, 1/fan_in) drawn from the stream (seed, "init", name)."""

    def init(name: str, shape: Sequence[int], fan_in: int, gain: float = 1.0) -> Tensor:
        rng = stream(seed, "init", name)
        return Tensor(rng.normal(0.0, gain / math.sqrt(fan_in), size=tuple(shape)))

    return init


# ------------------------------------------------------------------ encoder


def init_encoder(table: Params, prefix: str, cfg: RunConfig, in_channels: int, seed: int) -> None:
    init = make_init(seed)
    d, p = cfg.embed_dim, cfg.patch
    table[prefix + "pe.w"] = init(prefix + "pe.w", (in_channels * p * p, d), in_channels * p * p)
    table[prefix + "pe.b"] = Tensor(np.zeros(d))
    if cfg.patch_norm:
        table[prefix + "pe.ln.g"] = Tensor(np.ones(d))
        table[prefix + "pe.ln.b"] = Tensor(np.zeros(d))
    for s, depth in enumerate(cfg.depths):
        width = d * 2**s
        if s > 0:
            prev = width // 2
            table[prefix + f"merge{s}.ln.g"] = Tensor(np.ones(4 * prev))
            table[prefix + f"merge{s}.ln.b"] = Tensor(np.zeros(4 * prev))
            table[prefix + f"merge{s}.w"] = init(prefix + f"merge{s}.w", (4 * prev, width), 4 * prev)
        for b in range(depth):
            init_swin_block(table, prefix + f"s{s}.b{b}.", width, cfg.mlp_ratio, init)


def encode(
    params: Mapping[str, Tensor],
    prefix: str,
    img,
    cfg: RunConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> list[tuple[Tensor, int, int]]:
    """Per-stage token maps ``(tokens [B, h*w, C], h, w)`` for a [B, C, H, W] batch."""
    tokens = patch_embed(img, cfg.patch, params[prefix + "pe.w"], params[prefix + "pe.b"])
    if prefix + "pe.ln.g" in params:
        tokens = ops.layer_norm(tokens, params[prefix + "pe.ln.g"], params[prefix + "pe.ln.b"])
    h = w = img.shape[-1] // cfg.patch
    feats = []
    for s, depth in enumerate(cfg.depths):
        if s > 0:
            pre = prefix + f"merge{s}."
            merged = ops.layer_norm(gather_2x2(tokens, h, w), params[pre + "ln.g"], params[pre + "ln.b"])
            tokens = ops.matmul(merged, params[pre + "w"])
            h, w = h // 2, w // 2
        for b in range(depth):
            layout = WindowLayout.fitted(h, w, cfg.window, shifted=b % 2 == 1)
            tokens = swin_block(
                tokens, layout, params, prefix + f"s{s}.b{b}.", cfg.heads[s], cfg.block_dropout, rng, training
            )
        feats.append((tokens, h, w))
    return feats



def tokens_to_image(tokens: Tensor, h: int, w: int) -> Tensor:
    """[B, h*w, C] -> [B, C, h, w]."""
    b, _, c = tokens.shape
    return ops.transpose(ops.reshape(tokens, (b, h, w, c)), (0, 3, 1, 2))


def _pool_image(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    b, c, h, w = img.shape
    return img.reshape(b, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def _decoder_plan(cfg: RunConfig, in_channels: int) -> list[tuple[int, int, int | None]]:
    """Per level: (resolution, skip channels, encoder stage index or None for image skip)."""
    grid0 = cfg.size // cfg.patch
    stage_res = {grid0 // 2**s: s for s in range(len(cfg.depths) - 1)}
    res = grid0 // 2 ** (len(cfg.depths) - 1)
    plan = []
    for _ in range(cfg.decoder_levels):
        res *= 2
        if res in stage_res:
            s = stage_res[res]
            plan.append((res, cfg.embed_dim * 2**s, s))
        else:
            plan.append((res, in_channels, None))
    return plan


def init_seg_params(cfg: RunConfig, seed: int | None = None, in_channels: int = 3, zero_out: bool = False) -> Params:
    seed = cfg.seed if seed is None else seed
    init = make_init(seed)
    table: Params = {}
    init_encoder(table, "enc.", cfg, in_channels, seed)
    ch = cfg.embed_dim * 2 ** (len(cfg.depths) - 1)
    for k, ((_, skip_ch, _), width) in enumerate(zip(_decoder_plan(cfg, in_channels), cfg.decoder_widths)):
        pre = f"dec.l{k}."
        table[pre + "c1.w"] = init(pre + "c1.w", (width, ch + skip_ch, 3, 3), (ch + skip_ch) * 9, math.sqrt(2))
        table[pre + "c1.b"] = Tensor(np.zeros(width))
        table[pre + "c2.w"] = init(pre + "c2.w", (width, width, 3, 3), width * 9, math.sqrt(2))
        table[pre + "c2.b"] = Tensor(np.zeros(width))
        ch = width
    if zero_out:
        table["dec.out.w"] = Tensor(np.zeros((1, ch, 1, 1)))
        table["dec.out.b"] = Tensor(np.zeros(1))
    else:
        table["dec.out.w"] = init("dec.out.w", (1, ch, 1, 1), ch)
        table["dec.out.b"] = Tensor(np.full(1, OUT_BIAS_INIT))
    return table


def check_input(img_shape: tuple[int, ...], cfg: RunConfig, channels: int) -> None:
    if len(img_shape) not in (3, 4) or img_shape[-3] != channels:
        raise ShapeError(f"expected [{channels},H,W] or [N,{channels},H,W] input, got {img_shape}")
    if img_shape[-2:] != (cfg.size, cfg.size):
        raise ShapeError(f"input spatial size {img_shape[-2:]} != configured {cfg.size}x{cfg.size}")


def seg_forward(
    params: Mapping[str, Tensor],
    img,
    cfg: RunConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Per-pixel lesion logits: [C,H,W] -> [1,H,W] or [N,C,H,W] -> [N,1,H,W]."""
    data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    check_input(data.shape, cfg, params["enc.pe.w"].shape[0] // cfg.patch**2)
    squeeze = data.ndim == 3
    if squeeze:
        data = data[None]
    x_img = img if isinstance(img, Tensor) and not squeeze else Tensor(data)
    feats = encode(params, "enc.", x_img, cfg, rng, training)
    tokens, h, w = feats[-1]
    x = tokens_to_image(tokens, h, w)
    for k, (res, _, stage) in enumerate(_decoder_plan(cfg, data.shape[1])):
        x = ops.upsample_nearest_2x(x)
        if stage is None:
            skip = Tensor(_pool_image(data, cfg.size // res))
        else:
            skip = tokens_to_image(*feats[stage])
        x = ops.concat([x, skip], axis=1)
        pre = f"dec.l{k}."
        x = ops.relu(ops.conv2d(x, params[pre + "c1.w"], params[pre + "c1.b"]))
        x = ops.relu(ops.conv2d(x, params[pre + "c2.w"], params[pre + "c2.b"]))
    logits = ops.conv2d(x, params["dec.out.w"], params["dec.out.b"], padding=0)
    return ops.reshape(logits, logits.shape[1:]) if squeeze else logits


def check_binary(arr: np.ndarray, what: str) -> None:
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ValidationError(f"{what} must be binary (0/1)")


def seg_loss(params, imgs: np.ndarray, masks: np.ndarray, cfg: RunConfig, rng=None, training=False) -> Tensor:
    check_binary(masks, "segmentation masks")
    logits = seg_forward(params, imgs, cfg, rng, training)
    if masks.shape != logits.shape:
        raise ShapeError(f"masks {masks.shape} do not match logits {logits.shape}")
    return ops.bce_with_logits(logits, masks)


def train_step(loss: Tensor, params: Mapping[str, Tensor], state: SgdState) -> float:
    """Backpropagate ``loss`` and apply one SGD step to ``params``."""
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    loss.backward()
    sgd_step(params, grads_of(params), state)
    value = loss.item()
    for p in params.values():
        p.grad = None
    return value


def seg_train_step(
    params: Mapping[str, Tensor],
    state: SgdState,
    imgs: np.ndarray,
    masks: np.ndarray,
    cfg: RunConfig,
    rng: np.random.Generator | None = None,
) -> float:
    """One SGD step on a batch of (image, mask); returns the pre-step loss."""
    for p in params.values():
        p.requires_grad = True
    return train_step(seg_loss(params, imgs, masks, cfg, rng, training=True), params, state)


def generate_lesion_map(params: Mapping[str, Tensor], img, cfg: RunConfig) -> np.ndarray:
    """Sigmoid of the eval-mode logits; same leading shape as the logits."""
    with no_grad():
        logits = seg_forward(params, img, cfg, training=False)
    return ops.sigmoid_np(logits.data)

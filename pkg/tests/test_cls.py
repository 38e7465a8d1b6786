import math

import numpy as np
import pytest

from xfuse import data as D
from xfuse.cls import (
    Variant,
    ablation_variant,
    build_cls_params,
    cls_forward,
    cls_loss,
    cls_predict,
    cls_train_step,
    init_cls_params,
    init_from_seg_encoder,
    trainable_params,
)
from xfuse.errors import ShapeError, TransferError, ValidationError
from xfuse.gradcheck import check_gradients
from xfuse.optim import SgdState
from xfuse.seg import init_seg_params
from xfuse.tensor import Tensor

FUSED = Variant(fusion=True, transfer=False)
PLAIN = Variant(fusion=False, transfer=False)


def _batch(cfg, n=8, seed=0):
    sc = D.SynthConfig.image_labeled(size=cfg.size, seed=seed)
    samples = [D.generate(sc, i, "image") for i in range(n)]
    imgs = np.stack([D.preprocess(s.image, cfg.size) for s in samples])
    maps = np.stack([s.mask for s in samples]) * 0.9 + 0.05
    labels = np.array([s.label for s in samples], dtype=float)
    return imgs, maps, labels


def test_zero_head_gives_bias(tiny_cfg, rng):
    for variant in (FUSED, PLAIN):
        params = init_cls_params(tiny_cfg, variant)
        params["head.w"] = Tensor(np.zeros_like(params["head.w"].data))
        params["head.b"] = Tensor([0.37])
        imgs, maps, _ = _batch(tiny_cfg, n=3)
        assert np.array_equal(cls_forward(params, imgs, maps, tiny_cfg).data, np.full(3, 0.37))


def test_scalar_and_batched_forward(tiny_cfg):
    params = init_cls_params(tiny_cfg, FUSED)
    imgs, maps, _ = _batch(tiny_cfg, n=2)
    single = cls_forward(params, imgs[1], maps[1], tiny_cfg)
    assert single.shape == ()
    assert single.item() == pytest.approx(cls_forward(params, imgs, maps, tiny_cfg).data[1], abs=1e-12)


def test_constant_map_keys_are_indistinguishable(tiny_cfg):
    """All map tokens coincide, so every image query reads the same value."""
    params = init_cls_params(tiny_cfg, FUSED, seed=3)
    imgs, _, _ = _batch(tiny_cfg, n=4)
    const = np.full((4, 1, 32, 32), 0.3)
    logits = cls_forward(params, imgs, const, tiny_cfg).data
    assert np.max(np.abs(logits - logits[0])) < 1e-12


def test_fusion_sensitivity(tiny_cfg, rng):
    imgs, maps, _ = _batch(tiny_cfg, n=2)
    other = rng.random(maps.shape)
    fused = init_cls_params(tiny_cfg, FUSED)
    assert not np.allclose(cls_forward(fused, imgs, maps, tiny_cfg).data, cls_forward(fused, imgs, other, tiny_cfg).data)
    plain = init_cls_params(tiny_cfg, PLAIN)
    a = cls_forward(plain, imgs, maps, tiny_cfg).data
    assert a.tobytes() == cls_forward(plain, imgs, other, tiny_cfg).data.tobytes()
    assert a.tobytes() == cls_forward(plain, imgs, None, tiny_cfg).data.tobytes()


def test_map_gradient_nonzero(tiny_cfg):
    params = init_cls_params(tiny_cfg, FUSED)
    imgs, maps, labels = _batch(tiny_cfg, n=2)
    m = Tensor(maps, requires_grad=True)
    cls_loss(params, imgs, m, labels, tiny_cfg).backward()
    assert np.abs(m.grad).max() > 0


def test_query_weight_gradient(tiny_cfg):
    params = init_cls_params(tiny_cfg, FUSED, seed=2)
    imgs, maps, labels = _batch(tiny_cfg, n=2)
    err = check_gradients(lambda: cls_loss(params, imgs, maps, labels, tiny_cfg), [params["fuse.attn.w_q"]])
    assert err < 1e-4


def test_variant_structure(tiny_cfg):
    plain = init_cls_params(tiny_cfg, PLAIN)
    assert not any(n.startswith(("fuse.", "map.")) for n in plain)
    fused = init_cls_params(tiny_cfg, FUSED)
    assert {"fuse.attn.w_q", "fuse.attn.w_k", "fuse.attn.w_v", "fuse.attn.w_out"} <= set(fused)
    assert set(plain) < set(fused)
    assert ablation_variant(tiny_cfg.replace(fusion=False, transfer=True)) == Variant(False, True)


def test_all_four_cells_constructible(tiny_cfg):
    seg = init_seg_params(tiny_cfg)
    imgs, maps, _ = _batch(tiny_cfg, n=1)
    for fusion in (False, True):
        for transfer in (False, True):
            params, _ = build_cls_params(tiny_cfg, Variant(fusion, transfer), seg)
            assert np.isfinite(cls_forward(params, imgs, maps, tiny_cfg).data).all()


def test_transfer_copies_encoder(tiny_cfg):
    seg = init_seg_params(tiny_cfg, seed=11)
    params, man = init_from_seg_encoder(seg, tiny_cfg, Variant(True, True))
    assert man.copied and all(n.startswith("img.") for n in man.copied)
    for name in man.copied:
        assert params[name].data.tobytes() == seg["enc." + name[4:]].data.tobytes()
        assert params[name].data is not seg["enc." + name[4:]].data
    assert set(man.copied).isdisjoint(man.fresh)
    assert set(man.copied) | set(man.fresh) == set(params)
    img_names = {n for n in params if n.startswith("img.")}
    assert set(man.copied) == img_names


def test_transfer_shape_mismatch_lists_names(tiny_cfg):
    seg = init_seg_params(tiny_cfg.replace(embed_dim=12, heads=(3, 3)))
    with pytest.raises(TransferError, match="img.pe.w"):
        init_from_seg_encoder(seg, tiny_cfg, FUSED)
    with pytest.raises(TransferError):
        build_cls_params(tiny_cfg, Variant(True, True), None)


def test_freeze_excludes_copied(tiny_cfg):
    seg = init_seg_params(tiny_cfg)
    params, man = init_from_seg_encoder(seg, tiny_cfg, FUSED)
    assert trainable_params(params, man, False) is params
    frozen = trainable_params(params, man, True)
    assert set(frozen) == set(man.fresh)


def test_zero_logits_loss_is_ln2(tiny_cfg):
    params = init_cls_params(tiny_cfg, FUSED)
    params["head.w"] = Tensor(np.zeros_like(params["head.w"].data))
    imgs, maps, labels = _batch(tiny_cfg, n=4)
    assert cls_loss(params, imgs, maps, labels, tiny_cfg).item() == pytest.approx(math.log(2), abs=1e-15)


def test_non_binary_labels(tiny_cfg):
    params = init_cls_params(tiny_cfg, PLAIN)
    imgs, _, _ = _batch(tiny_cfg, n=2)
    with pytest.raises(ValidationError):
        cls_loss(params, imgs, None, [0.0, 0.3], tiny_cfg)


def test_map_shape_mismatch(tiny_cfg):
    params = init_cls_params(tiny_cfg, FUSED)
    imgs, maps, _ = _batch(tiny_cfg, n=2)
    with pytest.raises(ShapeError):
        cls_forward(params, imgs, maps[:1], tiny_cfg)
    with pytest.raises(ShapeError):
        cls_forward(params, imgs, None, tiny_cfg)


def _overfit(cfg, steps):
    params = init_cls_params(cfg, FUSED)
    st = SgdState.for_params(params, lr=0.05, momentum=0.9, weight_decay=0.0)
    imgs, maps, _ = _batch(cfg)
    labels = np.array([0, 1, 0, 1, 1, 0, 0, 1], dtype=float)  # both classes regardless of the draw
    losses = []
    for step in range(steps):
        losses.append(cls_train_step(params, st, imgs, maps, labels, cfg, np.random.default_rng(step)))
    return losses


def test_overfit_fixed_batch(tiny_cfg):
    losses = _overfit(tiny_cfg, 300)
    assert min(losses) < 0.05


def test_training_is_deterministic(tiny_cfg):
    a, b = _overfit(tiny_cfg, 5), _overfit(tiny_cfg, 5)
    assert np.array(a).tobytes() == np.array(b).tobytes()


def test_predict_matches_forward(tiny_cfg):
    params = init_cls_params(tiny_cfg, FUSED)
    imgs, maps, _ = _batch(tiny_cfg, n=5)
    probs = cls_predict(params, imgs, maps, tiny_cfg, batch=2)
    logits = cls_forward(params, imgs, maps, tiny_cfg).data
    assert np.allclose(probs, 1 / (1 + np.exp(-logits)), atol=1e-15)
    assert cls_predict(params, imgs[:0], maps[:0], tiny_cfg).shape == (0,)

import numpy as np
import pytest

from xfuse import data as D
from xfuse.errors import ConfigError, ValidationError
from xfuse.metrics import dice
from xfuse.rng import stream


def test_no_lesions_gives_empty_mask_and_negative():
    s = D.synth_sample(stream(0, "t"), D.SynthConfig(), "x", k=0)
    assert s.mask.sum() == 0 and s.label == 0
    assert s.image.shape == (3, 64, 64) and s.mask.shape == (1, 64, 64)
    assert 0 <= s.image.min() and s.image.max() <= 1


def test_heavy_lesion_burden_is_positive():
    cfg = D.SynthConfig()
    s = D.synth_sample(stream(0, "t"), cfg, "x", k=25)
    disc = D.disc_mask(cfg.size, cfg.disc_radius)
    assert D.lesion_fraction(s.mask[0] > 0.5, disc) >= cfg.tau and s.label == 1


def test_label_follows_mask_rule():
    cfg = D.SynthConfig()
    disc = D.disc_mask(cfg.size, cfg.disc_radius)
    for i in range(200):
        s = D.generate(cfg, i)
        assert s.label == D.label_from_mask(s.mask[0], disc, cfg.tau)
        frac = D.lesion_fraction(s.mask[0] > 0.5, disc)
        # the generator keeps lesion burden out of the ambiguous band around tau
        assert not cfg.tau / (1 + cfg.label_margin) <= frac < cfg.tau * (1 + cfg.label_margin)


def test_default_positive_rate():
    cfg = D.SynthConfig()
    rate = np.mean([D.generate(cfg, i, "image").label for i in range(10_000)])
    assert abs(rate - 6873 / 35126) <= 0.02


def test_generator_is_pure_function_of_seed_and_id():
    cfg = D.SynthConfig(seed=9)
    a, b = D.generate(cfg, 17, "pixel"), D.generate(cfg, 17, "pixel")
    assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()
    assert a.id == "img-000017"
    assert D.generate(cfg, 18, "pixel").image.tobytes() != a.image.tobytes()
    assert D.generate(D.SynthConfig(seed=10), 17, "pixel").image.tobytes() != a.image.tobytes()


def test_pixel_preset_has_more_lesions():
    pix, img = D.SynthConfig.pixel_labeled(), D.SynthConfig.image_labeled()
    m_pix = np.mean([D.generate(pix, i).mask.sum() for i in range(100)])
    m_img = np.mean([D.generate(img, i).mask.sum() for i in range(100)])
    assert m_pix > m_img


@pytest.mark.parametrize(
    "kw", [dict(tau=0.0), dict(tau=1.0), dict(splits=(0.5, 0.5, 0.5)), dict(size=4), dict(label_margin=-1.0)]
)
def test_synth_config_invariants(kw):
    with pytest.raises(ConfigError):
        D.SynthConfig(**kw)


def test_sample_mask_geometry_checked():
    with pytest.raises(ValidationError):
        D.Sample(np.zeros((3, 8, 8)), np.zeros((1, 4, 4)), 0, "x")


# ---------------------------------------------------------------- preprocess


def test_preprocess_on_target_geometry_only_normalizes(rng):
    img = rng.random((3, 64, 64))
    assert np.array_equal(D.preprocess(img, 64), D.normalize(img))


def test_channel_means_normalize_to_zero():
    img = np.broadcast_to(D.IMAGENET_MEAN[:, None, None], (3, 80, 80))
    assert np.allclose(D.preprocess(img, 64), 0.0, atol=1e-15)


def test_bilinear_checkerboard_downsample():
    board = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
    assert np.allclose(D.resize_bilinear(board, 4, 4), 0.5, atol=1e-15)


def test_preprocess_geometry(rng):
    assert D.resize_target(64) == 74
    assert D.preprocess(rng.random((3, 100, 90)), 64).shape == (3, 64, 64)
    out = D.preprocess(rng.random((3, 64, 64)), 64)
    assert out.shape == (3, 64, 64)


@pytest.mark.parametrize("shape", [(3, 0, 5), (3, 8), (1, 8, 8)])
def test_preprocess_rejects_degenerate(shape):
    with pytest.raises(ValidationError):
        D.preprocess(np.zeros(shape), 8)


# ---------------------------------------------------------------- augmentation


def _sample(i=0):
    return D.generate(D.SynthConfig.pixel_labeled(), i)


def test_identity_augmentation_is_noop():
    s = _sample()
    out = D.augment(None, s, params=D.AugmentParams())
    assert D.AugmentParams().is_identity
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)


def test_half_turn_is_involution():
    s = _sample()
    a = D.AugmentParams(rot90=2)
    twice = D.augment(None, D.augment(None, s, params=a), params=a)
    assert twice.image.tobytes() == np.ascontiguousarray(s.image).tobytes()
    assert twice.mask.tobytes() == s.mask.tobytes()


def test_spatial_augmentation_keeps_image_and_mask_aligned():
    rng = stream(0, "aug-test")
    for i in range(50):
        s = _sample(i)
        a = D.draw_augment(rng, s.image.shape[-1])
        out, (m2,) = D.augment(rng, s, [s.mask.copy()], params=a)
        assert dice(out.mask > 0.5, m2 > 0.5) == 1.0
        # a lesion "image" channel carried through the same transform lands on the mask
        assert np.array_equal(D.apply_spatial(s.mask, a), out.mask)


def test_color_jitter_touches_image_only():
    s = _sample()
    a = D.AugmentParams(brightness=1.2, contrast=0.8)
    out = D.augment(None, s, params=a)
    assert np.array_equal(out.mask, s.mask) and not np.array_equal(out.image, s.image)
    assert out.image.min() >= 0 and out.image.max() <= 1


def test_draw_augment_ranges():
    rng = stream(1, "draws")
    for _ in range(200):
        a = D.draw_augment(rng, 64)
        assert a.rot90 in range(4)
        assert 0.8 <= a.brightness <= 1.2 and 0.8 <= a.contrast <= 1.2
        assert 0 <= a.crop[0] <= 64 - D.crop_size(64) and 0 <= a.crop[1] <= 64 - D.crop_size(64)


# ---------------------------------------------------------------- splits


def test_splits_examples():
    assert D.make_splits(10, (1.0, 0.0, 0.0)) == {"train": list(range(10)), "val": [], "test": []}
    assert D.make_splits(50, seed=3) == D.make_splits(50, seed=3)
    sizes = {k: len(v) for k, v in D.make_splits(1000).items()}
    assert sizes == {"train": 396, "val": 123, "test": 481}


def test_splits_disjoint_and_exhaustive():
    sp = D.make_splits(337, (0.6, 0.3, 0.1), seed=5)
    allidx = sp["train"] + sp["val"] + sp["test"]
    assert sorted(allidx) == list(range(337))


def test_empty_split_is_config_error():
    with pytest.raises(ConfigError):
        D.make_splits(3, (0.396, 0.123, 0.481))
    with pytest.raises(ConfigError):
        D.make_splits(10, (0.5, 0.6, -0.1))


def test_split_sizes_largest_remainder():
    assert D.split_sizes(10, (0.33, 0.33, 0.34)) == [3, 3, 4]
    assert sum(D.split_sizes(7, (0.5, 0.25, 0.25))) == 7

import math

import numpy as np
import pytest

from conftest import tiny_config
from xfuse import harness as H
from xfuse.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from xfuse.errors import ConfigError, DivergenceError, KindError, ManifestError, TransferError
from xfuse.metrics import auc, confusion_from_csv, roc_from_csv, tpr_tnr_acc
from xfuse.seg import init_seg_params


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny segmenter, its maps and a fusion+transfer classifier, shared by the tests below."""
    root = tmp_path_factory.mktemp("pipe")
    cfg = tiny_config()
    seg = H.train_seg(cfg, root / "seg")
    maps = H.gen_maps(cfg, seg.checkpoint, root / "maps")
    cls = H.train_cls(cfg, maps, seg.checkpoint, root / "cls")
    return cfg, root, seg, maps, cls


# ---------------------------------------------------------------- plumbing


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("XFUSE_THREADS", "3")
    assert H.thread_count() == 3
    for bad in ("zero", "0"):
        monkeypatch.setenv("XFUSE_THREADS", bad)
        with pytest.raises(ConfigError):
            H.thread_count()
    monkeypatch.delenv("XFUSE_THREADS")
    assert H.thread_count() >= 1


@pytest.mark.parametrize("threads", ["1", "4"])
def test_fan_out_is_order_preserving(monkeypatch, threads):
    monkeypatch.setenv("XFUSE_THREADS", threads)
    out = H.fan_out(lambda s: np.arange(s.start, s.stop) ** 2, 100, chunk=7)
    assert np.array_equal(out, np.arange(100) ** 2)


def test_csv_text():
    text = H.csv_text(("a", "b", "c", "d"), [(True, 0.1, None, 3)])
    assert text == "a,b,c,d\non,0.1,nan,3\n"


def test_divergence_is_reported():
    with pytest.raises(DivergenceError, match="epoch 2, step 5"):
        H._check_finite(float("nan"), "train-seg", 2, 5)


# ---------------------------------------------------------------- datasets


def test_manifest_round_trip(tiny_cfg):
    ds = H.cls_dataset(tiny_cfg)
    rows = H.read_manifest(H.write_manifest(ds))
    assert len(rows) == tiny_cfg.cls_samples
    assert {r[1] for r in rows} == {"train", "val", "test"}
    with pytest.raises(ManifestError):
        H.read_manifest("id,label\n")


def test_export_import_samples(tiny_cfg, tmp_path):
    ds = H.seg_dataset(tiny_cfg.replace(seg_samples=10))
    H.export_samples(ds, tmp_path)
    back = H.import_sample(tmp_path / f"{ds.samples[3].id}.xfus")
    assert back.image.tobytes() == ds.samples[3].image.tobytes()
    assert back.mask.tobytes() == ds.samples[3].mask.tobytes() and back.label == ds.samples[3].label


# ---------------------------------------------------------------- segmentation


def test_zero_epochs_keeps_initial_weights(tiny_cfg):
    res = H.train_seg(tiny_cfg.replace(seg_epochs=0))
    init = init_seg_params(tiny_cfg)
    assert res.log_rows == [] and res.best_epoch == -1
    for name, p in init.items():
        assert res.checkpoint.tensors[name].tobytes() == p.data.tobytes()


def test_seg_is_deterministic(pipeline, tmp_path):
    cfg, root, *_ = pipeline
    H.train_seg(cfg, tmp_path)
    assert (tmp_path / "seg.xfus").read_bytes() == (root / "seg" / "seg.xfus").read_bytes()
    assert (tmp_path / "seg_log.csv").read_bytes() == (root / "seg" / "seg_log.csv").read_bytes()


def test_seg_log_follows_schedule(tiny_cfg):
    cfg = tiny_cfg.replace(seg_epochs=4, seg_samples=16, lr=0.02)
    rows = H.train_seg(cfg).log_rows
    assert [r[0] for r in rows] == [0, 1, 2, 3]
    assert [r[1] for r in rows] == [cfg.lr_at(e, 4) for e in range(4)]
    assert rows[0][1] == 0.02 and rows[2][1] == pytest.approx(0.002) and rows[3][1] == pytest.approx(0.0002)


def test_seg_checkpoint_metadata(pipeline):
    cfg, _, seg, *_ = pipeline
    meta = seg.checkpoint.meta
    assert meta["seed"] == cfg.seed and meta["epoch"] == seg.best_epoch
    assert H.config_hash_of(seg.checkpoint) == cfg.hash64()


# ---------------------------------------------------------------- maps


def test_maps_cover_the_dataset(pipeline):
    cfg, _, _, maps, _ = pipeline
    ds = H.cls_dataset(cfg)
    files = sorted(p.stem for p in maps.glob("*.xfus"))
    assert files == sorted(s.id for s in ds.samples)
    assert (maps / "manifest.csv").read_text() == H.write_manifest(ds)
    m = load_checkpoint(maps / f"{ds.samples[0].id}.xfus", "lesion-map").tensors["map"]
    assert m.shape == (1, cfg.size, cfg.size) and 0 <= m.min() and m.max() <= 1


def test_gen_maps_rerun_is_identical(pipeline, tmp_path):
    cfg, _, seg, maps, _ = pipeline
    H.gen_maps(cfg, seg.checkpoint, tmp_path)
    for p in maps.iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_gen_maps_rejects_other_kinds(pipeline, tmp_path):
    cfg, *_, cls = pipeline
    with pytest.raises(KindError):
        H.gen_maps(cfg, cls.checkpoint, tmp_path)


def test_gen_maps_empty_split(pipeline, tmp_path):
    cfg, _, seg, *_ = pipeline
    H.gen_maps(cfg.replace(cls_samples=0), seg.checkpoint, tmp_path)
    assert (tmp_path / "manifest.csv").read_text() == "id,split,label\n"


def test_missing_maps_are_listed(pipeline, tmp_path):
    cfg, _, seg, maps, _ = pipeline
    ds = H.cls_dataset(cfg)
    gone = ds.ids("train")[0]
    for p in maps.iterdir():
        if p.stem != gone:
            (tmp_path / p.name).write_bytes(p.read_bytes())
    with pytest.raises(ManifestError, match=gone):
        H.train_cls(cfg, tmp_path, seg.checkpoint)


# ---------------------------------------------------------------- classification


def test_transfer_needs_segmentation_checkpoint(pipeline):
    cfg, _, _, maps, cls = pipeline
    with pytest.raises(TransferError):
        H.train_cls(cfg, maps, None)
    with pytest.raises(KindError):
        H.train_cls(cfg, maps, cls.checkpoint)


def test_transfer_initialises_image_stream_from_encoder(pipeline):
    cfg, _, seg, maps, _ = pipeline
    res = H.train_cls(cfg.replace(cls_epochs=0), maps, seg.checkpoint)
    copied = [n for n in res.checkpoint.tensors if n.startswith("img.")]
    assert copied
    for n in copied:
        assert res.checkpoint.tensors[n].tobytes() == seg.checkpoint.tensors["enc." + n[4:]].tobytes()


def test_baseline_has_no_fusion_weights(pipeline):
    cfg, *_ = pipeline
    res = H.train_cls(cfg.replace(fusion=False, transfer=False), None)
    assert not any(n.startswith(("fuse.", "map.")) for n in res.checkpoint.tensors)
    assert res.checkpoint.meta["fusion"] == 0.0 and res.checkpoint.meta["transfer"] == 0.0


def test_classifier_outputs(pipeline):
    cfg, root, _, _, cls = pipeline
    meta = cls.checkpoint.meta
    assert meta["threshold"] == cls.threshold and 0 <= cls.threshold <= 1
    log = (root / "cls" / "cls_log.csv").read_text().splitlines()
    assert log[0] == "epoch,lr,train_loss,val_auc" and len(log) == cfg.cls_epochs + 1
    manifest = (root / "cls" / "transfer_manifest.csv").read_text().splitlines()[1:]
    names = [line.split(",")[0] for line in manifest]
    assert sorted(names) == sorted(cls.checkpoint.tensors)


def test_classifier_is_deterministic(pipeline, tmp_path):
    cfg, root, seg, maps, _ = pipeline
    H.train_cls(cfg, maps, seg.checkpoint, tmp_path)
    for name in ("cls.xfus", "cls_log.csv", "transfer_manifest.csv"):
        assert (tmp_path / name).read_bytes() == (root / "cls" / name).read_bytes()


# ---------------------------------------------------------------- evaluation


def test_report_matches_emitted_csvs(pipeline, tmp_path):
    cfg, _, _, maps, cls = pipeline
    rep = H.evaluate(cfg, cls.checkpoint, maps, tmp_path)
    curve = roc_from_csv((tmp_path / "roc.csv").read_text())
    cm, thr = confusion_from_csv((tmp_path / "confusion.csv").read_text())
    rates = tpr_tnr_acc(cm)
    assert thr == rep.threshold == cls.threshold
    assert abs(auc(curve) - rep.auc) < 1e-12 and abs(rates.acc - rep.acc) < 1e-12
    assert cm.total == rep.n == len(H.cls_dataset(cfg).splits["test"])
    header, row = (tmp_path / "report.csv").read_text().splitlines()
    assert header.startswith("acc,auc,tpr,tnr,dice,iou,threshold")
    assert row.split(",")[-1] == f"{cfg.hash64():016x}"
    assert (tmp_path / "roc.svg").exists() and (tmp_path / "confusion.svg").exists()


def test_report_auc_equals_pairwise_oracle(pipeline):
    cfg, _, _, maps, cls = pipeline
    ds = H.cls_dataset(cfg)
    params = H._params(cls.checkpoint)
    probs = H.predict(params, ds.images("test", cfg.size), H.load_maps(maps, ds.ids("test"), cfg.size), cfg)
    y = ds.labels("test")
    pos, neg = probs[y == 1], probs[y == 0]
    pairwise = np.mean([1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg])
    assert abs(H.evaluate(cfg, cls.checkpoint, maps).auc - pairwise) < 1e-12


def test_missing_threshold_falls_back(pipeline):
    cfg, _, _, maps, cls = pipeline
    meta = {k: v for k, v in cls.checkpoint.meta.items() if k != "threshold"}
    rep = H.evaluate(cfg, Checkpoint("classification", cls.checkpoint.tensors, meta), maps)
    assert rep.threshold == 0.5 and rep.threshold_fallback
    assert not H.evaluate(cfg, cls.checkpoint, maps).threshold_fallback


def test_eval_rejects_segmentation_checkpoint(pipeline):
    cfg, _, seg, maps, _ = pipeline
    with pytest.raises(KindError):
        H.evaluate(cfg, seg.checkpoint, maps)


def test_memorises_training_split(tmp_path):
    """Ground-truth masks as maps, validation on the training images: training accuracy ~1."""
    cfg = tiny_config(cls_samples=24, cls_epochs=60, batch_size=4, augment=False, head_dropout=0.0,
                      transfer=False, lr=0.1)  # fmt: skip
    ds = H.cls_dataset(cfg)
    ds.splits = {"train": ds.splits["train"], "val": ds.splits["train"], "test": ds.splits["train"]}
    for s in ds.samples:
        save_checkpoint(Checkpoint("lesion-map", {"map": s.mask * 0.9 + 0.05}), tmp_path / f"{s.id}.xfus")
    res = H.train_cls(cfg, tmp_path, ds=ds)
    rep = H.evaluate(cfg, res.checkpoint, tmp_path, ds=ds)
    assert rep.auc == 1.0 and rep.acc == 1.0


# ---------------------------------------------------------------- ablation


def test_ablation_grid(tmp_path):
    cfg = tiny_config(seg_samples=16, cls_samples=40)
    per_seed, agg = H.ablate(cfg, tmp_path)
    assert len(agg) == 4 and len(per_seed) == 4
    assert [(r[0], r[1]) for r in agg] == [(False, False), (False, True), (True, False), (True, True)]
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == "fusion,transfer,acc,auc,auc_std,seeds" and len(lines) == 5
    # the baseline cell equals a standalone baseline run on the same seed
    base = cfg.replace(fusion=False, transfer=False)
    rep = H.evaluate(base, H.train_cls(base, None).checkpoint, None)
    assert agg[0][2] == rep.acc
    assert (tmp_path / "seed-0" / H.cell_dir(True, True) / "roc.svg").exists()


def test_aggregate_statistics():
    rows = [(0, True, True, 0.5, 0.6, None, None, 0.5), (1, True, True, 0.7, 0.8, None, None, 0.5)]
    (f, t, acc, a, sd, n), = H.aggregate(rows, [(True, True)])
    assert (acc, n) == (pytest.approx(0.6), 2) and a == pytest.approx(0.7) and sd == pytest.approx(0.1)
    assert math.isfinite(sd)

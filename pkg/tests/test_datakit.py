import json

import numpy as np
import pytest

from matk.attacks import AdversarialExample, AttackConfig, attack_gallery
from matk.cli import evaluate_model
from matk.datakit import (ImageRecord, SynthSpec, export_adversarial_gallery, load_dataset, load_image_folder, quantize,
                          parse_market_name, read_manifest, read_png, save_dataset, synth_generate, write_png)
from matk.metrics import MetricSpec

SMALL = SynthSpec(num_train_ids=4, num_test_ids=3, images_per_id_per_camera=2, image_size=(8, 8, 3), seed=5)
MANIFEST_FIELDS = {"source", "identity", "camera", "attack_hash", "loss_before", "loss_after", "file"}


def same_records(a, b):
    return len(a) == len(b) and all(
        x.identity == y.identity and x.camera == y.camera and np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))


def test_synth_deterministic():
    a, b = synth_generate(SMALL), synth_generate(SMALL)
    for split in ("train", "probe", "gallery"):
        assert same_records(a.split(split), b.split(split))
    c = synth_generate(SynthSpec(**{**SMALL.__dict__, "seed": 6}))
    assert not same_records(a.train, c.train)


def test_synth_default_layout(synth_ds):
    assert (len(synth_ds.train), len(synth_ds.probe), len(synth_ds.gallery)) == (512, 64, 192)
    train_ids = {r.identity for r in synth_ds.train}
    test_ids = {r.identity for r in synth_ds.probe + synth_ds.gallery}
    assert not train_ids & test_ids
    assert {r.identity for r in synth_ds.probe} == {r.identity for r in synth_ds.gallery}
    for rec in synth_ds.train[:5]:
        assert rec.pixels.shape == (32, 16, 3) and rec.pixels.dtype == np.uint8


@pytest.mark.parametrize("kw", [{"image_size": (7, 16, 3)}, {"image_size": (32, 4, 3)},
                                {"image_size": (32, 16, 2)}, {"num_cameras": 1}])
def test_synth_invalid(kw):
    with pytest.raises(ValueError):
        SynthSpec(**kw)


def test_parse_market_name():
    assert parse_market_name("0001_c1s1_000151_00.png") == (1, 1)
    assert parse_market_name("dir/1502_c6s4_002202_01.png") == (1502, 6)
    with pytest.raises(ValueError, match="bogus.png"):
        parse_market_name("bogus.png")


def test_empty_folder(tmp_path):
    with pytest.raises(FileNotFoundError, match="no images found"):
        load_image_folder(tmp_path)


def test_bad_name_and_mixed_sizes(tmp_path):
    write_png(tmp_path / "0001_c1s1_000001_00.png", np.zeros((8, 8, 3), np.uint8))
    write_png(tmp_path / "0002_c1s1_000001_00.png", np.zeros((9, 8, 3), np.uint8))
    with pytest.raises(ValueError, match="mixed image sizes"):
        load_image_folder(tmp_path)
    (tmp_path / "0002_c1s1_000001_00.png").unlink()
    write_png(tmp_path / "weird.png", np.zeros((8, 8, 3), np.uint8))
    with pytest.raises(ValueError, match="weird.png"):
        load_image_folder(tmp_path)


def test_flat_naming(tmp_path):
    for ident in (3, 11):
        (tmp_path / str(ident)).mkdir()
        write_png(tmp_path / str(ident) / "a.png", np.full((8, 8, 1), ident, np.uint8))
    recs = load_image_folder(tmp_path, naming="flat")
    assert [(r.identity, r.camera) for r in recs] == [(11, 0), (3, 0)]
    assert recs[0].pixels.shape == (8, 8, 1)


def test_dataset_roundtrip_lossless(tmp_path):
    ds = synth_generate(SMALL)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    for split in ("train", "probe", "gallery"):
        key = lambda r: r.name  # noqa: E731
        assert same_records(sorted(ds.split(split), key=key), sorted(back.split(split), key=key))
    assert json.loads((tmp_path / "d" / "splits.json").read_text())["probe"]


def test_grayscale_png_roundtrip(tmp_path):
    px = np.random.default_rng(0).integers(0, 256, (8, 8, 1)).astype(np.uint8)
    write_png(tmp_path / "g.png", px)
    assert np.array_equal(read_png(tmp_path / "g.png"), px)


def test_overlapping_splits_rejected(tmp_path):
    ds = synth_generate(SMALL)
    save_dataset(ds, tmp_path / "d")
    src = tmp_path / "d" / "gallery" / ds.gallery[0].name
    (tmp_path / "d" / "train" / src.name).write_bytes(src.read_bytes())
    with pytest.raises(ValueError, match="overlap"):
        load_dataset(tmp_path / "d")


def test_export_checks_and_manifest(tmp_path, clean_model, synth_ds):
    gallery = synth_ds.gallery[:12]
    ids = {r.identity for r in gallery}
    probes = [p for p in synth_ds.probe if p.identity in ids]
    out = attack_gallery([clean_model], MetricSpec(), probes, gallery, AttackConfig("i_fgsm", 5))
    manifest = export_adversarial_gallery(out, tmp_path / "adv", AttackConfig().to_json())
    lines = read_manifest(manifest)
    assert len(lines) == len(out)
    assert all(set(line) == MANIFEST_FIELDS for line in lines)
    for line, ex in zip(lines, out):
        px = read_png(tmp_path / "adv" / line["file"])
        assert np.abs(px.astype(int) - ex.original.pixels.astype(int)).max() <= 5
        assert line["attack_hash"] == ex.config.hash()
    assert json.loads((tmp_path / "adv" / "attack_config.json").read_text())["iters"] == 6


def test_export_rejects_violation(tmp_path):
    rec = ImageRecord(np.full((8, 8, 3), 100, np.uint8), 1, 1, "gallery", "0001_c1s1_000001_00.png")
    bad = AdversarialExample(rec, np.full((8, 8, 3), 103.0, np.float32), AttackConfig("fgsm", 2))
    with pytest.raises(RuntimeError, match="exceeds epsilon"):
        export_adversarial_gallery([bad], tmp_path / "adv")


def test_export_reload_reproduces_map(tmp_path, clean_model, synth_ds):
    out = attack_gallery([clean_model], MetricSpec(), synth_ds.probe, synth_ds.gallery, AttackConfig())
    in_memory = evaluate_model(clean_model, MetricSpec(), synth_ds.probe, [ex.as_record() for ex in out])[0]
    export_adversarial_gallery(out, tmp_path / "adv")
    reloaded = load_image_folder(tmp_path / "adv")
    from_disk = evaluate_model(clean_model, MetricSpec(), synth_ds.probe, reloaded)[0]
    assert abs(in_memory.mAP - from_disk.mAP) <= 0.01


def test_quantize_respects_fractional_epsilon():
    orig = np.array([100, 101, 0, 255], np.uint8)
    adv = np.array([102.5, 103.5, 0.4, 252.5], np.float32)
    q = quantize(adv, orig, 2.5)
    assert np.abs(q.astype(int) - orig).max() <= 2
    assert list(q) == [102, 103, 0, 253]
    assert list(quantize(adv)) == [102, 104, 0, 252]

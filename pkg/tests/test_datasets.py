import numpy as np
import pytest
import torch

from deepwavenet.datasets import (
    DatasetManifest,
    PairedImageDataset,
    PairRecord,
    PreparationPolicy,
    center_crop_divisible,
    kfold_split,
    load_image,
    make_lr,
    prepare_batch,
    resize,
    save_image,
    scan_paired_dirs,
    uieb_protocol,
)
from deepwavenet.synthetic import make_pairs


def _dirs(tmp_path, deg_names, ref_names, size=(20, 24)):
    deg, ref = tmp_path / "deg", tmp_path / "ref"
    deg.mkdir()
    ref.mkdir()
    d_imgs, r_imgs = make_pairs(max(len(deg_names), len(ref_names)), *size, seed=0)
    for i, n in enumerate(deg_names):
        save_image(d_imgs[i], deg / n)
    for i, n in enumerate(ref_names):
        save_image(r_imgs[i], ref / n)
    return deg, ref


def _fake_manifest(n, seed=0):
    return DatasetManifest("fake", "/data", [PairRecord(f"/d/{i:04d}.png", f"/r/{i:04d}.png") for i in range(n)], seed=seed)


# ---------------------------------------------------------------- scanning


def test_scan_pairs_by_stem(tmp_path):
    deg, ref = _dirs(tmp_path, ["b.jpg", "a.jpg"], ["a.jpg", "b.jpg"])
    m = scan_paired_dirs(deg, ref)
    assert [r.image_id for r in m.records] == ["a", "b"]
    assert m.warnings == []


def test_scan_reports_unmatched(tmp_path):
    deg, ref = _dirs(tmp_path, ["a.png", "b.png", "c.png"], ["a.png", "b.png"])
    with pytest.warns(UserWarning, match="c.png"):
        m = scan_paired_dirs(deg, ref)
    assert len(m) == 2 and len(m.warnings) == 1 and "c.png" in m.warnings[0]


def test_scan_with_suffixes(tmp_path):
    deg, ref = _dirs(tmp_path, ["x_raw.png"], ["x_ref.png"])
    m = scan_paired_dirs(deg, ref, degraded_suffix="_raw", reference_suffix="_ref")
    assert len(m) == 1


def test_scan_empty_dirs_error(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "r").mkdir()
    with pytest.raises(ValueError, match="no image pairs"):
        scan_paired_dirs(tmp_path / "d", tmp_path / "r")
    with pytest.raises(FileNotFoundError):
        scan_paired_dirs(tmp_path / "missing", tmp_path / "r")


def test_manifest_serialization_is_deterministic(tmp_path):
    deg, ref = _dirs(tmp_path, ["a.png", "b.png"], ["a.png", "b.png"])
    m1 = scan_paired_dirs(deg, ref, "toy", PreparationPolicy.preset("uieb"), seed=4)
    m2 = scan_paired_dirs(deg, ref, "toy", PreparationPolicy.preset("uieb"), seed=4)
    assert m1.to_json() == m2.to_json()
    m1.save(tmp_path / "m.json")
    loaded = DatasetManifest.load(tmp_path / "m.json")
    assert loaded == m1 and loaded.to_json() == m1.to_json()


def test_manifest_rejects_duplicates():
    rec = PairRecord("/d/a.png", "/r/a.png")
    with pytest.raises(ValueError, match="duplicate"):
        DatasetManifest("dup", "/", [rec, rec])


# ---------------------------------------------------------------- decoding and LR synthesis


def test_load_image_bit_depths(tmp_path):
    import cv2

    img16 = np.full((4, 5, 3), 65535, dtype=np.uint16)
    img16[0, 0] = (0, 32768, 65535)
    cv2.imwrite(str(tmp_path / "x16.png"), img16)
    out = load_image(tmp_path / "x16.png")
    assert out.dtype == np.float64 and out.shape == (4, 5, 3)
    assert out.max() == 1.0 and out[0, 0, 2] == 0.0  # BGR on disk, RGB in memory
    gray = np.arange(12, dtype=np.uint8).reshape(3, 4)
    cv2.imwrite(str(tmp_path / "g.png"), gray)
    assert load_image(tmp_path / "g.png").shape == (3, 4, 3)
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "none.png")


def test_save_load_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (6, 7, 3)) / 255.0
    save_image(img, tmp_path / "r.png")
    assert np.array_equal(load_image(tmp_path / "r.png"), img)


def test_make_lr_ufo_shape():
    img = np.random.default_rng(0).random((480, 640, 3))
    assert make_lr(img, 2).shape == (240, 320, 3)


def test_make_lr_constant_and_idempotent():
    const = np.full((30, 45, 3), 0.37)
    lr = make_lr(const, 3)
    assert lr.shape == (10, 15, 3)
    assert np.allclose(lr, 0.37, atol=1e-6)
    up = np.repeat(np.repeat(lr, 3, axis=0), 3, axis=1)
    assert np.array_equal(make_lr(up, 3), lr)


def test_make_lr_crops_to_divisible():
    img = np.zeros((11, 14, 3))
    assert center_crop_divisible(img, 4).shape == (8, 12, 3)
    assert make_lr(img, 4).shape == (2, 3, 3)
    with pytest.raises(ValueError):
        make_lr(img, 5)


def test_resize_stays_in_range():
    img = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)[..., None].repeat(3, axis=2)
    out = resize(img, 37, 23)
    assert out.shape == (37, 23, 3) and out.min() >= 0 and out.max() <= 1


# ---------------------------------------------------------------- folds


def test_kfold_partition_890():
    m = _fake_manifest(890)
    folds = kfold_split(m, k=5, seed=3)
    tests = [set(r.degraded_path for r in te.records) for _, te in folds]
    assert [len(t) for t in tests] == [178] * 5
    assert set().union(*tests) == {r.degraded_path for r in m.records}
    assert sum(len(t) for t in tests) == 890
    for (tr, te), t in zip(folds, tests):
        assert len(tr) == 712 and not t & {r.degraded_path for r in tr.records}
        assert all(r.split == "test" for r in te.records) and all(r.split == "train" for r in tr.records)
    again = kfold_split(m, k=5, seed=3)
    assert [te.to_json() for _, te in again] == [te.to_json() for _, te in folds]
    other = kfold_split(m, k=5, seed=4)
    assert [te.to_json() for _, te in other] != [te.to_json() for _, te in folds]


def test_uieb_holdout_protocol():
    folds = uieb_protocol(_fake_manifest(890), repeats=5, test_size=90, seed=0)
    assert [(len(tr), len(te)) for tr, te in folds] == [(800, 90)] * 5
    tests = [{r.degraded_path for r in te.records} for _, te in folds]
    assert sum(len(t) for t in tests) == len(set().union(*tests))


def test_kfold_errors():
    with pytest.raises(ValueError):
        kfold_split(_fake_manifest(10), k=1)
    with pytest.raises(ValueError):
        kfold_split(_fake_manifest(3), k=5)
    with pytest.raises(ValueError):
        kfold_split(_fake_manifest(100), k=5, policy="holdout", test_size=30)
    with pytest.raises(ValueError):
        kfold_split(_fake_manifest(100), policy="bootstrap")


# ---------------------------------------------------------------- batches


@pytest.fixture(scope="module")
def varied_records(tmp_path_factory):
    root = tmp_path_factory.mktemp("varied")
    (root / "d").mkdir()
    (root / "r").mkdir()
    recs = []
    for i, (h, w) in enumerate([(40, 50), (48, 36), (30, 30), (64, 48), (50, 60)]):
        d, r = make_pairs(1, h, w, seed=i)
        save_image(d[0], root / "d" / f"{i}.png")
        save_image(r[0], root / "r" / f"{i}.png")
        recs.append(PairRecord(str(root / "d" / f"{i}.png"), str(root / "r" / f"{i}.png")))
    return recs


@pytest.mark.parametrize("preset,size", [("uieb", 512), ("euvp", 256)])
def test_prepare_batch_presets(varied_records, preset, size):
    deg, ref = prepare_batch(varied_records, PreparationPolicy.preset(preset))
    assert deg.shape == ref.shape == (5, 3, size, size)
    assert deg.dtype == torch.float32
    assert 0 <= deg.min() and deg.max() <= 1 and 0 <= ref.min() and ref.max() <= 1


def test_prepare_batch_sr_policy(varied_records):
    deg, ref = prepare_batch(varied_records[:1], PreparationPolicy.preset("ufo120"))
    assert ref.shape == (1, 3, 40, 50) and deg.shape == (1, 3, 20, 25)


def test_prepare_batch_native_rejects_mixed_sizes(varied_records):
    with pytest.raises(ValueError, match="non-uniform"):
        prepare_batch(varied_records, PreparationPolicy.preset("native"))
    with pytest.raises(ValueError):
        prepare_batch([], PreparationPolicy.preset("native"))


def test_paired_dataset(paired_dirs):
    m = scan_paired_dirs(*paired_dirs, policy=PreparationPolicy.preset("native"))
    ds = PairedImageDataset(m)
    d, r = ds.batch([2, 0])
    assert d.shape == (2, 3, 16, 16)
    expected, _ = prepare_batch([m.records[2], m.records[0]], m.policy)
    assert torch.equal(d, expected)
    assert ds[2][0] is ds[2][0]  # cached

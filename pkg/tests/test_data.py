import numpy as np
import pytest
import torch
from PIL import Image

from vithash.data import (
    DatasetError,
    DatasetManifest,
    ImageStore,
    SplitSpec,
    batches,
    make_synthetic,
    normalize,
    preprocess,
    scan_dataset,
    split,
)


def write_png(path, size=8, mode="RGB", value=128):
    path.parent.mkdir(parents=True, exist_ok=True)
    channels = 3 if mode == "RGB" else 1
    arr = np.full((size, size, channels), value, dtype=np.uint8).squeeze()
    Image.fromarray(arr).convert(mode).save(path)


def test_scan_two_classes(tmp_path):
    for c in ("a", "b"):
        for i in range(3):
            write_png(tmp_path / c / f"{i}.png")
    (tmp_path / "a" / "notes.txt").write_text("x")
    write_png(tmp_path / "a" / "nested" / "deep.png")
    m = scan_dataset(tmp_path)
    assert len(m) == 6 and set(m.labels.tolist()) == {0, 1}
    assert scan_dataset(tmp_path).items == m.items


def test_scan_missing_root(tmp_path):
    with pytest.raises(DatasetError):
        scan_dataset(tmp_path / "nope")


def test_manifest_round_trip(tmp_path, small_synthetic_root):
    m = scan_dataset(small_synthetic_root)
    m.write(tmp_path / "manifest.tsv")
    back = DatasetManifest.read(tmp_path / "manifest.tsv")
    assert back.paths == m.paths and np.array_equal(back.labels, m.labels)
    assert back.class_names == m.class_names


def _manifest(counts):
    from vithash.data import ManifestItem

    items = [ManifestItem(f"{c}/{i}.png", str(c), c) for c, n in enumerate(counts) for i in range(n)]
    return DatasetManifest(items, [str(c) for c in range(len(counts))])


def test_split_seventy_thirty():
    train, test = split(_manifest([10]), SplitSpec(0.7, seed=0))
    assert (len(train), len(test)) == (7, 3)


def test_split_disjoint_exhaustive_and_seeded():
    m = _manifest([10, 7, 2, 3])
    train, test = split(m, SplitSpec(0.7, seed=3))
    assert set(train.paths).isdisjoint(test.paths)
    assert sorted(train.paths + test.paths) == sorted(m.paths)
    assert split(m, SplitSpec(0.7, seed=3))[0].paths == train.paths
    # every class keeps at least one test item
    assert set(test.labels.tolist()) == {0, 1, 2, 3}


def test_split_singleton_class_rejected():
    with pytest.raises(DatasetError):
        split(_manifest([5, 1]), SplitSpec())


def test_preprocess_resize_and_range(tmp_path):
    write_png(tmp_path / "x.png", size=256, value=255)
    t = preprocess(tmp_path / "x.png", 224)
    assert t.shape == (3, 224, 224) and float(t.max()) == 1.0 and float(t.min()) == 1.0


def test_preprocess_grayscale_replicated(tmp_path):
    write_png(tmp_path / "g.png", size=8, mode="L", value=51)
    t = preprocess(tmp_path / "g.png", 8)
    assert t.shape == (3, 8, 8) and torch.allclose(t, torch.full_like(t, 0.2))


def test_preprocess_undecodable(tmp_path, caplog):
    (tmp_path / "bad.png").write_bytes(b"not an image")
    assert preprocess(tmp_path / "bad.png", 8) is None
    assert "undecodable" in caplog.text


def test_store_drops_bad_files(tmp_path):
    write_png(tmp_path / "a" / "0.png")
    write_png(tmp_path / "a" / "1.png")
    (tmp_path / "a" / "2.png").write_bytes(b"junk")
    store = ImageStore(scan_dataset(tmp_path), 8)
    assert len(store) == 2 and store.images.shape == (2, 3, 8, 8)


def test_normalize():
    x = torch.full((1, 3, 2, 2), 0.75)
    assert torch.allclose(normalize(x), torch.full_like(x, 0.5))


def test_batches_cover_epoch(small_synthetic_root):
    store = ImageStore(scan_dataset(small_synthetic_root), 16)
    seen = torch.cat([lab for _, lab in batches(store, 4, shuffle_seed=0, epoch=1)])
    assert len(seen) == len(store) and sorted(seen.tolist()) == sorted(store.labels.tolist())
    a = [lab.tolist() for _, lab in batches(store, 4, 0, 2)]
    b = [lab.tolist() for _, lab in batches(store, 4, 0, 2)]
    assert a == b


def test_synthetic_is_deterministic(tmp_path):
    a = make_synthetic(tmp_path / "a", 2, 3, 8, seed=5)
    b = make_synthetic(tmp_path / "b", 2, 3, 8, seed=5)
    for pa, pb in zip(a.paths, b.paths):
        assert np.array_equal(np.asarray(Image.open(pa)), np.asarray(Image.open(pb)))
    assert len(a) == 6 and len(a.class_names) == 2


def test_synthetic_classes_separable(synthetic_root):
    store = ImageStore(scan_dataset(synthetic_root), 32)
    flat = store.images.flatten(1)
    means = torch.stack([flat[store.labels == c].mean(0) for c in range(4)])
    nearest = torch.cdist(flat, means).argmin(1)
    assert (nearest == store.labels).float().mean() == 1.0

import hashlib
import os
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from densegrade.data import (
    FRUITNET_COUNTS, FRUITS, QUALITIES, DatasetError, Normalization, SampleRecord, TaskMode,
    class_counts, format_counts, load_batch, load_image, read_split_manifest, relabel,
    resize_bilinear, scan_dataset, select_split, split_sizes, stratified_split, write_split_manifest,
)
from densegrade.synthetic import generate_synthetic, read_annotations


def _png(path, color=(10, 20, 30), size=(6, 6)):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", size, color).save(path)


def _flat_tree(root, per=2):
    for f in FRUITS:
        for q in QUALITIES:
            for i in range(per):
                _png(root / f"{f}_{q}" / f"{i}.png", (i * 40, 0, 0))
    return root


def test_flat_tree_scan(tmp_path):
    recs = scan_dataset(_flat_tree(tmp_path))
    assert len(recs) == 36
    assert len({(r.fruit, r.quality) for r in recs}) == 18
    assert all(v == 2 for v in class_counts(recs).values())
    table = format_counts(recs)
    assert table.splitlines()[-1].split()[-1] == "36"


def test_nested_tree_scan(tmp_path):
    for q, folder in (("Good", "Good Quality_Fruits"), ("Bad", "Bad Quality_Fruits"),
                      ("Mixed", "Mixed Qualit_Fruits")):
        for f in FRUITS:
            _png(tmp_path / folder / f"{f}_{q}" / "a.png")
            _png(tmp_path / folder / f"{f}_{q}" / "b.jpg")
    recs = scan_dataset(tmp_path)
    assert len(recs) == 36 and len({(r.fruit, r.quality) for r in recs}) == 18


def test_unknown_folder_is_named(tmp_path):
    _flat_tree(tmp_path, per=1)
    _png(tmp_path / "Dragonfruit_Good" / "x.png")
    with pytest.warns(UserWarning, match="Dragonfruit_Good"):
        recs = scan_dataset(tmp_path)
    assert len(recs) == 18
    with pytest.raises(DatasetError, match="Dragonfruit_Good"):
        scan_dataset(tmp_path, strict=True)


def test_empty_and_missing_roots(tmp_path):
    with pytest.raises(DatasetError, match="no images"):
        scan_dataset(tmp_path)
    with pytest.raises(DatasetError, match="does not exist"):
        scan_dataset(tmp_path / "nope")


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores file permissions")
def test_unreadable_files_listed(tmp_path):
    _flat_tree(tmp_path, per=1)
    bad = tmp_path / "Apple_Good" / "0.png"
    bad.chmod(0)
    try:
        with pytest.raises(DatasetError, match=str(bad)):
            scan_dataset(tmp_path)
    finally:
        bad.chmod(0o644)


def _records_from_counts(counts):
    return [SampleRecord(f"{f}_{q}_{i}", f, q) for (f, q), n in counts.items() for i in range(n)]


@pytest.mark.parametrize("n,test", [(285, 57), (5940, 1188), (125, 25)])
def test_exact_fraction_classes(n, test):
    assert split_sizes(n)[2] == test
    assert sum(split_sizes(n)) == n


def test_round_half_up():
    # exact halves round up, not to even
    assert split_sizes(2, (0.5, 0.25, 0.25)) == (0, 1, 1)
    assert split_sizes(10, (0.5, 0.25, 0.25)) == (4, 3, 3)


def test_partition_and_fractions():
    counts = {k: 3 + (7 * i) % 40 for i, k in enumerate(FRUITNET_COUNTS)}
    recs = _records_from_counts(counts)
    out = stratified_split(recs, seed=3)
    assert [r.path for r in out] == [r.path for r in recs]
    parts = [select_split(out, s) for s in ("train", "val", "test")]
    paths = [set(r.path for r in p) for p in parts]
    assert sum(map(len, paths)) == len(recs)
    assert set.union(*paths) == {r.path for r in recs}
    for key, n in counts.items():
        n_test = sum(1 for r in parts[2] if (r.fruit, r.quality) == key)
        n_val = sum(1 for r in parts[1] if (r.fruit, r.quality) == key)
        assert abs(n_test - 0.2 * n) <= 1 and n_val >= 1 and n - n_test - n_val >= 1


def test_split_determinism_and_seed_sensitivity():
    recs = _records_from_counts({("Apple", "Good"): 50, ("Lime", "Bad"): 30})
    a = stratified_split(recs, seed=1)
    assert a == stratified_split(recs, seed=1)
    assert a != stratified_split(recs, seed=2)


def test_split_errors():
    with pytest.raises(DatasetError, match="Apple_Good"):
        stratified_split(_records_from_counts({("Apple", "Good"): 2, ("Lime", "Bad"): 9}))
    with pytest.raises(ValueError):
        stratified_split(_records_from_counts({("Lime", "Bad"): 9}), ratios=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        select_split([], "holdout")


def test_manifest_round_trip(tmp_path):
    recs = stratified_split(_records_from_counts({("Orange", "Mixed"): 7}), seed=0)
    write_split_manifest(recs, tmp_path / "split.csv")
    assert read_split_manifest(tmp_path / "split.csv") == recs


def test_relabel_examples():
    recs = [SampleRecord("a", "Apple", "Bad"), SampleRecord("b", "Pomegranate", "Mixed")]
    assert relabel(recs, "fine18").tolist() == [0, 17]
    guava = [SampleRecord("g", "Guava", q) for q in QUALITIES]
    assert relabel(guava, TaskMode.FRUIT6).tolist() == [2, 2, 2]
    pairs = [SampleRecord("p", f, q) for f in FRUITS for q in QUALITIES]
    q3 = relabel(pairs, "quality3")
    assert sorted(np.bincount(q3).tolist()) == [6, 6, 6]


def test_relabel_projection_consistency():
    pairs = [SampleRecord("p", f, q) for f in FRUITS for q in QUALITIES]
    fine = relabel(pairs, "fine18")
    assert fine.tolist() == list(range(18))
    for task in (TaskMode.FRUIT6, TaskMode.QUALITY3):
        assert np.array_equal(task.project_fine(fine), relabel(pairs, task))
        assert len(task.class_names()) == task.num_classes
    probs = np.random.default_rng(0).dirichlet(np.ones(18), size=5)
    for task in TaskMode:
        np.testing.assert_allclose(task.project_fine_scores(probs).sum(axis=1), 1.0)


def test_task_parse():
    assert TaskMode.parse("Fruit-6") is TaskMode.FRUIT6
    with pytest.raises(ValueError):
        TaskMode.parse("fruit7")


def test_checkerboard_resize_oracle():
    board = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    # half-pixel centres sample the source at 0, .25, .75, 1 after clamping
    expected = np.array([[0.00, 0.250, 0.750, 1.00],
                         [0.25, 0.375, 0.625, 0.75],
                         [0.75, 0.625, 0.375, 0.25],
                         [1.00, 0.750, 0.250, 0.00]])
    np.testing.assert_allclose(resize_bilinear(board, 4, 4)[0], expected, atol=1e-6)


def test_resize_preserves_constants_and_identity():
    img = np.random.default_rng(0).random((3, 5, 7))
    assert np.array_equal(resize_bilinear(img, 5, 7), img)
    np.testing.assert_allclose(resize_bilinear(np.full((1, 3, 3), 0.4), 11, 2), 0.4)


@pytest.mark.parametrize("res", [(1, 1), (7, 13), (32, 32)])
def test_solid_red(tmp_path, res):
    _png(tmp_path / "red.png", (255, 0, 0), (10, 10))
    img = load_image(tmp_path / "red.png", res)
    assert img.shape == (3, *res) and img.dtype == np.float32
    assert np.all(img[0] == 1.0) and np.all(img[1:] == 0.0)


def test_batch_of_32_and_determinism(tmp_path):
    recs = scan_dataset(_flat_tree(tmp_path))[:32]
    b = load_batch(recs, (8, 8))
    assert b.images.shape == (32, 3, 8, 8) and len(b.labels) == 32
    assert b.images.min() >= 0 and b.images.max() <= 1
    assert np.array_equal(b.images, load_batch(recs, (8, 8), workers=4).images)
    norm = Normalization.from_images(b.images)
    again = load_batch(recs, (8, 8), normalization=norm)
    assert np.array_equal(again.images, load_batch(recs, (8, 8), normalization=norm).images)
    np.testing.assert_allclose(again.images.mean(axis=(0, 2, 3)), 0, atol=1e-5)


def test_undecodable_names_path(tmp_path):
    bad = tmp_path / "Apple_Good" / "broken.png"
    bad.parent.mkdir()
    bad.write_bytes(b"not an image")
    with pytest.raises(DatasetError, match="broken.png"):
        load_batch([SampleRecord(str(bad), "Apple", "Good")], (4, 4))


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synthetic_counts_and_determinism(tmp_path):
    counts = generate_synthetic(tmp_path / "a", per_class=50, resolution=16, seed=7)
    pngs = list((tmp_path / "a").rglob("*.png"))
    assert len(pngs) == 900 and len({p.parent for p in pngs}) == 18
    assert set(counts.values()) == {50}
    recs = scan_dataset(tmp_path / "a")
    assert len(recs) == 900
    generate_synthetic(tmp_path / "b", per_class=50, resolution=16, seed=7)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    generate_synthetic(tmp_path / "c", per_class=50, resolution=16, seed=8)
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_synthetic_annotations(tmp_path):
    generate_synthetic(tmp_path, per_class=2, resolution=24, seed=0)
    boxes = read_annotations(tmp_path)
    assert len(boxes) == 36
    for path, (x0, y0, x1, y1) in boxes.items():
        assert Path(path).exists()
        assert 0 <= x0 <= x1 < 24 and 0 <= y0 <= y1 < 24


def test_synthetic_rejects_bad_args(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic(tmp_path, per_class=0)
    with pytest.raises(ValueError):
        generate_synthetic(tmp_path, resolution=4)

import numpy as np
import pytest
from PIL import Image

from obow.data import (
    SHAPES,
    ImageDataset,
    load_dataset,
    load_image_folder,
    load_index_file,
    make_shapes_dataset,
    train_test_split,
)


def _write_folder(root, per_class=3, size=(40, 30)):
    rng = np.random.default_rng(0)
    for name in ("cat", "ant", "bee"):
        d = root / name
        d.mkdir(parents=True)
        for i in range(per_class):
            Image.fromarray(rng.integers(0, 256, size=(*size, 3), dtype=np.uint8)).save(d / f"{i}.png")
    (root / "ant" / "notes.txt").write_text("ignored")


def test_image_folder_sorted_classes(tmp_path):
    _write_folder(tmp_path)
    ds = load_image_folder(tmp_path)
    assert ds.class_names == ["ant", "bee", "cat"]
    assert len(ds) == 9 and ds.labels.tolist() == [0] * 3 + [1] * 3 + [2] * 3
    assert ds[0].shape == (40, 30, 3)
    resized = load_image_folder(tmp_path, size=20)
    assert min(resized[0].shape[:2]) == 20


def test_index_file(tmp_path):
    _write_folder(tmp_path / "imgs")
    (tmp_path / "index.txt").write_text("# comment\nimgs/cat/0.png 2\n\nimgs/ant/1.png 0\n")
    ds = load_index_file(tmp_path / "index.txt")
    assert ds.labels.tolist() == [2, 0] and ds.paths[0].endswith("cat/0.png")
    (tmp_path / "bad.txt").write_text("imgs/cat/0.png\n")
    with pytest.raises(ValueError):
        load_index_file(tmp_path / "bad.txt")


def test_npz_round_trip(tmp_path):
    ds = make_shapes_dataset(n_images=6, size=32, seed=1, n_classes=3)
    ds.save_npz(tmp_path / "d.npz")
    back = load_dataset(tmp_path / "d.npz")
    assert np.array_equal(back.images, ds.images) and back.labels.tolist() == ds.labels.tolist()
    assert back.class_names == ds.class_names


def test_empty_inputs(tmp_path):
    with pytest.raises(ValueError):
        load_image_folder(tmp_path)
    with pytest.raises(ValueError):
        ImageDataset(np.zeros((2, 4, 4, 3), np.uint8), [0])


def test_stratified_split():
    ds = make_shapes_dataset(n_images=50, size=32, seed=0, n_classes=5)
    train, test = train_test_split(ds, 0.2, seed=0)
    assert len(train) == 40 and len(test) == 10
    assert sorted(np.bincount(test.labels).tolist()) == [2] * 5


def test_shapes_dataset_properties():
    ds = make_shapes_dataset(n_images=40, size=64, seed=2)
    assert ds.images.shape == (40, 64, 64, 3) and ds.images.dtype == np.uint8
    assert np.bincount(ds.labels).tolist() == [4] * 10
    assert ds.class_names == list(SHAPES)
    again = make_shapes_dataset(n_images=40, size=64, seed=2)
    assert np.array_equal(ds.images, again.images)
    with pytest.raises(ValueError):
        make_shapes_dataset(n_images=4, n_classes=11)

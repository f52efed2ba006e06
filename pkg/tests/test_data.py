import os

import numpy as np
import pytest
from PIL import Image

from fsep.data import (
    ClassRecord,
    Dataset,
    augment_rotations,
    load_image_folder,
    split,
    synth_gaussians,
)
from fsep.errors import (
    EmptyDirectory,
    InvalidArgument,
    NonSquareImage,
    OverlappingSplits,
    UnknownLabel,
    UnreadableImage,
)


def _write_png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)


@pytest.fixture
def image_root(tmp_path):
    rng = np.random.default_rng(0)
    for cls in ("b_class", "a_class"):
        os.makedirs(tmp_path / cls)
        for i in range(3):
            _write_png(tmp_path / cls / f"{i}.png", rng.integers(0, 256, size=(56, 56)))
    return tmp_path


def test_load_image_folder_structure(image_root):
    d = load_image_folder(str(image_root))
    assert len(d) == 2
    assert d.counts() == [3, 3]
    assert d.feature_shape == (1, 28, 28)
    assert d.labels == ["a_class", "b_class"]
    for rec in d.classes:
        assert rec.examples.min() >= 0.0 and rec.examples.max() <= 1.0


def test_constant_white_image_is_all_ones(tmp_path):
    os.makedirs(tmp_path / "w")
    _write_png(tmp_path / "w" / "x.png", np.full((56, 56), 255))
    d = load_image_folder(str(tmp_path))
    np.testing.assert_array_equal(d.classes[0].examples[0], np.ones((1, 28, 28)))


def test_box_filter_averages_blocks(tmp_path):
    os.makedirs(tmp_path / "c")
    img = np.zeros((56, 56), dtype=np.uint8)
    img[0, 0] = 255  # one pixel of the top-left 2x2 block
    _write_png(tmp_path / "c" / "x.png", img)
    ex = load_image_folder(str(tmp_path)).classes[0].examples[0, 0]
    assert ex[0, 0] == pytest.approx(0.25)
    assert ex[0, 1] == 0.0


def test_non_integral_resize_stays_in_range(tmp_path):
    os.makedirs(tmp_path / "c")
    _write_png(tmp_path / "c" / "x.png", np.random.default_rng(1).integers(0, 256, size=(105, 105)))
    ex = load_image_folder(str(tmp_path)).classes[0].examples[0]
    assert ex.shape == (1, 28, 28)
    assert 0.0 <= ex.min() and ex.max() <= 1.0


def test_empty_class_dir_named(tmp_path):
    os.makedirs(tmp_path / "full")
    _write_png(tmp_path / "full" / "x.png", np.zeros((28, 28)))
    os.makedirs(tmp_path / "hollow")
    with pytest.raises(EmptyDirectory, match="hollow"):
        load_image_folder(str(tmp_path))


def test_unreadable_image_named(tmp_path):
    os.makedirs(tmp_path / "c")
    (tmp_path / "c" / "broken.png").write_bytes(b"not a png")
    with pytest.raises(UnreadableImage, match="broken.png"):
        load_image_folder(str(tmp_path))


def _image_dataset(L, H=2, n=4, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(
        tuple(ClassRecord(f"ch{j}", rng.random((H, 1, n, n)).astype(np.float32)) for j in range(L)),
        (1, n, n),
    )


def test_rotations_quadruple_and_order():
    d = _image_dataset(3)
    r = augment_rotations(d)
    assert len(r) == 12
    assert r.labels[:4] == ["ch0_rot0", "ch1_rot0", "ch2_rot0", "ch0_rot90"]
    assert r.labels[-1] == "ch2_rot270"
    assert r.counts() == [2] * 12
    for j in range(3):
        assert r.classes[j].examples.tobytes() == d.classes[j].examples.tobytes()
    np.testing.assert_array_equal(r.classes[3].examples, np.rot90(d.classes[0].examples, 1, axes=(2, 3)))


def test_rotation_count_matches_omniglot_training_split():
    # 1028 characters -> 4112 training classes; use tiny images to stay cheap
    d = Dataset(tuple(ClassRecord(f"c{j}", np.zeros((1, 1, 2, 2), np.float32)) for j in range(1028)), (1, 2, 2))
    assert len(augment_rotations(d)) == 4112


def test_four_quarter_turns_identity():
    x = np.random.default_rng(2).random((3, 1, 5, 5))
    y = x
    for _ in range(4):
        y = np.rot90(y, 1, axes=(2, 3))
    assert y.tobytes() == np.ascontiguousarray(x).tobytes()


def test_non_square_rejected():
    d = Dataset((ClassRecord("a", np.zeros((1, 1, 4, 5))),), (1, 4, 5))
    with pytest.raises(NonSquareImage):
        augment_rotations(d)
    v = Dataset((ClassRecord("a", np.zeros((1, 4))),), (4,))
    with pytest.raises(NonSquareImage):
        augment_rotations(v)


def test_synth_structure_and_determinism():
    d = synth_gaussians(L=5, H=20, dim=16, separation=5, noise=1, seed=7)
    assert len(d) == 5 and d.counts() == [20] * 5 and d.feature_shape == (16,)
    e = synth_gaussians(L=5, H=20, dim=16, separation=5, noise=1, seed=7)
    for a, b in zip(d.classes, e.classes):
        assert a.examples.tobytes() == b.examples.tobytes()


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(L=1, H=5, dim=4, separation=1, noise=1, seed=0),
        dict(L=3, H=1, dim=4, separation=1, noise=1, seed=0),
        dict(L=3, H=5, dim=1, separation=1, noise=1, seed=0),
        dict(L=3, H=5, dim=4, separation=0, noise=1, seed=0),
        dict(L=3, H=5, dim=4, separation=1, noise=0, seed=0),
    ],
)
def test_synth_invalid_arguments(kwargs):
    with pytest.raises(InvalidArgument):
        synth_gaussians(**kwargs)


def test_synth_nearest_centroid_monte_carlo():
    # Monte-Carlo oracle: class means recovered from a large draw, then 10k held-out draws
    L, dim, sep, noise = 5, 16, 5.0, 1.0
    big = synth_gaussians(L=L, H=2000, dim=dim, separation=sep, noise=noise, seed=11)
    centroids = np.stack([c.examples[:1000].mean(axis=0) for c in big.classes])
    held = np.concatenate([c.examples[1000:] for c in big.classes])
    labels = np.repeat(np.arange(L), 1000)
    held, labels = held[:10000], labels[:10000]
    pred = ((held[:, None, :] - centroids[None]) ** 2).sum(-1).argmin(1)
    assert (pred == labels).mean() >= 0.99


def test_split_sizes_and_union():
    d = synth_gaussians(L=4, H=3, dim=2, separation=1, noise=1, seed=0)
    labs = d.labels
    tr, va, te = split(d, labs[:2], [labs[2]], [labs[3]])
    assert (len(tr), len(va), len(te)) == (2, 1, 1)
    assert set(tr.labels) | set(va.labels) | set(te.labels) == set(labs)
    assert tr.labels == labs[:2]


def test_split_errors():
    d = synth_gaussians(L=4, H=3, dim=2, separation=1, noise=1, seed=0)
    labs = d.labels
    with pytest.raises(OverlappingSplits):
        split(d, labs[:2], labs[1:3], [])
    with pytest.raises(UnknownLabel):
        split(d, ["nope"], [], [])

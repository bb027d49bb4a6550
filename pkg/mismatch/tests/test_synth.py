import os

import numpy as np
import pytest

from ..synth import augment
from ..synth import augment_sample
from ..synth import boundary_band
from ..synth import DatasetSpec
from ..synth import generate_dataset
from ..synth import generate_sample
from ..synth import morph_binary
from ..synth import read_dataset
from ..synth import read_sample
from ..synth import Sample
from ..synth import SPLITS
from ..synth import stack_batch
from ..synth import write_dataset
from ..synth import write_sample
from ..tensor import write_mmt

SMALL = DatasetSpec(n_labeled=2, n_unlabeled=6, n_val=2, n_test=3)


@pytest.fixture(scope="module")
def small():
    return generate_dataset(SMALL)


@pytest.mark.parametrize("kind", ["tubes", "blobs"])
def test_generated_masks_follow_contract(kind):
    spec = DatasetSpec(kind=kind, n_labeled=4, n_unlabeled=8, n_val=4, n_test=4)
    dataset = generate_dataset(spec)
    lo, hi = spec.foreground_fraction
    for name in SPLITS:
        for sample in dataset.split(name):
            assert sample.image.shape == sample.mask.shape == (32, 32)
            assert sample.image.dtype == np.float32
            assert set(np.unique(sample.mask)) <= {0, 1}
            assert sample.mask.any()
            assert lo <= sample.mask.mean() <= hi
            assert abs(sample.image.mean()) < 1e-4
            assert sample.image.std() == pytest.approx(1.0, abs=1e-3)


def test_generation_is_deterministic(small):
    again = generate_dataset(SMALL)
    for name in SPLITS:
        for a, b in zip(small.split(name), again.split(name)):
            assert a.id == b.id
            assert a.image.tobytes() == b.image.tobytes()
            assert a.mask.tobytes() == b.mask.tobytes()
    other_spec = DatasetSpec(seed=1, n_labeled=2, n_unlabeled=0, n_val=0, n_test=0)
    other = generate_dataset(other_spec)
    assert not np.array_equal(other.train_labeled[0].mask, small.train_labeled[0].mask)


def test_splits_are_disjoint(small):
    ids = [s.id for name in SPLITS for s in small.split(name)]
    assert len(ids) == len(set(ids)) == SMALL.count
    assert [len(small.split(n)) for n in SPLITS] == [2, 6, 2, 3]
    with pytest.raises(ValueError, match="Unknown split"):
        small.split("train")


def test_sample_is_function_of_index(small):
    sample = generate_sample(SMALL, 3)
    np.testing.assert_array_equal(sample.mask, small.train_unlabeled[1].mask)


def test_unattainable_foreground_rejected():
    spec = DatasetSpec(foreground_fraction=(0.9, 0.95), max_retries=3)
    with pytest.raises(ValueError, match="retries"):
        generate_sample(spec, 0)


@pytest.mark.parametrize(
    "kws, field",
    [
        ({"size": 48}, "size"),
        ({"size": 16}, "size"),
        ({"kind": "rings"}, "kind"),
        ({"thickness": (3, 1)}, "thickness"),
        ({"foreground_fraction": (0.0, 0.5)}, "foreground_fraction"),
        ({"n_labeled": 0, "n_unlabeled": 0, "n_val": 0, "n_test": 0}, "empty"),
    ],
)
def test_invalid_spec(kws, field):
    with pytest.raises(ValueError, match=field):
        DatasetSpec(**kws).validate()


def test_morph_examples():
    dot = np.zeros((5, 5), dtype=np.uint8)
    dot[2, 2] = 1
    square = np.zeros((5, 5), dtype=np.uint8)
    square[1:4, 1:4] = 1
    np.testing.assert_array_equal(morph_binary(dot, "dilate", 1), square)
    np.testing.assert_array_equal(morph_binary(square, "erode", 1), dot)
    with pytest.raises(ValueError, match="radius"):
        morph_binary(dot, "dilate", 0)
    with pytest.raises(ValueError, match="Unknown"):
        morph_binary(dot, "open", 1)


@pytest.mark.parametrize("seed", range(10))
def test_morph_properties(seed):
    rng = np.random.default_rng(seed)
    m = (rng.uniform(size=(12, 12)) > 0.5).astype(np.uint8)
    radius = int(rng.integers(1, 3))
    dilated = morph_binary(m, "dilate", radius)
    eroded = morph_binary(m, "erode", radius)
    assert np.all(dilated >= m) and np.all(eroded <= m)
    np.testing.assert_array_equal(eroded, 1 - morph_binary(1 - m, "dilate", radius))
    opened = morph_binary(eroded, "dilate", radius)
    closed = morph_binary(dilated, "erode", radius)
    assert np.all(opened <= m) and np.all(m <= closed)
    for flip in ("hflip", "vflip"):
        for op in ("dilate", "erode"):
            np.testing.assert_array_equal(
                morph_binary(augment(m, flip), op, radius),
                augment(morph_binary(m, op, radius), flip),
            )


def test_boundary_band():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[2:6, 2:6] = 1
    band = boundary_band(mask, 1)
    assert band.dtype == bool
    assert band[1, 1] and band[2, 2] and band[6, 6]
    assert not band[3, 3] and not band[0, 0]
    assert band.sum() == 36 - 4


def test_augment_examples():
    image = np.random.default_rng(0).standard_normal((6, 6)).astype(np.float32)
    np.testing.assert_array_equal(augment(augment(image, "hflip"), "hflip"), image)
    np.testing.assert_array_equal(augment(augment(image, "vflip"), "vflip"), image)
    np.testing.assert_array_equal(augment(image, "hflip")[:, 0], image[:, -1])
    np.testing.assert_array_equal(
        np.sort(augment(image, "hflip"), axis=None), np.sort(image, axis=None)
    )
    first = augment(image, "gaussian_noise", seed=3, sigma=0.5)
    again = augment(image, "gaussian_noise", seed=3, sigma=0.5)
    other = augment(image, "gaussian_noise", seed=4, sigma=0.5)
    np.testing.assert_array_equal(first, again)
    assert not np.array_equal(first, other)
    assert first.dtype == np.float32
    with pytest.raises(ValueError, match="Unknown augmentation"):
        augment(image, "rotate")


def test_augment_sample_keeps_mask_aligned(small):
    sample = small.train_labeled[0]
    for seed in range(8):
        rng = np.random.default_rng(seed)
        out = augment_sample(sample, ("hflip", "vflip"), rng)
        flips = [
            axes
            for axes in ((), (-1,), (-2,), (-2, -1))
            if np.array_equal(out.mask, np.flip(sample.mask, axes))
            and np.array_equal(out.image, np.flip(sample.image, axes))
        ]
        assert flips
    noisy = augment_sample(sample, ("gaussian_noise",), np.random.default_rng(0), 0.2)
    np.testing.assert_array_equal(noisy.mask, sample.mask)
    assert not np.array_equal(noisy.image, sample.image)
    with pytest.raises(ValueError, match="Unknown augmentation"):
        augment_sample(sample, ("shear",), np.random.default_rng(0))


def test_stack_batch(small):
    images, masks = stack_batch(small.val, "float64")
    assert images.shape == masks.shape == (2, 1, 32, 32)
    assert images.dtype == masks.dtype == np.float64


def test_sample_roundtrip(small, tmp_path):
    sample = small.test[0]
    write_sample(sample, str(tmp_path))
    loaded = read_sample(str(tmp_path), sample.id)
    assert loaded.id == sample.id
    np.testing.assert_array_equal(loaded.image, sample.image)
    np.testing.assert_array_equal(loaded.mask, sample.mask)
    assert loaded.mask.dtype == np.uint8


def test_read_sample_rejects_corruption(small, tmp_path):
    sample = small.test[0]
    write_sample(sample, str(tmp_path))
    write_mmt(os.path.join(tmp_path, "masks", f"{sample.id}.mmt"), sample.mask * 2.0)
    with pytest.raises(ValueError, match="non-binary mask"):
        read_sample(str(tmp_path), sample.id)
    with open(os.path.join(tmp_path, "images", f"{sample.id}.mmt"), "r+b") as f:
        f.write(b"XXXX")
    with pytest.raises(ValueError, match="bad magic"):
        read_sample(str(tmp_path), sample.id)


def test_dataset_roundtrip(small, tmp_path):
    write_dataset(small, str(tmp_path))
    assert os.path.exists(tmp_path / "meta.json")
    loaded = read_dataset(str(tmp_path))
    assert loaded.spec == SMALL
    for name in SPLITS:
        assert [s.id for s in loaded.split(name)] == [s.id for s in small.split(name)]
        for a, b in zip(loaded.split(name), small.split(name)):
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.mask, b.mask)


def test_sample_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="differ in shape"):
        Sample("x", np.zeros((4, 4)), np.zeros((4, 5), dtype=np.uint8))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import ndimage

from crseg.data import (ImageSample, SynthConfig, generate_synthetic_dataset, load_dataset,
                        make_split, save_dataset)
from crseg.errors import ConfigError, FormatError


def test_empty_dataset():
    assert generate_synthetic_dataset(SynthConfig(n_images=0)) == []


@pytest.mark.parametrize("bad", [dict(image_size=16), dict(foreground_fraction_target=0.6),
                                 dict(task="lane"), dict(n_images=-1)])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SynthConfig(**bad))


def test_crack_density_band():
    samples = generate_synthetic_dataset(SynthConfig(task="crack", n_images=100,
                                                     foreground_fraction_target=0.02, seed=7))
    assert len(samples) == 100
    density = np.mean([s.mask.mean() for s in samples])
    assert 0.01 <= density <= 0.03


def test_road_density_band():
    samples = generate_synthetic_dataset(SynthConfig(task="road", n_images=50, seed=3,
                                                     foreground_fraction_target=0.1))
    assert 0.05 <= np.mean([s.mask.mean() for s in samples]) <= 0.15


@pytest.mark.parametrize("task", ["crack", "road"])
def test_generator_deterministic(task):
    cfg = SynthConfig(task=task, n_images=5, seed=9)
    a, b = generate_synthetic_dataset(cfg), generate_synthetic_dataset(cfg)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.mask.tobytes() == y.mask.tobytes()


@pytest.mark.parametrize("task", ["crack", "road"])
def test_sample_invariants(task):
    for s in generate_synthetic_dataset(SynthConfig(task=task, n_images=10, seed=1, image_size=64)):
        assert s.labeled and s.mask is not None
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, 1}
        assert s.mask.shape == s.image.shape[:2]


def test_road_aux_masks():
    samples, aux = generate_synthetic_dataset(SynthConfig(task="road", n_images=20, seed=4), with_aux=True)
    for s, (edge, center) in zip(samples, aux):
        surface = s.mask.astype(bool)
        assert np.all(center.astype(bool) <= surface)
        assert center.sum() > 0 and edge.sum() > 0
        boundary = surface ^ ndimage.binary_erosion(surface)
        dist = ndimage.distance_transform_edt(~boundary)
        assert dist[edge.astype(bool)].max() <= 1


def test_image_sample_invariants():
    img = np.zeros((8, 8, 1), np.float32)
    with pytest.raises(ValueError):
        ImageSample("a", img, None, labeled=True)
    with pytest.raises(ValueError):
        ImageSample("a", img, np.zeros((4, 4), np.uint8), labeled=True)


def test_split_paper_fraction():
    split = make_split([f"i{k}" for k in range(200)], 0.035, seed=1)
    assert len(split.labeled_ids) == 7
    assert len(split.unlabeled_ids) == 193


def test_split_full_and_floor():
    ids = [str(k) for k in range(10)]
    full = make_split(ids, 1.0, 0)
    assert set(full.labeled_ids) == set(ids) and full.unlabeled_ids == ()
    assert len(make_split(ids, 0.001, 0).labeled_ids) == 1


def test_split_errors():
    with pytest.raises(ValueError):
        make_split([], 0.5, 0)
    with pytest.raises(ValueError):
        make_split(["a"], 0.0, 0)


def test_split_properties_many_draws():
    rng = np.random.default_rng(0)
    ids = [f"id{k}" for k in range(57)]
    for _ in range(1000):
        frac = float(rng.uniform(1e-3, 1.0))
        seed = int(rng.integers(0, 2**31))
        split = make_split(ids, frac, seed)
        lab, unl = set(split.labeled_ids), set(split.unlabeled_ids)
        assert not lab & unl and lab | unl == set(ids)
        assert len(lab) == max(1, round(frac * len(ids)))
        assert split == make_split(ids, frac, seed)


def test_round_trip(tmp_path):
    samples = generate_synthetic_dataset(SynthConfig(n_images=4, seed=2, image_size=48))
    samples.append(ImageSample("unlabeled_0", samples[0].image.copy()))
    save_dataset(samples, tmp_path)
    loaded = load_dataset(tmp_path)
    assert [s.id for s in loaded] == [s.id for s in samples]
    for a, b in zip(samples, loaded):
        assert a.labeled == b.labeled
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6
        if a.mask is not None:
            assert np.array_equal(a.mask, b.mask)
    save_dataset(loaded, tmp_path / "again")
    again = load_dataset(tmp_path / "again")
    for a, b in zip(loaded, again):
        assert np.array_equal(a.image, b.image)
        assert (a.mask is None and b.mask is None) or np.array_equal(a.mask, b.mask)


def test_image_without_mask_is_unlabeled(tmp_path):
    (tmp_path / "images").mkdir()
    Image.fromarray(np.zeros((32, 32), np.uint8)).save(tmp_path / "images" / "x.png")
    [s] = load_dataset(tmp_path)
    assert not s.labeled and s.mask is None


def test_mask_shape_mismatch(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    Image.fromarray(np.zeros((128, 128), np.uint8)).save(tmp_path / "images" / "x.png")
    Image.fromarray(np.zeros((64, 64), np.uint8)).save(tmp_path / "masks" / "x.png")
    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_labeled_without_mask(tmp_path):
    (tmp_path / "images").mkdir()
    Image.fromarray(np.zeros((32, 32), np.uint8)).save(tmp_path / "images" / "x.png")
    (tmp_path / "manifest.tsv").write_text("id\tlabeled\nx\t1\n")
    with pytest.raises(FormatError):
        load_dataset(tmp_path)

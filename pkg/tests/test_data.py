import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from illumseg import data as D
from illumseg.retinex import intensity


@settings(max_examples=20, deadline=None)
@given(h=st.integers(1, 17), w=st.integers(1, 17), seed=st.integers(0, 1000))
def test_ppm_round_trip(tmp_path_factory, h, w, seed):
    path = tmp_path_factory.mktemp("ppm") / "x.ppm"
    img = np.random.default_rng(seed).integers(0, 256, (3, h, w)).astype(np.float32)
    D.save_ppm(img, path)
    assert D.load_ppm(path).tobytes() == img.tobytes()


def test_pgm_round_trip(tmp_path):
    gray = np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8)
    D.save_pgm(gray, tmp_path / "g.pgm")
    np.testing.assert_array_equal(D.load_pgm(tmp_path / "g.pgm"), gray)


def test_white_pixel_fixture(tmp_path):
    body = b"P6\n1 1\n255\n\xff\xff\xff"
    (tmp_path / "w.ppm").write_bytes(body)
    assert D.load_ppm(tmp_path / "w.ppm")[:, 0, 0].tolist() == [255, 255, 255]
    D.save_ppm(np.full((3, 1, 1), 255.0), tmp_path / "out.ppm")
    assert (tmp_path / "out.ppm").read_bytes() == body


def test_header_comments_and_layout(tmp_path):
    # 2x1 image: red then blue, row-major from the top-left
    (tmp_path / "c.ppm").write_bytes(b"P6 # comment\n2 1\n255\n\xff\x00\x00\x00\x00\xff")
    img = D.load_ppm(tmp_path / "c.ppm")
    assert img[:, 0, 0].tolist() == [255, 0, 0] and img[:, 0, 1].tolist() == [0, 0, 255]


def test_mask_threshold(tmp_path):
    D.save_pgm(np.array([[0, 127, 128, 255]], dtype=np.uint8), tmp_path / "m.pgm")
    assert D.load_mask(tmp_path / "m.pgm").tolist() == [[0, 0, 1, 1]]


@pytest.mark.parametrize("payload", [
    b"P3\n1 1\n255\n\x00\x00\x00",
    b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00",
    b"P6\n2 2\n255\n\x00\x00\x00",
    b"P6\n1",
    b"P6\nx 1\n255\n\x00\x00\x00",
])
def test_malformed_ppm(tmp_path, payload):
    (tmp_path / "bad.ppm").write_bytes(payload)
    with pytest.raises(D.ImageFormatError):
        D.load_ppm(tmp_path / "bad.ppm")


def _pairs(root, ids, size=(4, 5)):
    rng = np.random.default_rng(0)
    samples = [D.Sample(rng.integers(0, 256, (3, *size)).astype(np.float32),
                        (rng.random(size) > 0.5).astype(np.uint8), sid) for sid in ids]
    D.write_dataset(root, samples)
    return samples


def test_load_dataset_empty(tmp_path):
    assert D.load_dataset(tmp_path) == []


def test_load_dataset_sorted(tmp_path):
    written = _pairs(tmp_path, ["c", "a", "b"])
    loaded = D.load_dataset(tmp_path)
    assert [s.id for s in loaded] == ["a", "b", "c"]
    by_id = {s.id: s for s in written}
    for s in loaded:
        assert s.image.tobytes() == by_id[s.id].image.tobytes()
        np.testing.assert_array_equal(s.mask, by_id[s.id].mask)


def test_orphan_image_named(tmp_path):
    _pairs(tmp_path, ["a", "b"])
    (tmp_path / "masks" / "b.pgm").unlink()
    with pytest.raises(D.DatasetError, match="b"):
        D.load_dataset(tmp_path)


def test_orphan_mask_named(tmp_path):
    _pairs(tmp_path, ["a", "zz"])
    (tmp_path / "images" / "zz.ppm").unlink()
    with pytest.raises(D.DatasetError, match="zz"):
        D.load_dataset(tmp_path)


def test_dimension_mismatch(tmp_path):
    _pairs(tmp_path, ["a"])
    D.save_mask(np.zeros((2, 2), dtype=np.uint8), tmp_path / "masks" / "a.pgm")
    with pytest.raises(D.DatasetError, match="a"):
        D.load_dataset(tmp_path)


# ------------------------------------------------------------------ split


def test_split_default_sizes():
    tr, va, te = D.split(list(range(100)))
    assert (len(tr), len(va), len(te)) == (78, 9, 13)


def test_split_all_train():
    tr, va, te = D.split(list(range(10)), (1, 0, 0))
    assert len(tr) == 10 and va == [] and te == []


@settings(max_examples=30, deadline=None)
@given(n=st.integers(3, 300), seed=st.integers(0, 100))
def test_split_partition(n, seed):
    parts = D.split(list(range(n)), seed=seed)
    joined = [x for p in parts for x in p]
    assert sorted(joined) == list(range(n))
    assert parts == D.split(list(range(n)), seed=seed)
    for size, ratio in zip(map(len, parts), D.DEFAULT_SPLIT):
        assert abs(size - n * ratio) < 1


def test_split_errors():
    with pytest.raises(D.DatasetError):
        D.split([1, 2])
    with pytest.raises(ValueError):
        D.split(list(range(5)), (0.5, 0.5, 0.5))


# -------------------------------------------------------------- generator


def test_generator_deterministic():
    a = D.synth_generate(3, 42, (32, 48))
    b = D.synth_generate(3, 42, (32, 48))
    for x, y in zip(a, b):
        assert x.sample.image.tobytes() == y.sample.image.tobytes()
        assert x.sample.mask.tobytes() == y.sample.mask.tobytes()
        assert x.illumination.tobytes() == y.illumination.tobytes()
    assert D.synth_generate(1, 43, (32, 48))[0].sample.image.tobytes() != a[0].sample.image.tobytes()


def test_generator_prefix_stable():
    # scene i depends only on (seed, i)
    short, long = D.synth_generate(2, 5, (32, 32)), D.synth_generate(4, 5, (32, 32))
    assert short[1].sample.image.tobytes() == long[1].sample.image.tobytes()


def test_unit_illumination_equals_reflectance():
    for scene in D.synth_generate(3, 1, (24, 32), (1.0, 1.0)):
        np.testing.assert_array_equal(scene.sample.image, np.clip(scene.reflectance, 0, 255))
        np.testing.assert_array_equal(scene.sample.image, scene.flat.image)


def test_coverage_bounds_and_binary_masks():
    for scene in D.synth_generate(40, 3, (48, 64)):
        m = scene.sample.mask
        assert set(np.unique(m)) <= {0, 1}
        assert 0.02 <= m.sum() / m.size <= 0.40


def test_illumination_bounded_and_image_range():
    for scene in D.synth_generate(5, 2, (40, 40), (0.4, 1.8)):
        assert scene.illumination.min() >= 0.4 and scene.illumination.max() <= 1.8
        img = scene.sample.image
        assert img.min() >= 0 and img.max() <= 255 and np.array_equal(img, np.rint(img))


def test_corruption_is_measurable():
    for scene in D.synth_generate(12, 9, (48, 64), (0.5, 1.5)):
        bg = scene.sample.mask == 0
        cv_bad = D.coefficient_of_variation(intensity(scene.sample.image)[bg])
        cv_flat = D.coefficient_of_variation(intensity(scene.flat.image)[bg])
        assert cv_bad > cv_flat


@pytest.mark.parametrize("kwargs", [dict(count=0), dict(size=(4, 4)), dict(illum_range=(0.0, 1.0)),
                                    dict(illum_range=(1.5, 1.0))])
def test_generator_errors(kwargs):
    args = dict(count=1, seed=0, size=(16, 16), illum_range=(0.5, 1.5))
    args.update(kwargs)
    with pytest.raises(ValueError):
        D.synth_generate(**args)


def test_write_synthetic_layout(tmp_path):
    scenes = D.synth_generate(2, 0, (16, 16))
    D.write_synthetic(tmp_path, scenes, D.synth_metadata(2, 0, (16, 16), (0.5, 1.5)))
    assert json.loads((tmp_path / "metadata.json").read_text())["seed"] == 0
    assert sorted(p.name for p in (tmp_path / "flat").iterdir()) == ["s0000.ppm", "s0001.ppm"]
    loaded = D.load_dataset(tmp_path)
    assert [s.id for s in loaded] == ["s0000", "s0001"]
    assert loaded[1].image.tobytes() == scenes[1].sample.image.tobytes()

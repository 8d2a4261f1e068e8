import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from idaseg.data import (
    DatasetError,
    Domain,
    ImageSample,
    PreprocessConfig,
    augment,
    flip_horizontal,
    flip_vertical,
    load_dataset,
    random_crop,
    resize_label,
    resize_whole,
    sample_quad,
    to_grayscale,
)


def _sample(pixels, label=None, domain=Domain.SOURCE, sid="s0"):
    return ImageSample(pixels=pixels, label=label, domain=domain, id=sid)


def _write_dataset(root, n=3, size=12, with_masks=True):
    (root / "images").mkdir(parents=True)
    if with_masks:
        (root / "masks").mkdir()
    rng = np.random.default_rng(0)
    for i in range(n):
        img = (rng.random((size, size)) * 255).astype(np.uint8)
        Image.fromarray(img).save(root / "images" / f"im{i:02d}.png")
        if with_masks:
            mask = (rng.random((size, size)) > 0.5).astype(np.uint8) * 255
            Image.fromarray(mask).save(root / "masks" / f"im{i:02d}.png")


def test_sample_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        _sample(np.zeros((4, 4)), label=np.zeros((4, 5), dtype=np.int64))


def test_load_dataset_source(tmp_path):
    _write_dataset(tmp_path, n=3)
    samples = load_dataset(tmp_path, Domain.SOURCE)
    assert [s.id for s in samples] == ["im00", "im01", "im02"]
    for s in samples:
        assert s.pixels.dtype == np.float64
        assert s.pixels.min() >= 0.0 and s.pixels.max() <= 1.0
        assert s.label is not None
        assert set(np.unique(s.label)) <= {0, 1}


def test_load_dataset_target_train_unlabeled(tmp_path):
    _write_dataset(tmp_path, n=2)
    samples = load_dataset(tmp_path, Domain.TARGET, split="train")
    assert all(s.label is None for s in samples)
    # the eval split keeps its labels
    eval_samples = load_dataset(tmp_path, Domain.TARGET, split="eval")
    assert all(s.label is not None for s in eval_samples)


def test_load_dataset_missing_dir(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope", Domain.SOURCE)


def test_load_dataset_mask_shape_mismatch_rejects_file(tmp_path):
    _write_dataset(tmp_path, n=2)
    bad = np.zeros((5, 7), dtype=np.uint8)
    Image.fromarray(bad).save(tmp_path / "masks" / "im00.png")
    samples = load_dataset(tmp_path, Domain.SOURCE)
    assert [s.id for s in samples] == ["im01"]


def test_mask_binarization_threshold(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    img = np.zeros((2, 2), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "images" / "a.png")
    mask = np.array([[0, 127], [128, 255]], dtype=np.uint8)
    Image.fromarray(mask).save(tmp_path / "masks" / "a.png")
    (s,) = load_dataset(tmp_path, Domain.SOURCE)
    assert s.label.tolist() == [[0, 0], [1, 1]]


def test_resize_whole_identity_copies():
    pix = np.random.default_rng(1).random((8, 8))
    lab = (pix > 0.5).astype(np.int64)
    s = _sample(pix, lab)
    out = resize_whole(s, PreprocessConfig(train_size=(8, 8)))
    assert np.array_equal(out.pixels, pix)
    assert out.pixels is not pix
    out.pixels[0, 0] = -1.0
    assert pix[0, 0] != -1.0


def test_resize_whole_constant_image_stays_constant():
    s = _sample(np.full((10, 14), 0.37))
    out = resize_whole(s, PreprocessConfig(train_size=(6, 8)))
    assert out.pixels.shape == (8, 6)
    assert np.allclose(out.pixels, 0.37, atol=1e-6)


def test_resize_label_integer_downsample_oracle():
    lab = np.arange(16, dtype=np.int64).reshape(4, 4)
    out = resize_label(lab, (2, 2))
    # center-aligned nearest: output (i,j) takes source pixel at
    # floor((i + 0.5) * 4 / 2) = 2i + 1
    expected = np.array([[lab[1, 1], lab[1, 3]], [lab[3, 1], lab[3, 3]]])
    assert np.array_equal(out, expected)


def test_resize_label_brute_force():
    rng = np.random.default_rng(3)
    lab = rng.integers(0, 2, size=(7, 5)).astype(np.int64)
    tw, th = 3, 4
    out = resize_label(lab, (tw, th))
    for i in range(th):
        for j in range(tw):
            r = min(int((i + 0.5) * 7 / th), 6)
            c = min(int((j + 0.5) * 5 / tw), 4)
            assert out[i, j] == lab[r, c]


def test_random_crop_within_bounds_and_label_aligned():
    rng = np.random.default_rng(0)
    pix = np.random.default_rng(2).random((20, 20))
    lab = (pix > 0.5).astype(np.int64)
    s = _sample(pix, lab)
    cfg = PreprocessConfig(train_size=(8, 8))
    for _ in range(20):
        out = random_crop(s, cfg, rng)
        assert out.pixels.shape == (8, 8)
        # the crop must exist verbatim somewhere in the original
        found = False
        for y0 in range(13):
            for x0 in range(13):
                if np.array_equal(pix[y0:y0 + 8, x0:x0 + 8], out.pixels):
                    assert np.array_equal(lab[y0:y0 + 8, x0:x0 + 8], out.label)
                    found = True
        assert found


def test_random_crop_pads_small_images():
    rng = np.random.default_rng(0)
    s = _sample(np.random.default_rng(4).random((5, 5)))
    out = random_crop(s, PreprocessConfig(train_size=(9, 9)), rng)
    assert out.pixels.shape == (9, 9)


def test_grayscale_weights_oracle():
    pix = np.zeros((1, 1, 3))
    pix[0, 0] = (0.2, 0.4, 0.6)
    out = to_grayscale(_sample(pix), PreprocessConfig())
    expected = 0.299 * 0.2 + 0.587 * 0.4 + 0.114 * 0.6
    assert abs(out.pixels[0, 0] - expected) < 1e-12
    assert round(float(out.pixels[0, 0]), 4) == 0.3630


def test_grayscale_brute_force():
    rng = np.random.default_rng(5)
    pix = rng.random((6, 7, 3))
    out = to_grayscale(_sample(pix), PreprocessConfig())
    for i in range(6):
        for j in range(7):
            expected = 0.299 * pix[i, j, 0] + 0.587 * pix[i, j, 1] + 0.114 * pix[i, j, 2]
            assert abs(out.pixels[i, j] - expected) < 1e-12


def test_grayscale_passthrough_on_single_channel():
    s = _sample(np.random.default_rng(6).random((4, 4)))
    assert to_grayscale(s, PreprocessConfig()) is s


def test_flips_are_involutions():
    pix = np.random.default_rng(7).random((5, 6))
    lab = (pix > 0.5).astype(np.int64)
    s = _sample(pix, lab)
    twice = flip_horizontal(flip_horizontal(s))
    assert np.array_equal(twice.pixels, pix) and np.array_equal(twice.label, lab)
    twice = flip_vertical(flip_vertical(s))
    assert np.array_equal(twice.pixels, pix) and np.array_equal(twice.label, lab)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_augment_stays_in_range_and_keeps_label_values(seed):
    rng = np.random.default_rng(seed)
    pix = np.random.default_rng(seed + 1).random((6, 6))
    lab = (pix > 0.5).astype(np.int64)
    out = augment(_sample(pix, lab), PreprocessConfig(train_size=(6, 6)), rng)
    assert out.pixels.shape == (6, 6)
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0
    assert sorted(np.unique(out.label)) == sorted(np.unique(lab))


def test_augment_disabled_is_identity():
    cfg = PreprocessConfig(horizontal_flip=False, vertical_flip=False, color_jitter=False)
    pix = np.random.default_rng(8).random((4, 4))
    out = augment(_sample(pix), cfg, np.random.default_rng(0))
    assert np.array_equal(out.pixels, pix)


def test_augment_deterministic_given_rng_state():
    pix = np.random.default_rng(9).random((6, 6))
    a = augment(_sample(pix), PreprocessConfig(), np.random.default_rng(42))
    b = augment(_sample(pix), PreprocessConfig(), np.random.default_rng(42))
    assert np.array_equal(a.pixels, b.pixels)


def _pools(n_src=3, n_tgt=3, size=16):
    rng = np.random.default_rng(11)
    src = [
        _sample(rng.random((size, size)), (rng.random((size, size)) > 0.5).astype(np.int64),
                Domain.SOURCE, f"s{i}")
        for i in range(n_src)
    ]
    tgt = [_sample(rng.random((size + 4, size + 4)), None, Domain.TARGET, f"t{i}")
           for i in range(n_tgt)]
    return src, tgt


def test_sample_quad_slots():
    src, tgt = _pools()
    cfg = PreprocessConfig(train_size=(8, 8))
    quad = sample_quad(src, tgt, cfg, np.random.default_rng(0))
    for slot in (quad.sr, quad.sp, quad.tr, quad.tp):
        assert slot.pixels.shape == (8, 8)
    assert quad.sr.domain == Domain.SOURCE and quad.sp.domain == Domain.SOURCE
    assert quad.tr.domain == Domain.TARGET and quad.tp.domain == Domain.TARGET
    assert quad.sr.label is not None and quad.sp.label is not None
    assert quad.tr.label is None and quad.tp.label is None


@pytest.mark.parametrize("mode", ["both", "patch", "whole"])
def test_sample_quad_modes(mode):
    src, tgt = _pools()
    cfg = PreprocessConfig(train_size=(8, 8))
    quad = sample_quad(src, tgt, cfg, np.random.default_rng(1), input_mode=mode)
    assert quad.sr.pixels.shape == (8, 8)
    assert quad.tp.pixels.shape == (8, 8)


def test_sample_quad_empty_pool():
    src, _ = _pools()
    with pytest.raises(ValueError):
        sample_quad(src, [], PreprocessConfig(), np.random.default_rng(0))

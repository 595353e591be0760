import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cxrdistl.augment import (CropKind, CropSpec, MultiCrop, apply_spec, autocontrast, collate, default_specs,
                              denormalize, eval_view, make_views, normalize, sample_crop_box)


@pytest.fixture
def image(rng):
    return rng.integers(0, 256, (300, 280), dtype=np.uint8)


def test_paper_default_view_shapes(image, rng):
    b = make_views(image, rng)
    assert len(b.globals) == 2 and len(b.locals) == 8
    assert all(v.shape == (3, 256, 256) for v in b.globals)
    assert all(v.shape == (3, 128, 128) for v in b.locals)
    assert len(b.traces) == 10


def test_small_image_is_upscaled(rng):
    img = rng.integers(0, 256, (40, 50), dtype=np.uint8)
    b = make_views(img, rng)
    assert b.globals[1].shape == (3, 256, 256) and b.locals[0].shape == (3, 128, 128)


def test_augmentation_off_makes_globals_equal(image, rng):
    b = make_views(image, rng, MultiCrop.paper_default().without_augmentation())
    assert torch.equal(b.globals[0], b.globals[1])


def test_global1_is_resize_and_normalize(image, rng):
    b = make_views(image, rng)
    assert torch.equal(b.globals[0], eval_view(image, 256))
    assert b.traces[0]["crop"] == [0, 0, 280, 300] and not b.traces[0]["flip"]


def test_fixed_seed_bit_identical(image):
    a = make_views(image, np.random.Generator(np.random.PCG64(5)))
    b = make_views(image, np.random.Generator(np.random.PCG64(5)))
    assert all(torch.equal(x, y) for x, y in zip(a.views, b.views))
    assert a.traces == b.traces


def test_flip_frequency(rng):
    spec = CropSpec(CropKind.LOCAL, 8, flip_p=0.3)
    img = rng.integers(0, 256, (16, 16), dtype=np.uint8)
    n = 10_000
    flips = sum(apply_spec(img, spec, rng)[1]["flip"] for _ in range(n))
    assert abs(flips / n - 0.3) <= 3 * np.sqrt(0.3 * 0.7 / n)


def test_flip_mirrors_pixels(rng):
    img = np.tile(np.arange(16, dtype=np.uint8), (16, 1))
    out, tr = apply_spec(img, CropSpec(CropKind.LOCAL, 16, flip_p=1.0), rng)
    assert tr["flip"] and np.array_equal(out, img[:, ::-1])


@settings(max_examples=200, deadline=None)
@given(st.integers(20, 400), st.integers(20, 400), st.integers(0, 2**32 - 1))
def test_local_area_fraction_in_range(h, w, seed):
    r = np.random.Generator(np.random.PCG64(seed))
    x, y, cw, ch = sample_crop_box(h, w, (0.2, 0.6), (3 / 4, 4 / 3), r)
    assert 0.2 <= cw * ch / (h * w) <= 0.6
    assert 0 <= x and x + cw <= w and 0 <= y and y + ch <= h


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40))
def test_normalize_invertible(h, w):
    img = np.random.default_rng(h * 100 + w).integers(0, 256, (h, w), dtype=np.uint8)
    x = normalize(img)
    assert x.shape == (3, h, w)
    back = denormalize(x)
    assert torch.allclose(back, torch.from_numpy(img / 255.0).float().expand(3, -1, -1), atol=1e-6)


def test_spec_validation():
    with pytest.raises(ValueError):
        CropSpec(CropKind.LOCAL, 128, (0.0, 0.5))
    with pytest.raises(ValueError):
        CropSpec(CropKind.LOCAL, 128, (0.7, 0.5))
    with pytest.raises(ValueError, match="flip_p"):
        CropSpec(CropKind.LOCAL, 128, flip_p=1.5)


def test_default_specs_values():
    g1, g2, loc = default_specs()
    assert (g1.out_size, g1.flip_p, g1.scale_range) == (256, 0.0, (1.0, 1.0))
    assert (g2.scale_range, g2.flip_p, g2.rot_degrees) == ((0.75, 1.0), 0.5, 15.0)
    assert (g2.autocontrast_p, g2.equalize_p, g2.blur_p) == (0.3, 0.3, 0.3)
    assert (loc.out_size, loc.scale_range) == (128, (0.2, 0.6))
    assert (loc.autocontrast_p, loc.equalize_p, loc.blur_p) == (0.5, 0.5, 0.5)


def test_autocontrast_stretches():
    img = np.array([[50, 100], [150, 150]], np.uint8)
    assert autocontrast(img).min() == 0 and autocontrast(img).max() == 255
    flat = np.full((3, 3), 7, np.uint8)
    assert np.array_equal(autocontrast(flat), flat)


def test_collate_groups_views(image, rng):
    batches = [make_views(image, rng) for _ in range(3)]
    views = collate(batches)
    assert len(views) == 10 and views[0].shape == (3, 3, 256, 256) and views[-1].shape == (3, 3, 128, 128)


def test_mismatched_globals_rejected():
    g1, g2, loc = default_specs()
    with pytest.raises(ValueError):
        MultiCrop(g1, CropSpec(CropKind.GLOBAL_AUG, 128), loc)

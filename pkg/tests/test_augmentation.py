import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from obow.augmentation import (
    CropGeometry,
    PhotometricConfig,
    collate_views,
    make_views,
    photometric_aug,
    sample_rect,
)


def _image(h=300, w=340, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def test_full_configuration_sizes():
    b = make_views(_image(), CropGeometry(), rng=0, photometric=PhotometricConfig())
    assert len(b) == 8
    assert b.teacher_view.shape == (3, 224, 224)
    assert [v.shape for v in b.primary_views] == [(3, 160, 160)] * 2
    assert [v.shape for v in b.patch_views] == [(3, 96, 96)] * 5
    assert [p.kind for p in b.provenance] == ["teacher"] + ["primary"] * 2 + ["patch"] * 5


def test_desk_scale_sizes():
    geo = CropGeometry(scale_factor=0.25)
    assert geo.sizes == {"base": 64, "teacher": 56, "primary": 40, "patch": 24}
    b = make_views(_image(64, 64), geo, rng=1)
    assert b.teacher_view.shape[-1] == 56 and b.primary_views[0].shape[-1] == 40 and b.patch_views[0].shape[-1] == 24


def test_vanilla_configuration():
    b = make_views(_image(), CropGeometry.vanilla(), rng=0)
    assert len(b) == 2 and len(b.primary_views) == 1 and not b.patch_views


def test_patch_grid_arithmetic():
    geo = CropGeometry()
    assert geo.patch_corners() == [0, 80, 160]
    assert (256 - 96) / 2 == 80
    assert 96 ** 2 / 256 ** 2 == pytest.approx(0.1406, abs=1e-4)
    assert CropGeometry(scale_factor=0.25).patch_corners() == [0, 20, 40]


def test_geometry_validation():
    with pytest.raises(ValueError):
        CropGeometry(patches_drawn=10)
    with pytest.raises(ValueError):
        CropGeometry(primary_area=(0.1, 0.7))
    with pytest.raises(ValueError):
        make_views(_image(20, 20), CropGeometry(scale_factor=0.25), rng=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(64, 120), st.integers(64, 120))
def test_primary_area_cap(seed, h, w):
    b = make_views(_image(h, w, seed % 7), CropGeometry(scale_factor=0.25), rng=seed)
    for p in b.provenance:
        if p.kind == "primary":
            assert p.rect[2] * p.rect[3] <= 0.60 * h * w


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(1, 200), st.floats(0.01, 0.6), st.integers(0, 10_000))
def test_sample_rect_bounds(h, w, hi, seed):
    top, left, rh, rw = sample_rect(h, w, (min(0.01, hi), hi), (3 / 4, 4 / 3), np.random.default_rng(seed))
    assert 0 <= top and 0 <= left and top + rh <= h and left + rw <= w
    assert rh * rw <= hi * h * w or rh * rw == 1


def test_fixed_seed_bit_identical():
    img = _image()
    a = make_views(img, CropGeometry(), rng=42, photometric=PhotometricConfig())
    b = make_views(img, CropGeometry(), rng=42, photometric=PhotometricConfig())
    assert torch.equal(a.teacher_view, b.teacher_view)
    assert all(torch.equal(x, y) for x, y in zip(a.student_views, b.student_views))
    assert a.provenance == b.provenance


def test_teacher_only_flipped():
    img = _image(64, 64)
    geo = CropGeometry(scale_factor=0.25)
    for seed in range(20):
        b = make_views(img, geo, rng=seed, photometric=PhotometricConfig(jitter_prob=1.0, grayscale_prob=1.0, blur_prob=1.0))
        t = b.provenance[0]
        assert t.kind == "teacher" and t.photometric == ()
        center = torch.from_numpy(img.transpose(2, 0, 1)).float()[:, 4:60, 4:60] / 255.0
        expected = center.flip(-1) if t.flipped else center
        assert torch.equal(b.teacher_view, expected)


def test_photometric_disabled_is_identity():
    v = torch.rand(3, 24, 24)
    assert torch.equal(photometric_aug(v, 0, PhotometricConfig.disabled()), v)


def test_grayscale_equalizes_channels():
    cfg = PhotometricConfig(jitter_prob=0.0, grayscale_prob=1.0, blur_prob=0.0, flip_prob=0.0)
    out = photometric_aug(torch.rand(3, 16, 16), 3, cfg)
    assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])


def test_photometric_deterministic_and_in_range():
    v = torch.rand(3, 32, 32)
    a = photometric_aug(v, 9, PhotometricConfig())
    b = photometric_aug(v, 9, PhotometricConfig())
    assert torch.equal(a, b)
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0


def test_collate():
    geo = CropGeometry(scale_factor=0.25)
    bundles = [make_views(_image(64, 64, s), geo, rng=s) for s in range(3)]
    batch = collate_views(bundles)
    assert batch["teacher"].shape == (3, 3, 56, 56)
    assert len(batch["primary"]) == 2 and batch["primary"][0].shape == (3, 3, 40, 40)
    assert batch["patches"].shape == (3, 5, 3, 24, 24)
    assert collate_views([make_views(_image(64, 64), CropGeometry.vanilla(scale_factor=0.25), rng=0)])["patches"] is None

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vithash.augmentation import AugmentConfig, base_transform, make_mask, mix_augment, schedule_at
from vithash.backbone import ConfigError


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def images(b=4, size=16, seed=0):
    return torch.rand(b, 3, size, size, generator=gen(seed))


def test_schedule_ramp():
    cfg = AugmentConfig()
    assert schedule_at(0, 10, cfg) == (0.0, 0.0)
    assert schedule_at(5, 10, cfg) == (0.25, 0.25)
    assert schedule_at(10, 10, cfg) == (0.5, 0.5)
    assert schedule_at(20, 10, cfg) == (0.5, 0.5)


def test_mask_is_binary_patchwise():
    m = make_mask(16, 16, 0.5, 4, gen())
    assert set(m.unique().tolist()) <= {0.0, 1.0}
    cells = m.reshape(4, 4, 4, 4).permute(0, 2, 1, 3).reshape(16, 16)
    assert (cells.min(1).values == cells.max(1).values).all()


def test_mask_mean_near_p():
    g = gen(1)
    # one 2x2 cell grid per trial
    mean = torch.stack([make_mask(32, 32, 0.5, 16, g) for _ in range(10_000)]).mean().item()
    assert abs(mean - 0.5) < 0.02


@pytest.mark.parametrize("p,value", [(0.0, 0.0), (1.0, 1.0)])
def test_mask_extremes(p, value):
    assert (make_mask(8, 8, p, 2, gen()) == value).all()


def test_mask_bad_patch():
    with pytest.raises(ConfigError):
        make_mask(10, 10, 0.5, 4)


def test_batch_doubles_and_labels_repeat():
    x = images()
    labels = torch.tensor([0, 1, 2, 3])
    out = mix_augment(x, labels, 0.5, 0.5, AugmentConfig(), gen(), patch_size=4)
    assert out.images.shape == (8, 3, 16, 16)
    assert out.labels.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
    assert torch.equal(out.images[:4], x)


@pytest.mark.parametrize("lam,p", [(0.0, 0.7), (0.6, 0.0)])
def test_identity_endpoints(lam, p):
    x = images()
    out = mix_augment(x, torch.arange(4), lam, p, AugmentConfig(), gen(), patch_size=4)
    assert torch.equal(out.images[4:], x)


def test_full_mix_without_transforms_is_partner():
    x = images()
    cfg = AugmentConfig(transforms=[])
    out = mix_augment(x, torch.arange(4), 1.0, 1.0, cfg, gen(), patch_size=4)
    assert torch.equal(out.images[4:], x.flip(0))


def test_single_image_batch_skipped(caplog):
    x = images(b=1)
    out = mix_augment(x, torch.tensor([0]), 0.5, 0.5, AugmentConfig(), gen(), patch_size=4)
    assert torch.equal(out.images, x) and "too small" in caplog.text


def test_empty_transform_list_is_identity():
    x = images(b=1)[0]
    assert torch.equal(base_transform(x, AugmentConfig(transforms=[]), gen()), x)


def test_rot90_matches_rotation_map():
    cfg = AugmentConfig(transforms=["rotate90"])
    x = torch.arange(3 * 4 * 4, dtype=torch.float32).reshape(3, 4, 4)
    seen = set()
    for seed in range(20):
        out = base_transform(x, cfg, gen(seed))
        k = next(k for k in range(4) if torch.equal(out, torch.rot90(x, k, dims=(1, 2))))
        seen.add(k)
        # counter-clockwise quarter turn: out[c, i, j] = x[c, j, W-1-i] for k=1
        if k == 1:
            assert all(out[c, i, j] == x[c, j, 3 - i] for c in range(3) for i in range(4) for j in range(4))
    assert seen == {0, 1, 2, 3}


def test_rot90_is_pixel_permutation():
    cfg = AugmentConfig(transforms=["rotate90"])
    x = images(b=1)[0]
    for seed in range(8):
        out = base_transform(x, cfg, gen(seed))
        assert torch.equal(out.flatten().sort().values, x.flatten().sort().values)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
def test_output_stays_in_unit_range(seed, lam, p):
    cfg = AugmentConfig(transforms=["crop", "rotate90", "rotate", "color"])
    out = mix_augment(images(seed=seed), torch.arange(4), lam, p, cfg, gen(seed), patch_size=4)
    assert out.images.min() >= 0 and out.images.max() <= 1


def test_deterministic_with_seed():
    a = mix_augment(images(), torch.arange(4), 0.5, 0.5, AugmentConfig(), gen(3), patch_size=4)
    b = mix_augment(images(), torch.arange(4), 0.5, 0.5, AugmentConfig(), gen(3), patch_size=4)
    assert torch.equal(a.images, b.images)


@pytest.mark.parametrize("kw", [dict(transforms=["blur"]), dict(lambda_max=1.5), dict(crop_scale=(0.9, 0.5))])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        AugmentConfig(**kw)

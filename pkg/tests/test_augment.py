import numpy as np
import pytest

from dsfuse.synth import PhantomConfig, generate_case
from dsfuse.training.augment import AugmentConfig, augment, sample_coordinates

CFG = PhantomConfig(dims=(16, 24, 24), lesion_count=(2, 3), lesion_radius=(2.5, 4.0))


@pytest.fixture(scope="module")
def case():
    return generate_case(CFG, 3)


def test_identity_returns_input(case):
    out = augment(case, 0, AugmentConfig.identity())
    assert out.vol_a == case.vol_a and out.vol_b == case.vol_b and out.mask == case.mask


def test_disabled_toggles_are_identity(case):
    out = augment(case, 5, AugmentConfig(affine=False, elastic=False))
    assert out.vol_a == case.vol_a


def test_identity_coordinates_are_the_grid():
    coords = sample_coordinates((4, 5, 6), AugmentConfig.identity(), np.random.default_rng(0))
    np.testing.assert_allclose(coords, np.indices((4, 5, 6)), atol=1e-12)


def test_mask_stays_binary(case):
    for seed in range(4):
        out = augment(case, seed)
        assert set(np.unique(out.mask.data)) <= {0.0, 1.0}
        assert out.mask.data.any()


def test_seed_reproduces(case):
    a, b = augment(case, 11), augment(case, 11)
    assert a.vol_a == b.vol_a and a.vol_b == b.vol_b and a.mask == b.mask
    assert augment(case, 12).vol_a != a.vol_a


def test_same_transform_for_all_volumes(case):
    # warping the mask as an image (order 0) must agree with the mask output
    out = augment(case, 2)
    img = case.vol_a.with_data(case.mask.data)
    warped = augment(type(case)(img, case.vol_b, case.mask), 2).vol_a.data
    inside = out.mask.data > 0
    assert warped[inside].mean() > 0.8
    assert warped[~inside].mean() < 0.1


def test_affine_bounds():
    cfg = AugmentConfig(elastic=False)
    dims = (16, 24, 24)
    grid = np.indices(dims).astype(float)
    centre = (np.array(dims) - 1) / 2
    for seed in range(10):
        coords = sample_coordinates(dims, cfg, np.random.default_rng(seed))
        # the centre moves by the translation only, bounded by 5% of each dim / scale
        c = coords[(slice(None),) + tuple(int(round(x)) for x in centre)]
        g = grid[(slice(None),) + tuple(int(round(x)) for x in centre)]
        shift = np.abs(c - g)
        assert np.all(shift <= 0.05 * np.array(dims) + 1.0)


def test_elastic_amplitude_bound():
    cfg = AugmentConfig(affine=False, elastic_amplitude=1.5)
    dims = (12, 12, 12)
    coords = sample_coordinates(dims, cfg, np.random.default_rng(0))
    disp = coords - np.indices(dims)
    assert np.abs(disp).max() <= 1.5 + 1e-12
    assert np.abs(disp).max() > 1.0

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdseg.eed import (
    DiffusionField,
    EedParams,
    build_diffusion_tensor,
    diffuse_step,
    diffusivity,
    eed_filter,
    eigen2x2,
    gaussian_smooth,
    heat_step,
    structure_tensor,
)


def two_region_phantom(seed=7, size=64):
    rng = np.random.default_rng(seed)
    clean = np.where(np.arange(size)[None, :] < size // 2, 0.3, 0.7) * np.ones((size, 1))
    return clean, clean + 0.05 * rng.standard_normal((size, size))


class TestParams:
    @pytest.mark.parametrize(
        "kw", [dict(sigma=-1), dict(rho=-0.1), dict(lam=0.0), dict(tau=0.0), dict(tau=0.25), dict(steps=-1)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EedParams(**kw)

    def test_auto_lambda_is_five_percent_of_range(self):
        assert EedParams().resolve_lambda(np.array([[0.2, 1.2]])) == pytest.approx(0.05)


class TestGaussianSmooth:
    def test_constant(self):
        img = np.full((9, 7), 3.25)
        np.testing.assert_allclose(gaussian_smooth(img, 1.5), img, rtol=0, atol=1e-14)

    def test_zero_scale_identity(self):
        img = np.random.default_rng(0).random((5, 5))
        np.testing.assert_array_equal(gaussian_smooth(img, 0), img)

    def test_impulse_is_sampled_gaussian(self):
        img = np.zeros((31, 31))
        img[15, 15] = 1
        out = gaussian_smooth(img, 2.0)
        assert abs(out.sum() - 1) < 1e-6
        # independent 2D sampling of exp(-(x^2+y^2)/(2 s^2)) on the truncated support
        r = math.ceil(3 * 2.0)
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        g2 = np.exp(-(xx**2 + yy**2) / 8.0)
        g2 /= g2.sum()
        np.testing.assert_allclose(out[15 - r:16 + r, 15 - r:16 + r], g2, atol=1e-15)
        assert out[: 15 - r].sum() == 0


class TestStructureTensor:
    def test_ramp(self):
        img = np.tile(np.arange(40, dtype=float), (40, 1))
        j11, j12, j22 = structure_tensor(img, 1.0, 2.0)
        inner = (slice(12, -12), slice(12, -12))
        np.testing.assert_allclose(j11[inner], 1.0, atol=1e-12)
        np.testing.assert_allclose(j12[inner], 0.0, atol=1e-12)
        np.testing.assert_allclose(j22[inner], 0.0, atol=1e-12)

    def test_constant_is_zero(self):
        j = structure_tensor(np.full((10, 12), 0.4), 1.0, 2.0)
        for comp in j:
            np.testing.assert_allclose(comp, 0.0, atol=1e-15)

    def test_rotation_swaps_components(self):
        img = np.random.default_rng(3).random((24, 24))
        j11, j12, j22 = structure_tensor(img, 1.0, 2.0)
        r11, r12, r22 = structure_tensor(np.rot90(img), 1.0, 2.0)
        np.testing.assert_allclose(r11, np.rot90(j22), atol=1e-12)
        np.testing.assert_allclose(r22, np.rot90(j11), atol=1e-12)
        np.testing.assert_allclose(r12, -np.rot90(j12), atol=1e-12)

    def test_psd(self):
        j11, j12, j22 = structure_tensor(np.random.default_rng(4).random((20, 20)), 1.0, 2.0)
        assert np.all(j11 >= 0) and np.all(j22 >= 0)
        assert np.all(j11 * j22 - j12 * j12 >= -1e-15)


class TestEigen2x2:
    def test_diagonal(self):
        mu1, mu2, v1, _ = eigen2x2(2.0, 0.0, 1.0)
        assert (mu1, mu2) == (2.0, 1.0)
        assert (float(v1[0]), float(v1[1])) == (1.0, 0.0)

    def test_off_diagonal(self):
        mu1, mu2, v1, _ = eigen2x2(0.0, 1.0, 0.0)
        assert (mu1, mu2) == (1.0, -1.0)
        assert abs(abs(float(v1[0])) - 1 / math.sqrt(2)) < 1e-15
        assert float(v1[0]) * float(v1[1]) > 0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
    def test_reconstruction(self, a, b, c):
        mu1, mu2, (x1, y1), (x2, y2) = eigen2x2(a, b, c)
        assert mu1 >= mu2
        rec = mu1 * np.outer([x1, y1], [x1, y1]) + mu2 * np.outer([x2, y2], [x2, y2])
        scale = max(1.0, abs(a), abs(b), abs(c))
        np.testing.assert_allclose(rec, [[a, b], [b, c]], atol=1e-10 * scale)
        assert abs(x1 * x2 + y1 * y2) < 1e-12
        assert abs(math.hypot(x1, y1) - 1) < 1e-12


class TestDiffusionTensor:
    def test_zero_structure_gives_identity(self):
        z = np.zeros((4, 4))
        d = build_diffusion_tensor(z, z, z, lam=0.1)
        np.testing.assert_array_equal(d.d11, 1)
        np.testing.assert_array_equal(d.d12, 0)
        np.testing.assert_array_equal(d.d22, 1)

    def test_strong_edge_halts_diffusion(self):
        lam = 0.2
        assert diffusivity(np.array(100 * lam**2), lam) < 1e-6
        d = build_diffusion_tensor(np.array([100 * lam**2]), np.array([0.0]), np.array([0.0]), lam)
        mu1, mu2 = d.eigenvalues()
        assert mu1[0] == pytest.approx(1.0) and mu2[0] < 1e-6

    def test_random_fields_are_valid(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            j11, j12, j22 = structure_tensor(rng.random((32, 32)), 1.0, 2.0)
            d = build_diffusion_tensor(j11, j12, j22, lam=rng.uniform(1e-3, 1.0))
            mu1, mu2 = d.eigenvalues()
            assert np.all(mu2 > 0) and np.all(mu1 <= 1 + 1e-12)

    def test_extreme_contrast_stays_positive(self):
        d = build_diffusion_tensor(np.array([1e30]), np.array([0.0]), np.array([0.0]), lam=1e-3)
        assert d.eigenvalues()[1][0] > 0


class TestDiffuseStep:
    def test_constant_fixed_point(self):
        rng = np.random.default_rng(6)
        img = np.full((12, 10), 0.37)
        field = DiffusionField(rng.random((12, 10)), rng.random((12, 10)) * 0.1, rng.random((12, 10)))
        np.testing.assert_array_equal(diffuse_step(img, field, 0.2), img)

    def test_hot_pixel_identity_tensor(self):
        img = np.zeros((7, 7))
        img[3, 3] = 1
        ones, zeros = np.ones((7, 7)), np.zeros((7, 7))
        out = diffuse_step(img, DiffusionField(ones, zeros, ones), 0.1)
        # explicit 5-point stencil: centre 1 - 4*tau, neighbours tau
        assert out[3, 3] == pytest.approx(0.6)
        for r, c in ((2, 3), (4, 3), (3, 2), (3, 4)):
            assert out[r, c] == pytest.approx(0.1)

    def test_mean_preserved(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            img = rng.random((20, 17)) + 0.5
            j = structure_tensor(img, 1.0, 2.0)
            out = diffuse_step(img, build_diffusion_tensor(*j, lam=0.05), 0.2)
            assert abs(out.mean() - img.mean()) / abs(img.mean()) < 1e-12


class TestFilter:
    def test_zero_steps(self):
        img = np.random.default_rng(9).random((8, 8))
        np.testing.assert_array_equal(eed_filter(img, EedParams(steps=0)), img)

    def test_constant_image(self):
        img = np.full((16, 16), 0.8)
        np.testing.assert_array_equal(eed_filter(img, EedParams(steps=10)), img)

    def test_two_region_homogenization(self):
        clean, noisy = two_region_phantom()
        out = eed_filter(noisy, EedParams(steps=30))
        left = clean == 0.3
        assert out[left].std() < noisy[left].std()
        assert out[~left].std() < noisy[~left].std()
        gap_in = noisy[~left].mean() - noisy[left].mean()
        gap_out = out[~left].mean() - out[left].mean()
        assert gap_out > 0.8 * gap_in

    def test_large_lambda_is_heat_equation(self):
        img = np.random.default_rng(10).random((32, 32))
        p = EedParams(lam=1e12, tau=0.2, steps=15)
        ref = img.copy()
        for _ in range(p.steps):
            ref = heat_step(ref, p.tau)
        np.testing.assert_allclose(eed_filter(img, p), ref, atol=1e-6)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.5, 3.0), st.floats(0.05, 0.2))
    def test_extremum_and_mean(self, seed, rho, tau):
        img = np.random.default_rng(seed).random((24, 24)) + 0.1
        out = eed_filter(img, EedParams(rho=rho, tau=tau, steps=8))
        assert out.min() >= img.min() - 1e-6 and out.max() <= img.max() + 1e-6
        assert abs(out.mean() - img.mean()) / img.mean() < 1e-5

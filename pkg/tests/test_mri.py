import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irim import mri


def dft_matrix_centered(n):
    """Centered unitary DFT matrix: rows/cols indexed by k - n//2, j - n//2."""
    idx = np.arange(n) - n // 2
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)


def dft2c_oracle(x):
    """Direct double-sum transform, independent of numpy.fft."""
    h, w = x.shape
    return dft_matrix_centered(h) @ x @ dft_matrix_centered(w).T


def cplx(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


class TestFFT:
    def test_zero(self):
        np.testing.assert_array_equal(mri.fft2c(np.zeros((4, 4), complex)), 0)

    def test_constant_goes_to_center(self):
        out = mri.fft2c(np.ones((4, 4), complex))
        expected = np.zeros((4, 4), complex)
        expected[2, 2] = 4
        np.testing.assert_allclose(out, expected, atol=1e-15)
        np.testing.assert_allclose(dft2c_oracle(np.ones((4, 4))), expected, atol=1e-14)

    @pytest.mark.parametrize("shape", [(4, 4), (8, 8), (5, 7), (16, 17), (23, 16)])
    def test_matches_direct_dft(self, shape):
        x = cplx(np.random.default_rng(0), shape)
        np.testing.assert_allclose(mri.fft2c(x), dft2c_oracle(x), atol=1e-12)

    def test_inverse_of_center_delta(self):
        k = np.zeros((4, 4), complex)
        k[2, 2] = 4
        np.testing.assert_allclose(mri.ifft2c(k), np.ones((4, 4)), atol=1e-15)

    @pytest.mark.parametrize("h", [4, 8, 16, 17])
    @pytest.mark.parametrize("w", [4, 8, 16, 17])
    def test_unitary(self, h, w):
        x = cplx(np.random.default_rng(h * 100 + w), (h, w))
        ratio = np.linalg.norm(mri.fft2c(x)) / np.linalg.norm(x)
        assert abs(ratio - 1) < 1e-12

    def test_round_trip(self):
        x = cplx(np.random.default_rng(1), (16, 16))
        assert np.max(np.abs(mri.ifft2c(mri.fft2c(x)) - x)) < 1e-12

    def test_adjoint(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x, y = cplx(rng, (8, 8)), cplx(rng, (8, 8))
            lhs = np.vdot(y, mri.fft2c(x))
            rhs = np.vdot(mri.ifft2c(y), x)
            assert abs(lhs - rhs) / abs(lhs) < 1e-12

    def test_non_power_of_two_size(self):
        x = cplx(np.random.default_rng(3), (368, 368))
        assert np.max(np.abs(mri.ifft2c(mri.fft2c(x)) - x)) < 1e-12


class TestMask:
    @pytest.mark.parametrize("accel,center", [(4, 29), (8, 15)])
    def test_center_columns(self, accel, center):
        mask = mri.make_mask(368, accel, seed=5)
        assert mask.num_center == center
        pad = (368 - center + 1) // 2
        assert mask.kept[pad : pad + center].all()
        # band is centered on the DC column
        assert pad <= 368 // 2 < pad + center

    @pytest.mark.parametrize("accel", [4, 8])
    def test_monte_carlo_fraction(self, accel):
        fracs = [mri.make_mask(368, accel, s).kept.mean() for s in range(1000)]
        assert abs(np.mean(fracs) - 1 / accel) < 0.1 / accel

    def test_deterministic(self):
        a = mri.make_mask(368, 4, 11).kept
        b = mri.make_mask(368, 4, 11).kept
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, mri.make_mask(368, 4, 12).kept)

    def test_rejects_small_width(self):
        with pytest.raises(ValueError):
            mri.make_mask(4, 4, 0)

    def test_rejects_infeasible_probability(self):
        with pytest.raises(ValueError, match="too small"):
            mri.make_mask(16, 8, 0, center_fraction=0.5)


class TestOperator:
    def test_zero(self):
        mask = mri.make_mask(16, 4, 0)
        z = np.zeros((2, 16, 16), complex)
        np.testing.assert_array_equal(mri.forward_op(z, mask), 0)
        np.testing.assert_array_equal(mri.adjoint_op(z, mask), 0)

    def test_full_mask_is_fft(self):
        x = cplx(np.random.default_rng(0), (1, 8, 8))
        full = np.ones(8, bool)
        np.testing.assert_array_equal(mri.forward_op(x, full), mri.fft2c(x))

    def test_masked_columns_exactly_zero(self):
        mask = mri.make_mask(32, 4, 3)
        d = mri.forward_op(cplx(np.random.default_rng(0), (3, 32, 32)), mask)
        assert np.all(d[..., ~mask.kept] == 0)

    @pytest.mark.parametrize("k", [1, 3, 15])
    def test_dot_product(self, k):
        rng = np.random.default_rng(k)
        for trial in range(20):
            mask = mri.make_mask(16, 4, trial)
            x, y = cplx(rng, (k, 16, 16)), cplx(rng, (k, 16, 16))
            lhs = np.vdot(y, mri.forward_op(x, mask))
            rhs = np.vdot(mri.adjoint_op(y, mask), x)
            assert abs(lhs - rhs) / abs(lhs) < 1e-10

    def test_projection(self):
        mask = mri.make_mask(16, 4, 1)
        d = cplx(np.random.default_rng(0), (2, 16, 16))
        out = mri.forward_op(mri.adjoint_op(d, mask), mask)
        np.testing.assert_allclose(out, d * mask.kept, atol=1e-14)

    def test_batched_masks(self):
        rng = np.random.default_rng(0)
        masks = np.stack([mri.make_mask(16, 4, s).kept for s in range(3)])
        x = cplx(rng, (3, 2, 16, 16))
        out = mri.forward_op(x, masks)
        for i in range(3):
            np.testing.assert_array_equal(out[i], mri.forward_op(x[i], masks[i]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="width"):
            mri.forward_op(np.zeros((1, 8, 8), complex), np.ones(16, bool))

    @settings(max_examples=25, deadline=None)
    @given(st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False),
           st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False),
           st.integers(0, 1000))
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        mask = mri.make_mask(8, 4, seed)
        x, y = cplx(rng, (2, 8, 8)), cplx(rng, (2, 8, 8))
        lhs = mri.forward_op(a * x + b * y, mask)
        rhs = a * mri.forward_op(x, mask) + b * mri.forward_op(y, mask)
        scale = max(1.0, abs(a), abs(b))
        assert np.max(np.abs(lhs - rhs)) < 1e-12 * scale * 10


class TestDataConsistency:
    def test_zero_at_consistent_estimate(self):
        mask = np.ones(8, bool)
        p = cplx(np.random.default_rng(0), (2, 8, 8))
        d = mri.forward_op(p, mask)
        assert np.max(np.abs(mri.dc_gradient(d, mask, p))) < 1e-14

    def test_zero_estimate(self):
        mask = mri.make_mask(16, 4, 0)
        d = mri.forward_op(cplx(np.random.default_rng(0), (1, 16, 16)), mask)
        np.testing.assert_allclose(
            mri.dc_gradient(d, mask, np.zeros_like(d)), -mri.zero_filled(d, mask), atol=1e-15
        )

    def test_finite_differences(self):
        rng = np.random.default_rng(4)
        mask = mri.make_mask(8, 4, 2)
        d = cplx(rng, (2, 8, 8))
        p = cplx(rng, (2, 8, 8))

        def objective(q):
            r = mri.forward_op(q, mask) - d
            return 0.5 * np.sum(np.abs(r) ** 2)

        g = mri.dc_gradient(d, mask, p)
        # objective is quadratic, so central differences are exact up to rounding
        h = 1e-3
        for _ in range(20):
            idx = tuple(rng.integers(s) for s in p.shape)
            for unit, part in ((1.0, g.real), (1j, g.imag)):
                e = np.zeros_like(p)
                e[idx] = unit * h
                fd = (objective(p + e) - objective(p - e)) / (2 * h)
                assert abs(fd - part[idx]) / max(abs(fd), 1e-12) < 1e-6


class TestZeroFilled:
    def test_full_mask_recovers(self):
        p = cplx(np.random.default_rng(0), (1, 8, 8))
        full = np.ones(8, bool)
        assert np.max(np.abs(mri.zero_filled(mri.forward_op(p, full), full) - p)) < 1e-14

    def test_zero(self):
        np.testing.assert_array_equal(mri.zero_filled(np.zeros((1, 8, 8), complex), np.ones(8, bool)), 0)

    def test_explicit_composition(self):
        rng = np.random.default_rng(0)
        mask = mri.make_mask(16, 4, 0)
        d = cplx(rng, (2, 16, 16))
        forced = d.copy()
        forced[..., ~mask.kept] = 0
        np.testing.assert_allclose(mri.zero_filled(d, mask), mri.ifft2c(forced), atol=1e-15)


class TestCropPad:
    def test_identity(self):
        x = cplx(np.random.default_rng(0), (368, 368))
        np.testing.assert_array_equal(mri.center_crop_or_pad(x, 368, 368), x)

    def test_crop_then_pad_zeroes_ring(self):
        x = np.arange(36.0).reshape(6, 6) + 1
        back = mri.center_crop_or_pad(mri.center_crop_or_pad(x, 4, 4), 6, 6)
        expected = np.zeros((6, 6))
        expected[1:5, 1:5] = x[1:5, 1:5]
        np.testing.assert_array_equal(back, expected)

    def test_pad_position(self):
        x = np.ones((3, 3))
        out = mri.center_crop_or_pad(x, 5, 5)
        assert out.shape == (5, 5)
        np.testing.assert_array_equal(out[1:4, 1:4], 1)
        assert out.sum() == 9

    def test_odd_padding_goes_high(self):
        # rows: pad 3 -> 1 above, 2 below; cols: pad 1 -> 0 left, 1 right
        out = mri.center_crop_or_pad(np.ones((2, 2)), 5, 3)
        assert out.shape == (5, 3)
        np.testing.assert_array_equal(np.nonzero(out.sum(axis=1))[0], [1, 2])
        np.testing.assert_array_equal(np.nonzero(out.sum(axis=0))[0], [0, 1])

    def test_independent_axes(self):
        out = mri.center_crop_or_pad(np.ones((1, 10, 4)), 6, 8)
        assert out.shape == (1, 6, 8)
        np.testing.assert_array_equal(out[0, :, 2:6], 1)


class TestMeta:
    def test_indices_injective(self):
        idx = {
            mri.AcquisitionMeta(f, fs).one_hot_index
            for f in mri.FieldStrength
            for fs in (False, True)
        }
        assert idx == {0, 1, 2, 3}

    def test_round_trip(self):
        for i in range(4):
            assert mri.AcquisitionMeta.from_index(i).one_hot_index == i

    def test_reserved(self):
        with pytest.raises(ValueError):
            mri.AcquisitionMeta.from_index(5)

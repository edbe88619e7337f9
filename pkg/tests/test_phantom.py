import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irim import phantom
from irim.mri import AcquisitionMeta, FieldStrength, fft2c, ifft2c


class TestPhantom:
    def test_deterministic(self):
        assert phantom.make_phantom(64, 3).tobytes() == phantom.make_phantom(64, 3).tobytes()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**40))
    def test_magnitude_in_unit_interval(self, seed):
        mag = np.abs(phantom.make_phantom(32, seed))
        assert mag.min() >= 0 and mag.max() <= 1 + 1e-15

    def test_phase_bounded(self):
        z = phantom.make_phantom(64, 1)
        inside = np.abs(z) > 0
        assert np.all(np.abs(np.angle(z[inside])) <= np.pi)

    def test_distinct_seeds_differ(self):
        for s in range(20):
            a, b = phantom.make_phantom(64, s), phantom.make_phantom(64, s + 1000)
            assert np.mean(a != b) >= 0.01

    def test_too_small(self):
        with pytest.raises(ValueError):
            phantom.make_phantom(8, 0)


class TestCoils:
    def test_single_coil_unit_magnitude(self):
        c = phantom.make_coils(32, 1, 0)
        np.testing.assert_allclose(np.abs(c), 1, atol=1e-12)

    @pytest.mark.parametrize("k", [2, 4, 8, 15])
    def test_rss_normalized(self, k):
        c = phantom.make_coils(48, k, k)
        assert np.max(np.abs(phantom.rss(c) - 1)) < 1e-12

    def test_ring_coverage(self):
        for seed in range(10):
            c = phantom.make_coils(64, 15, seed)
            assert np.abs(c).max(axis=0).min() > 0.1

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            phantom.make_coils(16, 0, 0)


class TestRss:
    def test_single_coil(self):
        z = np.array([[[3 - 4j, 1j]]])
        np.testing.assert_allclose(phantom.rss(z), [[5, 1]])

    def test_pythagorean(self):
        z = np.array([[[3 + 0j]], [[4j]]])
        assert phantom.rss(z)[0, 0] == 5

    def test_dominates_each_coil(self):
        z = np.random.default_rng(0).standard_normal((4, 8, 8)) * 1j
        assert np.all(phantom.rss(z) >= np.abs(z).max(axis=0))


META = AcquisitionMeta(FieldStrength.T3, True, 1)


class TestSimulate:
    def test_noise_free_single_coil(self):
        p = phantom.make_phantom(32, 0)
        rec = phantom.simulate_record(p, np.ones((1, 32, 32), complex), 0.0, META, 0)
        assert np.max(np.abs(ifft2c(rec.kdata)[0] - p)) < 1e-14
        assert rec.target().tobytes() == np.abs(p).tobytes()

    def test_rss_target_is_phantom_magnitude(self):
        p = phantom.make_phantom(32, 1)
        rec = phantom.simulate_record(p, phantom.make_coils(32, 6, 1), 0.0, META, 0)
        assert np.max(np.abs(rec.target_rss - np.abs(p))) < 1e-12
        # noise-free: the target is also the RSS of the coil images
        assert np.max(np.abs(phantom.rss(ifft2c(rec.kdata)) - rec.target_rss)) < 1e-12
        assert rec.meta.coil_count == 6

    def test_noise_energy(self):
        sigma, k, n = 0.05, 2, 16
        p = phantom.make_phantom(n, 2)
        coils = phantom.make_coils(n, k, 2)
        clean = fft2c(coils * p)
        energies = [
            np.sum(np.abs(phantom.simulate_record(p, coils, sigma, META, s).kdata - clean) ** 2)
            for s in range(100)
        ]
        expected = 2 * sigma**2 * k * n * n
        assert abs(np.mean(energies) / expected - 1) < 0.05

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            phantom.simulate_record(np.zeros((16, 16)), np.ones((1, 8, 8)), 0.0, META, 0)

    def test_dataset_items_independent_of_count(self):
        a = phantom.make_dataset(2, 32, 2, 0.01, 7)
        b = phantom.make_dataset(4, 32, 2, 0.01, 7)
        for ra, rb in zip(a, b):
            assert ra.kdata.tobytes() == rb.kdata.tobytes()
            assert ra.meta == rb.meta

    def test_multi_coil_target_is_rss(self):
        rec = phantom.make_dataset(1, 32, 3, 0.0, 0)[0]
        assert rec.target() is rec.target_rss


class TestContainer:
    def records(self):
        return phantom.make_dataset(3, 16, 2, 0.01, 0)

    def test_round_trip(self, tmp_path):
        recs = self.records()
        phantom.write_dataset(recs, tmp_path / "a.irim")
        back = phantom.read_dataset(tmp_path / "a.irim")
        assert len(back) == 3
        for r, b in zip(recs, back):
            assert b.kdata.astype(np.complex64).tobytes() == r.kdata.astype(np.complex64).tobytes()
            assert b.target_rss.astype(np.float32).tobytes() == r.target_rss.astype(np.float32).tobytes()
            assert b.meta == r.meta
        # stored values survive a second round trip unchanged
        phantom.write_dataset(back, tmp_path / "b.irim")
        assert (tmp_path / "a.irim").read_bytes() == (tmp_path / "b.irim").read_bytes()
        again = phantom.read_dataset(tmp_path / "b.irim")
        assert all(x.kdata.tobytes() == y.kdata.tobytes() for x, y in zip(back, again))

    def test_layout(self, tmp_path):
        phantom.write_dataset(self.records(), tmp_path / "a")
        raw = (tmp_path / "a").read_bytes()
        assert raw[:8] == b"IRIMDATA"
        assert struct.unpack_from("<IIIIIB", raw, 8) == (1, 3, 16, 16, 2, raw[28])
        per_record = 13 + 4 * (2 * 2 * 256 + 2 * 256) + 4
        assert len(raw) == 16 + 3 * per_record

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            phantom.write_dataset([], tmp_path / "a")

    def test_bad_magic(self, tmp_path):
        phantom.write_dataset(self.records(), tmp_path / "a")
        raw = bytearray((tmp_path / "a").read_bytes())
        raw[0] ^= 0xFF
        (tmp_path / "a").write_bytes(bytes(raw))
        with pytest.raises(phantom.BadMagicError):
            phantom.read_dataset(tmp_path / "a")

    def test_version(self, tmp_path):
        phantom.write_dataset(self.records(), tmp_path / "a")
        raw = bytearray((tmp_path / "a").read_bytes())
        raw[8] = 9
        (tmp_path / "a").write_bytes(bytes(raw))
        with pytest.raises(phantom.VersionMismatchError):
            phantom.read_dataset(tmp_path / "a")

    def test_truncated(self, tmp_path):
        phantom.write_dataset(self.records(), tmp_path / "a")
        raw = (tmp_path / "a").read_bytes()
        for cut in (10, 30, len(raw) - 1):
            (tmp_path / "a").write_bytes(raw[:cut])
            with pytest.raises(phantom.TruncatedFileError):
                phantom.read_dataset(tmp_path / "a")

    def test_checksum(self, tmp_path):
        phantom.write_dataset(self.records(), tmp_path / "a")
        raw = bytearray((tmp_path / "a").read_bytes())
        raw[100] ^= 0x01
        (tmp_path / "a").write_bytes(bytes(raw))
        with pytest.raises(phantom.ChecksumError):
            phantom.read_dataset(tmp_path / "a")

    def test_errors_are_distinct(self):
        kinds = {phantom.BadMagicError, phantom.VersionMismatchError,
                 phantom.TruncatedFileError, phantom.ChecksumError}
        assert len(kinds) == 4
        assert all(issubclass(k, phantom.DatasetError) for k in kinds)


class TestPgm:
    def test_round_trip_scaling(self, tmp_path):
        img = np.array([[0.0, 0.5], [1.0, 2.0]])
        phantom.write_pgm(img, tmp_path / "x.pgm")
        assert (tmp_path / "x.pgm").read_bytes().startswith(b"P5\n2 2\n255\n")
        np.testing.assert_array_equal(phantom.read_pgm(tmp_path / "x.pgm"), [[0, 64], [128, 255]])

    def test_constant_image(self, tmp_path):
        phantom.write_pgm(np.full((3, 4), 7.0), tmp_path / "c.pgm")
        out = phantom.read_pgm(tmp_path / "c.pgm")
        assert out.shape == (3, 4) and not out.any()

"""Synthetic multi-coil acquisitions and the IRIMDATA container.

Phantoms are sums of random ellipses (magnitude) times a smooth quadratic
phase. Coil sensitivities are Gaussian bumps on a ring, normalized so their
root-sum-of-squares is one everywhere, each with its own linear phase ramp.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _rng
from .mri import AcquisitionMeta, fft2c


def _grid(size: int):
    c = (np.arange(size) - size // 2) / (size / 2)
    return np.meshgrid(c, c, indexing="ij")


def make_phantom(size: int, seed: int) -> np.ndarray:
    """Complex ``(size, size)`` phantom with magnitude in ``[0, 1]``."""
    if size < 16:
        raise ValueError(f"phantom size must be >= 16, got {size}")
    rng = _rng.stream(seed, _rng.PHANTOM)
    yy, xx = _grid(size)
    mag = np.zeros((size, size))
    n_ellipses = int(rng.integers(5, 13))
    for i in range(n_ellipses):
        if i == 0:
            # body outline
            cy, cx = rng.uniform(-0.08, 0.08, 2)
            ay, ax = rng.uniform(0.65, 0.9, 2)
            intensity = rng.uniform(0.5, 0.9)
        else:
            cy, cx = rng.uniform(-0.5, 0.5, 2)
            ay, ax = rng.uniform(0.05, 0.35, 2)
            intensity = rng.uniform(-0.4, 0.5)
        theta = rng.uniform(0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        mag[(u / ax) ** 2 + (v / ay) ** 2 <= 1] += intensity
    mag = np.clip(mag, 0, 1)

    coef = rng.uniform(-1, 1, 6)
    phase = (coef[0] + coef[1] * xx + coef[2] * yy
             + coef[3] * xx * xx + coef[4] * xx * yy + coef[5] * yy * yy)
    peak = np.max(np.abs(phase))
    if peak > 0:
        phase = phase * (rng.uniform(0.2, 1.0) * np.pi / peak)
    return mag * np.exp(1j * phase)


def make_coils(size: int, coils: int, seed: int) -> np.ndarray:
    """Sensitivity maps ``(K, size, size)`` with pixelwise RSS equal to one."""
    if coils < 1:
        raise ValueError("need at least one coil")
    rng = _rng.stream(seed, _rng.COILS)
    yy, xx = _grid(size)
    offset = rng.uniform(0, 2 * np.pi)
    width = rng.uniform(0.5, 0.8)
    maps = np.empty((coils, size, size), dtype=complex)
    for k in range(coils):
        angle = offset + 2 * np.pi * k / coils
        cy, cx = 1.2 * np.sin(angle), 1.2 * np.cos(angle)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        ramp = rng.uniform(-1, 1, 3) * np.array([np.pi, np.pi / 2, np.pi / 2])
        maps[k] = bump * np.exp(1j * (ramp[0] + ramp[1] * xx + ramp[2] * yy))
    return maps / np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))


def rss(coil_images: np.ndarray) -> np.ndarray:
    """Root-sum-of-squares over the coil axis (third from last)."""
    return np.sqrt(np.sum(np.abs(coil_images) ** 2, axis=-3))


@dataclass
class DatasetRecord:
    kdata: np.ndarray  # (K, H, W) complex, fully sampled
    target_esc: np.ndarray  # (H, W)
    target_rss: np.ndarray  # (H, W)
    meta: AcquisitionMeta

    @property
    def coils(self) -> int:
        return self.kdata.shape[0]

    def target(self) -> np.ndarray:
        """ESC-style target in single-coil mode, RSS otherwise."""
        return self.target_esc if self.coils == 1 else self.target_rss


def simulate_record(phantom: np.ndarray, coils: np.ndarray, noise_sigma: float,
                    meta: AcquisitionMeta, seed: int) -> DatasetRecord:
    """Fully sampled noisy k-space of ``coils * phantom``.

    Noise is complex Gaussian with standard deviation ``noise_sigma`` on each
    of the real and imaginary parts. Targets come from the noiseless images.
    """
    if coils.shape[-2:] != phantom.shape:
        raise ValueError(f"coil maps {coils.shape} do not match phantom {phantom.shape}")
    clean = coils * phantom
    kdata = fft2c(clean)
    if noise_sigma > 0:
        rng = _rng.stream(seed, _rng.NOISE)
        kdata = kdata + noise_sigma * (
            rng.standard_normal(kdata.shape) + 1j * rng.standard_normal(kdata.shape)
        )
    meta = AcquisitionMeta(meta.field_strength, meta.fat_suppressed, coils.shape[0])
    return DatasetRecord(kdata, np.abs(phantom), rss(clean), meta)


def make_dataset(count: int, size: int, coils: int, noise_sigma: float,
                 seed: int) -> list[DatasetRecord]:
    """``count`` independent records; record ``i`` depends only on ``(seed, i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    records = []
    for i in range(count):
        item_seed = int(_rng.stream(seed, _rng.ITEM, i).integers(2**62))
        meta_idx = int(_rng.stream(item_seed, _rng.META).integers(4))
        meta = AcquisitionMeta.from_index(meta_idx, coils)
        records.append(simulate_record(
            make_phantom(size, item_seed), make_coils(size, coils, item_seed),
            noise_sigma, meta, item_seed,
        ))
    return records


# ---------------------------------------------------------------------------
# IRIMDATA container
# ---------------------------------------------------------------------------

DATA_MAGIC = b"IRIMDATA"
DATA_VERSION = 1


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


def _encode_record(rec: DatasetRecord) -> bytes:
    k, h, w = rec.kdata.shape
    body = struct.pack("<IIIB", h, w, k, rec.meta.one_hot_index)
    planes = np.stack([rec.kdata.real, rec.kdata.imag], axis=-1)
    body += np.ascontiguousarray(planes, dtype="<f4").tobytes()
    body += np.ascontiguousarray(rec.target_esc, dtype="<f4").tobytes()
    body += np.ascontiguousarray(rec.target_rss, dtype="<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def write_dataset(records, path) -> None:
    """Write records as IRIMDATA; samples are stored as float32.

    Layout (little endian): magic, u32 version, u32 record count; per record
    u32 H, u32 W, u32 K, u8 meta index, K*H*W*2 float32 k-space samples
    (real/imag interleaved), H*W float32 ESC target, H*W float32 RSS target,
    u32 CRC32 of the record bytes.
    """
    records = list(records)
    if not records:
        raise ValueError("refusing to write an empty dataset")
    chunks = [DATA_MAGIC, struct.pack("<II", DATA_VERSION, len(records))]
    chunks += [_encode_record(r) for r in records]
    Path(path).write_bytes(b"".join(chunks))


def read_dataset(path) -> list[DatasetRecord]:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        if buf[: len(DATA_MAGIC)] != DATA_MAGIC[: len(buf)]:
            raise BadMagicError(f"{path}: not an IRIMDATA file")
        raise TruncatedFileError(f"{path}: truncated header")
    if buf[:8] != DATA_MAGIC:
        raise BadMagicError(f"{path}: not an IRIMDATA file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != DATA_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {DATA_VERSION}")
    pos = 16
    records = []
    for i in range(count):
        if pos + 13 > len(buf):
            raise TruncatedFileError(f"{path}: record {i} header truncated")
        h, w, k, meta_idx = struct.unpack_from("<IIIB", buf, pos)
        n_bytes = 13 + 4 * (2 * k * h * w + 2 * h * w)
        if pos + n_bytes + 4 > len(buf):
            raise TruncatedFileError(f"{path}: record {i} truncated")
        body = buf[pos : pos + n_bytes]
        (crc,) = struct.unpack_from("<I", buf, pos + n_bytes)
        if zlib.crc32(body) != crc:
            raise ChecksumError(f"{path}: record {i} fails CRC32")
        floats = np.frombuffer(body, dtype="<f4", offset=13).astype(np.float64)
        nk = 2 * k * h * w
        planes = floats[:nk].reshape(k, h, w, 2)
        kdata = planes[..., 0] + 1j * planes[..., 1]
        esc = floats[nk : nk + h * w].reshape(h, w)
        rss_t = floats[nk + h * w :].reshape(h, w)
        try:
            meta = AcquisitionMeta.from_index(meta_idx, k)
        except ValueError as exc:
            raise DatasetError(f"{path}: record {i}: {exc}") from None
        records.append(DatasetRecord(kdata, esc, rss_t, meta))
        pos += n_bytes + 4
    if pos != len(buf):
        raise DatasetError(f"{path}: {len(buf) - pos} trailing bytes")
    return records


def write_pgm(image: np.ndarray, path) -> None:
    """8-bit binary PGM, min-max scaled per image."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)

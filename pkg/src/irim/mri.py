"""Cartesian multi-coil MRI measurement model.

Images and k-space are plain complex numpy arrays whose last two axes are
``(H, W)``. A coil stack is ``(K, H, W)``; a batch of coil stacks is
``(N, K, H, W)``. Masks select k-space columns (the last axis).

The stacked operator applies the same masked Fourier transform to every coil,
so ``A = 1_K (x) P F`` and ``A^H A`` is a projection in k-space.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _rng

CENTER_FRACTIONS = {4: 0.08, 8: 0.04}


def fft2c(img: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2-D DFT over the last two axes.

    The zero frequency lands at ``(H // 2, W // 2)``.
    """
    axes = (-2, -1)
    x = np.fft.ifftshift(img, axes=axes)
    x = np.fft.fft2(x, axes=axes, norm="ortho")
    return np.fft.fftshift(x, axes=axes)


def ifft2c(ksp: np.ndarray) -> np.ndarray:
    """Inverse (and adjoint) of :func:`fft2c`."""
    axes = (-2, -1)
    x = np.fft.ifftshift(ksp, axes=axes)
    x = np.fft.ifft2(x, axes=axes, norm="ortho")
    return np.fft.fftshift(x, axes=axes)


@dataclass(frozen=True)
class SamplingMask:
    """Column-wise k-space sampling pattern."""

    kept: np.ndarray
    acceleration: float
    center_fraction: float

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=bool)
        if kept.ndim != 1:
            raise ValueError("mask must be one boolean per column")
        object.__setattr__(self, "kept", kept)

    @property
    def width(self) -> int:
        return self.kept.shape[0]

    @property
    def num_center(self) -> int:
        return center_columns(self.width, self.center_fraction)


def center_columns(width: int, center_fraction: float) -> int:
    return int(np.floor(center_fraction * width + 0.5))


def make_mask(
    width: int,
    acceleration: int,
    seed: int,
    center_fraction: float | None = None,
) -> SamplingMask:
    """Random column mask with a fully sampled center band.

    The ``round(center_fraction * width)`` columns around DC are always kept.
    Every other column is kept independently with the probability that makes
    the expected number of kept columns ``width / acceleration``.
    """
    if width < 8:
        raise ValueError(f"mask width must be at least 8, got {width}")
    if center_fraction is None:
        if acceleration not in CENTER_FRACTIONS:
            raise ValueError(
                f"no default center fraction for acceleration {acceleration}; "
                f"pass center_fraction explicitly"
            )
        center_fraction = CENTER_FRACTIONS[acceleration]
    num_low = center_columns(width, center_fraction)
    if num_low >= width:
        raise ValueError("center band covers the whole width")
    prob = (width / acceleration - num_low) / (width - num_low)
    if not 0.0 <= prob <= 1.0:
        raise ValueError(
            f"width {width} too small for acceleration {acceleration} with "
            f"{num_low} center columns (keep probability {prob:.3f})"
        )
    rng = _rng.stream(seed, _rng.MASK)
    kept = rng.random(width) < prob
    pad = (width - num_low + 1) // 2
    kept[pad : pad + num_low] = True
    return SamplingMask(kept, float(acceleration), float(center_fraction))


def _columns(mask) -> np.ndarray:
    """Broadcastable ``(..., 1, 1, W)`` view of a mask or stacked masks."""
    kept = mask.kept if isinstance(mask, SamplingMask) else np.asarray(mask, dtype=bool)
    return kept[..., None, None, :]


def _check(x: np.ndarray, mask) -> None:
    kept = mask.kept if isinstance(mask, SamplingMask) else np.asarray(mask)
    if x.ndim < 3:
        raise ValueError(f"expected a coil stack (..., K, H, W), got shape {x.shape}")
    if kept.shape[-1] != x.shape[-1]:
        raise ValueError(
            f"mask width {kept.shape[-1]} does not match image width {x.shape[-1]}"
        )


def forward_op(p: np.ndarray, mask) -> np.ndarray:
    """``d = A p``: per-coil centered FFT followed by column masking."""
    _check(p, mask)
    return fft2c(p) * _columns(mask)


def adjoint_op(d: np.ndarray, mask) -> np.ndarray:
    """``A^H d``: mask the columns, then per-coil inverse FFT."""
    _check(d, mask)
    return ifft2c(d * _columns(mask))


def normal_op(p: np.ndarray, mask) -> np.ndarray:
    """``A^H A p``; Hermitian, so it is its own adjoint."""
    _check(p, mask)
    return ifft2c(fft2c(p) * _columns(mask))


def dc_gradient(d: np.ndarray, mask, p: np.ndarray) -> np.ndarray:
    """Gradient ``A^H (A p - d)`` of ``0.5 * ||A p - d||^2``.

    With real and imaginary parts treated as independent real variables, the
    real part of the result is the derivative with respect to ``Re p`` and the
    imaginary part the derivative with respect to ``Im p``.
    """
    if d.shape != p.shape:
        raise ValueError(f"k-space shape {d.shape} != image shape {p.shape}")
    return adjoint_op(forward_op(p, mask) - d, mask)


def zero_filled(d: np.ndarray, mask) -> np.ndarray:
    """Zero-filled reconstruction ``A^H d``."""
    return adjoint_op(d, mask)


def center_crop_or_pad(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Center-crop or zero-pad the last two axes to ``(target_h, target_w)``.

    Each axis is handled on its own. Cropping keeps the block starting at
    ``(size - target) // 2``; odd padding puts the extra pixel on the
    high-index side.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be positive")
    out = img
    for axis, target in ((-2, target_h), (-1, target_w)):
        size = out.shape[axis]
        if size > target:
            start = (size - target) // 2
            out = np.take(out, np.arange(start, start + target), axis=axis)
        elif size < target:
            lo = (target - size) // 2
            widths = [(0, 0)] * out.ndim
            widths[axis] = (lo, target - size - lo)
            out = np.pad(out, widths)
    return out if out is not img else img.copy()


class FieldStrength(Enum):
    T1_5 = "1.5T"
    T3 = "3T"


@dataclass(frozen=True)
class AcquisitionMeta:
    """Experimental condition encoded as a one-hot slot in ``[0, 8)``.

    ``index = 2 * (field == 3T) + fat_suppressed``; slots 4-7 are reserved.
    """

    field_strength: FieldStrength = FieldStrength.T1_5
    fat_suppressed: bool = False
    coil_count: int = 1

    ONE_HOT_WIDTH = 8

    @property
    def one_hot_index(self) -> int:
        return 2 * int(self.field_strength is FieldStrength.T3) + int(self.fat_suppressed)

    @classmethod
    def from_index(cls, index: int, coil_count: int = 1) -> "AcquisitionMeta":
        if not 0 <= index < 4:
            raise ValueError(f"meta index {index} is reserved or out of range")
        field = FieldStrength.T3 if index & 2 else FieldStrength.T1_5
        return cls(field, bool(index & 1), coil_count)

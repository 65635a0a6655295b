"""
Frequency-domain view of images: luminance, 2D DFT, spectrum centering,
amplitude maps and radial / oriented band-energy statistics.

Centering is the circular half-period index shift (DC bin moved to
(m//2, n//2)). Multiplying F by exp(-j*pi*(u+v)) would leave |F| unchanged
and so could not move energy in the amplitude map.
"""
from dataclasses import dataclass

import numpy as np

from models.errors import ShapeError, SpectrumError
from models.tensor import Tensor

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class Spectrum:
    real: Tensor
    imag: Tensor
    centered: bool = False

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"spectrum parts differ: {self.real.shape} vs {self.imag.shape}")

    @property
    def shape(self):
        return self.real.shape

    def complex(self):
        return self.real.data + 1j * self.imag.data


def to_luminance(image):
    """ [3,H,W] or [1,H,W] in [0,1] -> [1,H,W] using BT.601 luma weights """
    arr = _array(image)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ShapeError(f"to_luminance expects 1 or 3 channels, got shape {arr.shape}")
    if arr.shape[0] == 1:
        return Tensor(arr)
    r, g, b = LUMA_WEIGHTS
    return Tensor((r * arr[0] + g * arr[1] + b * arr[2])[None])


def dft2d(image):
    """ F(u,v) = sum_x sum_y I(x,y) exp(-j 2 pi (ux/m + vy/n)) """
    arr = _array(image)
    if arr.ndim != 2:
        raise ShapeError(f"dft2d expects an [m,n] image, got shape {arr.shape}")
    f = np.fft.fft2(arr)
    return Spectrum(Tensor(f.real), Tensor(f.imag), centered=False)


def _shift(s, sign):
    m, n = s.shape
    shift = (sign * (m // 2), sign * (n // 2))
    real = np.roll(s.real.data, shift, axis=(0, 1))
    imag = np.roll(s.imag.data, shift, axis=(0, 1))
    return Tensor(real), Tensor(imag)


def center_spectrum(s):
    if s.centered:
        raise SpectrumError("spectrum is already centered")
    real, imag = _shift(s, 1)
    return Spectrum(real, imag, centered=True)


def uncenter_spectrum(s):
    if not s.centered:
        raise SpectrumError("spectrum is not centered")
    real, imag = _shift(s, -1)
    return Spectrum(real, imag, centered=False)


def amplitude(s):
    return Tensor(np.hypot(s.real.data, s.imag.data))


def amplitude_map(image):
    """ Centered amplitude spectrum of an image's luminance, shape [m,n] """
    lum = to_luminance(image)
    return amplitude(center_spectrum(dft2d(lum.data[0])))


def log_amplitude(image):
    """ log(1+M) of the centered luminance spectrum, shape [1,H,W] """
    return Tensor(np.log1p(amplitude_map(image).data)[None])


def _radial_coordinates(shape):
    m, n = shape
    u = np.arange(m)[:, None] - m // 2
    v = np.arange(n)[None, :] - n // 2
    r = np.sqrt(u ** 2 + v ** 2)
    return r / r.max() if r.max() > 0 else r


def band_edges(bands):
    return np.linspace(0.0, 1.0, bands + 1)


def band_energy_profile(M, bands):
    """
    Fraction of non-DC spectral energy (sum of M^2) in `bands` equal-width
    annuli of normalized radius. A bin exactly on a boundary belongs to the
    lower band.
    """
    arr = _array(M)
    if bands < 2:
        raise ValueError(f"bands must be >= 2, got {bands}")
    if arr.ndim != 2:
        raise ShapeError(f"band_energy_profile expects an [m,n] amplitude map, got {arr.shape}")
    rn = _radial_coordinates(arr.shape)
    energy = arr ** 2
    off_dc = rn > 0
    band = np.clip(np.ceil(rn * bands).astype(int) - 1, 0, bands - 1)
    totals = np.bincount(band[off_dc], weights=energy[off_dc], minlength=bands)
    total = totals.sum()
    if total <= 0:
        raise SpectrumError("no energy outside the DC bin; band fractions are undefined")
    return totals / total


def band_bin_counts(shape, bands):
    """ Number of non-DC bins per band, same partition as band_energy_profile """
    rn = _radial_coordinates(shape)
    band = np.clip(np.ceil(rn * bands).astype(int) - 1, 0, bands - 1)
    return np.bincount(band[rn > 0], minlength=bands)


def oriented_band_fraction(M, angle_deg, half_width=2.0):
    """
    Fraction of non-DC energy on the spectral line orthogonal to a spatial
    orientation. `angle_deg` is measured from the column axis toward the row
    axis; structures elongated along it put their energy on this line.
    """
    arr = _array(M)
    m, n = arr.shape
    u = np.arange(m)[:, None] - m // 2
    v = np.arange(n)[None, :] - n // 2
    theta = np.deg2rad(angle_deg)
    along = np.abs(v * np.cos(theta) + u * np.sin(theta))
    energy = arr ** 2
    energy[m // 2, n // 2] = 0.0
    total = energy.sum()
    if total <= 0:
        raise SpectrumError("no energy outside the DC bin")
    return float(energy[along <= half_width].sum() / total)


def spectral_signature(image, bands=4):
    """ Band-energy profile of an image, straight from pixels """
    return band_energy_profile(amplitude_map(image), bands)

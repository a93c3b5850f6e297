"""Frequency-domain feature extraction.

2-D DFT via row/column 1-D transforms (iterative radix-2 FFT on power-of-two
extents, direct DFT otherwise), a radial high-pass mask and the inverse
transform back to a real spatial map.  The branch is a fixed feature
extractor on raw input data; nothing here is differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FrequencyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HighPassConfig:
    cutoff_ratio: float = 0.1
    transition: str = "hard"

    def __post_init__(self):
        if not 0.0 < self.cutoff_ratio < 1.0:
            raise FrequencyConfigError(f"cutoff_ratio must lie in (0, 1), got {self.cutoff_ratio}")
        if self.transition not in ("hard", "gaussian"):
            raise FrequencyConfigError(f"transition must be 'hard' or 'gaussian', got {self.transition!r}")


@dataclass(frozen=True)
class FrequencyFeatures:
    real: np.ndarray
    imag: np.ndarray
    highpass: np.ndarray | None = None

    @property
    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.real**2 + self.imag**2)

    @property
    def spectrum(self) -> np.ndarray:
        return self.real + 1j * self.imag

    @classmethod
    def from_complex(cls, spec: np.ndarray) -> "FrequencyFeatures":
        return cls(np.ascontiguousarray(spec.real), np.ascontiguousarray(spec.imag))


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _dft_matrix(n: int, sign: float) -> np.ndarray:
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n)


def _fft_last(x: np.ndarray, sign: float) -> np.ndarray:
    """Unnormalized 1-D transform along the last axis, e^{sign 2 pi i u x / n}."""
    n = x.shape[-1]
    x = x.astype(np.complex128)
    if not _is_pow2(n):
        return x @ _dft_matrix(n, sign).T
    if n == 1:
        return x.copy()
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.int64)
    for i in range(n):
        rev[i] = int(format(i, f"0{bits}b")[::-1], 2)
    a = x[..., rev]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        a = a.reshape(a.shape[:-1] + (n // size, size))
        even = a[..., :half]
        odd = a[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(a.shape[:-2] + (n,))
        size *= 2
    return a


def _transform2(x: np.ndarray, sign: float) -> np.ndarray:
    rows = _fft_last(x, sign)
    return np.swapaxes(_fft_last(np.swapaxes(rows, -1, -2), sign), -1, -2)


def dft2(image) -> FrequencyFeatures:
    """F(u, v) = sum_{x,y} f(x, y) exp(-2 pi i (u x / H + v y / W)), unnormalized."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"dft2 expects an H x W plane, got shape {img.shape}")
    return FrequencyFeatures.from_complex(_transform2(img, -1.0))


def dft2_direct(image) -> np.ndarray:
    """O((HW)^2) reference transform, one output bin at a time."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape
    xs = np.arange(H)[:, None]
    ys = np.arange(W)[None, :]
    out = np.zeros((H, W), dtype=np.complex128)
    for u in range(H):
        for v in range(W):
            out[u, v] = np.sum(img * np.exp(-2j * np.pi * (u * xs / H + v * ys / W)))
    return out


def idft2(freq: FrequencyFeatures | np.ndarray) -> np.ndarray:
    """Inverse transform with 1/(H W) normalization; returns the complex plane."""
    spec = freq.spectrum if isinstance(freq, FrequencyFeatures) else np.asarray(freq, dtype=np.complex128)
    H, W = spec.shape
    return _transform2(spec, 1.0) / (H * W)


def radial_frequency(H: int, W: int) -> np.ndarray:
    """Centered radial frequency of every bin, as a fraction of the Nyquist radius.

    Signed frequencies are ``fftfreq``-style in cycles/sample, so the Nyquist
    radius along an axis is 0.5 and a bin's ratio is ``hypot(fu, fv) / 0.5``
    (corner bins exceed 1).
    """
    fu = np.fft.fftfreq(H)[:, None]
    fv = np.fft.fftfreq(W)[None, :]
    return np.hypot(fu, fv) / 0.5


def highpass_mask(H: int, W: int, cfg: HighPassConfig) -> np.ndarray:
    r = radial_frequency(H, W)
    if cfg.transition == "hard":
        mask = (r >= cfg.cutoff_ratio).astype(np.float64)
    else:
        mask = 1.0 - np.exp(-(r**2) / (2.0 * cfg.cutoff_ratio**2))
    mask[0, 0] = 0.0
    return mask


def highpass_filter(freq: FrequencyFeatures, cfg: HighPassConfig | None = None) -> FrequencyFeatures:
    """Suppress bins whose radial frequency is below the cutoff; DC always removed.

    The mask depends only on |frequency|, so it is symmetric under
    (u, v) -> (-u, -v) and Hermitian symmetry of a real image's spectrum
    survives filtering.
    """
    cfg = cfg or HighPassConfig()
    mask = highpass_mask(*freq.real.shape, cfg)
    return FrequencyFeatures(freq.real * mask, freq.imag * mask)


def extract_high_freq(image, cfg: HighPassConfig | None = None) -> np.ndarray:
    """Real high-pass spatial map of an H x W plane or a C x H x W stack (per channel)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        return np.stack([extract_high_freq(ch, cfg) for ch in img])
    return idft2(highpass_filter(dft2(img), cfg)).real


def frequency_features(image, cfg: HighPassConfig | None = None) -> FrequencyFeatures:
    """Spectrum planes of ``image`` plus its high-pass spatial map."""
    freq = dft2(image)
    hp = idft2(highpass_filter(freq, cfg)).real
    return FrequencyFeatures(freq.real, freq.imag, hp)

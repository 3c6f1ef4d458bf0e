"""Fourier-domain machinery: per-channel 2D DFT, amplitude/phase, the centered
high-frequency mask, feature vectors for clustering, and amplitude-perturbation
augmentation.

Images are channel-first (``c x h x w``) and may carry leading batch axes; all
transforms act on the last two axes. Spectra are uncentered (DC at ``(0, 0)``)
unless ``centered`` is set, in which case DC sits at ``(h // 2, w // 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Rng

RESIDUE_RTOL = 1e-6


class SymmetryError(RuntimeError):
    """The inverse transform produced a non-negligible imaginary part."""


@dataclass(frozen=True)
class Spectrum:
    real: np.ndarray
    imag: np.ndarray
    centered: bool = False

    @property
    def complex(self) -> np.ndarray:
        return self.real + 1j * self.imag


@dataclass(frozen=True)
class AmplitudePhase:
    amplitude: np.ndarray
    phase: np.ndarray
    centered: bool = False


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 3:
        raise ValueError(f"expected (..., c, h, w) image, got shape {image.shape}")
    return image


def dft2(image: np.ndarray) -> Spectrum:
    """Unnormalized forward DFT over the two spatial axes of each channel."""
    image = _check_image(image)
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    f = np.fft.fft2(image, axes=(-2, -1))
    return Spectrum(f.real, f.imag, centered=False)


def idft2(spectrum: Spectrum, *, return_residue: bool = False):
    """Real part of the inverse DFT (1/(hw) normalization).

    With ``return_residue`` the largest discarded imaginary magnitude is also
    returned.
    """
    if spectrum.centered:
        raise ValueError("idft2 expects an uncentered spectrum; call center_shift(..., inverse=True) first")
    x = np.fft.ifft2(spectrum.complex, axes=(-2, -1))
    if return_residue:
        return x.real, float(np.max(np.abs(x.imag), initial=0.0))
    return x.real


def amplitude_phase(spectrum: Spectrum) -> AmplitudePhase:
    amp = np.hypot(spectrum.real, spectrum.imag)
    phase = np.arctan2(spectrum.imag, spectrum.real)
    phase = np.where(amp == 0.0, 0.0, phase)
    phase = np.where(phase <= -np.pi, np.pi, phase)
    return AmplitudePhase(amp, phase, spectrum.centered)


def reassemble(ap: AmplitudePhase) -> Spectrum:
    return Spectrum(ap.amplitude * np.cos(ap.phase), ap.amplitude * np.sin(ap.phase), ap.centered)


def _shift(x: np.ndarray, inverse: bool) -> np.ndarray:
    return np.fft.ifftshift(x, axes=(-2, -1)) if inverse else np.fft.fftshift(x, axes=(-2, -1))


def center_shift(spec, inverse: bool = False):
    """Cyclic shift moving DC to ``(h // 2, w // 2)`` (or back with ``inverse``).

    Accepts a :class:`Spectrum`, an :class:`AmplitudePhase` or a raw array.
    """
    if isinstance(spec, Spectrum):
        if spec.centered != inverse:
            raise ValueError("spectrum already in the requested centering")
        return Spectrum(_shift(spec.real, inverse), _shift(spec.imag, inverse), not inverse)
    if isinstance(spec, AmplitudePhase):
        if spec.centered != inverse:
            raise ValueError("spectrum already in the requested centering")
        return AmplitudePhase(_shift(spec.amplitude, inverse), _shift(spec.phase, inverse), not inverse)
    return _shift(np.asarray(spec), inverse)


def freq_mask(h: int, w: int) -> np.ndarray:
    """High-pass mask for a centered ``h x w`` spectrum.

    Zero on the closed central square ``[h/4, 3h/4] x [w/4, 3w/4]``, one on the
    surrounding border band.
    """
    u = np.arange(h)[:, None]
    v = np.arange(w)[None, :]
    keep = (u < h / 4) | (u > 3 * h / 4) | (v < w / 4) | (v > 3 * w / 4)
    return keep.astype(np.float64)


def high_freq_feature(image: np.ndarray, *, log1p: bool = False) -> np.ndarray:
    """Flattened, masked, centered amplitude spectrum of each image.

    ``(c, h, w) -> (c*h*w,)`` and ``(n, c, h, w) -> (n, c*h*w)``, channels
    concatenated in C order. Masked-out bins are zero.
    """
    image = _check_image(image)
    h, w = image.shape[-2:]
    if h < 4 or w < 4:
        raise ValueError(f"image too small for the high-frequency mask: {h}x{w}")
    amp = np.abs(np.fft.fft2(image, axes=(-2, -1)))
    g = center_shift(amp) * freq_mask(h, w)
    if log1p:
        g = np.log1p(g)
    return g.reshape(*image.shape[:-3], -1)


def _hermitian_partner(field: np.ndarray) -> np.ndarray:
    # field[..., (h-u)%h, (w-v)%w]
    return np.roll(np.flip(field, axis=(-2, -1)), shift=(1, 1), axis=(-2, -1))


def perturb_amplitude(
    ap: AmplitudePhase,
    alpha: float,
    sigma: float,
    rng: Rng,
    *,
    per_channel: bool = False,
) -> AmplitudePhase:
    """Scale each amplitude bin by ``1 + alpha * delta``, clamped at zero.

    ``delta ~ N(0, sigma^2)`` is drawn once per spatial bin (shared across
    channels unless ``per_channel``) and symmetrized so that
    ``delta(u, v) == delta(-u, -v)``; the phase is left untouched.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if ap.centered:
        raise ValueError("perturb_amplitude expects an uncentered spectrum")
    amp = ap.amplitude
    if alpha == 0:
        return AmplitudePhase(amp.copy(), ap.phase, False)
    shape = amp.shape if per_channel else amp.shape[:-3] + (1,) + amp.shape[-2:]
    delta = rng.normal(0.0, sigma, size=shape)
    delta = 0.5 * (delta + _hermitian_partner(delta))
    new_amp = np.maximum(0.0, (1.0 + alpha * delta) * amp)
    return AmplitudePhase(new_amp, ap.phase, False)


def augment(
    image: np.ndarray,
    alpha: float,
    sigma: float,
    rng: Rng,
    *,
    per_channel: bool = False,
) -> np.ndarray:
    """Amplitude-perturbed reconstruction of ``image`` keeping its phase.

    Works on one image or a batch; for a batch, each image gets its own
    perturbation field drawn in order from ``rng``.
    """
    image = _check_image(image)
    ap = amplitude_phase(dft2(image))
    perturbed = perturb_amplitude(ap, alpha, sigma, rng, per_channel=per_channel)
    out, residue = idft2(reassemble(perturbed), return_residue=True)
    scale = float(np.max(np.abs(image), initial=0.0))
    if residue > RESIDUE_RTOL * max(scale, 1e-300):
        raise SymmetryError(f"imaginary residue {residue:.3e} exceeds tolerance")
    return out

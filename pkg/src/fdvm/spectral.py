"""Fourier amplitude/phase decomposition and exact reconstruction.

The two network paths consume the polar form of the unnormalized 2D DFT of
each channel: amplitude (log-compressed by default) and phase (divided by pi
by default). Both treatments are exactly invertible, so decompose -> compress
-> expand -> recompose is an identity up to float rounding. Transforms run
over the last two axes, so (C,H,W) and (B,C,H,W) inputs both work at any
spatial size.

`recompose` is an autodiff primitive: the network's loss lives on the
reconstructed image, so gradients must flow back into the amplitude and
phase maps it produces.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import Tensor, as_tensor, record

__all__ = [
    "SpectralPair", "fft2", "ifft2", "decompose", "recompose",
    "amp_compress", "amp_expand", "phase_normalize", "phase_denormalize",
    "image_to_pair", "pair_to_image",
]


@dataclass
class SpectralPair:
    """Per-channel amplitude and phase maps of an image spectrum.

    `compressed` marks log1p-compressed amplitude, `normalized_phase` marks
    phase divided by pi; both must be undone before reconstruction.
    """
    amplitude: Tensor
    phase: Tensor
    compressed: bool = False
    normalized_phase: bool = False

    def __post_init__(self):
        if self.amplitude.dims != self.phase.dims:
            raise ShapeError(
                f"amplitude dims {self.amplitude.dims} != phase dims {self.phase.dims}")


def fft2(img) -> tuple[Tensor, Tensor]:
    """Unnormalized forward DFT over the last two axes -> (real, imag)."""
    img = as_tensor(img)
    if len(img.dims) < 2:
        raise ShapeError(f"fft2: input needs at least 2 dims, got {img.dims}")
    spec = np.fft.fft2(img.data, axes=(-2, -1))
    return Tensor(spec.real.copy()), Tensor(spec.imag.copy())


def ifft2(re, im) -> Tensor:
    """Inverse DFT (includes the 1/(H*W) factor); real part only."""
    re, im = as_tensor(re), as_tensor(im)
    if re.dims != im.dims:
        raise ShapeError(f"ifft2: real dims {re.dims} != imag dims {im.dims}")
    out = np.fft.ifft2(re.data + 1j * im.data, axes=(-2, -1))
    return Tensor(out.real.copy())


def decompose(re, im) -> SpectralPair:
    """Polar form of a complex spectrum: amplitude >= 0 and phase in (-pi, pi]."""
    re, im = as_tensor(re), as_tensor(im)
    if re.dims != im.dims:
        raise ShapeError(f"decompose: real dims {re.dims} != imag dims {im.dims}")
    amp = np.hypot(re.data, im.data)
    phase = np.arctan2(im.data, re.data)    # atan2(0,0) == 0 by convention
    phase[phase == -np.pi] = np.pi          # keep the range half-open
    return SpectralPair(Tensor(amp), Tensor(phase))


def recompose(amp: Tensor, phase: Tensor) -> Tensor:
    """Real part of the inverse DFT of amplitude*e^{i*phase}. Differentiable.

    Expects raw (decompressed, denormalized) maps; use `pair_to_image` for a
    flag-aware wrapper.
    """
    amp, phase = as_tensor(amp), as_tensor(phase)
    if amp.dims != phase.dims:
        raise ShapeError(f"recompose: amplitude dims {amp.dims} != phase dims {phase.dims}")
    if len(amp.dims) < 2:
        raise ShapeError(f"recompose: input needs at least 2 dims, got {amp.dims}")
    cos_p = np.cos(phase.data)
    sin_p = np.sin(phase.data)
    spec = amp.data * cos_p + 1j * (amp.data * sin_p)
    out = Tensor(np.fft.ifft2(spec, axes=(-2, -1)).real.copy())

    ad = amp.data
    hw = amp.dims[-2] * amp.dims[-1]

    def bwd(g):
        # d(Re ifft(Z))/dZ under (Re,Im) coordinates is fft(g)/(H*W)
        f = np.fft.fft2(g, axes=(-2, -1)) / hw
        g_re, g_im = f.real, f.imag
        g_amp = g_re * cos_p + g_im * sin_p
        g_phase = ad * (g_im * cos_p - g_re * sin_p)
        return g_amp, g_phase

    return record("recompose", (amp, phase), out, bwd)


def amp_compress(a) -> Tensor:
    """ln(1+a); rejects negative input."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("amp_compress: amplitude must be non-negative")
    return Tensor(np.log1p(a.data))


def amp_expand(a) -> Tensor:
    """e^a - 1, the exact inverse of amp_compress."""
    a = as_tensor(a)
    return Tensor(np.expm1(a.data))


def phase_normalize(p) -> Tensor:
    p = as_tensor(p)
    return Tensor(p.data / np.pi)


def phase_denormalize(q) -> Tensor:
    q = as_tensor(q)
    return Tensor(q.data * np.pi)


def image_to_pair(img, compress: bool = True, normalize_phase: bool = True) -> SpectralPair:
    """fft2 + decompose + optional range treatments, in one step."""
    pair = decompose(*fft2(img))
    amp, phase = pair.amplitude, pair.phase
    if compress:
        amp = amp_compress(amp)
    if normalize_phase:
        phase = phase_normalize(phase)
    return SpectralPair(amp, phase, compressed=compress, normalized_phase=normalize_phase)


def pair_to_image(pair: SpectralPair) -> Tensor:
    """Undo the recorded range treatments, then reconstruct the image."""
    amp, phase = pair.amplitude, pair.phase
    if pair.compressed:
        amp = amp_expand(amp)
    if pair.normalized_phase:
        phase = phase_denormalize(phase)
    return recompose(amp, phase)

"""Time-domain adaption kernels, latent framing and latent-space beamforming."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve

from ._io import write_json
from .container import load_tensor, save_tensor
from .exceptions import InvalidConfigError, InvalidInputError
from .geometry import DoaGrid
from .signal import SAMPLE_RATE, MultiChannelSignal
from .whitening import WhiteningTransform


@dataclass(frozen=True)
class AdaptionKernelsTD:
    """FIR taps ``(D, T_A, M_out, M_in)`` plus the bulk delay each direction's taps carry.

    ``latency[d]`` is the number of samples by which :func:`adapt_td` output lags
    the (non-causal) frequency-domain adaption for direction ``d``.
    """

    taps: np.ndarray
    latency: np.ndarray

    @property
    def length(self) -> int:
        return self.taps.shape[1]

    @property
    def num_mics(self) -> int:
        return self.taps.shape[2]

    def save(self, prefix) -> None:
        """``<prefix>.bin`` holds the taps, ``<prefix>.json`` the per-direction latency."""
        prefix = Path(prefix)
        save_tensor(prefix.with_name(prefix.name + ".bin"), self.taps)
        write_json(prefix.with_name(prefix.name + ".json"), {"latency": [int(v) for v in self.latency]})

    @classmethod
    def load(cls, prefix, latency=None) -> "AdaptionKernelsTD":
        prefix = Path(prefix)
        taps = load_tensor(prefix.with_name(prefix.name + ".bin"), rank=4, real=True)
        side = prefix.with_name(prefix.name + ".json")
        if latency is None and side.exists():
            latency = json.loads(side.read_text())["latency"]
        lat = np.zeros(taps.shape[0], dtype=int) if latency is None else np.asarray(latency, int)
        if lat.shape != (taps.shape[0],):
            raise InvalidInputError("one latency value per direction required")
        return cls(taps, lat)


def _front_window(energy: np.ndarray, width: int) -> int:
    """Signed start offset of the circular window of ``width`` taps holding the most energy.

    Ties go to the latest start, i.e. the smallest added latency.
    """
    n = len(energy)
    ext = np.concatenate([energy, energy[:width]])
    csum = np.concatenate([[0.0], np.cumsum(ext)])
    sums = csum[width:width + n] - csum[:n]
    best = sums.max()
    starts = np.flatnonzero(sums >= best * (1 - 1e-12))
    signed = np.where(starts > n // 2, starts - n, starts)
    return int(signed.max())


def build_td_kernels(grid: DoaGrid, whitening: WhiteningTransform, length: int = 100,
                     fft_size: int = 1024, sample_rate: int = SAMPLE_RATE,
                     taper: bool = False) -> AdaptionKernelsTD:
    """Truncated impulse responses of ``V'(d, k, m, i) = conj((U V_d)_m) U_mi``.

    The full ``fft_size``-periodic response is rotated so the ``length``-tap
    window with the most energy starts at tap 0, then cut (rectangular, or with
    a half-Hann fade on the last quarter when ``taper`` is set).
    """
    if length > fft_size:
        raise InvalidConfigError(f"T_A={length} exceeds fft_size={fft_size}")
    if length < 1:
        raise InvalidConfigError("T_A must be positive")
    v = grid.steering(fft_size, sample_rate)
    if whitening.num_bins != v.shape[1]:
        raise InvalidInputError("whitening transform and grid steering disagree on K")
    uv = whitening.apply(v)  # (D, K, M)
    spectra = np.conj(uv)[..., :, None] * whitening.U[None]  # (D, K, M, M)
    full = np.fft.irfft(spectra, n=fft_size, axis=1)  # (D, N, M, M)
    taps = np.empty((grid.size, length) + full.shape[2:])
    latency = np.empty(grid.size, dtype=int)
    fade = np.ones(length)
    if taper:
        q = max(length // 4, 1)
        fade[-q:] = 0.5 + 0.5 * np.cos(np.pi * (np.arange(q) + 1) / q)
    for d in range(grid.size):
        energy = np.sum(full[d] ** 2, axis=(1, 2))
        start = _front_window(energy, length)
        idx = (start + np.arange(length)) % fft_size
        taps[d] = full[d, idx] * fade[:, None, None]
        latency[d] = -start
    return AdaptionKernelsTD(taps, latency)


def adapt_td(z: MultiChannelSignal, doa: int, kernels: AdaptionKernelsTD,
             compensate: bool = False) -> MultiChannelSignal:
    """``z~(t, m) = sum_i z(t, i) * v'(doa, ., m, i)``, truncated to the input length.

    With ``compensate`` the kernel latency is removed by advancing the output.
    """
    if z.num_channels != kernels.num_mics:
        raise InvalidInputError(f"kernels for {kernels.num_mics} mics, signal has {z.num_channels}")
    if not 0 <= doa < kernels.taps.shape[0]:
        raise InvalidInputError(f"no kernels for DOA {doa}")
    h = kernels.taps[doa]  # (T_A, M, M)
    n = z.num_samples
    # (T, 1, M) * (T_A, M, M) along time, then sum over input channels
    full = fftconvolve(z.samples[:, None, :], h, axes=0)
    out = full.sum(axis=2)
    shift = int(kernels.latency[doa]) if compensate else 0
    if shift > 0:
        out = out[shift:shift + n]
        if out.shape[0] < n:
            out = np.pad(out, ((0, n - out.shape[0]), (0, 0)))
    else:
        out = out[:n]
    return MultiChannelSignal(out, z.sample_rate)


@dataclass(frozen=True)
class LatentFrames:
    frames: np.ndarray  # (L, H)
    frame_len: int = 200
    stride: int = 50
    length: int | None = None

    def with_frames(self, frames: np.ndarray) -> "LatentFrames":
        return LatentFrames(frames, self.frame_len, self.stride, self.length)


@dataclass(frozen=True)
class LatentCodec:
    """Strided linear encoder ``(H, C, frame_len)`` and transposed decoder ``(H, frame_len)``."""

    encoder: np.ndarray
    decoder: np.ndarray
    stride: int = 50

    def __post_init__(self):
        enc = np.asarray(self.encoder, dtype=np.float64)
        if enc.ndim == 2:
            enc = enc[:, None, :]
        dec = np.asarray(self.decoder, dtype=np.float64)
        if enc.ndim != 3 or dec.ndim != 2:
            raise InvalidInputError("encoder must be (H, C, N) and decoder (H, N)")
        if enc.shape[0] != dec.shape[0] or enc.shape[2] != dec.shape[1]:
            raise InvalidInputError(f"encoder {enc.shape} and decoder {dec.shape} disagree")
        if self.stride < 1 or self.stride > enc.shape[2]:
            raise InvalidConfigError("stride must be in [1, frame_len]")
        object.__setattr__(self, "encoder", enc)
        object.__setattr__(self, "decoder", dec)

    @property
    def frame_len(self) -> int:
        return self.decoder.shape[1]

    @property
    def num_filters(self) -> int:
        return self.decoder.shape[0]

    @classmethod
    def reference(cls, num_channels: int = 1, num_filters: int = 500, frame_len: int = 200,
                  stride: int = 50, seed: int = 0) -> "LatentCodec":
        """Seeded orthonormal basis folded with a square-root Hann window.

        ``decode(encode(x))`` returns the channel average of ``x`` exactly
        (perfect reconstruction for mono input).
        """
        if num_filters < frame_len:
            raise InvalidConfigError("reference basis needs H >= frame_len")
        if frame_len % stride:
            raise InvalidConfigError("frame_len must be a multiple of stride")
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((num_filters, frame_len)))  # orthonormal columns
        win = np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(frame_len) / frame_len))
        ola = np.sum((win ** 2).reshape(-1, stride), axis=0)[0]
        basis = q * win[None, :] / np.sqrt(ola)
        enc = np.repeat(basis[:, None, :], num_channels, axis=1) / num_channels
        return cls(enc, basis, stride)

    def save(self, prefix) -> None:
        prefix = Path(prefix)
        save_tensor(prefix.with_name(prefix.name + ".encoder.bin"), self.encoder)
        save_tensor(prefix.with_name(prefix.name + ".decoder.bin"), self.decoder)

    @classmethod
    def load(cls, prefix, stride: int = 50) -> "LatentCodec":
        prefix = Path(prefix)
        enc = load_tensor(prefix.with_name(prefix.name + ".encoder.bin"), real=True)
        dec = load_tensor(prefix.with_name(prefix.name + ".decoder.bin"), rank=2, real=True)
        return cls(enc, dec, stride)


def _frame_padding(frame_len: int, stride: int, length: int) -> tuple[int, int]:
    left = frame_len - stride
    padded = length + 2 * left
    return left, left + (-(padded - frame_len)) % stride


def frame_encode(z: MultiChannelSignal, codec: LatentCodec) -> LatentFrames:
    """Strided linear framing ``z'(l, h) = sum_{c, n} enc[h, c, n] x[l*stride + n, c]``."""
    n, s = codec.frame_len, codec.stride
    if z.num_samples < n:
        raise InvalidInputError(f"signal of {z.num_samples} samples shorter than one frame ({n})")
    if z.num_channels != codec.encoder.shape[1]:
        raise InvalidInputError(
            f"encoder expects {codec.encoder.shape[1]} channels, got {z.num_channels}")
    left, right = _frame_padding(n, s, z.num_samples)
    xp = np.pad(z.samples, ((left, right), (0, 0)))
    frames = sliding_window_view(xp, n, axis=0)[::s]  # (L, C, n)
    latent = np.einsum("lcn,hcn->lh", frames, codec.encoder)
    return LatentFrames(latent, n, s, z.num_samples)


def frame_decode(y: LatentFrames, codec: LatentCodec, sample_rate: int = SAMPLE_RATE) -> MultiChannelSignal:
    """Transposed filtering of every latent frame followed by overlap-add."""
    n, s = codec.frame_len, codec.stride
    if y.frames.shape[1] != codec.num_filters:
        raise InvalidInputError(f"latent width {y.frames.shape[1]} != H={codec.num_filters}")
    grains = y.frames @ codec.decoder  # (L, n)
    num = grains.shape[0]
    total = n + s * (num - 1)
    out = np.zeros(total)
    for j in range(n // s):
        # frames j, j + n/s, ... tile the output without overlap
        sub = grains[j::n // s].reshape(-1)
        out[j * s:j * s + len(sub)] += sub
    left = n - s
    length = y.length if y.length is not None else total - 2 * left
    return MultiChannelSignal(out[left:left + length], sample_rate)


def latent_beamform(z: LatentFrames, w: LatentFrames | np.ndarray) -> LatentFrames:
    """Elementwise product ``y'(l, h) = w'(l, h) z'(l, h)``."""
    weights = w.frames if isinstance(w, LatentFrames) else np.asarray(w)
    if weights.shape != z.frames.shape:
        raise InvalidInputError(f"weights {weights.shape} do not match latent frames {z.frames.shape}")
    return z.with_frames(weights * z.frames)

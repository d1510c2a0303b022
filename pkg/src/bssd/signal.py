"""Multichannel buffers, WAV I/O, STFT/iSTFT, RIR convolution and mixing."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import fftconvolve

from .exceptions import InvalidConfigError, InvalidInputError

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class MultiChannelSignal:
    """Time-domain samples, shape ``(T, M)``."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise InvalidInputError(f"samples must be (T, M) with T, M >= 1, got {x.shape}")
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(np.float64)
        object.__setattr__(self, "samples", x)

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def num_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, m: int) -> np.ndarray:
        return self.samples[:, m]

    def mono(self) -> np.ndarray:
        """The single channel of a mono signal as a 1-D array."""
        if self.num_channels != 1:
            raise InvalidInputError(f"expected a mono signal, got {self.num_channels} channels")
        return self.samples[:, 0]


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    hop: int = 256
    window: str = "sqrt-hann"

    def __post_init__(self):
        if self.fft_size < 2 or self.hop < 1 or self.hop > self.fft_size:
            raise InvalidConfigError(f"bad fft_size/hop: {self.fft_size}/{self.hop}")
        if self.fft_size % self.hop:
            raise InvalidConfigError("fft_size must be a multiple of hop")
        w2 = self.analysis_window() ** 2
        ola = w2.reshape(-1, self.hop).sum(axis=0)
        if not np.allclose(ola, ola[0], rtol=1e-10, atol=0) or ola[0] <= 0:
            raise InvalidConfigError(
                f"window {self.window!r} is not COLA at hop {self.hop} for fft_size {self.fft_size}")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def analysis_window(self) -> np.ndarray:
        n = self.fft_size
        if self.window == "sqrt-hann":
            # periodic Hann
            return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n))
        if self.window == "rect":
            return np.ones(n)
        raise InvalidConfigError(f"unknown window {self.window!r}")

    def frequencies(self, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
        return np.arange(self.num_bins) * sample_rate / self.fft_size


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT bins, shape ``(L, K, M)``.

    ``length`` is the number of time samples the spectrogram was computed
    from; it lets :func:`istft` trim the edge padding exactly.
    """

    bins: np.ndarray
    fft_size: int
    hop: int
    length: int | None = None
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        b = np.asarray(self.bins)
        if b.ndim == 2:
            b = b[:, :, None]
        if b.ndim != 3:
            raise InvalidInputError(f"bins must be (L, K, M), got {b.shape}")
        if b.shape[1] != self.fft_size // 2 + 1:
            raise InvalidInputError(f"K={b.shape[1]} inconsistent with fft_size={self.fft_size}")
        object.__setattr__(self, "bins", b)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.bins.shape

    @property
    def num_channels(self) -> int:
        return self.bins.shape[2]

    def with_bins(self, bins: np.ndarray) -> "Spectrogram":
        return Spectrogram(bins, self.fft_size, self.hop, self.length, self.sample_rate)


def _padding(cfg: StftConfig, length: int) -> tuple[int, int]:
    left = cfg.fft_size - cfg.hop
    padded = length + 2 * left
    extra = (-(padded - cfg.fft_size)) % cfg.hop
    return left, left + extra


def stft(signal: MultiChannelSignal, cfg: StftConfig = StftConfig(),
         dtype=np.complex128) -> Spectrogram:
    """Forward STFT of every channel.

    The input is zero-padded by ``fft_size - hop`` on both sides so that every
    original sample is covered by the full set of overlapping frames.
    """
    x = signal.samples
    n = cfg.fft_size
    if x.shape[0] < n:
        raise InvalidInputError(f"signal of {x.shape[0]} samples shorter than one frame ({n})")
    real = np.float32 if dtype == np.complex64 else np.float64
    left, right = _padding(cfg, x.shape[0])
    xp = np.pad(x.astype(real, copy=False), ((left, right), (0, 0)))
    frames = sliding_window_view(xp, n, axis=0)[::cfg.hop]  # (L, M, n)
    win = cfg.analysis_window().astype(real)
    spec = np.fft.rfft(frames * win, axis=-1).astype(dtype, copy=False)
    return Spectrogram(spec.transpose(0, 2, 1), n, cfg.hop, x.shape[0], signal.sample_rate)


def istft(spec: Spectrogram, cfg: StftConfig = StftConfig()) -> MultiChannelSignal:
    """Weighted overlap-add synthesis, inverse of :func:`stft`."""
    if spec.fft_size != cfg.fft_size or spec.hop != cfg.hop:
        raise InvalidConfigError(
            f"spectrogram ({spec.fft_size}/{spec.hop}) incompatible with config "
            f"({cfg.fft_size}/{cfg.hop})")
    n, hop = cfg.fft_size, cfg.hop
    num_frames, _, m = spec.bins.shape
    win = cfg.analysis_window()
    frames = np.fft.irfft(spec.bins.transpose(0, 2, 1), n=n, axis=-1) * win  # (L, M, n)
    total = n + hop * (num_frames - 1)
    out = np.zeros((total, m))
    norm = np.zeros(total)
    for i in range(n // hop):
        # frames l with l % (n // hop) == i do not overlap each other
        sub = frames[i::n // hop]
        if not len(sub):
            continue
        start = i * hop
        seg = sub.transpose(0, 2, 1).reshape(-1, m)
        out[start:start + len(seg)] += seg
        norm[start:start + len(seg)] += np.tile(win ** 2, len(sub))
    left = n - hop
    length = spec.length if spec.length is not None else total - 2 * left
    norm = np.where(norm > 1e-10, norm, 1.0)
    out = (out / norm[:, None])[left:left + length]
    return MultiChannelSignal(out, spec.sample_rate)


def convolve_rir(source: MultiChannelSignal, rir, mode: str = "same") -> MultiChannelSignal:
    """Convolve a mono source with every channel of a room impulse response.

    ``rir`` is a :class:`bssd.rir.RoomImpulseResponse` or a ``(T_rir, M)`` array.
    ``mode="same"`` truncates the result to the source length, ``"full"`` keeps
    ``T + T_rir - 1`` samples.
    """
    if source.num_channels != 1:
        raise InvalidInputError("convolve_rir expects a single-channel source")
    taps = np.asarray(getattr(rir, "taps", rir), dtype=np.float64)
    if taps.ndim == 1:
        taps = taps[:, None]
    if mode not in ("same", "full"):
        raise InvalidInputError(f"unknown convolution mode {mode!r}")
    out = fftconvolve(source.samples, taps, axes=0)
    if mode == "same":
        out = out[:source.num_samples]
    return MultiChannelSignal(out, source.sample_rate)


def mix(sources: Sequence[MultiChannelSignal]) -> MultiChannelSignal:
    """Sum sources sample-wise in index order, zero-padding shorter ones."""
    if not sources:
        raise InvalidInputError("mix needs at least one source")
    m = sources[0].num_channels
    rate = sources[0].sample_rate
    for s in sources:
        if s.num_channels != m:
            raise InvalidInputError(f"channel mismatch: {s.num_channels} vs {m}")
        if s.sample_rate != rate:
            raise InvalidInputError("sample rate mismatch")
    length = max(s.num_samples for s in sources)
    out = np.zeros((length, m))
    for s in sources:
        out[:s.num_samples] += s.samples
    return MultiChannelSignal(out, rate)


def read_wav(path) -> MultiChannelSignal:
    """Read a 16-bit PCM or 32-bit float WAV file into float64 samples."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float64)
    else:
        raise InvalidInputError(f"unsupported WAV sample type {data.dtype}")
    return MultiChannelSignal(data, int(rate))


def write_wav(path, signal: MultiChannelSignal, subtype: str = "float32") -> None:
    """Write a WAV file atomically (``subtype`` is ``"float32"`` or ``"pcm16"``)."""
    from ._io import atomic_path

    x = signal.samples
    if subtype == "float32":
        data = x.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise InvalidInputError(f"unsupported WAV subtype {subtype!r}")
    if data.shape[1] == 1:
        data = data[:, 0]
    with atomic_path(Path(path)) as tmp:
        wavfile.write(str(tmp), signal.sample_rate, data)

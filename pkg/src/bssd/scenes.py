"""Synthetic sources and plane-wave / ISM scenes used by tests and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DoaGrid
from .signal import SAMPLE_RATE, MultiChannelSignal, convolve_rir, mix


def named_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for a named sub-stream of one master seed."""
    key = [int(seed)] + list(stream.encode())
    return np.random.default_rng(np.random.SeedSequence(key))


def speech_like(num_samples: int, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE,
                pitch: float | None = None) -> np.ndarray:
    """Voiced/unvoiced bursts with a random pitch contour and syllabic envelope.

    Not speech, but sparse in time and frequency the way speech is, which is
    what localization and separation care about.
    """
    t = np.arange(num_samples) / sample_rate
    f0 = pitch if pitch is not None else rng.uniform(90, 250)
    contour = f0 * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(contour) / sample_rate
    harmonics = np.zeros(num_samples)
    nyq = sample_rate / 2
    for h in range(1, int(nyq // (f0 * 1.1))):
        amp = rng.uniform(0.3, 1.0) / h
        harmonics += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    noise = rng.standard_normal(num_samples) * 0.3
    # syllable envelope: 3-6 Hz on/off pattern
    rate = rng.uniform(3, 6)
    env = np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)), 0, None) ** 0.7
    voiced = rng.random(num_samples // 800 + 1).repeat(800)[:num_samples] > 0.25
    x = env * np.where(voiced, harmonics, noise)
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12)


def interleaved_sources(count: int, num_samples: int, rng: np.random.Generator,
                        band_hz: float = 250.0, low_cut: float = 80.0,
                        sample_rate: int = SAMPLE_RATE) -> list:
    """Unit-power noise sources occupying disjoint, interleaved frequency bands.

    Source ``c`` owns every band ``b`` of width ``band_hz`` with ``b % count == c``,
    so no time-frequency bin carries two sources (up to window leakage).
    """
    freqs = np.fft.rfftfreq(num_samples, 1.0 / sample_rate)
    slot = (freqs // band_hz).astype(int) % count
    out = []
    for c in range(count):
        spec = np.fft.rfft(rng.standard_normal(num_samples))
        spec[(slot != c) | (freqs < low_cut)] = 0
        x = np.fft.irfft(spec, num_samples)
        out.append(x / np.std(x))
    return out


def delay_signal(x: np.ndarray, delays: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Apply per-channel (fractional) delays in seconds via a zero-padded FFT.

    Returns ``(len(x), len(delays))``.
    """
    n = len(x)
    pad = int(np.ceil(np.max(delays) * sample_rate)) + 64
    nfft = 1 << int(np.ceil(np.log2(n + pad)))
    spec = np.fft.rfft(x, nfft)
    freqs = np.fft.rfftfreq(nfft, 1.0 / sample_rate)
    shifted = spec[:, None] * np.exp(-2j * np.pi * freqs[:, None] * np.asarray(delays)[None, :])
    return np.fft.irfft(shifted, nfft, axis=0)[:n]


def plane_wave(source: np.ndarray, grid: DoaGrid, doa: int,
               sample_rate: int = SAMPLE_RATE) -> MultiChannelSignal:
    """The array signal of ``source`` arriving from grid direction ``doa``."""
    return MultiChannelSignal(delay_signal(source, grid.delays[doa], sample_rate), sample_rate)


@dataclass
class Scene:
    """A mixture with its dry sources, per-source images and true directions."""

    mixture: MultiChannelSignal
    sources: list  # dry mono arrays
    images: list  # MultiChannelSignal per source
    doas: list
    extra: dict = field(default_factory=dict)


def plane_wave_scene(grid: DoaGrid, doas, num_samples: int, seed: int,
                     gains=None, kind: str = "speech", sample_rate: int = SAMPLE_RATE) -> Scene:
    """Plane-wave sources from grid directions; ``kind`` is ``speech`` or ``interleaved``."""
    rng = named_rng(seed, "sources")
    gains = list(gains) if gains is not None else [1.0] * len(doas)
    if kind == "interleaved":
        dry = interleaved_sources(len(doas), num_samples, rng, sample_rate=sample_rate)
    elif kind == "speech":
        dry = [speech_like(num_samples, rng, sample_rate) for _ in doas]
    else:
        raise ValueError(f"unknown source kind {kind!r}")
    sources, images = [], []
    for d, g, x in zip(doas, gains, dry):
        s = g * x
        sources.append(s)
        images.append(plane_wave(s, grid, d, sample_rate))
    return Scene(mix(images), sources, images, list(doas))


def separated_doas(grid: DoaGrid, count: int, rng: np.random.Generator,
                   min_angle: float = 40.0) -> list:
    """Random grid indices pairwise at least ``min_angle`` degrees apart."""
    ang = grid.angular_distances()
    chosen: list = []
    for d in rng.permutation(grid.size):
        if all(ang[d, o] > min_angle for o in chosen):
            chosen.append(int(d))
            if len(chosen) == count:
                return chosen
    raise ValueError(f"cannot place {count} directions {min_angle} degrees apart")


def rir_scene(sources, rirs, sample_rate: int = SAMPLE_RATE) -> Scene:
    """Convolve dry sources with RIRs (``same`` length) and mix them."""
    images = [convolve_rir(MultiChannelSignal(s, sample_rate), h) for s, h in zip(sources, rirs)]
    doas = [getattr(h, "doa_label", None) for h in rirs]
    return Scene(mix(images), list(sources), images, doas)

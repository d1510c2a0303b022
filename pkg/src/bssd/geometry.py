"""Microphone geometry, the Fibonacci half-sphere DOA grid and steering vectors."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import write_json
from .container import write_container
from .exceptions import InvalidInputError, UndefinedInputError
from .signal import SAMPLE_RATE

SPEED_OF_SOUND = 343.0
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class ArrayGeometry:
    positions: np.ndarray  # (M, 3) meters
    c: float = SPEED_OF_SOUND

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 2:
            raise InvalidInputError(f"positions must be (M >= 2, 3), got {p.shape}")
        if self.c <= 0:
            raise InvalidInputError("speed of sound must be positive")
        object.__setattr__(self, "positions", p)

    @classmethod
    def circular(cls, num_mics: int = 6, diameter: float = 0.0926, c: float = SPEED_OF_SOUND):
        """Uniform circular array in the z = 0 plane (ReSpeaker-like by default)."""
        a = 2 * np.pi * np.arange(num_mics) / num_mics
        r = diameter / 2
        pos = np.stack([r * np.cos(a), r * np.sin(a), np.zeros(num_mics)], axis=1)
        return cls(pos, c)

    @property
    def num_mics(self) -> int:
        return self.positions.shape[0]

    @property
    def centroid(self) -> np.ndarray:
        return self.positions.mean(axis=0)

    def pairwise_distances(self) -> np.ndarray:
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        return np.linalg.norm(diff, axis=-1)

    @classmethod
    def load(cls, path) -> "ArrayGeometry":
        """Parse a geometry file: optional header ``c <value>``, then ``x y z`` rows."""
        c = SPEED_OF_SOUND
        rows = []
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0].lower() in ("c", "c="):
                c = float(parts[1])
                continue
            if len(parts) == 1 and not rows:
                c = float(parts[0])
                continue
            if len(parts) != 3:
                raise InvalidInputError(f"{path}: expected 'x y z', got {raw!r}")
            rows.append([float(v) for v in parts])
        return cls(np.array(rows), c)

    def save(self, path) -> None:
        from ._io import write_text

        lines = [f"c {self.c!r}"] + [" ".join(repr(float(v)) for v in row) for row in self.positions]
        write_text(path, "\n".join(lines) + "\n")


def fibonacci_hemisphere(num_points: int) -> np.ndarray:
    """``num_points`` unit vectors on the upper half sphere along a golden-angle spiral.

    Point ``d`` (1-based) has azimuth ``g * d`` and elevation
    ``arcsin((d - 1) / (D - 1))``, so elevations run from 0 to 90 degrees.
    """
    if num_points < 2:
        raise InvalidInputError("a DOA grid needs at least 2 points")
    d = np.arange(1, num_points + 1)
    phi = GOLDEN_ANGLE * d
    theta = np.arcsin((d - 1) / (num_points - 1))
    return np.stack([np.cos(theta) * np.cos(phi),
                     np.cos(theta) * np.sin(phi),
                     np.sin(theta)], axis=1)


def propagation_delays(points: np.ndarray, geometry: ArrayGeometry, radius: float = 1.0) -> np.ndarray:
    """Delays (seconds) from each grid point, placed ``radius`` meters from the array
    centroid, to each microphone; the smallest delay per point is subtracted."""
    src = geometry.centroid + radius * np.asarray(points)
    dist = np.linalg.norm(src[:, None, :] - geometry.positions[None, :, :], axis=-1)
    tau = dist / geometry.c
    return tau - tau.min(axis=1, keepdims=True)


def steering_vectors(delays: np.ndarray, num_bins: int, sample_rate: int = SAMPLE_RATE,
                     fft_size: int | None = None) -> np.ndarray:
    """``V[d, k, m] = exp(-2j*pi*f_k*tau[d, m])`` with ``f_k = k * fs / fft_size``."""
    if fft_size is None:
        fft_size = 2 * (num_bins - 1)
    if num_bins < 1 or fft_size < 1:
        raise InvalidInputError("need at least one frequency bin")
    freqs = np.arange(num_bins) * sample_rate / fft_size
    delays = np.asarray(delays, dtype=np.float64)
    return np.exp(-2j * np.pi * freqs[None, :, None] * delays[:, None, :])


@dataclass
class DoaGrid:
    """``D`` candidate directions with their per-microphone delays."""

    points: np.ndarray
    geometry: ArrayGeometry
    radius: float = 1.0
    delays: np.ndarray = field(init=False)
    _steering: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.delays = propagation_delays(self.points, self.geometry, self.radius)

    @classmethod
    def fibonacci(cls, num_points: int = 100, geometry: ArrayGeometry | None = None,
                  radius: float = 1.0) -> "DoaGrid":
        return cls(fibonacci_hemisphere(num_points), geometry or ArrayGeometry.circular(), radius)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def steering(self, fft_size: int = 1024, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
        """Steering tensor ``(D, fft_size // 2 + 1, M)``, cached per (fft_size, rate)."""
        key = (fft_size, sample_rate)
        if key not in self._steering:
            v = steering_vectors(self.delays, fft_size // 2 + 1, sample_rate, fft_size)
            v.setflags(write=False)
            self._steering[key] = v
        return self._steering[key]

    def check_index(self, d: int) -> int:
        if not 0 <= int(d) < self.size:
            raise InvalidInputError(f"DOA index {d} outside [0, {self.size})")
        return int(d)

    def angular_distances(self) -> np.ndarray:
        """Pairwise angles between grid points in degrees."""
        cos = np.clip(self.points @ self.points.T, -1.0, 1.0)
        return np.degrees(np.arccos(cos))

    def nearest_neighbor_angles(self) -> np.ndarray:
        a = self.angular_distances()
        np.fill_diagonal(a, np.inf)
        return a.min(axis=1)

    def neighbors(self, d: int, tolerance: float = 1.5) -> np.ndarray:
        """Indices within ``tolerance`` times the mean nearest-neighbor spacing of ``d``."""
        spacing = self.nearest_neighbor_angles().mean()
        a = self.angular_distances()[d]
        idx = np.flatnonzero(a <= tolerance * spacing)
        return idx[idx != d]

    def save(self, prefix, fft_size: int = 1024, sample_rate: int = SAMPLE_RATE) -> None:
        """Write ``<prefix>.bin`` (steering tensor) and ``<prefix>.json`` (points, delays)."""
        prefix = Path(prefix)
        write_container(prefix.with_suffix(".bin"), self.steering(fft_size, sample_rate))
        write_json(prefix.with_suffix(".json"), {
            "points": self.points.tolist(),
            "delays": self.delays.tolist(),
            "radius": self.radius,
            "c": self.geometry.c,
            "mic_positions": self.geometry.positions.tolist(),
            "fft_size": fft_size,
            "sample_rate": sample_rate,
        })


def rir_fft_size(length: int) -> int:
    """Next power of two >= ``length``, at least 1024."""
    return max(1024, 1 << int(np.ceil(np.log2(max(length, 1)))))


def doa_scores(taps: np.ndarray, grid: DoaGrid, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """PHAT-normalised matched-filter score of an RIR against every grid direction."""
    taps = np.asarray(taps, dtype=np.float64)
    if taps.ndim != 2 or taps.shape[1] != grid.geometry.num_mics:
        raise InvalidInputError(
            f"RIR must be (T, {grid.geometry.num_mics}), got {taps.shape}")
    nfft = rir_fft_size(taps.shape[0])
    spec = np.fft.rfft(taps, n=nfft, axis=0)  # (K, M)
    power = np.sum(np.abs(spec) ** 2, axis=1)
    if not np.any(power > 0):
        raise UndefinedInputError("all-zero RIR has no direction")
    keep = power > 0
    v = grid.steering(nfft, sample_rate)[:, keep, :]  # (D, K', M)
    proj = np.einsum("km,dkm->dk", spec[keep].conj(), v)
    return np.sum(np.abs(proj) ** 2 / power[keep], axis=1)


def assign_doa(rir, grid: DoaGrid) -> int:
    """Grid index whose steering vectors best match the RIR spectrum (lowest index on ties)."""
    taps = getattr(rir, "taps", rir)
    rate = getattr(rir, "sample_rate", SAMPLE_RATE)
    return int(np.argmax(doa_scores(taps, grid, rate)))

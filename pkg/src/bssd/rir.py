"""Shoebox image-source room impulse responses and RIR utilities."""

from __future__ import annotations

import json
from functools import lru_cache
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .exceptions import InvalidInputError
from .geometry import ArrayGeometry, DoaGrid, assign_doa
from .signal import SAMPLE_RATE, MultiChannelSignal, read_wav, write_wav

KERNEL_TAPS = 81
MAX_ORDER_CAP = 40
HIGHPASS_HZ = 50.0
ABSORPTION_MODELS = ("specular", "sabine", "eyring")


def specular_decay_time(dimensions, c: float = 343.0, start_db: float = -5.0,
                        stop_db: float = -25.0, directions: int = 4000) -> float:
    """Fitted decay time of a shoebox image field with ``-ln(1 - a) = 1``.

    An image at distance ``c t`` in direction ``u`` has crossed about
    ``c t sum_i |u_i| / L_i`` walls, and image density cancels spherical
    spreading, so the energy envelope is the direction average of
    ``exp(-c t s(u))``. Its Schroeder curve is fitted over the same dB range
    as :func:`measure_rt60`; the decay time for any absorption follows by
    dividing by ``-ln(1 - a)``.
    """
    return _specular_decay_time(tuple(float(v) for v in dimensions), float(c),
                                start_db, stop_db, directions)


@lru_cache(maxsize=256)
def _specular_decay_time(dimensions, c, start_db, stop_db, directions) -> float:
    i = np.arange(directions) + 0.5
    z = 1 - 2 * i / directions
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + np.sqrt(5.0)) * i
    u = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    s = np.abs(u) @ (1.0 / np.asarray(dimensions, dtype=float))
    t = np.linspace(0.0, 30.0 / (c * s.min()), 4000)
    # integral of exp(-c s t') from t to infinity
    edc = np.mean(np.exp(-c * np.outer(t, s)) / (c * s), axis=1)
    db = 10 * np.log10(edc / edc[0])
    sel = (db <= start_db) & (db >= stop_db)
    return float(-60.0 / np.polyfit(t[sel], db[sel], 1)[0])


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple  # (Lx, Ly, Lz) meters
    rt60_target: float
    source_position: tuple
    array_position: tuple  # array centroid
    max_order: int | None = None
    seed: int = 0
    absorption_model: str = "specular"  # or "sabine" / "eyring"

    def __post_init__(self):
        dims = np.asarray(self.dimensions, dtype=float)
        if dims.shape != (3,) or np.any(dims <= 0):
            raise InvalidInputError(f"room dimensions must be 3 positive lengths, got {self.dimensions}")
        if self.rt60_target <= 0:
            raise InvalidInputError("rt60_target must be positive")
        if self.absorption_model not in ABSORPTION_MODELS:
            raise InvalidInputError(f"unknown absorption model {self.absorption_model!r}")
        for name in ("source_position", "array_position"):
            p = np.asarray(getattr(self, name), dtype=float)
            if p.shape != (3,) or np.any(p <= 0) or np.any(p >= dims):
                raise InvalidInputError(f"{name} {tuple(p)} is outside the room {tuple(dims)}")
        if self.max_order is not None and self.max_order < 0:
            raise InvalidInputError("max_order must be >= 0")

    @property
    def volume(self) -> float:
        return float(np.prod(self.dimensions))

    @property
    def surface(self) -> float:
        x, y, z = self.dimensions
        return float(2 * (x * y + x * z + y * z))

    def absorption(self, c: float = 343.0) -> float:
        """Uniform energy absorption coefficient reaching ``rt60_target``.

        ``sabine``: ``a = 0.161 V / (S T)``. ``eyring``: ``a = 1 - exp(-0.161 V / (S T))``.
        ``specular``: ``a = 1 - exp(-T1 / T)`` where ``T1`` is the decay time of
        the shoebox's specular image field at unit log-attenuation per
        reflection (see :func:`specular_decay_time`). Clamped to ``(0, 0.99]``.
        """
        if self.absorption_model == "specular":
            a = 1.0 - np.exp(-specular_decay_time(self.dimensions, c) / self.rt60_target)
        else:
            sabine = 0.161 * self.volume / (self.surface * self.rt60_target)
            a = sabine if self.absorption_model == "sabine" else 1.0 - np.exp(-sabine)
        return float(np.clip(a, 1e-6, 0.99))

    def order(self, c: float) -> int:
        if self.max_order is not None:
            return self.max_order
        return int(min(np.ceil(c * self.rt60_target / min(self.dimensions)), MAX_ORDER_CAP))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("dimensions", "source_position", "array_position"):
            d[k] = [float(v) for v in d[k]]
        return d


@dataclass(frozen=True)
class RoomImpulseResponse:
    taps: np.ndarray  # (T_rir, M)
    sample_rate: int = SAMPLE_RATE
    doa_label: int | None = None
    spec: RoomSpec | None = None

    @property
    def num_channels(self) -> int:
        return self.taps.shape[1]

    def save(self, wav_path) -> None:
        """Float32 multichannel WAV plus ``.json`` sidecar (room spec, DOA label)."""
        from ._io import write_json

        wav_path = Path(wav_path)
        write_wav(wav_path, MultiChannelSignal(self.taps, self.sample_rate), "float32")
        write_json(wav_path.with_suffix(".json"), {
            "doa_label": self.doa_label,
            "sample_rate": self.sample_rate,
            "spec": self.spec.to_dict() if self.spec else None,
        })

    @classmethod
    def load(cls, wav_path) -> "RoomImpulseResponse":
        wav_path = Path(wav_path)
        sig = read_wav(wav_path)
        label, spec = None, None
        side = wav_path.with_suffix(".json")
        if side.exists():
            meta = json.loads(side.read_text())
            label = meta.get("doa_label")
            if meta.get("spec"):
                s = meta["spec"]
                spec = RoomSpec(**{**s, **{k: tuple(s[k]) for k in
                                          ("dimensions", "source_position", "array_position")}})
        return cls(sig.samples, sig.sample_rate, label, spec)


def _image_sources(spec: RoomSpec, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Image positions ``(N, 3)`` and reflection counts ``(N,)`` up to ``order`` reflections."""
    room = np.asarray(spec.dimensions, dtype=float)
    src = np.asarray(spec.source_position, dtype=float)
    reach = order // 2 + 1
    n = np.arange(-reach, reach + 1)
    per_axis_pos, per_axis_cnt = [], []
    for ax in range(3):
        # Allen & Berkley: image (n, q) sits at (1 - 2q) x + 2 n L with |n - q| + |n| reflections
        pos = np.concatenate([src[ax] + 2 * n * room[ax], -src[ax] + 2 * n * room[ax]])
        cnt = np.concatenate([2 * np.abs(n), np.abs(n - 1) + np.abs(n)])
        per_axis_pos.append(pos)
        per_axis_cnt.append(cnt)
    px, py, pz = np.meshgrid(*per_axis_pos, indexing="ij")
    cx, cy, cz = np.meshgrid(*per_axis_cnt, indexing="ij")
    total = (cx + cy + cz).ravel()
    keep = total <= order
    pos = np.stack([px.ravel(), py.ravel(), pz.ravel()], axis=1)[keep]
    return pos, total[keep]


def _fractional_kernel(frac_delay: np.ndarray, taps: int = KERNEL_TAPS) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed sinc taps for each delay: integer offsets ``(taps,)`` and weights ``(N, taps)``."""
    half = taps // 2
    offsets = np.arange(-half, half + 1)
    base = np.round(frac_delay)
    x = (base[:, None] + offsets[None, :]) - frac_delay[:, None]
    win = 0.5 + 0.5 * np.cos(np.pi * x / (half + 1))
    return offsets, np.sinc(x) * win


def simulate_rir(spec: RoomSpec, geometry: ArrayGeometry | None = None,
                 sample_rate: int = SAMPLE_RATE, length: int | None = None,
                 highpass_hz: float | None = HIGHPASS_HZ,
                 chunk: int = 20000) -> RoomImpulseResponse:
    """Image-source RIR from ``spec.source_position`` to every microphone.

    Each image contributes ``beta^reflections / distance`` at delay
    ``distance / c``, with ``beta = sqrt(1 - absorption)`` and an 81-tap
    windowed-sinc fractional delay. All-positive reflection coefficients sum
    coherently near DC, so the result is high-passed at ``highpass_hz``
    (zero-phase, 4th-order Butterworth; ``None`` keeps the raw sum).
    """
    geometry = geometry or ArrayGeometry.circular()
    mics = np.asarray(spec.array_position) + geometry.positions - geometry.centroid
    room = np.asarray(spec.dimensions)
    if np.any(mics <= 0) or np.any(mics >= room):
        raise InvalidInputError("microphones fall outside the room")
    order = spec.order(geometry.c)
    beta = np.sqrt(1.0 - spec.absorption(geometry.c))
    images, refl = _image_sources(spec, order)
    gains = beta ** refl
    half = KERNEL_TAPS // 2
    dist_all = np.linalg.norm(images[:, None, :] - mics[None, :, :], axis=-1)  # (N, M)
    delays = dist_all / geometry.c * sample_rate
    if length is None:
        length = int(np.ceil(delays.max())) + half + 1
    taps = np.zeros((length, geometry.num_mics))
    for m in range(geometry.num_mics):
        acc = np.zeros(length + 2 * half + 1)
        for s in range(0, len(images), chunk):
            t = delays[s:s + chunk, m]
            amp = gains[s:s + chunk] / dist_all[s:s + chunk, m]
            offsets, w = _fractional_kernel(t)
            idx = np.round(t).astype(int)[:, None] + offsets[None, :] + half
            ok = (idx >= 0) & (idx < len(acc))
            acc += np.bincount(idx[ok], weights=(amp[:, None] * w)[ok], minlength=len(acc))
        taps[:, m] = acc[half:half + length]
    if highpass_hz:
        sos = butter(4, highpass_hz, "highpass", fs=sample_rate, output="sos")
        taps = sosfiltfilt(sos, taps, axis=0)
    return RoomImpulseResponse(taps, sample_rate, None, spec)


def rotate_channels(rir: RoomImpulseResponse, steps: int) -> RoomImpulseResponse:
    """Virtually rotate a circular array by shifting channels ``steps`` positions."""
    return replace(rir, taps=np.roll(rir.taps, steps, axis=1), doa_label=None)


def label_doa(rir: RoomImpulseResponse, grid: DoaGrid) -> RoomImpulseResponse:
    return replace(rir, doa_label=assign_doa(rir, grid))


def schroeder_curve(taps: np.ndarray) -> np.ndarray:
    """Backward-integrated energy decay in dB (0 dB at t = 0)."""
    energy = np.cumsum(np.asarray(taps, dtype=float)[::-1] ** 2)[::-1]
    return 10 * np.log10(energy / energy[0] + 1e-300)


def measure_rt60(taps: np.ndarray, sample_rate: int = SAMPLE_RATE,
                 start_db: float = -5.0, stop_db: float = -25.0) -> float:
    """RT60 from a linear fit of the Schroeder curve between ``start_db`` and ``stop_db``.

    Multichannel input is averaged over channels.
    """
    taps = np.asarray(taps, dtype=float)
    if taps.ndim == 2:
        return float(np.mean([measure_rt60(taps[:, m], sample_rate, start_db, stop_db)
                              for m in range(taps.shape[1])]))
    edc = schroeder_curve(taps)
    sel = np.flatnonzero((edc <= start_db) & (edc >= stop_db))
    if len(sel) < 2:
        raise InvalidInputError("decay range not covered by the impulse response")
    t = sel / sample_rate
    slope = np.polyfit(t, edc[sel], 1)[0]
    return float(-60.0 / slope)


def random_room(rng: np.random.Generator, geometry: ArrayGeometry | None = None,
                dim_range=(3.0, 6.0), rt60_range=(0.2, 0.4), margin: float = 0.5,
                min_distance: float = 1.0, absorption_model: str = "specular",
                seed: int = 0) -> RoomSpec:
    """Random shoebox with random array and source placement."""
    dims = rng.uniform(*dim_range, size=3)
    rt60 = float(rng.uniform(*rt60_range))
    lo, hi = np.full(3, margin), dims - margin
    array = rng.uniform(lo, hi)
    for _ in range(1000):
        src = rng.uniform(lo, hi)
        if np.linalg.norm(src - array) >= min_distance:
            break
    return RoomSpec(tuple(dims), rt60, tuple(src), tuple(array), None, seed, absorption_model)


def source_toward(grid: DoaGrid, doa: int, array_position, distance: float) -> tuple:
    """Source position ``distance`` meters from the array centroid along grid point ``doa``."""
    return tuple(np.asarray(array_position, dtype=float) + distance * grid.points[doa])

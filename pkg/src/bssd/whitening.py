"""Isotropic coherence, ZCA whitening and spatial speech-presence maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError
from .geometry import ArrayGeometry, DoaGrid
from .signal import SAMPLE_RATE, Spectrogram

LOADING = 1e-3


@dataclass(frozen=True)
class CoherenceModel:
    gamma: np.ndarray  # (K, M, M)


@dataclass(frozen=True)
class WhiteningTransform:
    U: np.ndarray  # (K, M, M), symmetric per bin
    eps: float = LOADING

    @property
    def num_bins(self) -> int:
        return self.U.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Multiply ``U(k)`` onto the last axis of ``x[..., K, M]``."""
        return np.einsum("kij,...kj->...ki", self.U, x)

    @classmethod
    def identity(cls, num_bins: int, num_mics: int, eps: float = LOADING):
        """The transform obtained for an uncorrelated field, ``(1 + eps)^-1/2 I``."""
        u = np.broadcast_to(np.eye(num_mics) / np.sqrt(1 + eps), (num_bins, num_mics, num_mics))
        return cls(np.array(u), eps)


@dataclass(frozen=True)
class SpatialMap:
    values: np.ndarray  # (L, K, D)
    kind: str  # "raw", "whitened" or "weighted"

    def per_direction(self) -> np.ndarray:
        """Sum over frames and bins -> ``(D,)``."""
        return self.values.sum(axis=(0, 1))

    def per_frame(self) -> np.ndarray:
        """Sum over bins -> ``(L, D)``."""
        return self.values.sum(axis=1)


def isotropic_coherence(geometry: ArrayGeometry, num_bins: int = 513,
                        sample_rate: int = SAMPLE_RATE, fft_size: int | None = None) -> CoherenceModel:
    """``Gamma_ij(k) = sin(2 pi f_k x_ij / c) / (2 pi f_k x_ij / c)``."""
    if fft_size is None:
        fft_size = 2 * (num_bins - 1)
    freqs = np.arange(num_bins) * sample_rate / fft_size
    dist = geometry.pairwise_distances()
    # np.sinc(x) = sin(pi x) / (pi x)
    gamma = np.sinc(2 * freqs[:, None, None] * dist[None] / geometry.c)
    return CoherenceModel(gamma)


def zca(model: CoherenceModel, eps: float = LOADING) -> WhiteningTransform:
    """Per-bin ZCA whitening ``U = E diag(1 / sqrt(lambda + eps)) E^T``.

    Negative eigenvalues from round-off are clamped to zero before loading.
    """
    g = np.asarray(model.gamma, dtype=np.float64)
    if g.ndim != 3 or g.shape[1] != g.shape[2]:
        raise InvalidInputError(f"coherence must be (K, M, M), got {g.shape}")
    if not np.allclose(g, g.transpose(0, 2, 1), rtol=0, atol=1e-12):
        raise InvalidInputError("coherence matrices must be symmetric")
    g = 0.5 * (g + g.transpose(0, 2, 1))
    lam, vec = np.linalg.eigh(g)
    lam = np.maximum(lam, 0.0) + eps
    u = np.einsum("kij,kj,klj->kil", vec, 1.0 / np.sqrt(lam), vec)
    u = 0.5 * (u + u.transpose(0, 2, 1))
    return WhiteningTransform(u, eps)


def whitening_for(geometry: ArrayGeometry, fft_size: int = 1024, sample_rate: int = SAMPLE_RATE,
                  eps: float = LOADING) -> WhiteningTransform:
    return zca(isotropic_coherence(geometry, fft_size // 2 + 1, sample_rate, fft_size), eps)


def _normalized_projection(z: np.ndarray, v: np.ndarray, chunk: int = 64) -> np.ndarray:
    """``|z^H v|^2 / (|z|^2 |v|^2)`` for z ``(L, K, M)`` and v ``(D, K, M)`` -> ``(L, K, D)``.

    Bins with zero input energy score 0. Frames are processed in chunks to
    bound the complex intermediate.
    """
    num_frames, num_bins, _ = z.shape
    vt = v.transpose(1, 2, 0)  # (K, M, D)
    vn = np.sum(np.abs(v) ** 2, axis=-1).T  # (K, D)
    out = np.zeros((num_frames, num_bins, v.shape[0]))
    tiny = np.finfo(np.float64).tiny
    for start in range(0, num_frames, chunk):
        zc = z[start:start + chunk]
        # batched over k: (K, l, M) @ (K, M, D)
        proj = np.matmul(np.conj(zc).transpose(1, 0, 2), vt).transpose(1, 0, 2)
        den = np.sum(np.abs(zc) ** 2, axis=-1)[:, :, None] * vn[None]
        np.divide(np.abs(proj) ** 2, den, out=out[start:start + chunk], where=den > tiny)
    return np.clip(out, 0.0, 1.0, out=out)


def _check(z: Spectrogram, grid: DoaGrid) -> np.ndarray:
    v = grid.steering(z.fft_size, z.sample_rate)
    if v.shape[2] != z.num_channels:
        raise InvalidInputError(f"grid has {v.shape[2]} mics, spectrogram {z.num_channels}")
    return v


def spatial_map_raw(z: Spectrogram, grid: DoaGrid) -> SpatialMap:
    """Unwhitened map, normalised by both ``|Z|^2`` and ``|V|^2`` so values lie in [0, 1]."""
    v = _check(z, grid)
    return SpatialMap(_normalized_projection(z.bins, v), "raw")


def spatial_map_whitened(z: Spectrogram, grid: DoaGrid, whitening: WhiteningTransform) -> SpatialMap:
    v = _check(z, grid)
    if whitening.num_bins != z.bins.shape[1]:
        raise InvalidInputError("whitening transform and spectrogram disagree on K")
    return SpatialMap(_normalized_projection(whitening.apply(z.bins), whitening.apply(v)), "whitened")


def mixture_power(z: Spectrogram) -> np.ndarray:
    """Mean power over channels per time-frequency bin, ``(L, K)``."""
    return np.mean(np.abs(z.bins) ** 2, axis=-1)


def weight_map(gamma_u: SpatialMap, z: Spectrogram) -> SpatialMap:
    power = mixture_power(z)
    if power.shape != gamma_u.values.shape[:2]:
        raise InvalidInputError("map and spectrogram shapes differ")
    return SpatialMap(gamma_u.values * power[:, :, None], "weighted")

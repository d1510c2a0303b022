"""Frequency-domain adaption, norm layer and filter-and-sum beamforming."""

from __future__ import annotations

import numpy as np

from .container import load_tensor, save_tensor
from .exceptions import InvalidInputError
from .geometry import DoaGrid
from .signal import Spectrogram
from .whitening import WhiteningTransform


def whitened_steering(grid: DoaGrid, whitening: WhiteningTransform, doa: int,
                      fft_size: int = 1024, sample_rate: int = 16000) -> np.ndarray:
    """``U(k) V(d, k)`` for one direction, shape ``(K, M)``."""
    grid.check_index(doa)
    v = grid.steering(fft_size, sample_rate)[doa]
    if v.shape[0] != whitening.num_bins:
        raise InvalidInputError("whitening transform and steering disagree on K")
    return whitening.apply(v)


def analytic_adaption_fd(z: Spectrogram, doa: int, grid: DoaGrid,
                         whitening: WhiteningTransform) -> Spectrogram:
    """Whiten ``Z`` and remove the phase of the whitened steering vector of ``doa``.

    A plane wave from ``doa`` comes out with zero phase difference between
    channels.
    """
    uv = whitened_steering(grid, whitening, doa, z.fft_size, z.sample_rate)
    if uv.shape[1] != z.num_channels:
        raise InvalidInputError(f"grid has {uv.shape[1]} mics, spectrogram {z.num_channels}")
    return z.with_bins(np.conj(uv)[None] * whitening.apply(z.bins))


def adaption_matrices_from_steering(grid: DoaGrid, whitening: WhiteningTransform,
                                    fft_size: int = 1024, sample_rate: int = 16000) -> np.ndarray:
    """Statistic-adaption weights ``A[d, k] = diag(conj(U V_d)) U`` reproducing the analytic layer."""
    uv = whitening.apply(grid.steering(fft_size, sample_rate))  # (D, K, M)
    return np.conj(uv)[..., :, None] * whitening.U[None]


def statistic_adaption_fd(z: Spectrogram, doa: int, weights: np.ndarray) -> Spectrogram:
    """``Z~(l, k) = A(doa, k) Z(l, k)`` with ``weights`` of shape ``(D, K, M, M)``."""
    a = np.asarray(weights)
    if a.ndim != 4 or a.shape[2] != a.shape[3]:
        raise InvalidInputError(f"adaption weights must be (D, K, M, M), got {a.shape}")
    if not 0 <= doa < a.shape[0]:
        raise InvalidInputError(f"no adaption weights for DOA {doa}")
    if a.shape[1] != z.bins.shape[1] or a.shape[2] != z.num_channels:
        raise InvalidInputError("adaption weights do not match the spectrogram")
    return z.with_bins(np.einsum("kij,lkj->lki", a[doa], z.bins))


def save_adaption_weights(path, weights: np.ndarray) -> None:
    save_tensor(path, weights)


def load_adaption_weights(path) -> np.ndarray:
    return load_tensor(path, rank=4)


def norm_layer(z: Spectrogram) -> Spectrogram:
    """Rotate each bin vector to the phase of channel 1 and scale it to unit L2 norm.

    Vectors that vanish after the rotation (including all-zero input) map to zero.
    """
    x = z.bins * np.conj(z.bins[..., :1])
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    out = np.zeros_like(x)
    np.divide(x, n, out=out, where=n > np.finfo(np.float64).tiny)
    return z.with_bins(out)


def filter_and_sum(z: Spectrogram, weights: np.ndarray, conjugate: bool = False) -> Spectrogram:
    """``Y(l, k) = W(l, k)^T Z~(l, k)``; ``conjugate=True`` uses ``W^H`` instead."""
    w = np.asarray(weights)
    if w.shape != z.bins.shape:
        if w.ndim == 2 and w.shape == z.bins.shape[1:]:
            w = w[None]
        else:
            raise InvalidInputError(f"weights {w.shape} do not match spectrogram {z.bins.shape}")
    if conjugate:
        w = np.conj(w)
    return z.with_bins(np.sum(w * z.bins, axis=-1, keepdims=True))


def oracle_delay_and_sum(z: Spectrogram) -> np.ndarray:
    """Equal weights ``1/M``: averages the phase-aligned channels."""
    m = z.num_channels
    return np.full(z.bins.shape, 1.0 / m, dtype=np.complex128)


def distortionless_delay_and_sum(z: Spectrogram, whitened_target: np.ndarray) -> np.ndarray:
    """Equal-weight average rescaled per bin so the target direction passes with unit gain.

    After analytic adaption a plane wave from the target is scaled by
    ``|U V|^2`` per bin; dividing it out removes that colouration.
    """
    gain = np.sum(np.abs(whitened_target) ** 2, axis=-1)  # (K,)
    scale = np.where(gain > 0, 1.0 / np.where(gain > 0, gain, 1.0), 0.0)
    w = np.broadcast_to(scale[None, :, None], z.bins.shape)
    return np.array(w, dtype=np.complex128)

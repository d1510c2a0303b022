import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bssd.exceptions import InvalidInputError
from bssd.scenes import plane_wave_scene
from bssd.signal import MultiChannelSignal, Spectrogram, StftConfig, stft
from bssd.whitening import (CoherenceModel, isotropic_coherence, mixture_power, spatial_map_raw,
                            spatial_map_whitened, weight_map, zca)


def jacobi_eigh(a, sweeps=100):
    """Cyclic Jacobi rotations for a real symmetric matrix."""
    a = np.array(a, dtype=np.float64)
    n = len(a)
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < 1e-15:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = 0.5 * np.arctan2(2 * a[p, q], a[q, q] - a[p, p])
                c, s = np.cos(theta), np.sin(theta)
                r = np.eye(n)
                r[p, p] = r[q, q] = c
                r[p, q], r[q, p] = s, -s
                a = r.T @ a @ r
                v = v @ r
    return np.diag(a), v


def test_coherence_matches_sinc_loop(geometry):
    model = isotropic_coherence(geometry, 513, 16000, 1024)
    pos = geometry.positions
    for k in (0, 1, 100, 512):
        f = k * 16000 / 1024
        for i in range(6):
            for j in range(6):
                x = np.linalg.norm(pos[i] - pos[j])
                arg = 2 * np.pi * f * x / 343.0
                expect = 1.0 if arg == 0 else np.sin(arg) / arg
                assert abs(model.gamma[k, i, j] - expect) < 1e-12


def test_zca_matches_jacobi_oracle(geometry):
    model = isotropic_coherence(geometry, 513, 16000, 1024)
    u = zca(model, 1e-3).U
    for k in (0, 5, 60, 300, 512):
        lam, vec = jacobi_eigh(model.gamma[k])
        ref = vec @ np.diag(1 / np.sqrt(np.maximum(lam, 0) + 1e-3)) @ vec.T
        np.testing.assert_allclose(u[k], ref, atol=1e-8)


def test_zca_whitens_and_is_symmetric(geometry, whitening):
    g = isotropic_coherence(geometry, 513, 16000, 1024).gamma
    eye = np.eye(6)
    u = whitening.U
    err = max(np.linalg.norm(u[k] @ (g[k] + 1e-3 * eye) @ u[k].T - eye) for k in range(513))
    assert err < 1e-8
    assert np.max(np.abs(u - u.transpose(0, 2, 1))) < 1e-10


def test_zca_rejects_asymmetric():
    g = np.eye(2)[None].copy()
    g[0, 0, 1] = 0.5
    with pytest.raises(InvalidInputError):
        zca(CoherenceModel(g))


def naive_map(z, v):
    num_frames, num_bins, _ = z.shape
    out = np.zeros((num_frames, num_bins, v.shape[0]))
    for l in range(num_frames):
        for k in range(num_bins):
            zz = z[l, k]
            ez = np.vdot(zz, zz).real
            if ez == 0:
                continue
            for d in range(v.shape[0]):
                out[l, k, d] = abs(np.vdot(zz, v[d, k])) ** 2 / (ez * np.vdot(v[d, k], v[d, k]).real)
    return out


def small_spec(rng, frames=3, fft=1024):
    bins = rng.standard_normal((frames, fft // 2 + 1, 6)) + 1j * rng.standard_normal((frames, fft // 2 + 1, 6))
    return Spectrogram(bins, fft, fft // 4)


def test_raw_map_matches_loop(grid, rng):
    z = small_spec(rng, 2)
    z.bins[1, 7] = 0
    got = spatial_map_raw(z, grid).values
    v = grid.steering(1024, 16000)
    sel = slice(0, 20)
    np.testing.assert_allclose(got[:, sel], naive_map(z.bins[:, sel], v[:, sel]), atol=1e-12)
    assert np.all(got[1, 7] == 0)


def test_whitened_map_matches_loop(grid, whitening, rng):
    z = small_spec(rng, 2)
    got = spatial_map_whitened(z, grid, whitening).values
    u = whitening.U
    v = grid.steering(1024, 16000)
    ks = [0, 3, 40, 200]
    uz = np.einsum("kij,lkj->lki", u[ks], z.bins[:, ks])
    uv = np.einsum("kij,dkj->dki", u[ks], v[:, ks])
    np.testing.assert_allclose(got[:, ks], naive_map(uz, uv), atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(re=st.floats(-50, 50), im=st.floats(-50, 50))
def test_maps_scale_invariant(grid, whitening, re, im):
    alpha = complex(re, im)
    if abs(alpha) < 1e-3:
        return
    z = small_spec(np.random.default_rng(7), 1)
    scaled = z.with_bins(alpha * z.bins)
    np.testing.assert_allclose(spatial_map_raw(scaled, grid).values, spatial_map_raw(z, grid).values, atol=1e-9)
    np.testing.assert_allclose(spatial_map_whitened(scaled, grid, whitening).values,
                               spatial_map_whitened(z, grid, whitening).values, atol=1e-9)


def test_weight_map_rules(grid, whitening, rng):
    z = small_spec(rng, 3)
    z.bins[1] = 0
    gu = spatial_map_whitened(z, grid, whitening)
    gw = weight_map(gu, z)
    assert np.all(gw.values[1] == 0)
    np.testing.assert_allclose(gw.values, gu.values * mixture_power(z)[:, :, None])
    unit = z.with_bins(np.exp(1j * rng.uniform(0, 6, z.bins.shape)))
    gu1 = spatial_map_whitened(unit, grid, whitening)
    np.testing.assert_allclose(weight_map(gu1, unit).values, gu1.values, atol=1e-12)


def test_plane_wave_peaks_at_true_direction_every_frame(grid, whitening):
    for d0 in (4, 61):
        scene = plane_wave_scene(grid, [d0], 16000, seed=d0)
        spec = stft(scene.mixture)
        gu = spatial_map_whitened(spec, grid, whitening)
        energy = np.sum(np.abs(spec.bins) ** 2, axis=(1, 2))
        live = energy > 1e-4 * energy.max()
        assert np.all(np.argmax(gu.per_frame()[live], axis=1) == d0)
        assert gu.values.min() >= 0 and gu.values.max() <= 1


def test_map_shape_checks(grid, whitening, rng):
    bad = Spectrogram(np.ones((1, 513, 5), complex), 1024, 256)
    with pytest.raises(InvalidInputError):
        spatial_map_raw(bad, grid)
    z = small_spec(rng, 1, fft=512)
    with pytest.raises(InvalidInputError):
        spatial_map_whitened(z, grid, whitening)

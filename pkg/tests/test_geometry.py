import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bssd.exceptions import InvalidInputError, UndefinedInputError
from bssd.geometry import (ArrayGeometry, DoaGrid, assign_doa, doa_scores, fibonacci_hemisphere,
                           propagation_delays, rir_fft_size, steering_vectors)


def test_fibonacci_points_follow_spiral():
    D = 7
    pts = fibonacci_hemisphere(D)
    g = np.pi * (3 - np.sqrt(5))
    for d in range(1, D + 1):
        theta = np.arcsin((d - 1) / (D - 1))
        phi = g * d
        expect = [np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), np.sin(theta)]
        np.testing.assert_allclose(pts[d - 1], expect, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(D=st.integers(2, 400))
def test_grid_on_upper_unit_hemisphere(D):
    pts = fibonacci_hemisphere(D)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)
    assert np.all(pts[:, 2] >= 0)
    assert np.isclose(pts[-1, 2], 1.0)


def test_grid_too_small():
    with pytest.raises(InvalidInputError):
        fibonacci_hemisphere(1)


def test_grid_resolution_d100(grid):
    assert abs(grid.nearest_neighbor_angles().mean() - 13.82) < 1.5


def test_grid_deterministic(geometry):
    a = DoaGrid.fibonacci(100, geometry)
    b = DoaGrid.fibonacci(100, geometry)
    assert a.points.tobytes() == b.points.tobytes()
    assert a.steering().tobytes() == b.steering().tobytes()


def test_delays_from_point_one_meter_away(geometry):
    pts = fibonacci_hemisphere(5)
    tau = propagation_delays(pts, geometry)
    for d in range(5):
        src = geometry.positions.mean(axis=0) + pts[d]
        raw = [np.sqrt(np.sum((src - p) ** 2)) / 343.0 for p in geometry.positions]
        np.testing.assert_allclose(tau[d], np.array(raw) - min(raw), atol=1e-15)
    assert np.all(tau.min(axis=1) == 0)


def test_steering_unit_modulus_and_phase(grid):
    v = grid.steering(1024, 16000)
    np.testing.assert_allclose(np.abs(v), 1.0, atol=1e-12)
    k, d, m = 37, 11, 4
    np.testing.assert_allclose(v[d, k, m], np.exp(-2j * np.pi * k * 16000 / 1024 * grid.delays[d, m]))
    assert not v.flags.writeable


def test_steering_requires_bins():
    with pytest.raises(InvalidInputError):
        steering_vectors(np.zeros((1, 2)), 0)


def test_geometry_file_round_trip(tmp_path, geometry):
    geometry.save(tmp_path / "g.txt")
    back = ArrayGeometry.load(tmp_path / "g.txt")
    np.testing.assert_allclose(back.positions, geometry.positions)
    assert back.c == geometry.c
    (tmp_path / "h.txt").write_text("# two mics\n0 0 0\n0.1 0 0\n")
    assert ArrayGeometry.load(tmp_path / "h.txt").num_mics == 2


def test_geometry_validation():
    with pytest.raises(InvalidInputError):
        ArrayGeometry(np.zeros((1, 3)))
    with pytest.raises(InvalidInputError):
        ArrayGeometry(np.zeros((3, 3)), c=0)


def test_grid_save(tmp_path, grid):
    grid.save(tmp_path / "grid")
    meta = json.loads((tmp_path / "grid.json").read_text())
    assert len(meta["points"]) == 100
    from bssd.container import read_container
    assert read_container(tmp_path / "grid.bin").shape == (100, 513, 6)


def test_neighbors_are_close(grid):
    spacing = grid.nearest_neighbor_angles().mean()
    for d in (0, 40, 99):
        nb = grid.neighbors(d)
        assert len(nb) >= 1 and d not in nb
        assert np.all(grid.angular_distances()[d, nb] <= 1.5 * spacing)


def brute_force_doa(taps, grid, fs=16000):
    """Explicit loops over directions, bins and mics."""
    n = max(1024, 1 << int(np.ceil(np.log2(len(taps)))))
    t = np.arange(len(taps))
    best, best_d = -np.inf, None
    for d in range(grid.size):
        score = 0.0
        for k in range(0, n // 2 + 1, 1):
            basis = np.exp(-2j * np.pi * k * t / n)
            h = basis @ taps  # (M,)
            p = np.sum(np.abs(h) ** 2)
            if p == 0:
                continue
            v = np.exp(-2j * np.pi * k * fs / n * grid.delays[d])
            score += np.abs(np.vdot(h, v)) ** 2 / p
        if score > best:
            best, best_d = score, d
    return best_d, best


def test_assign_doa_matches_brute_force(grid, rng):
    taps = rng.standard_normal((200, 6)) * np.exp(-np.arange(200) / 40)[:, None]
    small = DoaGrid(grid.points[:12], grid.geometry)
    d, score = brute_force_doa(taps, small)
    assert assign_doa(taps, small) == d
    np.testing.assert_allclose(doa_scores(taps, small, 16000)[d], score, rtol=1e-9)


def test_assign_doa_exact_steering_spectrum(grid):
    n = 1024
    for d0 in (3, 50, 97):
        spec = grid.steering(n, 16000)[d0]
        taps = np.fft.irfft(spec, n=n, axis=0)
        assert assign_doa(taps, grid) == d0


@settings(max_examples=15, deadline=None)
@given(alpha=st.floats(-1e3, 1e3).filter(lambda a: abs(a) > 1e-3), seed=st.integers(0, 100))
def test_assign_doa_gain_invariant(grid, alpha, seed):
    taps = np.random.default_rng(seed).standard_normal((128, 6))
    assert assign_doa(alpha * taps, grid) == assign_doa(taps, grid)


def test_assign_doa_rejects_silence_and_bad_shape(grid):
    with pytest.raises(UndefinedInputError):
        assign_doa(np.zeros((64, 6)), grid)
    with pytest.raises(InvalidInputError):
        assign_doa(np.ones((64, 5)), grid)


def test_rir_fft_size():
    assert rir_fft_size(10) == 1024
    assert rir_fft_size(1025) == 2048
    assert rir_fft_size(4096) == 4096

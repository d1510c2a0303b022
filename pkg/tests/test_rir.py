import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bssd import rir
from bssd.exceptions import InvalidInputError
from bssd.geometry import ArrayGeometry

ROOM = (5.0, 4.0, 3.0)


def spec(**kw):
    base = dict(dimensions=ROOM, rt60_target=0.3, source_position=(3.8, 2.0, 1.5),
                array_position=(1.5, 2.0, 1.5))
    base.update(kw)
    return rir.RoomSpec(**base)


def test_first_order_images_are_the_six_wall_mirrors():
    s = spec()
    pos, cnt = rir._image_sources(s, 1)
    src = np.asarray(s.source_position)
    expect = [src]
    for ax in range(3):
        for wall in (0.0, ROOM[ax]):
            p = src.copy()
            p[ax] = 2 * wall - p[ax]
            expect.append(p)
    got = sorted(map(tuple, np.round(pos, 9)))
    assert got == sorted(map(tuple, np.round(expect, 9)))
    assert sorted(cnt) == [0] + [1] * 6


def test_image_count_by_order():
    # number of lattice images with at most n reflections: (2n+1)(2n^2+2n+3)/3
    for n in (2, 3, 5):
        pos, cnt = rir._image_sources(spec(), n)
        assert len(pos) == (2 * n + 1) * (2 * n * n + 2 * n + 3) // 3
        assert cnt.max() == n


def test_direct_path_only():
    s = spec(max_order=0)
    g = ArrayGeometry.circular()
    out = rir.simulate_rir(s, g, highpass_hz=None)
    mics = np.asarray(s.array_position) + g.positions - g.centroid
    d = np.linalg.norm(mics - np.asarray(s.source_position), axis=1)
    for m in range(6):
        assert np.argmax(np.abs(out.taps[:, m])) == round(d[m] / g.c * 16000)
        assert out.taps[:, m].sum() == pytest.approx(1 / d[m], rel=2e-2)


def test_mirror_symmetry_of_channels():
    g = ArrayGeometry.circular()
    rel = g.positions - g.centroid
    # channel pairs mirrored through the y = array plane
    pair = [int(np.argmin(np.linalg.norm(rel - r * [1, -1, 1], axis=1))) for r in rel]
    out = rir.simulate_rir(spec(max_order=6), g).taps
    for m, p in enumerate(pair):
        np.testing.assert_allclose(out[:, m], out[:, p], atol=1e-10)


def test_positions_must_be_inside():
    with pytest.raises(InvalidInputError):
        spec(source_position=(6.0, 1.0, 1.0))
    with pytest.raises(InvalidInputError):
        spec(absorption_model="norris")
    with pytest.raises(InvalidInputError):
        rir.simulate_rir(spec(array_position=(0.01, 2.0, 1.5)))


def test_rotation_group():
    r = rir.simulate_rir(spec(max_order=2))
    np.testing.assert_array_equal(rir.rotate_channels(r, 6).taps, r.taps)
    np.testing.assert_array_equal(rir.rotate_channels(rir.rotate_channels(r, 2), 4).taps, r.taps)
    assert rir.rotate_channels(r, 1).taps[:, 1].tolist() == r.taps[:, 0].tolist()


@settings(max_examples=20, deadline=None)
@given(rt=st.floats(0.1, 1.0))
def test_schroeder_on_exact_exponential(rt):
    t = np.arange(int(16000 * rt * 1.5)) / 16000
    taps = np.exp(-3 * np.log(10) * t / rt)  # energy falls 60 dB in rt seconds
    assert rir.measure_rt60(taps) == pytest.approx(rt, rel=1e-2)


def test_schroeder_curve_starts_at_zero_db(rng):
    c = rir.schroeder_curve(rng.standard_normal(100))
    assert c[0] == 0 and np.all(np.diff(c) <= 1e-12)


def test_specular_decay_time_scales_with_size():
    a = rir.specular_decay_time((4, 5, 3))
    b = rir.specular_decay_time((8, 10, 6))
    assert b == pytest.approx(2 * a, rel=1e-6)


def test_absorption_models():
    s = spec(absorption_model="sabine")
    assert s.absorption() == pytest.approx(0.161 * 60 / (94 * 0.3))
    e = spec(absorption_model="eyring")
    assert e.absorption() == pytest.approx(1 - np.exp(-0.161 * 60 / (94 * 0.3)))
    assert 0 < spec().absorption() < 1


def test_simulation_is_deterministic():
    a = rir.simulate_rir(spec(max_order=4)).taps
    b = rir.simulate_rir(spec(max_order=4)).taps
    np.testing.assert_array_equal(a, b)


def test_reverberant_decay_near_target():
    s = spec(rt60_target=0.3)
    assert rir.measure_rt60(rir.simulate_rir(s).taps) == pytest.approx(0.3, rel=0.2)


def test_save_load_with_sidecar(tmp_path, grid):
    r = rir.label_doa(rir.simulate_rir(spec(max_order=1)), grid)
    r.save(tmp_path / "r.wav")
    back = rir.RoomImpulseResponse.load(tmp_path / "r.wav")
    np.testing.assert_allclose(back.taps, r.taps, atol=1e-6)
    assert back.doa_label == r.doa_label and back.spec == r.spec


def test_source_toward_and_random_room(grid, rng):
    p = rir.source_toward(grid, 3, (1, 1, 1), 2.0)
    assert np.linalg.norm(np.subtract(p, 1)) == pytest.approx(2.0)
    room = rir.random_room(rng)
    assert np.linalg.norm(np.subtract(room.source_position, room.array_position)) >= 1.0

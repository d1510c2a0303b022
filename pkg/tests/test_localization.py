import numpy as np
import pytest

from bssd.exceptions import InvalidInputError
from bssd.localization import (BeamExtractor, FixtureExtractor, OracleEmbedder, TableEmbedder,
                               localize, registry_distance, weighted_map)
from bssd.scenes import named_rng, plane_wave_scene, separated_doas
from bssd.signal import MultiChannelSignal


def synthetic_map(masses):
    """gamma_W with direction d's mass alone in bin d, so subtractions do not interact."""
    m = np.asarray(masses, dtype=float)
    return np.diag(m)[None]


Z = MultiChannelSignal(np.zeros((2048, 6)))


def fixture(doa_to_speaker, dim=4, num_directions=None):
    table = {d: (np.zeros(10), np.eye(dim)[s]) for d, s in doa_to_speaker.items()}
    return FixtureExtractor(table, num_directions=num_directions)


def test_registry_distance():
    assert registry_distance([], np.ones(2)) == np.inf
    assert registry_distance([np.zeros(2), np.ones(2)], np.array([1.0, 2.0])) == 1.0


def test_first_extraction_always_accepted(grid, whitening):
    ext = fixture({2: 0})
    out = localize(Z, grid, whitening, ext, 0.5, gamma_w=synthetic_map([0, 0, 5.0]))
    assert out.doas == [2]
    assert out.results[0].distance == np.inf


def test_stops_when_embedding_repeats(grid, whitening):
    # direction 1 shares speaker 0's embedding; picks go 0, 2, 1 by mass
    gamma = synthetic_map([9.0, 3.0, 4.0])
    ext = fixture({0: 0, 2: 1, 1: 0})
    out = localize(Z, grid, whitening, ext, 0.5, gamma_w=gamma)
    assert out.doas == [0, 2]
    assert out.iterations == 3
    assert ext.calls == [0, 2, 1]
    assert [r.accepted for r in out.results] == [True, True, False]
    assert out.records()[2]["distance"] == 0.0


def test_subtraction_is_floored_at_zero(grid, whitening):
    # subtracting direction 0's map removes direction 1 entirely (smaller everywhere)
    gamma = np.zeros((1, 2, 3))
    gamma[0, :, 0] = [5.0, 5.0]
    gamma[0, :, 1] = [4.0, 4.0]
    gamma[0, :, 2] = [0.0, 6.0]
    seen = []
    ext = fixture({0: 0, 2: 1}, num_directions=3)
    localize(Z, grid, whitening, ext, 0.5, gamma_w=gamma,
             on_iteration=lambda i, mass: seen.append(mass.copy()))
    np.testing.assert_allclose(seen[1], [0, 0, 1.0])
    assert seen[2].sum() == 0


def test_zero_mass_ends_without_extraction(grid, whitening):
    ext = fixture({})
    out = localize(Z, grid, whitening, ext, 0.5, gamma_w=np.zeros((1, 1, 4)))
    assert out.iterations == 0 and out.doas == [] and not out.truncated


def test_max_iter_truncates(grid, whitening):
    table = {d: (np.zeros(3), np.eye(20)[d]) for d in range(20)}
    ext = FixtureExtractor(table)
    gamma = synthetic_map(np.arange(20, 0, -1.0))
    out = localize(Z, grid, whitening, ext, 0.5, max_iter=8, gamma_w=gamma)
    assert out.truncated and out.iterations == 8 and len(out.doas) == 8


def test_threshold_must_be_positive(grid, whitening):
    with pytest.raises(InvalidInputError):
        localize(Z, grid, whitening, fixture({}), 0.0, gamma_w=np.ones((1, 1, 2)))


def test_fixture_extractor_rejects_unknown_direction():
    ext = fixture({1: 0}, num_directions=5)
    with pytest.raises(InvalidInputError):
        ext.extract(Z, 7)
    with pytest.raises(InvalidInputError):
        ext.extract(Z, 2)


def test_oracle_embedder_tolerates_delay(rng):
    refs = [rng.standard_normal(4000) for _ in range(3)]
    emb = OracleEmbedder.orthogonal(refs, dim=5)
    shifted = np.concatenate([np.zeros(37), refs[1][:-37]]) * -2.5
    np.testing.assert_array_equal(emb(shifted), np.eye(5)[1])
    assert np.all(emb(np.zeros(4000)) == 0)
    block = emb.for_block(0, 1000, 2000)
    np.testing.assert_array_equal(block(refs[2][1000:2000]), np.eye(5)[2])


def test_table_embedder():
    t = TableEmbedder(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(t(None, 2), [4.0, 5.0])
    with pytest.raises(InvalidInputError):
        t(None, 3)


def test_beam_extractor_rejects_unknown_estimator(grid, whitening):
    with pytest.raises(InvalidInputError):
        BeamExtractor(grid, whitening, lambda y, d: y, estimator="mvdr")


@pytest.mark.parametrize("estimator", ["analytic-fd", "statistic-fd", "analytic-td"])
def test_constructed_scene_recovers_sources(grid, whitening, estimator):
    doas = separated_doas(grid, 3, named_rng(5, "doas"))
    scene = plane_wave_scene(grid, doas, 32000, seed=5, gains=[1.0, 0.7, 0.5], kind="interleaved")
    ext = BeamExtractor(grid, whitening, OracleEmbedder.orthogonal(scene.sources), estimator)
    out = localize(scene.mixture, grid, whitening, ext, 0.7)
    assert out.doas == doas
    assert out.iterations == 4


def test_weighted_map_shape(grid, whitening, rng):
    z = MultiChannelSignal(rng.standard_normal((4096, 6)))
    g = weighted_map(z, grid, whitening)
    assert g.shape[1:] == (513, 100) and np.all(g >= 0)

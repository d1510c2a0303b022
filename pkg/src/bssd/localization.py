"""Iterative source localization with embedding-gated stopping.

The loop picks the direction with the most weighted spatial evidence, asks an
:class:`Extractor` for the signal and speaker embedding at that direction,
and either accepts the source (removing its evidence from the map) or stops
because the speaker is already known.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .exceptions import InvalidInputError
from .geometry import DoaGrid
from .signal import MultiChannelSignal, StftConfig, istft, stft
from .whitening import WhiteningTransform, spatial_map_whitened, weight_map
from . import separation_fd as fd
from . import separation_td as td

log = logging.getLogger(__name__)

ZERO_MASS = 1e-12
MAX_ITER = 8

ESTIMATORS = ("analytic-fd", "statistic-fd", "analytic-td", "statistic-td")


class Extractor(Protocol):
    def extract(self, z: MultiChannelSignal, doa: int) -> tuple[np.ndarray, np.ndarray]:
        """Return the mono signal and speaker embedding for direction ``doa``."""


Embedder = Callable[[np.ndarray, int], np.ndarray]


def registry_distance(registry: Sequence[np.ndarray], e: np.ndarray) -> float:
    """Smallest Euclidean distance from ``e`` to a registry member; +inf when empty."""
    if len(registry) == 0:
        return float("inf")
    return float(np.min(np.linalg.norm(np.asarray(registry) - e, axis=1)))


# -- embedders ---------------------------------------------------------------

class OracleEmbedder:
    """Labels a signal with the embedding of the reference it correlates with best.

    Correlation is the peak normalised cross-correlation within ``max_lag``
    samples, so small alignment offsets (propagation or kernel delay) do not
    matter. A silent signal gets the zero vector.
    """

    def __init__(self, references: Sequence[np.ndarray], embeddings: np.ndarray, max_lag: int = 1024):
        self.references = [np.asarray(r, dtype=np.float64) for r in references]
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        if len(self.references) != len(self.embeddings):
            raise InvalidInputError("one embedding per reference required")
        self.max_lag = max_lag

    @classmethod
    def orthogonal(cls, references, dim: int = 100, scale: float = 1.0, max_lag: int = 1024):
        """Speaker ``c`` gets ``scale`` times the ``c``-th unit vector of R^dim."""
        emb = np.zeros((len(references), dim))
        emb[np.arange(len(references)), np.arange(len(references))] = scale
        return cls(references, emb, max_lag)

    def similarities(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        out = np.zeros(len(self.references))
        ny = np.linalg.norm(y)
        if ny == 0:
            return out
        for c, r in enumerate(self.references):
            n = min(len(r), len(y))
            nr = np.linalg.norm(r[:n])
            if nr == 0:
                continue
            xc = fftconvolve(y[:n], r[:n][::-1])  # lag 0 at index n - 1
            lo, hi = max(0, n - 1 - self.max_lag), min(len(xc), n + self.max_lag)
            out[c] = np.max(np.abs(xc[lo:hi])) / (np.linalg.norm(y[:n]) * nr + 1e-300)
        return out

    def speaker_of(self, y: np.ndarray) -> int | None:
        sim = self.similarities(y)
        if not np.any(sim > 0):
            return None
        return int(np.argmax(sim))

    def __call__(self, y: np.ndarray, doa: int | None = None) -> np.ndarray:
        c = self.speaker_of(y)
        if c is None:
            return np.zeros(self.embeddings.shape[1])
        return self.embeddings[c].copy()

    def for_block(self, index: int, start: int, stop: int) -> "OracleEmbedder":
        return OracleEmbedder([r[start:stop] for r in self.references], self.embeddings, self.max_lag)


class TableEmbedder:
    """Embedding looked up by DOA index from a ``(D, E)`` table (e.g. a loaded container)."""

    def __init__(self, table: np.ndarray):
        self.table = np.asarray(table, dtype=np.float64)

    def __call__(self, y: np.ndarray, doa: int) -> np.ndarray:
        if not 0 <= doa < len(self.table):
            raise InvalidInputError(f"no embedding for DOA {doa}")
        return self.table[doa].copy()


# -- extractors ---------------------------------------------------------------

class BeamExtractor:
    """Reference extractor: adaption layer + delay-and-sum, embeddings from ``embedder``.

    ``estimator`` selects the adaption path: ``analytic-fd`` / ``statistic-fd``
    (STFT domain, ``adaption_weights`` of shape ``(D, K, M, M)`` for the latter)
    or ``analytic-td`` / ``statistic-td`` (FIR kernels, then latent framing
    with unit latent weights).
    """

    def __init__(self, grid: DoaGrid, whitening: WhiteningTransform, embedder: Embedder,
                 estimator: str = "analytic-fd", stft_cfg: StftConfig = StftConfig(),
                 adaption_weights: np.ndarray | None = None,
                 kernels: td.AdaptionKernelsTD | None = None, kernel_length: int = 100,
                 codec: td.LatentCodec | None = None, distortionless: bool = False,
                 conjugate: bool = False):
        if estimator not in ESTIMATORS:
            raise InvalidInputError(f"unknown estimator {estimator!r}")
        self.grid = grid
        self.whitening = whitening
        self.embedder = embedder
        self.estimator = estimator
        self.stft_cfg = stft_cfg
        self.distortionless = distortionless
        self.conjugate = conjugate
        self.adaption_weights = adaption_weights
        if estimator == "statistic-fd" and adaption_weights is None:
            self.adaption_weights = fd.adaption_matrices_from_steering(
                grid, whitening, stft_cfg.fft_size)
        self.kernels = kernels
        if estimator.endswith("-td") and kernels is None:
            if estimator == "statistic-td":
                raise InvalidInputError("statistic-td needs loaded kernels")
            self.kernels = td.build_td_kernels(grid, whitening, kernel_length, stft_cfg.fft_size)
        self.codec = codec

    def beamform(self, z: MultiChannelSignal, doa: int) -> np.ndarray:
        self.grid.check_index(doa)
        if self.estimator.endswith("-fd"):
            spec = stft(z, self.stft_cfg)
            if self.estimator == "analytic-fd":
                adapted = fd.analytic_adaption_fd(spec, doa, self.grid, self.whitening)
            else:
                adapted = fd.statistic_adaption_fd(spec, doa, self.adaption_weights)
            if self.distortionless:
                uv = fd.whitened_steering(self.grid, self.whitening, doa, spec.fft_size, spec.sample_rate)
                w = fd.distortionless_delay_and_sum(adapted, uv)
            else:
                w = fd.oracle_delay_and_sum(adapted)
            y = fd.filter_and_sum(adapted, w, conjugate=self.conjugate)
            return istft(y, self.stft_cfg).mono()
        adapted = td.adapt_td(z, doa, self.kernels, compensate=True)
        codec = self.codec or td.LatentCodec.reference(z.num_channels)
        latent = td.frame_encode(adapted, codec)
        out = td.frame_decode(td.latent_beamform(latent, np.ones_like(latent.frames)), codec,
                              z.sample_rate)
        return out.mono()

    def extract(self, z: MultiChannelSignal, doa: int) -> tuple[np.ndarray, np.ndarray]:
        y = self.beamform(z, doa)
        return y, np.asarray(self.embedder(y, doa), dtype=np.float64)

    def for_block(self, index: int, start: int, stop: int) -> "BeamExtractor":
        hook = getattr(self.embedder, "for_block", None)
        if hook is None:
            return self
        clone = object.__new__(BeamExtractor)
        clone.__dict__.update(self.__dict__)
        clone.embedder = hook(index, start, stop)
        return clone


class FixtureExtractor:
    """Table lookup ``doa -> (signal, embedding)``; ``default`` covers missing entries."""

    def __init__(self, table: dict, default: tuple | None = None, num_directions: int | None = None):
        self.table = {int(k): (np.asarray(s, dtype=np.float64), np.asarray(e, dtype=np.float64))
                      for k, (s, e) in table.items()}
        self.default = default
        self.num_directions = num_directions
        self.calls: list[int] = []

    def extract(self, z: MultiChannelSignal, doa: int) -> tuple[np.ndarray, np.ndarray]:
        if doa < 0 or (self.num_directions is not None and doa >= self.num_directions):
            raise InvalidInputError(f"DOA index {doa} out of range")
        self.calls.append(int(doa))
        if doa in self.table:
            s, e = self.table[doa]
        elif self.default is not None:
            s, e = self.default
        else:
            raise InvalidInputError(f"fixture has no entry for DOA {doa}")
        return s.copy(), e.copy()


# -- Algorithm --------------------------------------------------------------

@dataclass
class ExtractionResult:
    doa_index: int
    signal: np.ndarray
    embedding: np.ndarray
    accepted: bool
    distance: float
    mass: float


@dataclass
class LocalizationOutcome:
    """All extractions in order; ``sources`` holds the accepted ones only."""

    results: list = field(default_factory=list)
    iterations: int = 0
    truncated: bool = False

    @property
    def sources(self) -> list:
        return [r for r in self.results if r.accepted]

    @property
    def doas(self) -> list:
        return [r.doa_index for r in self.sources]

    def records(self) -> list[dict]:
        return [{"iteration": i + 1, "doa": r.doa_index, "mass": r.mass,
                 "distance": None if np.isinf(r.distance) else r.distance,
                 "accepted": r.accepted} for i, r in enumerate(self.results)]


def weighted_map(z: MultiChannelSignal, grid: DoaGrid, whitening: WhiteningTransform,
                 stft_cfg: StftConfig = StftConfig()) -> np.ndarray:
    """``gamma_W(l, k, d)``: whitened map weighted by mixture power."""
    spec = stft(z, stft_cfg)
    return weight_map(spatial_map_whitened(spec, grid, whitening), spec).values


def localize(z: MultiChannelSignal, grid: DoaGrid, whitening: WhiteningTransform,
             extractor: Extractor, threshold: float, max_iter: int = MAX_ITER,
             stft_cfg: StftConfig = StftConfig(), gamma_w: np.ndarray | None = None,
             on_iteration: Callable[[int, np.ndarray], None] | None = None) -> LocalizationOutcome:
    """Extract sources one direction at a time until an embedding repeats.

    ``on_iteration(i, mass_per_direction)`` is called with the residual map
    reduced over frames and bins before each pick (useful for plots).
    """
    if threshold <= 0:
        raise InvalidInputError("threshold must be positive")
    if gamma_w is None:
        gamma_w = weighted_map(z, grid, whitening, stft_cfg)
    residual = gamma_w.copy()
    registry: list[np.ndarray] = []
    outcome = LocalizationOutcome()
    while True:
        if outcome.iterations >= max_iter:
            outcome.truncated = True
            log.warning("localization stopped after %d iterations", max_iter)
            break
        mass = residual.sum(axis=(0, 1))
        if on_iteration is not None:
            on_iteration(outcome.iterations, mass)
        if mass.sum() < ZERO_MASS:
            break
        doa = int(np.argmax(mass))
        y, e = extractor.extract(z, doa)
        outcome.iterations += 1
        dist = registry_distance(registry, e)
        accepted = dist > threshold
        outcome.results.append(ExtractionResult(doa, y, e, accepted, dist, float(mass[doa])))
        if not accepted:
            break
        registry.append(e)
        np.maximum(residual - gamma_w[:, :, doa:doa + 1], 0.0, out=residual)
    return outcome

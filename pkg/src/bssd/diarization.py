"""Block-online processing: per-block localization, identity assignment across
blocks, and time-aligned per-speaker streams."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import BssdError, InvalidInputError
from .geometry import DoaGrid
from .localization import Extractor, localize, registry_distance
from .signal import MultiChannelSignal, StftConfig
from .whitening import WhiteningTransform

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockConfig:
    block_len: float = 5.0  # seconds; hop equals block_len

    def __post_init__(self):
        if not self.block_len > 0:
            raise InvalidInputError("block_len must be positive")

    def samples(self, sample_rate: int) -> int:
        return int(round(self.block_len * sample_rate))


@dataclass(frozen=True)
class Block:
    index: int
    start: int  # sample offsets into the input
    stop: int
    signal: MultiChannelSignal


def split_blocks(z: MultiChannelSignal, cfg: BlockConfig) -> list[Block]:
    """Non-overlapping blocks; a trailing remainder is zero-padded to a full block."""
    n = cfg.samples(z.sample_rate)
    if z.num_samples < n:
        raise InvalidInputError(f"signal of {z.num_samples} samples is shorter than one block ({n})")
    count = -(-z.num_samples // n)
    padded = np.zeros((count * n, z.num_channels))
    padded[:z.num_samples] = z.samples
    return [Block(b, b * n, (b + 1) * n, MultiChannelSignal(padded[b * n:(b + 1) * n], z.sample_rate))
            for b in range(count)]


@dataclass
class Speaker:
    embedding: np.ndarray  # first-seen key, never updated
    blocks: list = field(default_factory=list)  # one mono array per block


@dataclass
class DiarizedOutput:
    speakers: list
    block_samples: int
    sample_rate: int
    manifest: list = field(default_factory=list)  # one dict per block

    @property
    def num_blocks(self) -> int:
        return len(self.manifest)

    def streams(self) -> list[np.ndarray]:
        return [np.concatenate(s.blocks) if s.blocks else np.zeros(0) for s in self.speakers]

    @property
    def embeddings(self) -> np.ndarray:
        return np.array([s.embedding for s in self.speakers])


def _fit(y: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    y = np.asarray(y, dtype=np.float64).reshape(-1)[:n]
    out[:len(y)] = y
    return out


def diarize(blocks: list[Block], grid: DoaGrid, whitening: WhiteningTransform,
            extractor: Extractor, threshold: float, max_iter: int = 8,
            stft_cfg: StftConfig = StftConfig()) -> DiarizedOutput:
    """Run localization per block and key extracted sources to a speaker registry.

    A source whose embedding is farther than ``threshold`` from every known
    speaker opens a new speaker (earlier blocks are silence); otherwise it is
    appended to the nearest one. A second source matching a speaker already
    served in the same block is dropped. Speakers without an update get a
    silent block. If the extractor fails on a block, every speaker gets
    silence for it.
    """
    if not blocks:
        raise InvalidInputError("no blocks to process")
    n = len(blocks[0].signal.samples)
    sr = blocks[0].signal.sample_rate
    out = DiarizedOutput([], n, sr)
    for block in blocks:
        hook = getattr(extractor, "for_block", None)
        ext = hook(block.index, block.start, block.stop) if hook else extractor
        entry = {"block": block.index, "start": block.start, "stop": block.stop,
                 "doas": [], "assignments": [], "dropped": [], "error": None}
        served: dict[int, np.ndarray] = {}
        try:
            outcome = localize(block.signal, grid, whitening, ext, threshold, max_iter, stft_cfg)
        except BssdError as exc:
            log.error("block %d failed: %s", block.index, exc)
            entry["error"] = str(exc)
            outcome = None
        if outcome is not None:
            entry["localization"] = outcome.records()
            for res in outcome.sources:
                entry["doas"].append(res.doa_index)
                keys = [s.embedding for s in out.speakers]
                dist = registry_distance(keys, res.embedding)
                if dist > threshold:
                    spk = Speaker(res.embedding.copy(), [np.zeros(n) for _ in range(len(out.manifest))])
                    out.speakers.append(spk)
                    idx = len(out.speakers) - 1
                else:
                    idx = int(np.argmin(np.linalg.norm(np.asarray(keys) - res.embedding, axis=1)))
                    if idx in served:
                        log.warning("block %d: DOA %d matches speaker %d again, dropped",
                                    block.index, res.doa_index, idx)
                        entry["dropped"].append({"doa": res.doa_index, "speaker": idx,
                                                 "distance": dist})
                        continue
                served[idx] = _fit(res.signal, n)
                entry["assignments"].append({"doa": res.doa_index, "speaker": idx,
                                             "distance": None if np.isinf(dist) else dist})
        for i, spk in enumerate(out.speakers):
            spk.blocks.append(served.get(i, np.zeros(n)))
        out.manifest.append(entry)
    return out


def diarization_ber(output: DiarizedOutput, reference_embeddings: np.ndarray,
                    embed_block: Callable[[int, np.ndarray], np.ndarray], threshold: float) -> float:
    """Block error rate against ``C`` reference speakers.

    Streams are matched one-to-one to references by registry-key distance;
    ``embed_block(b, y)`` embeds block ``b`` of a stream. A reference with no
    matching stream counts as wrong in every block.
    """
    ref = np.asarray(reference_embeddings, dtype=np.float64)
    n_ref, n_blocks = len(ref), output.num_blocks
    if n_blocks == 0:
        raise InvalidInputError("output holds no blocks")
    errors = n_ref * n_blocks
    if output.speakers:
        cost = np.linalg.norm(ref[:, None, :] - output.embeddings[None, :, :], axis=-1)
        rows, cols = linear_sum_assignment(cost)
        for c, s in zip(rows, cols):
            spk = output.speakers[s]
            wrong = sum(np.linalg.norm(ref[c] - embed_block(b, spk.blocks[b])) > threshold
                        for b in range(n_blocks))
            errors -= n_blocks - int(wrong)
    return errors / (n_ref * n_blocks)

"""Blind source separation and diarization toolkit for compact microphone arrays.

DOA grids and steering vectors, spatially whitened localization maps,
iterative multi-speaker extraction, frequency- and time-domain adaption,
identification metrics, block-online diarization and an image-source room
simulator.
"""

from .exceptions import BssdError, InvalidConfigError, InvalidInputError, UndefinedInputError
from .signal import SAMPLE_RATE, MultiChannelSignal, Spectrogram, StftConfig, istft, stft
from .geometry import ArrayGeometry, DoaGrid, assign_doa, fibonacci_hemisphere
from .whitening import SpatialMap, WhiteningTransform, whitening_for, zca
from .localization import (BeamExtractor, ExtractionResult, FixtureExtractor, LocalizationOutcome,
                           OracleEmbedder, localize)
from .diarization import BlockConfig, DiarizedOutput, diarize, split_blocks
from .rir import RoomImpulseResponse, RoomSpec, rotate_channels, simulate_rir
from .config import PipelineConfig

__version__ = "0.1.0"

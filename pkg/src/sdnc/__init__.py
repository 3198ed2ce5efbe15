"""Speaker diarization with a meeting-wide segment-masked transformer (SDNC) and a spectral-clustering baseline."""

from .core import (
    EmbeddingSequence,
    LabelSequence,
    Meeting,
    SpeakerAttributedTranscript,
    SpeakerTurn,
    TimeInterval,
    TranscriptEntry,
    VadSegment,
    Word,
)
from .model import DecodePlan, SdncConfig, SdncModel, TrainConfig
from .pipeline import PipelineConfig

__version__ = "0.1.0"

__all__ = [
    "DecodePlan",
    "EmbeddingSequence",
    "LabelSequence",
    "Meeting",
    "PipelineConfig",
    "SdncConfig",
    "SdncModel",
    "SpeakerAttributedTranscript",
    "SpeakerTurn",
    "TimeInterval",
    "TrainConfig",
    "TranscriptEntry",
    "VadSegment",
    "Word",
    "__version__",
]

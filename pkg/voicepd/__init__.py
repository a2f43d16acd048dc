""" Parkinson's disease detection from speech recordings
"""
# import order is important here
#  audio_io <-- augment, features <-- model <-- train <-- evaluation
# isort: skip_file

from ._version import __version__

from .types import (
    Label,
    TrainingMode,
    UtteranceType,
)

from .audio_io import (
    AudioClip,
    WavFormatError,
    UnsupportedEncodingError,
    read_wav,
    write_wav,
    preprocess,
)

from .augment import (
    AugmentationConfig,
    AppliedAugmentations,
    apply_pipeline,
)

from .features import (
    ConvStackConfig,
    ConvStackParams,
    FeatureMap,
    SpectrogramConfig,
)

from .model import (
    ModelConfig,
    ModelParams,
    Prediction,
)

from .train import (
    TrainConfig,
    train,
)

from .evaluation import (
    MetricsReport,
    VotingResult,
    cross_validate,
    vote,
    roc_auc,
)

__all__ = [
    "__version__",
    "Label",
    "TrainingMode",
    "UtteranceType",
    "AudioClip",
    "WavFormatError",
    "UnsupportedEncodingError",
    "read_wav",
    "write_wav",
    "preprocess",
    "AugmentationConfig",
    "AppliedAugmentations",
    "apply_pipeline",
    "ConvStackConfig",
    "ConvStackParams",
    "FeatureMap",
    "SpectrogramConfig",
    "ModelConfig",
    "ModelParams",
    "Prediction",
    "TrainConfig",
    "train",
    "MetricsReport",
    "VotingResult",
    "cross_validate",
    "vote",
    "roc_auc",
]

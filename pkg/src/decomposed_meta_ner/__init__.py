"""Decomposed Meta-Learning NER.

Few-shot named entity recognition split into a class-agnostic span detector
meta-trained with first-order MAML and a prototypical entity typer whose
prototypes are MAML-enhanced.
"""

__version__ = "0.1.0"

# Checkpoints
from .checkpoint import Checkpoint, Stage, load_checkpoint, save_checkpoint

# Configuration
from .config import RunConfig, load_config

# Encoder
from .encoder import EncoderConfig, EncoderOutput, EncoderParams

# Entity typing
from .entity_typing import (
    Distance,
    PrototypeSet,
    PrototypicalTaskLoss,
    TyperParams,
    TypingDecision,
    classify_spans,
    compute_prototypes,
    meta_test_typing,
    typing_distribution,
    typing_loss,
)

# Episodes
from .episode_io import EpisodeFormat, load_corpus, load_episodes, save_episodes
from .episodes import Episode, EpisodeSet, LabeledSequence, SplitTag, TypedSpan
from .errors import (
    ConfigError,
    DataError,
    DecomposedNERError,
    EpisodeFormatError,
    EpisodeValidationError,
    NoEpisodesError,
    NumericalError,
    SamplerCapacityError,
)

# Meta-learning
from .maml_engine import MetaConfig, fine_tune, inner_update, meta_step, meta_train

# Evaluation
from .metrics import (
    MetricsReport,
    PredictionRecord,
    evaluate_per_episode,
    evaluate_pooled,
)
from .pipeline import (
    eval_command,
    run_episode,
    train_span_command,
    train_typing_command,
)
from .sampler import GreedyEpisodeSampler, sample_episodes

# Span detection
from .span_detector import BioesLabel, DetectionTaskLoss, DetectorParams, detect_spans
from .vocabulary import Vocabulary

__all__ = [
    # Episodes
    "Episode",
    "EpisodeSet",
    "LabeledSequence",
    "SplitTag",
    "TypedSpan",
    "EpisodeFormat",
    "load_episodes",
    "save_episodes",
    "load_corpus",
    "GreedyEpisodeSampler",
    "sample_episodes",
    # Encoder
    "EncoderConfig",
    "EncoderOutput",
    "EncoderParams",
    "Vocabulary",
    "Checkpoint",
    "Stage",
    "load_checkpoint",
    "save_checkpoint",
    # Span detection
    "BioesLabel",
    "DetectionTaskLoss",
    "DetectorParams",
    "detect_spans",
    # Meta-learning
    "MetaConfig",
    "inner_update",
    "fine_tune",
    "meta_step",
    "meta_train",
    # Entity typing
    "Distance",
    "PrototypeSet",
    "PrototypicalTaskLoss",
    "TyperParams",
    "TypingDecision",
    "classify_spans",
    "compute_prototypes",
    "meta_test_typing",
    "typing_distribution",
    "typing_loss",
    # Pipeline
    "RunConfig",
    "load_config",
    "MetricsReport",
    "PredictionRecord",
    "evaluate_pooled",
    "evaluate_per_episode",
    "run_episode",
    "train_span_command",
    "train_typing_command",
    "eval_command",
    # Errors
    "DecomposedNERError",
    "ConfigError",
    "DataError",
    "EpisodeFormatError",
    "EpisodeValidationError",
    "SamplerCapacityError",
    "NoEpisodesError",
    "NumericalError",
]
__author__ = "bmcdonough"

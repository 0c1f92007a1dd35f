"""Named-entity recognition as boundary-denoising diffusion."""

from .corpus import Dataset, Entity, Example, Sentence, SpanCodec, load_dataset, make_synthetic_corpus, SyntheticSpec
from .errors import ConfigurationError, DiffNERError, ValidationError
from .schedule import make_schedule, make_tau

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "Dataset",
    "DiffNERError",
    "Entity",
    "Example",
    "Sentence",
    "SpanCodec",
    "SyntheticSpec",
    "ValidationError",
    "load_dataset",
    "make_schedule",
    "make_synthetic_corpus",
    "make_tau",
]

"""Event argument extraction with event-guided gated attention prefixes,
on a self-contained float64 autodiff core, plus a synthetic corpus
generator and an ablation harness."""

__version__ = "0.1.0"

from .data import (
    DataConfig,
    EventInstance,
    EventOntology,
    OntologyConfig,
    Vocab,
    build_template,
    generate_dataset,
    generate_ontology,
    read_jsonl,
    write_jsonl,
)
from .model import ArgumentExtractor, load_checkpoint, save_checkpoint
from .numerics import Tape, Tensor
from .prefixes import VARIANTS, make_variant
from .train_eval import TrainConfig, evaluate_f1, train
from .transformer import ModelConfig

__all__ = [
    "ArgumentExtractor",
    "DataConfig",
    "EventInstance",
    "EventOntology",
    "ModelConfig",
    "OntologyConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "VARIANTS",
    "Vocab",
    "build_template",
    "evaluate_f1",
    "generate_dataset",
    "generate_ontology",
    "load_checkpoint",
    "make_variant",
    "read_jsonl",
    "save_checkpoint",
    "train",
    "write_jsonl",
]

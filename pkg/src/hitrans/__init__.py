"""Hierarchical transformer (HiTransformer / HiTransformer-s) for utterance-level emotion recognition."""

from .data import Corpus, Dialog, Utterance, load_corpus
from .model import HiTransformer, HiTransformerConfig
from .tokenizer import Vocab, build_vocab, encode
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Corpus", "Dialog", "Utterance", "load_corpus",
    "HiTransformer", "HiTransformerConfig",
    "Vocab", "build_vocab", "encode",
    "TrainConfig", "train",
]

"""Desk-scale multilingual NMT with pretrained-encoder initialization."""

from .corpus import (MultilingualCorpus, SamplingSchedule, Vocabulary,
                     compute_sampling_probs, temperature_at_epoch)
from .evaluate import BeamParams, Hypothesis, beam_search, bleu
from .initialize import InitStrategy, initialize
from .model import ModelConfig, TransformerModel, decode, encode
from .tensor import Tape, Tensor, backward
from .train import TrainConfig, average_checkpoints, train

__all__ = [
    "BeamParams", "Hypothesis", "InitStrategy", "ModelConfig",
    "MultilingualCorpus", "SamplingSchedule", "Tape", "Tensor",
    "TrainConfig", "TransformerModel", "average_checkpoints", "backward",
    "beam_search", "bleu", "compute_sampling_probs", "decode", "encode",
    "initialize", "temperature_at_epoch", "train",
]

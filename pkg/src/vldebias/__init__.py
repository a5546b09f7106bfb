"""Bias-alignment debiasing for paired text/image embeddings, with baselines and fairness metrics."""

from .ba_net import BAParams, decompose, init_params, load_checkpoint, save_checkpoint
from .embed_store import LabeledEmbeddingSet, SampleLabel, load_set, pair_counterfactuals, save_set
from .errors import VLDebiasError
from .fairmetrics import FairnessReport, able, effect_size, evaluate
from .synthgen import SynthConfig, generate
from .trainer import TrainConfig, apply_debias, train

__version__ = "0.1.0"

__all__ = [
    "BAParams", "decompose", "init_params", "load_checkpoint", "save_checkpoint",
    "LabeledEmbeddingSet", "SampleLabel", "load_set", "pair_counterfactuals", "save_set",
    "VLDebiasError", "FairnessReport", "able", "effect_size", "evaluate",
    "SynthConfig", "generate", "TrainConfig", "apply_debias", "train",
]

"""Training-free compression of decoder transformers by low-rank layer surgery."""

from .calib import ByteTokenizer, ChoiceTask, SearchPortion, Split, TextCorpus, split_20_80
from .decompose import decompose_feature, decompose_weight, rank_for_budget
from .linalg import GramAccumulator, eigh_symmetric, svd
from .model import DecoderModel, DenseLayer, FactoredLayer, LayerId, ModelConfig, random_model
from .search import RankPlan, SearchPolicy, refresh_gram, surgical_search

__version__ = "0.1.0"

__all__ = [
    "ByteTokenizer", "ChoiceTask", "SearchPortion", "Split", "TextCorpus",
    "split_20_80", "decompose_feature", "decompose_weight", "rank_for_budget",
    "GramAccumulator", "eigh_symmetric", "svd", "DecoderModel", "DenseLayer",
    "FactoredLayer", "LayerId", "ModelConfig", "random_model", "RankPlan",
    "SearchPolicy", "refresh_gram", "surgical_search",
]

"""Few-shot semantic segmentation toolkit for underwater imagery.

Episodic data handling, dual-encoder feature extraction with low/high-level
fusion, prototype matching by masked average pooling and cosine similarity,
SGD training, cross-validated mIoU evaluation, and a prior-mask fragility
probe.
"""

__version__ = "0.1.0"

from .dataset import ClassMap, DatasetIndex, FoldConfig, build_folds, filter_small_targets, load_dataset
from .episodes import Episode, EpisodeSpec, materialize_episode, sample_training_pairs
from .model import FssuwNet, ModelConfig
from .training import TrainConfig, train

__all__ = [
    "ClassMap", "DatasetIndex", "FoldConfig", "build_folds", "filter_small_targets",
    "load_dataset", "Episode", "EpisodeSpec", "materialize_episode",
    "sample_training_pairs", "FssuwNet", "ModelConfig", "TrainConfig", "train",
    "__version__",
]

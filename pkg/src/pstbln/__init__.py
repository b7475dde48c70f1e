"""Spatio-temporal bilinear networks over facial landmark graphs, grown layer by layer,
with Monte Carlo dropout for predictive uncertainty."""

from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from .data import (
    AugmentConfig,
    DatasetError,
    SyntheticSpec,
    augment_dataset,
    generate_synthetic,
    kfold,
    load_dataset,
    save_dataset,
    split,
)
from .delaunay import DegenerateInputError, delaunay_triangulate
from .growth import GrowthConfig, GrowthTrace, progressive_build
from .landmarks import GraphTopology, LandmarkSequence, build_topology, sequence_to_tensor
from .model import STBLN, LayerSpec, NetworkSpec, build_model
from .pipeline import dataset_topology, feature_scale, prepare, to_arrays
from .tensor import NumericalError, TrainConfig
from .training import accuracy, train_epochs
from .uncertainty import PredictionDistribution, evaluate_mc, mc_predict, mc_samples

__version__ = "0.1.0"

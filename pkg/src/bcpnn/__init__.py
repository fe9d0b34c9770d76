"""Bayesian Confidence Propagation Neural Network with structural plasticity.

A two-layer network of hypercolumns trained by local probability-trace
updates: an unsupervised hidden layer with a sparse, rewiring input mask
and a supervised readout.  Every arithmetic operation can be carried out
in float32, float64 or an emulated reduced-mantissa format.
"""
from .data import Dataset, encode_complement, load_idx, load_mnist, make_synthetic_clusters
from .model import (
    DenseLayer,
    HypercolumnGeometry,
    LayerPairState,
    Model,
    Network,
    StructuralPlasticityLayer,
    TrainConfig,
    build_network,
    load,
    save,
)
from .plasticity import ConnectivityMask, init_mask, mi_scores, rewire
from .precision import FloatFormat, get_arithmetic, get_format, round_to_format
from .trainer import TrainReport, estimate_cost, evaluate, fit_hidden, fit_output, predict

__version__ = "0.1.0"

__all__ = [
    "ConnectivityMask",
    "Dataset",
    "DenseLayer",
    "FloatFormat",
    "HypercolumnGeometry",
    "LayerPairState",
    "Model",
    "Network",
    "StructuralPlasticityLayer",
    "TrainConfig",
    "TrainReport",
    "build_network",
    "encode_complement",
    "estimate_cost",
    "evaluate",
    "fit_hidden",
    "fit_output",
    "get_arithmetic",
    "get_format",
    "init_mask",
    "load",
    "load_idx",
    "load_mnist",
    "make_synthetic_clusters",
    "mi_scores",
    "predict",
    "rewire",
    "round_to_format",
    "save",
]

"""Deep clustering by maximizing mutual information under regularizing transforms."""

from infoclust.config import PRESETS, ExperimentConfig, TermSpec, TransformSpec, preset
from infoclust.core import entropy, joint, kl_div, mi_xy, mi_yy
from infoclust.data import Dataset, load_dataset, synth_blobs
from infoclust.estimator import InfoClustering
from infoclust.evaluation import LinearProbe, cluster_accuracy, hungarian, linear_probe

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "Dataset",
    "ExperimentConfig",
    "InfoClustering",
    "LinearProbe",
    "TermSpec",
    "TransformSpec",
    "cluster_accuracy",
    "entropy",
    "hungarian",
    "joint",
    "kl_div",
    "linear_probe",
    "load_dataset",
    "mi_xy",
    "mi_yy",
    "preset",
    "synth_blobs",
]

"""Benign-only anomaly detection for Android app behaviour histograms.

Two detectors are provided: kernel PCA with an RBF kernel scored by
reconstruction MSE, and a variational autoencoder scored by Monte-Carlo
reconstruction probability. Inputs are syscall-count histograms from trace
logs or system-service instance counts from HPROF heap dumps.
"""
from .featurize import Dataset, FeatureSchema, FeatureVector, RawHistogram, gen_synth, l1_scale, load_schema
from .kpca import KpcaModel, fit_kpca, kpca_score
from .records import AnomalyRecord
from .vae import TrainConfig, VaeModel, VaeTopology, train_vae, vae_score

__version__ = "0.1.0"

__all__ = [
    "AnomalyRecord", "Dataset", "FeatureSchema", "FeatureVector", "KpcaModel", "RawHistogram",
    "TrainConfig", "VaeModel", "VaeTopology", "fit_kpca", "gen_synth", "kpca_score", "l1_scale",
    "load_schema", "train_vae", "vae_score",
]

"""Numerical laboratory for joint image+mask diffusion models.

A single network denoises the concatenated state z = (x, y) of a signal and
its one-hot mask, which makes it simultaneously a generative model of the
pair and, read at the mask block, a segmenter. The package provides exact
dataset-averaging denoisers to use as oracles, small trainable MLP denoisers,
SDE/ODE samplers over the joint state, verification routines for the
properties the construction promises (mask dynamics driven only by the
signal path, deterministic-limit invariances), and a pretrain/transfer
comparison harness. Everything is numpy at desk scale and bit-reproducible
from seeds.
"""
from .datasets import (JointDataset, JointSample, decode_labels, encode_labels,
                       make_dataset, make_gaussian_mixture, make_shapes)
from .mlp import (AdamW, CheckpointError, HybridLossConfig, MlpDenoiser, TrainConfig,
                  TrainingDiverged, TrainResult, hybrid_loss, hybrid_loss_grad,
                  load_checkpoint, save_checkpoint, train_denoiser)
from .oracle import OracleDenoiser
from .samplers import (SamplerConfig, SampleResult, Trajectory, sample_joint,
                       save_samples_csv, save_trajectories_csv, time_grid)
from .schedules import Schedule
from .transfer import (ExperimentReport, FinetuneConfig, ModelConfig, ProbeConfig,
                       feature_probe, pretrain, run_comparison, vanilla_finetune)
from .verify import (energy_distance, ito_isometry_reference, jaccard, two_sample_test,
                     verify_ode_integral_identity, verify_quadratic_variation,
                     verify_yT_invariance)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "CheckpointError", "ExperimentReport", "FinetuneConfig",
    "HybridLossConfig", "JointDataset", "JointSample", "MlpDenoiser", "ModelConfig",
    "OracleDenoiser", "ProbeConfig", "SampleResult", "SamplerConfig", "Schedule",
    "TrainConfig", "TrainResult", "TrainingDiverged", "Trajectory", "decode_labels",
    "encode_labels", "energy_distance", "feature_probe", "hybrid_loss",
    "hybrid_loss_grad", "ito_isometry_reference", "jaccard", "load_checkpoint",
    "make_dataset", "make_gaussian_mixture", "make_shapes", "pretrain",
    "run_comparison", "sample_joint", "save_checkpoint", "save_samples_csv",
    "save_trajectories_csv", "time_grid", "train_denoiser", "two_sample_test",
    "vanilla_finetune", "verify_ode_integral_identity", "verify_quadratic_variation",
    "verify_yT_invariance",
]

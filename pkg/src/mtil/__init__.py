"""Recurrent state-space imitation learning with action chunking, at desk scale."""

from .data import Dataset, Trajectory, chunk_targets, read_dataset, write_dataset
from .envs import make_env, generate_demos
from .evaluate import AccuracyMatrix, Report, auc, fwt, nbt, run_ablation, run_lifelong, success_rate
from .infer import AggregationConfig, PredictionBuffer, aggregate, rollout
from .policy import GmmParams, Policy, PolicyConfig, gmm_nll, gmm_sample, load_checkpoint, preset, save_checkpoint
from .ssm import HiddenState, SsmLayerParams, discretize, selective_params, ssm_scan, ssm_step
from .train import EwcConfig, TrainConfig, adamw_update, cosine_lr, ewc_penalty, fisher_estimate, train

__version__ = "0.1.0"

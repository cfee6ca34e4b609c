"""Training loop, evaluation protocol, transfer experiment and run metrics."""
from .config import ConfigError, ExperimentConfig, config_from_dict, load_config
from .env import AllocationEnv
from .evaluate import (AgentPolicy, AutoScaleBaseline, ConstantPolicy, evaluate, evaluate_autoscale,
                       evaluate_checkpoint, evaluate_policy, run_sweep)
from .metrics import RunMetrics, export_metrics, export_summary, read_metrics
from .train import Schedule, TrainResult, train
from .transfer import MilestoneTracker, TransferResult, prepare_transfer, transfer

__all__ = [
    "AgentPolicy", "AllocationEnv", "AutoScaleBaseline", "ConfigError", "ConstantPolicy", "ExperimentConfig",
    "MilestoneTracker", "RunMetrics", "Schedule", "TrainResult", "TransferResult", "config_from_dict",
    "evaluate", "evaluate_autoscale", "evaluate_checkpoint", "evaluate_policy", "export_metrics",
    "export_summary", "load_config", "prepare_transfer", "read_metrics", "run_sweep", "train", "transfer",
]

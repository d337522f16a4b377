"""Federated lesion segmentation with ability-weighted aggregation and
lesion-volume loss re-weighting, plus a synthetic benchmark to run it on."""
from .federation import PRESETS, RoundReport, StrategyConfig, aggregate, preset, run_federation
from .harness import ComparisonTable, ExperimentConfig, compare, kfold_split
from .model import ModelConfig, OptimizerConfig, ParamSet, build_model, load_checkpoint, save_checkpoint
from .objectives import aggregate_metrics, confusion, soft_dice_loss
from .synth import ClientConfig, generate_client, load_dataset, save_dataset
from .tensor import grad_check

__version__ = "0.1.0"

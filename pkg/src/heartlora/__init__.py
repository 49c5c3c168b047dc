"""Head-level responsiveness tuning for LoRA adapters on a tiny numpy ViT."""

from .data import RawDataset, SyntheticTaskSpec, generate, load_raw, save_raw
from .lora import AdapterPair, init_adapters
from .model import BackboneWeights, ModelConfig, init_backbone, model_forward
from .pattern import HeadPattern
from .responsiveness import ResponsivenessReport, accumulate, score_adapters, select_deactivation_set
from .training import RunRecord, TrainPlan, compare, run_adaptation, sweep_ne

__version__ = "0.1.0"

__all__ = [
    "AdapterPair",
    "BackboneWeights",
    "HeadPattern",
    "ModelConfig",
    "RawDataset",
    "ResponsivenessReport",
    "RunRecord",
    "SyntheticTaskSpec",
    "TrainPlan",
    "accumulate",
    "compare",
    "generate",
    "init_adapters",
    "init_backbone",
    "load_raw",
    "model_forward",
    "run_adaptation",
    "save_raw",
    "score_adapters",
    "select_deactivation_set",
    "sweep_ne",
]

"""Random adversarial training on a small numpy autodiff engine."""

from .adversarial import AttackResult, PerturbConfig, attack
from .cost import CostLedger, cost_table, crr, expected_xfp, per_batch_xfp, xfp
from .data import SyntheticSpec, synthetic_task
from .models import ModelConfig, ModelParams
from .rat import EventLog, RatConfig, sample_event, train, train_step

__version__ = "0.1.0"

__all__ = [
    "AttackResult",
    "CostLedger",
    "EventLog",
    "ModelConfig",
    "ModelParams",
    "PerturbConfig",
    "RatConfig",
    "attack",
    "cost_table",
    "crr",
    "expected_xfp",
    "per_batch_xfp",
    "SyntheticSpec",
    "sample_event",
    "synthetic_task",
    "train",
    "train_step",
    "xfp",
]

"""Class-incremental attention MIL with instance-level exemplar rehearsal."""

from .engine import Method, RunRecord, TaskSchedule, average_accuracy, average_forgetting, run_scenario
from .memory import ExemplarMemory, build_exemplar_set, knapsack_select, reduce_exemplar_set
from .model import Bag, MilModel, expand_head, forward
from .training import TrainConfig, train_task

__version__ = "0.1.0"

__all__ = [
    "Bag",
    "ExemplarMemory",
    "Method",
    "MilModel",
    "RunRecord",
    "TaskSchedule",
    "TrainConfig",
    "average_accuracy",
    "average_forgetting",
    "build_exemplar_set",
    "expand_head",
    "forward",
    "knapsack_select",
    "reduce_exemplar_set",
    "run_scenario",
    "train_task",
]

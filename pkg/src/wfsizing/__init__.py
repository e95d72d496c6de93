"""Per-task CPU and memory sizing for scientific workflows.

Gradient bandits and tabular Q-learning learn allocations for each abstract
task from the wastage of earlier runs. A default-configuration baseline and
a train-then-predict feedback loop serve as references. Tasks run in a
seeded simulator or against behaviors fitted from trace CSVs.
"""

__version__ = "0.1.0"

from .bandit import BanditAgent, GradientBanditState
from .baselines import DefaultAgent, FeedbackLoopAgent
from .core import ExecutionOutcome, MachineSpec, ResourceAlloc, Status, TaskProfile
from .experiment import ExperimentConfig, StrategyId, run_experiment
from .qlearn import QAgent, QConfig
from .simulator import TaskBehavior, fit_behavior

__all__ = [
    "BanditAgent", "DefaultAgent", "ExecutionOutcome", "ExperimentConfig", "FeedbackLoopAgent",
    "GradientBanditState", "MachineSpec", "QAgent", "QConfig", "ResourceAlloc", "Status",
    "StrategyId", "TaskBehavior", "TaskProfile", "fit_behavior", "run_experiment",
]

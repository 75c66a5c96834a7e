"""Task-level mixture-of-experts for multi-task text-to-text learning, in numpy."""
from .autodiff import Adam, Tensor, finite_diff_check, no_grad
from .corpus import TaskDataset, Vocab, generate_suite, partition
from .estimator import TaskMoE, check_tasks
from .metrics import arg, score
from .representation import PowerPCA
from .routing import anneal_temperature, disable_expert, select
from .transformer import ExpertGrid, ModelConfig, moe_layer_forward

__version__ = "0.1.0"
__all__ = [
    "Adam", "Tensor", "finite_diff_check", "no_grad", "TaskDataset", "Vocab",
    "generate_suite", "partition", "TaskMoE", "check_tasks", "arg", "score", "PowerPCA",
    "anneal_temperature", "disable_expert", "select", "ExpertGrid", "ModelConfig",
    "moe_layer_forward",
]

"""Task-specific expert pruning for a small top-1 Mixture-of-Experts encoder.

A float64 numpy autograd engine, a Switch-style MoE encoder, synthetic
clustered subtasks, the window-based expert dropping schedule, training loops
for the fine-tuning settings, an inference benchmark and report tables.
"""

from .autograd import Tape, Tensor, grad_check
from .checkpoint import Checkpoint
from .config import RunConfig
from .errors import ConfigError, DimensionError, InvariantError, NumericError
from .model import MoEEncoder, ModelConfig, collapse_model, collapse_to_dense, model_forward, moe_forward
from .pruning import ProficiencyLedger, PruneConfig, ScheduleState, threshold
from .tasks import TaskSpec, gen_finetune_batch, gen_pretrain_batch

__version__ = "0.1.0"

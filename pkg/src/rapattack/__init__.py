"""Transfer attacks with reverse adversarial perturbation (RAP)."""
from .batch import ImageBatch
from .core import (AttackBudget, AttackTrace, PassCounter, RAPConfig, baseline_attack, expected_pass_count,
                   inner_maximize, outer_step, rap_attack)
from .losses import LossSpec, attack_loss
from .pipelines import PipelineSpec, preset

__version__ = "0.1.0"

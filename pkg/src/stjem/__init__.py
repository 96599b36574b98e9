"""Stabilized joint energy-based model training on small numpy MLPs."""
from .combiner import ModelEnsemble, combine_logits, combined_conditional_ll, evaluate_combination
from .core_math import ece, log_softmax, logsumexp, posterior_from_logits, softmax
from .energy_net import EnergyNetwork
from .estimator import STJEMClassifier
from .exceptions import (DimensionError, FormatError, InvalidArgumentError, ResourceLimitError,
                         SamplerDivergenceError, TrainingFailedError)
from .objectives import Batch, LossWeights, total_loss
from .sgld import ReplayBuffer, SgldConfig, denoise, run_chain, sgld_step
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

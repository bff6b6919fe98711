"""Joint fine-tuning and pruning of small pre-trained networks, with the
layer-wise pruning parameters tuned by Bayesian optimization."""

from .bo import EvalRecord, bo_round, expected_improvement, propose_candidate
from .data import Dataset, Splits, generate_synthetic, load_csv, pretrain, split
from .finepruner import (FinePruneConfig, RunReport, evaluate_objective, fine_tune,
                         run_baseline, run_fineprune, select_lambda)
from .gp import GPModel, KernelHyper, fit, kernel, posterior
from .nnet import (Batch, LayerSpec, MaskedNetwork, forward, init_network, restore, sgd_step,
                   snapshot, top1_error)
from .surgery import (PruningBounds, PruningParams, cooling_probability, denormalize, normalize,
                      sparsity, update_masks)

__version__ = "0.1.0"

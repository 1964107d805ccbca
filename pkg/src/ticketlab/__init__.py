"""Desk-scale pipeline for drawing sparse subnetwork tickets from robustly
pretrained CNNs and benchmarking how well they transfer."""

from .autodiff import Tensor, Tape, grad_check
from .attack import AdvConfig, Perturbation, pgd_attack, gaussian_augment, adversarial_train_step
from .data import Dataset, GeneratorConfig, ShiftConfig, Task, augment, load_dataset, make_shifted_pair, save_dataset
from .metrics import (
    FIDStats,
    MetricsReport,
    accuracy,
    adversarial_accuracy,
    calibration,
    evaluate_model,
    frechet_distance,
    gaussian_stats,
    roc_auc,
)
from .models import Checkpoint, MaskSet, Network, NetworkSpec, build_model, forward_masked, make_spec, replace_head
from .pruning import MaskScores, Ticket, geometric_schedule, group_scores, imp, lmp, omp, topk_binarize
from .serialize import load_checkpoint, load_masks, save_checkpoint, save_masks
from .training import PretrainScheme, TrainConfig, finetune_whole, linear_eval, lr_at, pretrain

__version__ = "0.1.0"

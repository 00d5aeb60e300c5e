"""Domain generalization via positive-pair contrastive regularization.

A self-contained numpy implementation: a minimal reverse-mode autodiff
engine, an MLP featurizer/classifier with perturbation heads, a synthetic
multi-domain dataset generator, the paired dissimilarity losses with
mixup and loss clipping, stochastic weight averaging, and the training
and evaluation protocols that tie them together.
"""

from .autodiff import (Tape, Tensor, backward, batch_norm, grad_check, matmul,
                       relu, softmax_cross_entropy, squared_l2_rowmean)
from .data import (Batch, DataSpec, DomainDataset, epoch_batches, export_dataset,
                   generate, import_dataset, leave_one_domain_out, select_domains,
                   split_train_val)
from .losses import (LossBreakdown, PairAssignment, SelfRegConfig, build_pairs,
                     loss_hdl, loss_ind, mixup_rows, sample_gamma, selfreg_loss,
                     total_loss)
from .model import CdplHead, Model, ModelConfig, load_model, save_model
from .swa import SwaState, should_sample, swa_update, swa_weights
from .trainer import (AblationToggle, EpochMetrics, EvalResult, Seeds, TrainConfig,
                      TrainResult, ablation_ladder, config_for_seed, distance_report,
                      evaluate, lr_at, run_ablation, run_single_source, seeds_from_base,
                      sgd_step, train)

__version__ = "0.1.0"

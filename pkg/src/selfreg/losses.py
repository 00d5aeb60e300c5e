"""Positive-pair regularization: pairing, dissimilarity losses, mixup, clipping.

Each batch gets one same-class pair assignment (a uniform random
permutation within every class group) and, when mixup is on, one gamma
drawn from Beta(alpha, beta). Two dissimilarity losses are computed at
the feature level and again at the logit level:

  individualized:  mean_i ||z_i - head(z)_{pair(i)}||^2
  heterogeneous:   mean_i ||z_i - (gamma * u_i + (1-gamma) * u_{pair(i)})||^2

with u = head(z). Each level is combined as
min(1, classification_loss) * [gamma * ind + (1-gamma) * hdl]; the
clipping factor is a constant (no gradient flows through it), so the
regularizer's gradients shrink as the classifier converges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, add, gather_rows, scale, squared_l2_rowmean
from .model import CdplHead, Model


@dataclass(frozen=True)
class SelfRegConfig:
    lambda_feature: float = 0.3
    lambda_logit: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5
    clipping: bool = True
    mixup: bool = True
    cdpl: bool = True
    feature_loss: bool = True
    logit_loss: bool = True
    logit_cdpl: bool = True
    independent_gamma: bool = False

    def validate(self) -> None:
        if self.lambda_feature < 0 or self.lambda_logit < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Beta distribution parameters must be positive")

    @classmethod
    def erm(cls) -> "SelfRegConfig":
        """Plain cross-entropy training: every regularizer component off."""
        return cls(clipping=False, mixup=False, cdpl=False,
                   feature_loss=False, logit_loss=False, logit_cdpl=False)

    @property
    def enabled(self) -> bool:
        return self.feature_loss or self.logit_loss


@dataclass
class PairAssignment:
    """Per-batch map i -> pair_index[i], a same-class positive pair for every row."""

    pair_index: np.ndarray

    def __len__(self) -> int:
        return self.pair_index.shape[0]


@dataclass
class LossBreakdown:
    """Scalar components of one training step's loss, for the metrics stream."""

    l_c: float
    l_ind_feat: float = 0.0
    l_hdl_feat: float = 0.0
    l_feature: float = 0.0
    l_logit: float = 0.0
    l_selfreg: float = 0.0
    l_total: float = 0.0
    gamma_used: float = 1.0


def build_pairs(labels, rng: np.random.Generator) -> PairAssignment:
    """Same-class positive pairs via an in-group random shuffle.

    Rows are grouped by class label; each group is paired, in order,
    with a uniformly shuffled copy of itself. Singleton classes pair
    with themselves.
    """
    y = np.asarray(labels, dtype=np.intp)
    if y.ndim != 1 or y.size < 1:
        raise ValueError("labels must be a nonempty 1-D array")
    pair = np.empty_like(y)
    for c in np.unique(y):
        group = np.flatnonzero(y == c)
        pair[group] = rng.permutation(group)
    return PairAssignment(pair_index=pair)


def loss_ind(z: Tensor, pairs: PairAssignment, head: Optional[CdplHead]) -> Tensor:
    """Individualized dissimilarity: rows vs perturbed rows of their pairs.

    The head runs on the whole batch once and rows are then gathered by
    the pair index; with no head the paired rows are used directly.
    """
    if len(pairs) != z.shape[0]:
        raise ValueError(f"pair assignment covers {len(pairs)} rows, batch has {z.shape[0]}")
    u = head.forward(z) if head is not None else z
    return squared_l2_rowmean(z, gather_rows(u, pairs.pair_index))


def mixup_rows(u: Tensor, pairs: PairAssignment, gamma: float) -> Tensor:
    """Rowwise convex combination with the paired row: gamma*u_i + (1-gamma)*u_pair(i)."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if len(pairs) != u.shape[0]:
        raise ValueError(f"pair assignment covers {len(pairs)} rows, batch has {u.shape[0]}")
    return add(scale(u, gamma), scale(gather_rows(u, pairs.pair_index), 1.0 - gamma))


def sample_gamma(alpha: float, beta: float, rng: np.random.Generator) -> float:
    """One mixing coefficient drawn from Beta(alpha, beta)."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("Beta distribution parameters must be positive")
    return float(rng.beta(alpha, beta))


def loss_hdl(z: Tensor, u_bar: Tensor) -> Tensor:
    """Heterogeneous dissimilarity: rows vs their mixed perturbed pairs."""
    return squared_l2_rowmean(z, u_bar)


def _level_loss(x: Tensor, head: Optional[CdplHead], pairs: PairAssignment,
                gamma_mix: float, gamma_comb: float, modifier: float,
                use_mixup: bool) -> tuple[Tensor, float, float]:
    """One level's combined loss plus its (ind, hdl) component values."""
    l_ind = loss_ind(x, pairs, head)
    if use_mixup:
        u = head.forward(x) if head is not None else x
        u_bar = mixup_rows(u, pairs, gamma_mix)
        l_h = loss_hdl(x, u_bar)
        combined = scale(add(scale(l_ind, gamma_comb), scale(l_h, 1.0 - gamma_comb)), modifier)
        return combined, l_ind.item(), l_h.item()
    return scale(l_ind, modifier), l_ind.item(), 0.0


def selfreg_loss(model: Model, z: Tensor, logits: Tensor, labels, l_c: Tensor,
                 cfg: SelfRegConfig, rng: np.random.Generator) -> tuple[Optional[Tensor], LossBreakdown]:
    """Regularization loss for one batch, at feature and logit level.

    One pair assignment and one gamma are shared by both levels. The
    clipping modifier min(1, l_c) is applied as a constant factor.
    Disabled components contribute zero; with everything off the result
    tensor is None and training reduces to plain cross-entropy.

    Returns the loss tensor (None when fully disabled) and a breakdown of
    scalar components with ``l_total`` left unset.
    """
    cfg.validate()
    bd = LossBreakdown(l_c=l_c.item())
    if not cfg.enabled:
        return None, bd

    pairs = build_pairs(labels, rng)
    gamma_mix = sample_gamma(cfg.alpha, cfg.beta, rng) if cfg.mixup else 1.0
    if cfg.mixup and cfg.independent_gamma:
        gamma_comb = sample_gamma(cfg.alpha, cfg.beta, rng)
    else:
        gamma_comb = gamma_mix
    bd.gamma_used = gamma_comb
    modifier = min(1.0, bd.l_c) if cfg.clipping else 1.0

    terms = []
    if cfg.feature_loss:
        head = model.cdpl_feat if cfg.cdpl else None
        l_feature, bd.l_ind_feat, bd.l_hdl_feat = _level_loss(
            z, head, pairs, gamma_mix, gamma_comb, modifier, cfg.mixup)
        bd.l_feature = l_feature.item()
        terms.append(scale(l_feature, cfg.lambda_feature))
    if cfg.logit_loss:
        head = model.cdpl_logit if (cfg.cdpl and cfg.logit_cdpl) else None
        l_logit, _, _ = _level_loss(
            logits, head, pairs, gamma_mix, gamma_comb, modifier, cfg.mixup)
        bd.l_logit = l_logit.item()
        terms.append(scale(l_logit, cfg.lambda_logit))

    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    bd.l_selfreg = total.item()
    return total, bd


def total_loss(l_c: Tensor, l_selfreg: Optional[Tensor]) -> Tensor:
    """Classification loss plus the regularizer (identity when it is None)."""
    if not np.isfinite(l_c.data):
        raise ValueError(f"non-finite classification loss: {float(l_c.data)}")
    if l_selfreg is None:
        return l_c
    if not np.isfinite(l_selfreg.data):
        raise ValueError(f"non-finite regularization loss: {float(l_selfreg.data)}")
    return add(l_c, l_selfreg)

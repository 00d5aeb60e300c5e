"""Training loop, evaluation, and the experiment protocols built on it.

A run is SGD with step decay on the combined loss, model selection on a
validation split of the source domains, and a final evaluation of the
selected checkpoint on the held-out target domain. Ablation and
single-source helpers fan out over toggle configurations and
(source, target) pairs, one independent run each.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward, softmax_cross_entropy
from .data import (DataSpec, DomainDataset, epoch_batches, generate,
                   leave_one_domain_out, select_domains, split_train_val)
from .losses import LossBreakdown, SelfRegConfig, selfreg_loss, total_loss
from .model import Model, ModelConfig
from .swa import SwaState, should_sample, swa_update, swa_weights

PROTOCOLS = ("leave-one-out", "single-source")

# Consecutive non-finite-loss steps tolerated before aborting a run.
_DIVERGENCE_LIMIT = 3


@dataclass(frozen=True)
class Seeds:
    """The three named randomness sources: dataset, weight init, training."""

    data: int = 1
    init: int = 2
    train: int = 3


def seeds_from_base(base: int) -> Seeds:
    """Spread one experiment seed into the three named streams."""
    return Seeds(data=1000 * base + 1, init=1000 * base + 2, train=1000 * base + 3)


@dataclass(frozen=True)
class TrainConfig:
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    selfreg: SelfRegConfig = field(default_factory=SelfRegConfig)
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.004
    lr_decay_epoch: int = 24
    decay_factor: float = 0.1
    swa: bool = False
    train_ratio: float = 0.9
    distance_sample_cap: int = 2000
    protocol: str = "leave-one-out"
    target_domain: int = 3
    source_domain: Optional[int] = None
    seeds: Seeds = field(default_factory=Seeds)

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.selfreg.validate()
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.lr_decay_epoch <= self.epochs:
            raise ValueError(f"lr_decay_epoch must lie in [0, epochs], got {self.lr_decay_epoch}")
        if self.decay_factor <= 0:
            raise ValueError(f"decay_factor must be positive, got {self.decay_factor}")
        if not 0.0 < self.train_ratio < 1.0:
            raise ValueError(f"train_ratio must be in (0, 1), got {self.train_ratio}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got '{self.protocol}'")
        if not 0 <= self.target_domain < self.data.num_domains:
            raise ValueError(f"target_domain {self.target_domain} out of range for "
                             f"{self.data.num_domains} domains")
        if self.protocol == "single-source":
            if self.source_domain is None:
                raise ValueError("single-source protocol requires source_domain")
            if not 0 <= self.source_domain < self.data.num_domains:
                raise ValueError(f"source_domain {self.source_domain} out of range")
            if self.source_domain == self.target_domain:
                raise ValueError("source_domain must differ from target_domain")
        if self.model.input_dim != self.data.input_dim:
            raise ValueError(f"model input_dim {self.model.input_dim} does not match "
                             f"data input_dim {self.data.input_dim}")
        if self.model.num_classes != self.data.num_classes:
            raise ValueError(f"model num_classes {self.model.num_classes} does not match "
                             f"data num_classes {self.data.num_classes}")


@dataclass(frozen=True)
class EpochMetrics:
    """One metrics-stream record: epoch means of the loss components plus
    validation accuracy and same-class distances."""

    epoch: int
    lr: float
    l_c: float
    l_ind_feat: float
    l_hdl_feat: float
    l_feature: float
    l_logit: float
    l_selfreg: float
    l_total: float
    val_acc: float
    feat_dist: float
    logit_dist: float


METRICS_COLUMNS = ("epoch", "lr", "l_c", "l_ind_feat", "l_hdl_feat", "l_feature",
                   "l_logit", "l_selfreg", "l_total", "val_acc", "feat_dist", "logit_dist")


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[int, float]


@dataclass
class TrainResult:
    config: TrainConfig
    epoch_metrics: list[EpochMetrics]
    best_epoch: int
    best_val_acc: float
    best_params: dict[str, np.ndarray]
    final_params: dict[str, np.ndarray]
    target_acc: float
    target_per_class: dict[int, float]
    swa_target_acc: Optional[float]
    swa_params: Optional[dict[str, np.ndarray]]
    audit_target_hits: int
    aborted: bool = False
    abort_step: Optional[int] = None
    last_good_params: Optional[dict[str, np.ndarray]] = None


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decayed learning rate; held constant when weight averaging is on."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} out of range [0, {cfg.epochs})")
    if cfg.swa:
        return cfg.lr
    return cfg.lr if epoch < cfg.lr_decay_epoch else cfg.lr * cfg.decay_factor


def sgd_step(model: Model, lr: float) -> None:
    """One gradient-descent update on every parameter; gradients are cleared."""
    for name, p in model.named_params():
        if p.grad is None:
            raise ValueError(f"parameter '{name}' has no gradient; run backward first")
        p.data = p.data - lr * p.grad
        p.grad = None


def evaluate(model: Model, ds: DomainDataset) -> EvalResult:
    """Argmax-of-logits accuracy; ties broken toward the lowest class index.

    Runs outside any tape, so nothing is recorded and the perturbation
    heads are never invoked.
    """
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = model.classify(model.featurize(Tensor(ds.x))).data
    preds = np.argmax(logits, axis=1)
    acc = float((preds == ds.class_labels).mean())
    per_class = {}
    for c in np.unique(ds.class_labels):
        mask = ds.class_labels == c
        per_class[int(c)] = float((preds[mask] == c).mean())
    return EvalResult(accuracy=acc, per_class=per_class)


def distance_report(model: Model, ds: DomainDataset, sample_cap: int = 2000,
                    rng: Optional[np.random.Generator] = None) -> tuple[float, float]:
    """Mean Euclidean distance over same-class pairs, in feature and logit space.

    All same-class pairs are enumerated; when there are more than
    ``sample_cap`` of them, that many are sampled uniformly and both
    distances are computed on the same sampled pairs.
    """
    pairs = []
    for c in np.unique(ds.class_labels):
        idx = np.flatnonzero(ds.class_labels == c)
        if idx.size < 2:
            continue
        i, j = np.triu_indices(idx.size, k=1)
        pairs.append(np.stack([idx[i], idx[j]], axis=1))
    if not pairs:
        raise ValueError("no same-class pair exists; distances are undefined")
    all_pairs = np.concatenate(pairs)
    if sample_cap is not None and len(all_pairs) > sample_cap:
        if rng is None:
            rng = np.random.default_rng(0)
        all_pairs = all_pairs[rng.choice(len(all_pairs), size=sample_cap, replace=False)]
    z = model.featurize(Tensor(ds.x))
    logits = model.classify(z).data
    feats = z.data
    a, b = all_pairs[:, 0], all_pairs[:, 1]
    feat_dist = float(np.linalg.norm(feats[a] - feats[b], axis=1).mean())
    logit_dist = float(np.linalg.norm(logits[a] - logits[b], axis=1).mean())
    return feat_dist, logit_dist


def _breakdown_sums() -> dict[str, float]:
    return {k: 0.0 for k in ("l_c", "l_ind_feat", "l_hdl_feat", "l_feature",
                             "l_logit", "l_selfreg", "l_total")}


def train(cfg: TrainConfig) -> TrainResult:
    """One full training run under the configured protocol.

    Per step: forward, classification loss, pair construction, the
    regularization losses with clipping, backward, SGD. Per epoch:
    optional weight-averaging snapshot, validation accuracy, same-class
    distance report. The best-validation checkpoint is evaluated on the
    held-out target domain at the end. Fully reproducible given seeds.
    """
    cfg.validate()
    ds = generate(cfg.data)
    if cfg.protocol == "leave-one-out":
        source_ds, target_ds = leave_one_domain_out(ds, cfg.target_domain)
        source_domains = sorted(set(range(cfg.data.num_domains)) - {cfg.target_domain})
    else:
        source_ds = select_domains(ds, [cfg.source_domain])
        target_ds = select_domains(ds, [cfg.target_domain])
        source_domains = [cfg.source_domain]
    train_ds, val_ds = split_train_val(source_ds, cfg.train_ratio, seed=cfg.seeds.data)

    steps_per_epoch = len(train_ds) // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds training set size {len(train_ds)}")

    model = Model(replace(cfg.model, init_seed=cfg.seeds.init))
    train_rng = np.random.default_rng(cfg.seeds.train)
    dist_rng = np.random.default_rng((cfg.seeds.train, 0xD157))
    swa_state = None
    if cfg.swa:
        shapes = {name: p.shape for name, p in model.named_params()}
        swa_state = SwaState.for_shapes(shapes, m=steps_per_epoch - 1, c=steps_per_epoch,
                                        n_total=cfg.epochs * steps_per_epoch)

    metrics: list[EpochMetrics] = []
    best_epoch, best_val_acc, best_params = -1, -np.inf, None
    last_good_params = model.snapshot()
    audit_hits = 0
    nonfinite_streak = 0
    aborted, abort_step = False, None
    global_step = 0

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        sums = _breakdown_sums()
        n_steps = 0
        for batch in epoch_batches(train_ds, source_domains, cfg.batch_size,
                                   train_rng, drop_last=True):
            audit_hits += int(np.isin(batch.domains, source_domains, invert=True).sum())
            model.zero_grads()
            with Tape() as tape, np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                z = model.featurize(batch.x)
                logits = model.classify(z)
                l_c = softmax_cross_entropy(logits, batch.labels)
                l_sr, bd = selfreg_loss(model, z, logits, batch.labels, l_c,
                                        cfg.selfreg, train_rng)
                finite = np.isfinite(bd.l_c) and (l_sr is None or np.isfinite(l_sr.data))
                if finite:
                    total = total_loss(l_c, l_sr)
                    bd.l_total = total.item()
                else:
                    bd.l_total = float("nan")
            _accumulate_breakdown(sums, bd)
            n_steps += 1
            if not finite:
                nonfinite_streak += 1
                if nonfinite_streak >= _DIVERGENCE_LIMIT:
                    aborted, abort_step = True, global_step
                    break
                global_step += 1
                continue
            nonfinite_streak = 0
            backward(total, tape)
            sgd_step(model, lr)
            if swa_state is not None and should_sample(global_step, swa_state.m, swa_state.c):
                swa_update(swa_state, model.snapshot())
            global_step += 1
        if aborted:
            break
        val = evaluate(model, val_ds)
        feat_dist, logit_dist = distance_report(model, val_ds, cfg.distance_sample_cap,
                                                rng=dist_rng)
        metrics.append(EpochMetrics(
            epoch=epoch, lr=lr,
            **{k: v / n_steps for k, v in sums.items()},
            val_acc=val.accuracy, feat_dist=feat_dist, logit_dist=logit_dist))
        if val.accuracy > best_val_acc:
            best_epoch, best_val_acc, best_params = epoch, val.accuracy, model.snapshot()
        last_good_params = model.snapshot()

    final_params = model.snapshot()
    if best_params is None:  # aborted before the first epoch completed
        best_epoch, best_val_acc, best_params = -1, float("nan"), last_good_params

    eval_model = Model(replace(cfg.model, init_seed=cfg.seeds.init))
    eval_model.load_values(best_params)
    target = evaluate(eval_model, target_ds)

    swa_target_acc, swa_params = None, None
    if swa_state is not None and swa_state.count > 0:
        swa_params = swa_weights(swa_state)
        eval_model.load_values(swa_params)
        swa_target_acc = evaluate(eval_model, target_ds).accuracy

    return TrainResult(
        config=cfg, epoch_metrics=metrics,
        best_epoch=best_epoch, best_val_acc=best_val_acc, best_params=best_params,
        final_params=final_params,
        target_acc=target.accuracy, target_per_class=target.per_class,
        swa_target_acc=swa_target_acc, swa_params=swa_params,
        audit_target_hits=audit_hits,
        aborted=aborted, abort_step=abort_step,
        last_good_params=last_good_params if aborted else None)


def _accumulate_breakdown(sums: dict[str, float], bd: LossBreakdown) -> None:
    for k in sums:
        sums[k] += getattr(bd, k)


# ---------------------------------------------------------------------------
# Experiment protocols


@dataclass(frozen=True)
class AblationToggle:
    """One ablation row: a name, the regularizer toggles, and the SWA flag."""

    name: str
    selfreg: SelfRegConfig
    swa: bool = False


def ablation_ladder() -> list[AblationToggle]:
    """Component ladder from plain cross-entropy up to the full method."""
    return [
        AblationToggle("erm", SelfRegConfig.erm(), swa=False),
        AblationToggle("logit", SelfRegConfig(feature_loss=False, mixup=False, cdpl=False)),
        AblationToggle("logit_feat", SelfRegConfig(mixup=False, cdpl=False)),
        AblationToggle("logit_feat_mixup", SelfRegConfig(cdpl=False)),
        AblationToggle("logit_feat_mixup_cdpl", SelfRegConfig()),
        AblationToggle("logit_feat_mixup_cdpl_swa", SelfRegConfig(), swa=True),
    ]


@dataclass
class AblationRow:
    name: str
    per_seed_acc: list[float]
    mean_acc: float
    std_acc: float


def run_ablation(base_cfg: TrainConfig, toggles: Sequence[AblationToggle],
                 base_seeds: Sequence[int]) -> list[AblationRow]:
    """One training run per toggle configuration per seed; mean and std per row."""
    if not toggles:
        raise ValueError("toggle list must be nonempty")
    if not base_seeds:
        raise ValueError("seed list must be nonempty")
    rows = []
    for t in toggles:
        accs = []
        for b in base_seeds:
            cfg = config_for_seed(replace(base_cfg, selfreg=t.selfreg, swa=t.swa), b)
            accs.append(train(cfg).target_acc)
        mean = float(np.mean(accs))
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        rows.append(AblationRow(name=t.name, per_seed_acc=accs, mean_acc=mean, std_acc=std))
    return rows


@dataclass
class SingleSourceResult:
    """Accuracy matrix for training on one domain and testing on another."""

    cells: dict[tuple[int, int], float]
    row_avg: dict[int, float]
    col_avg: dict[int, float]
    overall_avg: float
    domains: list[int]


def run_single_source(base_cfg: TrainConfig, base_seeds: Sequence[int] = (0,)) -> SingleSourceResult:
    """Train on each single source domain, evaluate on every other domain."""
    num_domains = base_cfg.data.num_domains
    if num_domains < 2:
        raise ValueError("single-source protocol needs at least 2 domains")
    if not base_seeds:
        raise ValueError("seed list must be nonempty")
    domains = list(range(num_domains))
    cells: dict[tuple[int, int], float] = {}
    for src in domains:
        for tgt in domains:
            if src == tgt:
                continue
            accs = []
            for b in base_seeds:
                cfg = config_for_seed(replace(base_cfg, protocol="single-source",
                                              source_domain=src, target_domain=tgt), b)
                accs.append(train(cfg).target_acc)
            cells[(src, tgt)] = float(np.mean(accs))
    row_avg = {s: float(np.mean([cells[(s, t)] for t in domains if t != s])) for s in domains}
    col_avg = {t: float(np.mean([cells[(s, t)] for s in domains if s != t])) for t in domains}
    overall = float(np.mean(list(cells.values())))
    return SingleSourceResult(cells=cells, row_avg=row_avg, col_avg=col_avg,
                              overall_avg=overall, domains=domains)


def config_for_seed(cfg: TrainConfig, base_seed: int) -> TrainConfig:
    """Rebind a config to one experiment seed: dataset, split, init, training."""
    seeds = seeds_from_base(base_seed)
    return replace(cfg, data=replace(cfg.data, seed=seeds.data), seeds=seeds)


# ---------------------------------------------------------------------------
# Metrics stream and summary files


def write_metrics_csv(metrics: Sequence[EpochMetrics], path) -> None:
    """One record per epoch, columns fixed by ``METRICS_COLUMNS``."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for row in metrics:
            f.write(",".join(_fmt(getattr(row, c)) for c in METRICS_COLUMNS) + "\n")


def read_metrics_csv(path) -> list[EpochMetrics]:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        if tuple(header) != METRICS_COLUMNS:
            raise ValueError(f"unexpected metrics columns in {path}: {header}")
        rows = []
        for line in f:
            vals = line.strip().split(",")
            rows.append(EpochMetrics(epoch=int(vals[0]),
                                     **{c: float(v) for c, v in zip(METRICS_COLUMNS[1:], vals[1:])}))
    return rows


def write_summary(result: TrainResult, path, config_lines: Sequence[str] = ()) -> None:
    """Key-value run summary: accuracies, selection, seeds, config echo."""
    lines = [
        f"protocol = {result.config.protocol}",
        f"target_domain = {result.config.target_domain}",
        f"best_epoch = {result.best_epoch}",
        f"best_val_acc = {_fmt(result.best_val_acc)}",
        f"target_acc = {_fmt(result.target_acc)}",
        f"swa_target_acc = {_fmt(result.swa_target_acc) if result.swa_target_acc is not None else 'none'}",
        f"audit_target_hits = {result.audit_target_hits}",
        f"aborted = {str(result.aborted).lower()}",
        f"seeds.data = {result.config.seeds.data}",
        f"seeds.init = {result.config.seeds.init}",
        f"seeds.train = {result.config.seeds.train}",
    ]
    for c, acc in sorted(result.target_per_class.items()):
        lines.append(f"target_acc.class_{c} = {_fmt(acc)}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
        if config_lines:
            f.write("\n# config echo\n")
            for line in config_lines:
                f.write(f"config.{line}\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)

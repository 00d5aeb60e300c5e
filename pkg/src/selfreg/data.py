"""Synthetic multi-domain classification data: generation, splits, batching.

Each class is a Gaussian cluster in two blocks of coordinates. The
content block (dims 0 and 1) is class-informative and identically
distributed in every domain. The style block (dims 2 and 3) is also
class-informative but each domain applies its own rigid transform to it
(rotation plus translation in the style plane) and rescales the noise,
so the style-to-class association rotates from domain to domain. A model
that leans on the style cue fits the source domains well and transfers
poorly; the invariant content cue transfers. Any dimensions beyond the
two blocks are pure noise. Class labels are preserved under every domain
transformation, and everything is bit-reproducible given the spec seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from .autodiff import Tensor


@dataclass(frozen=True)
class DataSpec:
    num_classes: int = 5
    num_domains: int = 4
    samples_per_cell: int = 150
    input_dim: int = 4
    class_separation: float = 4.0
    style_separation: float = 6.0
    noise_scale: float = 1.0
    domain_rotations_deg: tuple[float, ...] = (0.0, 25.0, 50.0, 95.0)
    domain_translations: tuple[tuple[float, float], ...] = (
        (0.0, 0.0), (0.5, -0.4), (-0.4, 0.5), (0.6, 0.6))
    domain_noise_multipliers: tuple[float, ...] = (1.0, 1.1, 0.9, 1.2)
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_domains < 2:
            raise ValueError(f"num_domains must be >= 2, got {self.num_domains}")
        if self.samples_per_cell < 1:
            raise ValueError(f"samples_per_cell must be >= 1, got {self.samples_per_cell}")
        if self.input_dim < 4:
            raise ValueError(f"input_dim must be >= 4 (content and style blocks), "
                             f"got {self.input_dim}")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")
        if self.style_separation < 0:
            raise ValueError("style_separation must be nonnegative")
        for name, seq in (("domain_rotations_deg", self.domain_rotations_deg),
                          ("domain_translations", self.domain_translations),
                          ("domain_noise_multipliers", self.domain_noise_multipliers)):
            if len(seq) != self.num_domains:
                raise ValueError(f"{name} must list one entry per domain "
                                 f"({self.num_domains}), got {len(seq)}")
        for t in self.domain_translations:
            if len(t) != 2:
                raise ValueError("each domain translation must be a 2-vector")
        for m in self.domain_noise_multipliers:
            if m <= 0:
                raise ValueError("domain noise multipliers must be positive")


def spec_hash(spec: DataSpec) -> str:
    """Stable short hash of the spec, embedded in exported tables."""
    canon = json.dumps(asdict(spec), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


@dataclass
class DomainDataset:
    """Examples grouped by domain identifier: inputs, class and domain labels."""

    x: np.ndarray
    class_labels: np.ndarray
    domain_labels: np.ndarray
    metadata: dict

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, indices) -> "DomainDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return DomainDataset(self.x[idx].copy(), self.class_labels[idx].copy(),
                             self.domain_labels[idx].copy(), dict(self.metadata))

    def domains(self) -> np.ndarray:
        return np.unique(self.domain_labels)


@dataclass
class Batch:
    x: Tensor
    labels: np.ndarray
    domains: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]


def _class_means(spec: DataSpec) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(spec.num_classes) / spec.num_classes
    means = np.zeros((spec.num_classes, spec.input_dim))
    means[:, 0] = spec.class_separation * np.cos(angles)
    means[:, 1] = spec.class_separation * np.sin(angles)
    means[:, 2] = spec.style_separation * np.cos(angles)
    means[:, 3] = spec.style_separation * np.sin(angles)
    return means


def _rotation(theta_deg: float) -> np.ndarray:
    t = np.deg2rad(theta_deg)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def generate(spec: DataSpec) -> DomainDataset:
    """Draw the full dataset: every class appears in every domain.

    Per (class, domain) cell, fresh points are drawn from the class's
    base cluster (noise rescaled by the domain multiplier), then the
    domain's rigid transform, a rotation plus translation acting on the
    style plane, is applied.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = _class_means(spec)
    xs, cs, ds = [], [], []
    for c in range(spec.num_classes):
        for d in range(spec.num_domains):
            eps = rng.standard_normal((spec.samples_per_cell, spec.input_dim))
            pts = means[c] + spec.noise_scale * spec.domain_noise_multipliers[d] * eps
            rot = _rotation(spec.domain_rotations_deg[d])
            pts[:, 2:4] = pts[:, 2:4] @ rot.T + np.asarray(spec.domain_translations[d])
            xs.append(pts)
            cs.append(np.full(spec.samples_per_cell, c, dtype=np.intp))
            ds.append(np.full(spec.samples_per_cell, d, dtype=np.intp))
    return DomainDataset(np.concatenate(xs), np.concatenate(cs), np.concatenate(ds),
                         metadata={"spec": spec, "spec_hash": spec_hash(spec)})


def split_train_val(ds: DomainDataset, ratio: float, seed: int) -> tuple[DomainDataset, DomainDataset]:
    """Stratified split by (class, domain) cell; disjoint, union is the input."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in np.unique(ds.class_labels):
        for d in np.unique(ds.domain_labels):
            cell = np.flatnonzero((ds.class_labels == c) & (ds.domain_labels == d))
            if cell.size == 0:
                continue
            n_train = int(np.floor(ratio * cell.size + 0.5))
            if n_train == 0 or n_train == cell.size:
                raise ValueError(
                    f"cell (class={c}, domain={d}) with {cell.size} examples is too "
                    f"small to stratify at ratio {ratio}")
            perm = rng.permutation(cell)
            train_idx.append(perm[:n_train])
            val_idx.append(perm[n_train:])
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(val_idx))


def select_domains(ds: DomainDataset, domains: Sequence[int]) -> DomainDataset:
    """Restrict to the given domain labels."""
    wanted = set(int(d) for d in domains)
    known = set(int(d) for d in ds.domains())
    if not wanted:
        raise ValueError("domain selection must be nonempty")
    if not wanted <= known:
        raise ValueError(f"unknown domains {sorted(wanted - known)}; dataset has {sorted(known)}")
    mask = np.isin(ds.domain_labels, sorted(wanted))
    return ds.subset(np.flatnonzero(mask))


def leave_one_domain_out(ds: DomainDataset, target_domain: int) -> tuple[DomainDataset, DomainDataset]:
    """Partition into (all other domains, the held-out target domain)."""
    known = set(int(d) for d in ds.domains())
    if int(target_domain) not in known:
        raise ValueError(f"unknown target domain {target_domain}; dataset has {sorted(known)}")
    target_mask = ds.domain_labels == int(target_domain)
    return ds.subset(np.flatnonzero(~target_mask)), ds.subset(np.flatnonzero(target_mask))


def epoch_batches(ds: DomainDataset, source_domains: Sequence[int], batch_size: int,
                  rng: np.random.Generator, drop_last: bool = False) -> Iterator[Batch]:
    """One epoch pass: a fresh shuffle, then batches without replacement.

    Batches are drawn jointly across all source domains so same-class
    pairs straddle domains with high probability. With ``drop_last`` the
    trailing partial batch is skipped; otherwise every example in the
    source restriction appears exactly once per epoch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    src = select_domains(ds, source_domains)
    order = rng.permutation(len(src))
    for start in range(0, len(src), batch_size):
        chunk = order[start:start + batch_size]
        if drop_last and chunk.size < batch_size:
            break
        yield Batch(x=Tensor(src.x[chunk]),
                    labels=src.class_labels[chunk].copy(),
                    domains=src.domain_labels[chunk].copy())


def export_dataset(ds: DomainDataset, path) -> None:
    """Write the dataset as a delimited text table with a spec-hash header."""
    cols = [f"x{i}" for i in range(ds.input_dim)] + ["class", "domain"]
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# spec_hash={ds.metadata.get('spec_hash', 'unknown')}\n")
        f.write(",".join(cols) + "\n")
        for i in range(len(ds)):
            vals = [repr(float(v)) for v in ds.x[i]]
            vals += [str(int(ds.class_labels[i])), str(int(ds.domain_labels[i]))]
            f.write(",".join(vals) + "\n")


def import_dataset(path) -> DomainDataset:
    """Read a table written by ``export_dataset``. Round-trips exactly."""
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
        if not first.startswith("# spec_hash="):
            raise ValueError(f"missing spec-hash header in {path}")
        h = first.split("=", 1)[1]
        header = f.readline().strip().split(",")
        if len(header) < 3 or header[-2:] != ["class", "domain"]:
            raise ValueError(f"malformed column header in {path}")
        dim = len(header) - 2
        xs, cs, ds_ = [], [], []
        for lineno, line in enumerate(f, start=3):
            parts = line.strip().split(",")
            if len(parts) != dim + 2:
                raise ValueError(f"{path}:{lineno}: expected {dim + 2} columns, got {len(parts)}")
            xs.append([float(v) for v in parts[:dim]])
            cs.append(int(parts[dim]))
            ds_.append(int(parts[dim + 1]))
    return DomainDataset(np.asarray(xs, dtype=np.float64),
                         np.asarray(cs, dtype=np.intp),
                         np.asarray(ds_, dtype=np.intp),
                         metadata={"spec_hash": h})

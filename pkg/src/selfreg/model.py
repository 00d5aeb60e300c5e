"""Featurizer, classifier head, and perturbation heads over the autodiff core.

The featurizer is a plain MLP (ReLU between layers), the classifier a
single linear map to logits, and each perturbation head a 2-layer MLP
(linear, batch norm, ReLU, linear) whose output width equals its input
width. One head operates on features, a second independent head on
logits, since the two live in spaces of different dimensionality.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tensor, add, batch_norm, matmul, relu

_CKPT_MAGIC = b"DGMODEL\x01"
_CKPT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 2
    hidden_dims: tuple[int, ...] = (64, 64)
    feat_dim: int = 32
    cdpl_hidden_dim: int = 64
    num_classes: int = 5
    init_seed: int = 0

    def validate(self) -> None:
        dims = (self.input_dim, self.feat_dim, self.cdpl_hidden_dim, self.num_classes,
                *self.hidden_dims)
        for d in dims:
            if int(d) < 1:
                raise ValueError(f"model dimensions must be >= 1, got {dims}")


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    # Fan-in scaled uniform weights, zero biases.
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(np.zeros(fan_out), requires_grad=True)
    return w, b


class CdplHead:
    """2-layer perturbation head: linear -> batch norm -> ReLU -> linear.

    Output dimensionality equals input dimensionality, so perturbed
    vectors live in the same space as their inputs.
    """

    def __init__(self, dim: int, hidden_dim: int, rng: np.random.Generator):
        self.dim = dim
        self.hidden_dim = hidden_dim
        self.w1, self.b1 = _init_linear(rng, dim, hidden_dim)
        self.gamma = Tensor(np.ones(hidden_dim), requires_grad=True)
        self.beta = Tensor(np.zeros(hidden_dim), requires_grad=True)
        self.w2, self.b2 = _init_linear(rng, hidden_dim, dim)

    def forward(self, z: Tensor) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.dim:
            raise ValueError(f"head expects input of width {self.dim}, got {z.shape}")
        if z.shape[0] < 2:
            raise ValueError(f"head needs a batch of at least 2 rows, got {z.shape[0]}")
        h = add(matmul(z, self.w1), self.b1)
        h = relu(batch_norm(h, self.gamma, self.beta))
        return add(matmul(h, self.w2), self.b2)

    def named_params(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


class Model:
    """Parameter collection for the featurizer, classifier, and both heads.

    Initialization is fully determined by ``cfg.init_seed``; two models
    built from the same config are bitwise identical.
    """

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        self.featurizer: list[tuple[Tensor, Tensor]] = []
        widths = [cfg.input_dim, *cfg.hidden_dims, cfg.feat_dim]
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.featurizer.append(_init_linear(rng, fan_in, fan_out))
        self.classifier_w, self.classifier_b = _init_linear(rng, cfg.feat_dim, cfg.num_classes)
        self.cdpl_feat = CdplHead(cfg.feat_dim, cfg.cdpl_hidden_dim, rng)
        self.cdpl_logit = CdplHead(cfg.num_classes, cfg.cdpl_hidden_dim, rng)

    def featurize(self, x: Tensor) -> Tensor:
        """Map inputs [N, input_dim] to features [N, feat_dim]."""
        if x.data.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ValueError(f"featurize expects input of width {self.cfg.input_dim}, got {x.shape}")
        h = x
        last = len(self.featurizer) - 1
        for i, (w, b) in enumerate(self.featurizer):
            h = add(matmul(h, w), b)
            if i != last:
                h = relu(h)
        return h

    def classify(self, z: Tensor) -> Tensor:
        """Linear logits [N, num_classes] from features [N, feat_dim]."""
        if z.data.ndim != 2 or z.shape[1] != self.cfg.feat_dim:
            raise ValueError(f"classify expects features of width {self.cfg.feat_dim}, got {z.shape}")
        return add(matmul(z, self.classifier_w), self.classifier_b)

    def cdpl_forward(self, z: Tensor) -> Tensor:
        """Feature-level perturbation head; output width equals input width."""
        return self.cdpl_feat.forward(z)

    def named_params(self):
        for i, (w, b) in enumerate(self.featurizer):
            yield f"featurizer.{i}.w", w
            yield f"featurizer.{i}.b", b
        yield "classifier.w", self.classifier_w
        yield "classifier.b", self.classifier_b
        yield from self.cdpl_feat.named_params("cdpl_feat")
        yield from self.cdpl_logit.named_params("cdpl_logit")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def clear_grads(self) -> None:
        for p in self.parameters():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copy of all parameter values, keyed by stable name."""
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite parameters from a snapshot; names and shapes must match."""
        params = dict(self.named_params())
        if set(values) != set(params):
            missing = set(params) - set(values)
            extra = set(values) - set(params)
            raise ValueError(f"parameter set mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, arr in values.items():
            p = params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter '{name}' has shape {arr.shape}, expected {p.shape}")
            p.data = arr.copy()


def save_model(model: Model, path) -> None:
    """Write a self-describing checkpoint: header with config, then raw data.

    Layout: magic, little-endian uint64 header length, UTF-8 JSON header
    (format version, config, ordered parameter manifest), then each
    parameter's float64 values in little-endian byte order. Round-trips
    bitwise.
    """
    names, tensors = zip(*model.named_params())
    header = {
        "format_version": _CKPT_FORMAT_VERSION,
        "config": asdict(model.cfg),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in zip(names, tensors)],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for t in tensors:
            f.write(t.data.astype("<f8").tobytes())


def load_model(path) -> Model:
    """Rebuild a model from a checkpoint written by ``save_model``."""
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a model checkpoint: {path}")
        raw_len = f.read(8)
        if len(raw_len) != 8:
            raise ValueError(f"truncated checkpoint header: {path}")
        (header_len,) = struct.unpack("<Q", raw_len)
        blob = f.read(header_len)
        if len(blob) != header_len:
            raise ValueError(f"truncated checkpoint header: {path}")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ValueError(f"corrupt checkpoint header: {e}") from e
        if header.get("format_version") != _CKPT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version: {header.get('format_version')}")
        cfg_dict = dict(header["config"])
        cfg_dict["hidden_dims"] = tuple(cfg_dict["hidden_dims"])
        cfg = ModelConfig(**cfg_dict)
        model = Model(cfg)
        params = dict(model.named_params())
        loaded = set()
        for rec in header["params"]:
            name, shape = rec["name"], tuple(rec["shape"])
            if name not in params:
                raise ValueError(f"checkpoint parameter '{name}' not present in model config")
            p = params[name]
            if shape != p.shape:
                raise ValueError(f"checkpoint parameter '{name}' has shape {shape}, expected {p.shape}")
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"truncated checkpoint data for parameter '{name}'")
            p.data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            loaded.add(name)
        if loaded != set(params):
            missing = sorted(set(params) - loaded)
            raise ValueError(f"checkpoint missing parameters: {missing}")
    return model

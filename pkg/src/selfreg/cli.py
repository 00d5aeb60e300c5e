"""Command-line front door: config parsing, experiment launch, report emission.

Configs are structured text, one ``dotted.key = value`` per line, with
``#`` comment lines. Every knob has a default, overrides win, and unknown
keys are rejected with the exact field path. The parsed config is echoed
verbatim into every output directory so runs are self-describing. All
randomness flows from the listed experiment seeds.

Commands: train, eval, ablate, single-source, report-distances.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .data import DataSpec, generate, select_domains
from .losses import SelfRegConfig
from .model import Model, ModelConfig, load_model, save_model
from .trainer import (PROTOCOLS, AblationRow, SingleSourceResult, TrainConfig,
                      TrainResult, ablation_ladder, config_for_seed,
                      distance_report, evaluate, run_ablation,
                      run_single_source, train, write_metrics_csv, write_summary)


@dataclass(frozen=True)
class ExperimentConfig:
    """Union of every experiment knob plus the seed list."""

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
    seeds: tuple[int, ...] = (0,)

    def train_config(self, base_seed: int) -> TrainConfig:
        cfg = TrainConfig(
            data=self.data, model=self.model, selfreg=self.selfreg,
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            lr_decay_epoch=self.lr_decay_epoch, decay_factor=self.decay_factor,
            swa=self.swa, train_ratio=self.train_ratio,
            distance_sample_cap=self.distance_sample_cap,
            protocol=self.protocol, target_domain=self.target_domain,
            source_domain=self.source_domain)
        return config_for_seed(cfg, base_seed)


# --- value (de)serialization -------------------------------------------------

def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got '{s}'")


def _parse_int(s: str) -> int:
    return int(s.strip())


def _parse_float(s: str) -> float:
    return float(s.strip())


def _parse_str(s: str) -> str:
    return s.strip()


def _parse_opt_int(s: str) -> Optional[int]:
    s = s.strip()
    return None if s.lower() == "none" else int(s)


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(v) for v in s.split(","))


def _parse_float_tuple(s: str) -> tuple[float, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(float(v) for v in s.split(","))


def _parse_pair_tuple(s: str) -> tuple[tuple[float, float], ...]:
    s = s.strip()
    if not s:
        return ()
    pairs = []
    for chunk in s.split(";"):
        vals = [float(v) for v in chunk.split(",")]
        if len(vals) != 2:
            raise ValueError(f"expected 'x,y' pairs separated by ';', got '{chunk}'")
        pairs.append((vals[0], vals[1]))
    return tuple(pairs)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(",".join(repr(float(x)) for x in pair) for pair in v)
        return ",".join(_format_value(x) for x in v)
    return str(v)


# parser per config field, keyed by dotted path
_FIELD_PARSERS: dict[str, Callable[[str], object]] = {
    "data.num_classes": _parse_int,
    "data.num_domains": _parse_int,
    "data.samples_per_cell": _parse_int,
    "data.input_dim": _parse_int,
    "data.class_separation": _parse_float,
    "data.noise_scale": _parse_float,
    "data.domain_rotations_deg": _parse_float_tuple,
    "data.domain_translations": _parse_pair_tuple,
    "data.domain_noise_multipliers": _parse_float_tuple,
    "data.seed": _parse_int,
    "model.input_dim": _parse_int,
    "model.hidden_dims": _parse_int_tuple,
    "model.feat_dim": _parse_int,
    "model.cdpl_hidden_dim": _parse_int,
    "model.num_classes": _parse_int,
    "model.init_seed": _parse_int,
    "selfreg.lambda_feature": _parse_float,
    "selfreg.lambda_logit": _parse_float,
    "selfreg.alpha": _parse_float,
    "selfreg.beta": _parse_float,
    "selfreg.clipping": _parse_bool,
    "selfreg.mixup": _parse_bool,
    "selfreg.cdpl": _parse_bool,
    "selfreg.feature_loss": _parse_bool,
    "selfreg.logit_loss": _parse_bool,
    "selfreg.logit_cdpl": _parse_bool,
    "selfreg.independent_gamma": _parse_bool,
    "train.epochs": _parse_int,
    "train.batch_size": _parse_int,
    "train.lr": _parse_float,
    "train.lr_decay_epoch": _parse_int,
    "train.decay_factor": _parse_float,
    "train.swa": _parse_bool,
    "train.train_ratio": _parse_float,
    "train.distance_sample_cap": _parse_int,
    "protocol": _parse_str,
    "target_domain": _parse_int,
    "source_domain": _parse_opt_int,
    "seeds": _parse_int_tuple,
}

# dotted path -> (section attribute on ExperimentConfig or None, field name)
_FIELD_TARGETS: dict[str, tuple[Optional[str], str]] = {}
for _key in _FIELD_PARSERS:
    if "." in _key:
        _sec, _f = _key.split(".", 1)
        _FIELD_TARGETS[_key] = (_sec if _sec != "train" else None, _f)
    else:
        _FIELD_TARGETS[_key] = (None, _key)


def parse_config(path=None, overrides: Sequence[str] = (), text: Optional[str] = None) -> ExperimentConfig:
    """Build an ExperimentConfig from defaults, an optional file, and overrides.

    ``overrides`` are ``key=value`` strings applied after the file, in
    order. Raises ValueError naming the exact field path on unknown keys,
    type mismatches, or constraint violations.
    """
    lines: list[tuple[str, str]] = []
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    if text is not None:
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno} is not 'key = value': '{raw}'")
            key, val = line.split("=", 1)
            lines.append((key.strip(), val.strip()))
    for ov in overrides:
        if "=" not in ov:
            raise ValueError(f"override is not 'key=value': '{ov}'")
        key, val = ov.split("=", 1)
        lines.append((key.strip(), val.strip()))

    sections: dict[Optional[str], dict[str, object]] = {"data": {}, "model": {},
                                                        "selfreg": {}, None: {}}
    for key, val in lines:
        if key not in _FIELD_PARSERS:
            raise ValueError(f"unknown config key '{key}'")
        try:
            parsed = _FIELD_PARSERS[key](val)
        except ValueError as e:
            raise ValueError(f"bad value for config key '{key}': {e}") from e
        sec, fname = _FIELD_TARGETS[key]
        sections[sec][fname] = parsed

    cfg = ExperimentConfig(
        data=replace(DataSpec(), **sections["data"]),
        model=replace(ModelConfig(), **sections["model"]),
        selfreg=replace(SelfRegConfig(), **sections["selfreg"]),
        **sections[None])
    _validate_experiment(cfg)
    return cfg


def _validate_experiment(cfg: ExperimentConfig) -> None:
    if not cfg.seeds:
        raise ValueError("config key 'seeds' must list at least one seed")
    if cfg.protocol not in PROTOCOLS:
        raise ValueError(f"config key 'protocol' must be one of {PROTOCOLS}")
    # Validate the assembled per-run config once; names the offending field.
    cfg.train_config(cfg.seeds[0]).validate()


def format_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config(text=...)`` returns an equal config."""
    out = []
    for key in _FIELD_PARSERS:
        sec, fname = _FIELD_TARGETS[key]
        if sec is not None:
            v = getattr(getattr(cfg, sec), fname)
        else:
            v = getattr(cfg, fname)
        out.append(f"{key} = {_format_value(v)}")
    return "\n".join(out) + "\n"


# --- commands ----------------------------------------------------------------

def _load_experiment(args) -> ExperimentConfig:
    cfg = parse_config(path=args.config, overrides=args.set or [])
    updates = {}
    if getattr(args, "seeds", None):
        updates["seeds"] = _parse_int_tuple(args.seeds)
    if getattr(args, "target_domain", None) is not None:
        updates["target_domain"] = args.target_domain
    if updates:
        cfg = replace(cfg, **updates)
        _validate_experiment(cfg)
    return cfg


def _ensure_out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _echo_config(cfg: ExperimentConfig, out_dir: str) -> list[str]:
    text = format_config(cfg)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(text)
    return text.strip().splitlines()


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    out = _ensure_out(args)
    config_lines = _echo_config(cfg, out)
    result = train(cfg.train_config(cfg.seeds[0]))
    write_metrics_csv(result.epoch_metrics, os.path.join(out, "metrics.csv"))
    write_summary(result, os.path.join(out, "summary.txt"), config_lines=config_lines)
    model_cfg = replace(cfg.model, init_seed=result.config.seeds.init)
    for name, params in (("best", result.best_params), ("final", result.final_params),
                         ("swa", result.swa_params)):
        if params is None:
            continue
        m = Model(model_cfg)
        m.load_values(params)
        save_model(m, os.path.join(out, f"{name}.ckpt"))
    print(f"best_epoch={result.best_epoch} best_val_acc={result.best_val_acc:.4f} "
          f"target_acc={result.target_acc:.4f}"
          + (f" swa_target_acc={result.swa_target_acc:.4f}" if result.swa_target_acc is not None else ""))
    if result.aborted:
        print(f"run aborted at step {result.abort_step} (non-finite loss); "
              f"last good checkpoint written", file=sys.stderr)
        return 1
    return 0


def _target_dataset(cfg: ExperimentConfig, target_domain: int):
    run_cfg = cfg.train_config(cfg.seeds[0])
    ds = generate(run_cfg.data)
    return select_domains(ds, [target_domain])


def _find_config_for_checkpoint(args) -> ExperimentConfig:
    if args.config is None:
        sidecar = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "config.txt")
        if not os.path.exists(sidecar):
            raise ValueError(f"no --config given and no config echo found at {sidecar}")
        args.config = sidecar
    return _load_experiment(args)


def cmd_eval(args) -> int:
    cfg = _find_config_for_checkpoint(args)
    model = load_model(args.checkpoint)
    target = cfg.target_domain if args.target_domain is None else args.target_domain
    result = evaluate(model, _target_dataset(cfg, target))
    print(f"target_domain={target} accuracy={result.accuracy:.6f}")
    for c, acc in sorted(result.per_class.items()):
        print(f"class_{c}_accuracy={acc:.6f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_experiment(args)
    out = _ensure_out(args)
    _echo_config(cfg, out)
    rows = run_ablation(cfg.train_config(cfg.seeds[0]), ablation_ladder(), cfg.seeds)
    path = os.path.join(out, "ablation.csv")
    with open(path, "w", encoding="utf-8") as f:
        f.write("name,mean_acc,std_acc," + ",".join(f"seed_{b}" for b in cfg.seeds) + "\n")
        for row in rows:
            f.write(f"{row.name},{row.mean_acc!r},{row.std_acc!r},"
                    + ",".join(repr(a) for a in row.per_seed_acc) + "\n")
    for row in rows:
        print(f"{row.name:28s} {row.mean_acc:.4f} +/- {row.std_acc:.4f}")
    return 0


def cmd_single_source(args) -> int:
    cfg = _load_experiment(args)
    out = _ensure_out(args)
    _echo_config(cfg, out)
    result = run_single_source(cfg.train_config(cfg.seeds[0]), cfg.seeds)
    path = os.path.join(out, "single_source.csv")
    doms = result.domains
    with open(path, "w", encoding="utf-8") as f:
        f.write("source," + ",".join(f"target_{t}" for t in doms) + ",row_avg\n")
        for s in doms:
            cells = [repr(result.cells[(s, t)]) if s != t else "" for t in doms]
            f.write(f"{s}," + ",".join(cells) + f",{result.row_avg[s]!r}\n")
        f.write("col_avg," + ",".join(repr(result.col_avg[t]) for t in doms)
                + f",{result.overall_avg!r}\n")
    for s in doms:
        row = " ".join(f"{result.cells[(s, t)]:.4f}" if t != s else "   -  " for t in doms)
        print(f"source {s}: {row}  | avg {result.row_avg[s]:.4f}")
    print(f"overall average: {result.overall_avg:.4f}")
    return 0


def cmd_report_distances(args) -> int:
    cfg = _find_config_for_checkpoint(args)
    model = load_model(args.checkpoint)
    target = cfg.target_domain if args.target_domain is None else args.target_domain
    ds = _target_dataset(cfg, target)
    feat_dist, logit_dist = distance_report(model, ds, cfg.distance_sample_cap,
                                            rng=np.random.default_rng(cfg.seeds[0]))
    print(f"target_domain={target} same_class_feat_dist={feat_dist:.6f} "
          f"same_class_logit_dist={logit_dist:.6f}")
    return 0


def _add_common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", default=None, help="config file (dotted key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override; repeatable")
    p.add_argument("--seeds", default=None, help="comma-separated experiment seeds")
    p.add_argument("--target-domain", type=int, default=None, dest="target_domain")
    if out_required:
        p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfreg",
        description="Positive-pair contrastive regularization experiments on "
                    "synthetic multi-domain classification tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training run and write its artifacts")
    _add_common(p, out_required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a held-out domain")
    p.add_argument("--checkpoint", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the component-toggle ladder")
    _add_common(p, out_required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("single-source", help="train on each domain alone, test on the rest")
    _add_common(p, out_required=True)
    p.set_defaults(fn=cmd_single_source)

    p = sub.add_parser("report-distances", help="same-class distances for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_report_distances)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

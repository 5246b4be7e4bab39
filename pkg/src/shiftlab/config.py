"""Run configuration: one YAML file, one top-level seed.

The schema is strict: unknown keys anywhere in the document are rejected
before any compute starts, so typos fail fast instead of silently running
with defaults.  ``load_config`` returns a :class:`RunConfig` whose
``protocol`` field is ready for :func:`shiftlab.pipeline.run_protocol`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentPolicy
from .cost import CostSpec
from .datasynth import BaseSpec, BundleSizes, ShiftSpec, UPSTREAM_PATTERNS
from .models import EncoderConfig
from .pipeline import (
    ContrastivePretrainConfig,
    FinetuneConfig,
    GridPoint,
    PretrainConfig,
    ProtocolSpec,
    SCENARIOS,
)
from .stats import log_space

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "default_config_text"]

SCHEMA_VERSION = 1


class ConfigError(Exception):
    """The config file is malformed or violates the schema."""


@dataclass
class RunConfig:
    protocol: ProtocolSpec
    output_dir: str = "runs/out"
    cost_specs: list[CostSpec] = field(default_factory=list)
    report_level: float = 0.95
    report_curve_strategy: str | None = None  # None = prefer "contrastive"


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} under '{where}' (allowed: {sorted(allowed)})")


def _get(d: dict, key: str, default):
    return d[key] if key in d else default


_POLICIES = {
    "standard": AugmentPolicy.standard,
    "grayscale_strong": AugmentPolicy.grayscale_strong,
    "identity": AugmentPolicy.identity,
}


def _policy(name, where: str) -> AugmentPolicy | None:
    if name is None:
        return None
    if name not in _POLICIES:
        raise ConfigError(f"'{where}' must be one of {sorted(_POLICIES)} or null, got {name!r}")
    return _POLICIES[name]()


def _base_spec(d: dict, where: str) -> BaseSpec:
    allowed = {
        "image_size", "channels", "n_classes", "views_per_record", "patterns",
        "class_prevalence", "subgroup_attr", "subgroup_levels", "subgroup_weights",
        "subgroup_noise", "nuisance",
    }
    _check_keys(d, allowed, where)
    kwargs = dict(d)
    for key in ("patterns", "class_prevalence", "subgroup_levels", "subgroup_weights", "subgroup_noise"):
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(kwargs[key])
        elif key in kwargs and kwargs[key] is None and key not in ("class_prevalence",):
            del kwargs[key]
    try:
        return BaseSpec(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad '{where}': {e}") from e


def _shift_spec(d: dict, where: str) -> ShiftSpec:
    allowed = {
        "intensity_delta", "contrast_factor", "blur_sigma",
        "class_prevalence", "subgroup_weights", "label_noise_rate",
    }
    _check_keys(d, allowed, where)
    kwargs = dict(d)
    for key in ("class_prevalence", "subgroup_weights"):
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(kwargs[key])
    try:
        return ShiftSpec(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad '{where}': {e}") from e


def _sizes(d: dict, where: str) -> BundleSizes:
    allowed = {"unlabeled", "in_train", "in_val", "in_test", "out_train", "out_val", "out_test"}
    _check_keys(d, allowed, where)
    try:
        return BundleSizes(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad '{where}': {e}") from e


def _grid(d: dict, where: str) -> tuple[GridPoint, ...]:
    allowed = {"optimizer", "schedule", "lrs", "lr_range", "weight_decays", "decay_factor", "decay_step"}
    _check_keys(d, allowed, where)
    if "lrs" in d and "lr_range" in d:
        raise ConfigError(f"'{where}' sets both lrs and lr_range; pick one")
    if "lr_range" in d:
        r = d["lr_range"]
        _check_keys(r, {"lo", "hi", "count"}, f"{where}.lr_range")
        lrs = log_space(r["lo"], r["hi"], r["count"])
    else:
        lrs = [float(x) for x in _get(d, "lrs", [1e-3])]
    wds = [float(x) for x in _get(d, "weight_decays", [0.0])]
    if not lrs or not wds:
        raise ConfigError(f"'{where}' needs at least one lr and one weight decay")
    points = tuple(
        GridPoint(
            optimizer=_get(d, "optimizer", "adam"),
            lr=lr,
            weight_decay=wd,
            schedule=_get(d, "schedule", "constant"),
            decay_factor=_get(d, "decay_factor", 0.1),
            decay_step=_get(d, "decay_step", 100),
        )
        for lr in lrs
        for wd in wds
    )
    return points


def _finetune(d: dict, where: str) -> FinetuneConfig:
    allowed = {"steps", "batch_size", "eval_every", "patience", "momentum", "augment", "grid"}
    _check_keys(d, allowed, where)
    grid = _grid(_get(d, "grid", {}), f"{where}.grid")
    try:
        return FinetuneConfig(
            steps=_get(d, "steps", 300),
            batch_size=_get(d, "batch_size", 32),
            eval_every=_get(d, "eval_every", 25),
            patience=_get(d, "patience", None),
            momentum=_get(d, "momentum", 0.9),
            augment=_policy(_get(d, "augment", None), f"{where}.augment"),
            grid=grid,
        )
    except ValueError as e:
        raise ConfigError(f"bad '{where}': {e}") from e


def parse_config(doc: dict, path: str = "<config>") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    allowed = {
        "schema_version", "seed", "output_dir", "data", "archs", "strategies",
        "fractions", "repeats", "metric", "ood_scenario", "emit_subgroups",
        "pretrain", "finetune", "ood_finetune", "cost_specs", "report",
    }
    _check_keys(doc, allowed, "top level")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}"
        )
    seed = doc.get("seed")
    if not isinstance(seed, int):
        raise ConfigError("'seed' (integer) is required; all randomness flows from it")

    data = _get(doc, "data", {})
    _check_keys(data, {"base", "shift", "sizes", "upstream"}, "data")
    base = _base_spec(_get(data, "base", {}), "data.base")
    shift = _shift_spec(_get(data, "shift", {}), "data.shift")
    sizes = _sizes(_get(data, "sizes", {}), "data.sizes")
    up = _get(data, "upstream", {})
    _check_keys(up, {"base", "train", "val"}, "data.upstream")
    up_base_doc = _get(up, "base", None)
    if up_base_doc is None:
        upstream = BaseSpec(
            image_size=base.image_size, channels=base.channels,
            n_classes=min(5, len(UPSTREAM_PATTERNS)), patterns=UPSTREAM_PATTERNS,
            nuisance=base.nuisance,
        )
    else:
        upstream = _base_spec(up_base_doc, "data.upstream.base")

    archs = []
    for name in _get(doc, "archs", ["small"]):
        try:
            archs.append((str(name), EncoderConfig.preset(str(name))))
        except ValueError as e:
            raise ConfigError(f"bad 'archs' entry {name!r}: {e}") from e

    pre = _get(doc, "pretrain", {})
    _check_keys(pre, {"supervised", "contrastive"}, "pretrain")
    sup_doc = _get(pre, "supervised", {})
    _check_keys(
        sup_doc,
        {"steps", "batch_size", "optimizer", "lr", "weight_decay", "momentum", "schedule", "augment"},
        "pretrain.supervised",
    )
    sup_kwargs = dict(sup_doc)
    if "augment" in sup_kwargs:
        sup_kwargs["augment"] = _policy(sup_kwargs["augment"], "pretrain.supervised.augment")
    con_doc = _get(pre, "contrastive", {})
    _check_keys(
        con_doc,
        {"steps", "checkpoint_every", "temperature", "batch_pairs", "projection_dim",
         "lr", "weight_decay", "momentum", "eta", "schedule", "augment"},
        "pretrain.contrastive",
    )
    con_kwargs = dict(con_doc)
    if "augment" in con_kwargs:
        pol = _policy(con_kwargs["augment"], "pretrain.contrastive.augment")
        if pol is None:
            raise ConfigError("pretrain.contrastive.augment cannot be null")
        con_kwargs["augment"] = pol

    ood_doc = _get(doc, "ood_finetune", None)
    try:
        protocol = ProtocolSpec(
            seed=seed,
            base_spec=base,
            shift_spec=shift,
            sizes=sizes,
            upstream_spec=upstream,
            upstream_train=_get(up, "train", 1200),
            upstream_val=_get(up, "val", 200),
            archs=tuple(archs),
            strategies=tuple(_get(doc, "strategies", ["supervised", "contrastive"])),
            fractions=tuple(float(f) for f in _get(doc, "fractions", [0.0, 0.1, 0.2, 0.5, 1.0])),
            repeats=_get(doc, "repeats", 10),
            metric=_get(doc, "metric", "accuracy"),
            supervised_cfg=PretrainConfig(**sup_kwargs),
            contrastive_cfg=ContrastivePretrainConfig(**con_kwargs),
            finetune_cfg=_finetune(_get(doc, "finetune", {}), "finetune"),
            ood_finetune_cfg=_finetune(ood_doc, "ood_finetune") if ood_doc is not None else None,
            ood_scenario=_get(doc, "ood_scenario", "finetuned+keep-head"),
            emit_subgroups=bool(_get(doc, "emit_subgroups", True)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e

    cost_specs = []
    for i, c in enumerate(_get(doc, "cost_specs", [])):
        _check_keys(
            c, {"name", "image_count", "seconds_per_image", "hourly_wage", "cost_per_image"},
            f"cost_specs[{i}]",
        )
        try:
            cost_specs.append(CostSpec(**c))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad 'cost_specs[{i}]': {e}") from e

    rep = _get(doc, "report", {})
    _check_keys(rep, {"level", "curve_strategy"}, "report")
    level = float(_get(rep, "level", 0.95))
    if not 0.0 < level < 1.0:
        raise ConfigError("report.level must lie in (0, 1)")
    curve_strategy = _get(rep, "curve_strategy", None)
    if curve_strategy is not None and curve_strategy not in protocol.strategies:
        raise ConfigError(
            f"report.curve_strategy {curve_strategy!r} is not among strategies {protocol.strategies}"
        )

    return RunConfig(
        protocol=protocol,
        output_dir=str(_get(doc, "output_dir", "runs/out")),
        cost_specs=cost_specs,
        report_level=level,
        report_curve_strategy=curve_strategy,
    )


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: invalid YAML: {e}") from e
    return parse_config(doc, str(p))


def default_config_text() -> str:
    """A commented starter config (also used by the docs)."""
    return """\
schema_version: 1
seed: 0
output_dir: runs/demo

data:
  base: {n_classes: 4}
  shift: {intensity_delta: 0.18, contrast_factor: 0.65, blur_sigma: 0.9}
  sizes: {unlabeled: 2000, in_train: 1500, in_val: 120, in_test: 400,
          out_train: 1700, out_val: 430, out_test: 660}
  upstream: {train: 1200, val: 200}

archs: [small]
strategies: [supervised, contrastive]
fractions: [0.0, 0.1, 0.2, 0.5, 1.0]
repeats: 10
metric: accuracy
ood_scenario: finetuned+keep-head

pretrain:
  supervised: {steps: 400, lr: 0.05}
  contrastive: {steps: 600, checkpoint_every: 100, lr: 0.3, batch_pairs: 16}

finetune:
  steps: 300
  eval_every: 25
  grid: {optimizer: adam, lrs: [0.001, 0.003]}

cost_specs:
  - {name: example-task, image_count: 17322, seconds_per_image: 60, hourly_wage: 171.60}
"""

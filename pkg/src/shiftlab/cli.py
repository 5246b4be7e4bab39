"""Command-line entry points.

Subcommands::

    shiftlab gen-data  --config cfg.yaml [--out DIR]
    shiftlab pretrain  --config cfg.yaml [--out DIR]
    shiftlab finetune  --config cfg.yaml [--out DIR] [--strategy NAME]
    shiftlab protocol  --config cfg.yaml [--out DIR] [--workers N] [--seed S]
                       [--strategy FILTER]
    shiftlab report    RESULTS_DIR [--out DIR] [--config cfg.yaml]

Exit codes: 0 success, 1 compute failure (or incomplete report), 2 invalid
input.  Set SHIFTLAB_LOG=debug|info|warning for verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import save_encoder, save_model
from .config import ConfigError, RunConfig, load_config
from .datasynth import fingerprint, fingerprint_hash, generate_labeled_set, generate_task, save_bundle
from .models import Model, init_classification_head, init_encoder
from .pipeline import (
    PipelineError,
    contrastive_pretrain,
    derive_rng,
    derive_seed,
    finetune,
    run_protocol,
    save_protocol,
    supervised_pretrain,
)
from .report import ReportError, generate_report
from .tensor import NumericError

log = logging.getLogger("shiftlab")

__all__ = ["main"]


def _setup_logging() -> None:
    name = os.environ.get("SHIFTLAB_LOG", "warning").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.protocol = dataclasses.replace(cfg.protocol, seed=args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig, leaf: str) -> Path:
    base = Path(args.out) if args.out else Path(cfg.output_dir) / leaf
    base.mkdir(parents=True, exist_ok=True)
    return base


def _make_bundle(cfg: RunConfig):
    spec = cfg.protocol
    return generate_task(derive_seed(spec.seed, "bundle"), spec.base_spec, spec.shift_spec, spec.sizes)


def _pretrained_encoders(cfg: RunConfig, arch_name: str, enc_cfg, bundle):
    """Supervised (and contrastive, if requested) encoders for one arch."""
    spec = cfg.protocol
    rand = init_encoder(enc_cfg, derive_rng(spec.seed, arch_name, "init"))
    out = {"random": rand}
    if any(s in ("supervised", "contrastive", "selftrain") for s in spec.strategies):
        upstream = generate_labeled_set(
            derive_seed(spec.seed, "upstream"), spec.upstream_spec,
            spec.upstream_train, spec.upstream_val,
        )
        sup = supervised_pretrain(
            rand, upstream["train"], upstream["val"], spec.supervised_cfg,
            derive_seed(spec.seed, arch_name, "sup"),
        )
        out["supervised"] = sup
    if "contrastive" in spec.strategies:
        con = contrastive_pretrain(
            out["supervised"].encoder, bundle.unlabeled, spec.contrastive_cfg,
            derive_seed(spec.seed, arch_name, "con"),
        )
        out["contrastive"] = con
    return out


def _cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg, "bundle")
    bundle = _make_bundle(cfg)
    save_bundle(bundle, out)
    fp = fingerprint_hash(fingerprint(bundle))
    print(f"wrote bundle to {out} (fingerprint {fp})")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load(args)
    spec = cfg.protocol
    out = _out_dir(args, cfg, "pretrain")
    bundle = _make_bundle(cfg)
    for arch_name, enc_cfg in spec.archs:
        log.info("pretraining arch %s", arch_name)
        stages = _pretrained_encoders(cfg, arch_name, enc_cfg, bundle)
        history: dict = {}
        if "supervised" in stages:
            sup = stages["supervised"]
            save_encoder(out / f"{arch_name}-supervised.ckpt", sup.encoder)
            history["supervised"] = {
                "loss": sup.history, "val_accuracy": sup.val_accuracy,
            }
            print(f"{arch_name} supervised: val accuracy {sup.val_accuracy:.4f}")
        if "contrastive" in stages:
            con = stages["contrastive"]
            save_encoder(out / f"{arch_name}-contrastive.ckpt", con.encoder)
            history["contrastive"] = {
                "loss": con.history,
                "checkpoints": [(c.step, c.loss) for c in con.checkpoints],
                "selected_step": con.selected_step,
            }
            print(f"{arch_name} contrastive: selected checkpoint step {con.selected_step}")
        (out / f"{arch_name}-history.json").write_text(
            json.dumps(history, indent=2, sort_keys=True) + "\n"
        )
    print(f"wrote checkpoints to {out}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _load(args)
    spec = cfg.protocol
    strategy = args.strategy or spec.strategies[0]
    if strategy not in spec.strategies:
        raise ConfigError(f"--strategy {strategy!r} not in config strategies {spec.strategies}")
    out = _out_dir(args, cfg, "finetune")
    bundle = _make_bundle(cfg)
    arch_name, enc_cfg = spec.archs[0]
    stages = _pretrained_encoders(cfg, arch_name, enc_cfg, bundle)
    encoder = stages[strategy] if strategy == "random" else stages[
        "supervised" if strategy == "selftrain" else strategy
    ]
    if hasattr(encoder, "encoder"):
        encoder = encoder.encoder
    seed = derive_seed(spec.seed, strategy, arch_name, "cell")
    init = Model(
        encoder,
        init_classification_head(enc_cfg.embed_dim, spec.base_spec.n_classes, derive_rng(seed, "head")),
    )
    res = finetune(
        init, bundle.in_splits["train"], bundle.in_splits["val"],
        spec.finetune_cfg, spec.finetune_cfg.grid[0], seed, spec.metric,
    )
    save_model(out / f"{strategy}-{arch_name}.ckpt", res.model)
    (out / f"{strategy}-{arch_name}-history.json").write_text(
        json.dumps(
            {"history": res.history, "best_val_metric": res.best_val_metric,
             "best_step": res.best_step},
            indent=2, sort_keys=True,
        ) + "\n"
    )
    print(
        f"fine-tuned {strategy}/{arch_name}: best val {spec.metric} "
        f"{res.best_val_metric:.4f} at step {res.best_step}"
    )
    return 0


def _cmd_protocol(args) -> int:
    cfg = _load(args)
    spec = cfg.protocol
    if args.strategy:
        keep = tuple(s.strip() for s in args.strategy.split(",") if s.strip())
        bad = [s for s in keep if s not in spec.strategies]
        if bad:
            raise ConfigError(f"--strategy filter {bad} not in config strategies {spec.strategies}")
        spec = dataclasses.replace(spec, strategies=keep)
    out = _out_dir(args, cfg, "protocol")
    log.info("running protocol with %d workers", args.workers)
    result = run_protocol(spec, workers=args.workers)
    save_protocol(result, out)
    print(f"wrote {len(result.rows)} metric rows to {out}")
    return 0


def _cmd_report(args) -> int:
    level, curve_strategy, cost_specs = 0.95, None, []
    if args.config:
        cfg = load_config(args.config)
        level = cfg.report_level
        curve_strategy = cfg.report_curve_strategy
        cost_specs = cfg.cost_specs
    res = generate_report(
        args.results_dir, out_dir=args.out, level=level,
        curve_strategy=curve_strategy, cost_specs=cost_specs,
    )
    for name in res.files:
        print(f"wrote {res.out_dir / name}")
    for (a, b), m in sorted(res.matching.items()):
        if m["mean"] is not None:
            print(f"[{a}] matches {b} full-label mean at {100 * m['mean']:.1f}% of labels")
        else:
            print(f"[{a}] never matches {b} full-label mean on this grid")
    if res.incomplete:
        print(f"INCOMPLETE: {len(res.missing)} cell(s) missing; see report.md", file=sys.stderr)
        return 1
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shiftlab", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(fn=fn)
        return sp

    for name, fn, help_text in (
        ("gen-data", _cmd_gen_data, "write the synthetic task bundle + fingerprint"),
        ("pretrain", _cmd_pretrain, "run pretraining stages; write checkpoints"),
        ("finetune", _cmd_finetune, "run a single fine-tune cell (grid debugging)"),
        ("protocol", _cmd_protocol, "run the full evaluation protocol"),
    ):
        sp = add(name, fn, help_text)
        sp.add_argument("--config", required=True, help="YAML run config")
        sp.add_argument("--out", default=None, help="output directory")
        if name == "protocol":
            sp.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                            help="worker processes (default: all cores)")
            sp.add_argument("--seed", type=int, default=None, help="override config seed")
            sp.add_argument("--strategy", default=None,
                            help="comma-separated strategy filter")
        if name == "finetune":
            sp.add_argument("--strategy", default=None, help="strategy to fine-tune from")

    sp = add("report", _cmd_report, "aggregate metric rows into tables and figures")
    sp.add_argument("results_dir", help="directory holding metrics.csv + manifest.json")
    sp.add_argument("--out", default=None, help="report output directory")
    sp.add_argument("--config", default=None, help="config supplying cost specs / report options")
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ReportError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (PipelineError, NumericError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

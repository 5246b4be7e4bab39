"""YAML run-config schema: strict key checking, grid expansion, and the
mapping onto protocol dataclasses."""

from pathlib import Path

import pytest
import yaml

from shiftlab.augment import AugmentPolicy
from shiftlab.config import ConfigError, default_config_text, load_config, parse_config
from shiftlab.datasynth import UPSTREAM_PATTERNS
from shiftlab.stats import log_space

FIXTURES = Path(__file__).parent / "fixtures"


def minimal_doc(**overrides):
    doc = {"schema_version": 1, "seed": 7}
    doc.update(overrides)
    return doc


class TestTopLevel:
    def test_default_text_parses(self):
        cfg = parse_config(yaml.safe_load(default_config_text()))
        assert cfg.protocol.seed == 0
        assert cfg.protocol.strategies == ("supervised", "contrastive")
        assert cfg.output_dir == "runs/demo"
        assert cfg.cost_specs[0].resolved_cost_per_image() == pytest.approx(2.86)

    def test_minimal_doc_fills_defaults(self):
        cfg = parse_config(minimal_doc())
        p = cfg.protocol
        assert p.seed == 7
        assert p.repeats == 10
        assert p.fractions == (0.0, 0.1, 0.2, 0.5, 1.0)
        assert p.ood_finetune_cfg is None
        assert p.ood_scenario == "finetuned+keep-head"
        assert cfg.report_level == 0.95
        assert cfg.report_curve_strategy is None

    def test_non_mapping_rejected(self):
        with pytest.raises(ConfigError, match="mapping"):
            parse_config(["a", "b"])

    def test_schema_version_required_and_checked(self):
        with pytest.raises(ConfigError, match="schema_version"):
            parse_config({"seed": 1})
        with pytest.raises(ConfigError, match="schema_version"):
            parse_config({"schema_version": 2, "seed": 1})

    def test_seed_must_be_integer(self):
        for bad in ({}, {"seed": "42"}, {"seed": 1.5}, {"seed": None}):
            with pytest.raises(ConfigError, match="seed"):
                parse_config({"schema_version": 1, **bad})

    def test_unknown_keys_are_named(self):
        with pytest.raises(ConfigError, match="pretraining"):
            parse_config(minimal_doc(pretraining={}))
        with pytest.raises(ConfigError, match=r"data\.base"):
            parse_config(minimal_doc(data={"base": {"classes": 4}}))
        with pytest.raises(ConfigError, match=r"finetune\.grid"):
            parse_config(minimal_doc(finetune={"grid": {"learning_rates": [0.1]}}))
        with pytest.raises(ConfigError, match=r"data\.upstream"):
            parse_config(minimal_doc(data={"upstream": {"count": 10}}))

    def test_protocol_violations_become_config_errors(self):
        with pytest.raises(ConfigError):
            parse_config(minimal_doc(repeats=1))
        with pytest.raises(ConfigError):
            parse_config(minimal_doc(fractions=[0.5, 1.0]))
        with pytest.raises(ConfigError):
            parse_config(minimal_doc(strategies=["imagenet"]))
        with pytest.raises(ConfigError):
            parse_config(minimal_doc(ood_scenario="zero-shot"))

    def test_unknown_arch_preset(self):
        with pytest.raises(ConfigError, match="huge"):
            parse_config(minimal_doc(archs=["huge"]))

    def test_emit_subgroups_flag(self):
        assert parse_config(minimal_doc(emit_subgroups=False)).protocol.emit_subgroups is False
        assert parse_config(minimal_doc()).protocol.emit_subgroups is True


class TestGrid:
    def grid_of(self, grid_doc):
        cfg = parse_config(minimal_doc(finetune={"grid": grid_doc}))
        return cfg.protocol.finetune_cfg.grid

    def test_lrs_and_lr_range_are_exclusive(self):
        with pytest.raises(ConfigError, match="pick one"):
            self.grid_of({"lrs": [0.1], "lr_range": {"lo": 0.01, "hi": 0.1, "count": 3}})

    def test_lr_range_expands_geometrically(self):
        grid = self.grid_of({"lr_range": {"lo": 1e-4, "hi": 1e-2, "count": 3}})
        assert [gp.lr for gp in grid] == log_space(1e-4, 1e-2, 3)

    def test_cartesian_order_is_lr_major(self):
        grid = self.grid_of({"lrs": [0.001, 0.01], "weight_decays": [0.0, 0.1]})
        assert [(gp.lr, gp.weight_decay) for gp in grid] == [
            (0.001, 0.0), (0.001, 0.1), (0.01, 0.0), (0.01, 0.1),
        ]

    def test_grid_point_settings_propagate(self):
        grid = self.grid_of({"optimizer": "sgd", "schedule": "exponential",
                             "lrs": [0.05], "decay_factor": 0.5, "decay_step": 10})
        gp = grid[0]
        assert (gp.optimizer, gp.schedule, gp.decay_factor, gp.decay_step) == ("sgd", "exponential", 0.5, 10)

    def test_empty_lists_rejected(self):
        with pytest.raises(ConfigError, match="at least one"):
            self.grid_of({"lrs": []})


class TestAugmentNames:
    def test_named_policies_resolve(self):
        cfg = parse_config(minimal_doc(finetune={"augment": "identity"}))
        assert isinstance(cfg.protocol.finetune_cfg.augment, AugmentPolicy)

    def test_unknown_policy_name(self):
        with pytest.raises(ConfigError, match="grayscale_strong"):
            parse_config(minimal_doc(finetune={"augment": "heavy"}))

    def test_supervised_augment_may_be_null(self):
        doc = minimal_doc(pretrain={"supervised": {"augment": None}})
        assert parse_config(doc).protocol.supervised_cfg.augment is None

    def test_contrastive_augment_cannot_be_null(self):
        doc = minimal_doc(pretrain={"contrastive": {"augment": None}})
        with pytest.raises(ConfigError, match="cannot be null"):
            parse_config(doc)


class TestUpstream:
    def test_defaults_inherit_task_geometry(self):
        doc = minimal_doc(data={"base": {"image_size": 16, "nuisance": 0.7}})
        up = parse_config(doc).protocol.upstream_spec
        assert up.image_size == 16
        assert up.nuisance == 0.7
        assert up.patterns == UPSTREAM_PATTERNS
        assert up.n_classes == min(5, len(UPSTREAM_PATTERNS))

    def test_explicit_upstream_base(self):
        doc = minimal_doc(data={"upstream": {"base": {"n_classes": 3, "patterns": ["rings", "stripes", "checker"]}, "train": 50, "val": 10}})
        p = parse_config(doc).protocol
        assert p.upstream_spec.n_classes == 3
        assert p.upstream_train == 50
        assert p.upstream_val == 10


class TestReportSection:
    def test_level_bounds(self):
        for bad in (0.0, 1.0, -0.5, 2.0):
            with pytest.raises(ConfigError, match="report.level"):
                parse_config(minimal_doc(report={"level": bad}))

    def test_curve_strategy_must_be_run(self):
        doc = minimal_doc(strategies=["supervised"], report={"curve_strategy": "contrastive"})
        with pytest.raises(ConfigError, match="curve_strategy"):
            parse_config(doc)
        doc = minimal_doc(report={"curve_strategy": "contrastive"})
        assert parse_config(doc).report_curve_strategy == "contrastive"


class TestCostSpecs:
    def test_parsed_into_dataclasses(self):
        doc = minimal_doc(cost_specs=[
            {"name": "a", "image_count": 100, "seconds_per_image": 60, "hourly_wage": 36.0},
        ])
        specs = parse_config(doc).cost_specs
        assert specs[0].resolved_cost_per_image() == pytest.approx(0.6)

    def test_bad_entry_is_located(self):
        doc = minimal_doc(cost_specs=[
            {"name": "a", "image_count": 10, "seconds_per_image": 60, "hourly_wage": 36.0},
            {"name": "b", "image_count": -5, "seconds_per_image": 60, "hourly_wage": 36.0},
        ])
        with pytest.raises(ConfigError, match=r"cost_specs\[1\]"):
            parse_config(doc)


class TestLoadConfig:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.yaml")

    def test_invalid_yaml(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("seed: [unclosed\n")
        with pytest.raises(ConfigError, match="invalid YAML"):
            load_config(p)

    def test_round_trips_default_text(self, tmp_path):
        p = tmp_path / "run.yaml"
        p.write_text(default_config_text())
        assert load_config(p).protocol.seed == 0


class TestAcceptanceFixture:
    """The committed protocol fixture must stay loadable and keep the
    settings its recorded statistics depend on."""

    def test_loads_and_spot_checks(self):
        cfg = load_config(FIXTURES / "acceptance.yaml")
        p = cfg.protocol
        assert p.seed == 42
        assert p.sizes.out_train == 48
        assert p.fractions == (0.0, 0.1, 0.2, 0.5, 1.0)
        assert p.repeats == 10
        assert p.strategies == ("supervised", "contrastive")
        assert p.ood_finetune_cfg is not None and p.ood_finetune_cfg.steps == 15
        assert p.finetune_cfg.steps == 60
        assert p.ood_scenario == "finetuned+keep-head"
        assert cfg.cost_specs[0].name == "screening-reads"
        assert cfg.report_curve_strategy == "contrastive"

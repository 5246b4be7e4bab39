"""Training pipeline: seed derivation, checkpoint selection, pretrain and
fine-tune stages, and the full evaluation protocol on a miniature task."""

import json
import math

import numpy as np
import pytest

from shiftlab.datasynth import (
    BaseSpec,
    BundleSizes,
    ShiftSpec,
    UPSTREAM_PATTERNS,
    generate_labeled_set,
    generate_task,
)
from shiftlab.models import (
    EncoderConfig,
    Model,
    clone_params,
    content_hash,
    init_classification_head,
    init_encoder,
)
from shiftlab.pipeline import (
    SCENARIOS,
    CheckpointRecord,
    ContrastivePretrainConfig,
    FinetuneConfig,
    GridPoint,
    MetricRow,
    PipelineError,
    PretrainConfig,
    ProtocolSpec,
    contrastive_pretrain,
    derive_rng,
    derive_seed,
    evaluate_model,
    finetune,
    grid_search,
    make_finetune_init,
    predict_proba,
    rows_to_csv,
    rows_to_jsonl,
    run_protocol,
    save_protocol,
    select_checkpoint,
    self_train,
    supervised_pretrain,
    _CSV_COLUMNS,
    _spec_hash,
    _subgroup_rows,
)

ENC_CFG = EncoderConfig(image_size=16, stage_channels=(8, 8), groups=4, embed_dim=16)
BASE = BaseSpec(image_size=16, n_classes=3)
SIZES = BundleSizes(unlabeled=8, in_train=12, in_val=6, in_test=8, out_train=10, out_val=6, out_test=8)


@pytest.fixture(scope="module")
def bundle():
    return generate_task(5, base_spec=BASE, shift_spec=ShiftSpec(intensity_delta=0.15), sizes=SIZES)


@pytest.fixture(scope="module")
def upstream():
    return generate_labeled_set(6, BaseSpec(image_size=16, n_classes=5, patterns=UPSTREAM_PATTERNS), 16, 8)


@pytest.fixture(scope="module")
def sup_encoder(upstream):
    enc = init_encoder(ENC_CFG, np.random.default_rng(0))
    cfg = PretrainConfig(steps=3, batch_size=8, lr=0.05)
    return supervised_pretrain(enc, upstream["train"], upstream["val"], cfg, seed=1).encoder


def fresh_model(n_classes=3, seed=0):
    enc = init_encoder(ENC_CFG, np.random.default_rng(seed))
    head = init_classification_head(16, n_classes, np.random.default_rng(seed + 1))
    return Model(enc, head)


class TestDeriveSeed:
    def test_deterministic_and_in_31_bit_range(self):
        for tags in ((), ("a",), ("a", 3), (1.0, "x", 2)):
            s1 = derive_seed(42, *tags)
            s2 = derive_seed(42, *tags)
            assert s1 == s2
            assert 0 <= s1 < 2**31

    def test_distinct_across_tags_and_order(self):
        seeds = {
            derive_seed(42),
            derive_seed(42, "a"),
            derive_seed(42, "b"),
            derive_seed(42, "a", "b"),
            derive_seed(42, "b", "a"),
            derive_seed(43, "a"),
        }
        assert len(seeds) == 6

    def test_type_sensitive_tags(self):
        assert derive_seed(1, "2") != derive_seed(1, 2)

    def test_rng_stream_matches_seed(self):
        a = derive_rng(7, "x").uniform(size=3)
        b = derive_rng(7, "x").uniform(size=3)
        np.testing.assert_array_equal(a, b)


class TestSelectCheckpoint:
    def ckpt(self, step, loss):
        return CheckpointRecord(step=step, loss=loss)

    def test_picks_lowest_loss_in_final_window(self):
        cks = [self.ckpt(0, 0.1), self.ckpt(500, 0.05), self.ckpt(999, 0.4), self.ckpt(1000, 0.3)]
        assert select_checkpoint(cks, 1000).step == 1000

    def test_tie_breaks_to_earliest_step(self):
        cks = [self.ckpt(999, 0.25), self.ckpt(1000, 0.25)]
        assert select_checkpoint(cks, 1000).step == 999

    def test_window_lower_edge_is_ceiling(self):
        # ceil(0.999 * 500) = 500, so only the final step qualifies
        cks = [self.ckpt(499, 0.0), self.ckpt(500, 1.0)]
        assert select_checkpoint(cks, 500).step == 500

    def test_empty_window_is_a_config_error(self):
        with pytest.raises(PipelineError, match="checkpoint more densely"):
            select_checkpoint([self.ckpt(0, 0.1), self.ckpt(900, 0.1)], 1000)


class TestSupervisedPretrain:
    def test_advances_provenance_and_keeps_input_frozen(self, upstream):
        enc = init_encoder(ENC_CFG, np.random.default_rng(2))
        before = content_hash(enc.params)
        cfg = PretrainConfig(steps=2, batch_size=8)
        res = supervised_pretrain(enc, upstream["train"], upstream["val"], cfg, seed=3)
        assert res.encoder.provenance == "supervised-pretrained"
        assert res.encoder.history == ("random", "supervised-pretrained")
        assert content_hash(enc.params) == before
        assert content_hash(res.encoder.params) != before
        assert len(res.history) == 2
        assert 0.0 <= res.val_accuracy <= 1.0

    def test_requires_random_provenance(self, sup_encoder, upstream):
        cfg = PretrainConfig(steps=1)
        with pytest.raises(PipelineError):
            supervised_pretrain(sup_encoder, upstream["train"], upstream["val"], cfg, seed=0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PretrainConfig(steps=0)


class TestContrastivePretrain:
    def test_descends_from_supervised_weights(self, sup_encoder, bundle):
        cfg = ContrastivePretrainConfig(steps=2, checkpoint_every=1, batch_pairs=4, projection_dim=8)
        res = contrastive_pretrain(sup_encoder, bundle.unlabeled, cfg, seed=4)
        assert res.encoder.provenance == "contrastive-pretrained"
        assert res.encoder.parent_hash == content_hash(sup_encoder.params)
        assert [c.step for c in res.checkpoints] == [0, 1, 2]
        assert all(c.params is None for c in res.checkpoints)
        assert res.selected_step == 2  # window [ceil(0.999*2), 2] = {2}
        assert len(res.history) == 2

    def test_rejects_wrong_provenance(self, bundle):
        cfg = ContrastivePretrainConfig(steps=1, checkpoint_every=1, batch_pairs=2)
        with pytest.raises(PipelineError):
            contrastive_pretrain(init_encoder(ENC_CFG, np.random.default_rng(1)), bundle.unlabeled, cfg, 0)

    def test_needs_two_records(self, sup_encoder, bundle):
        cfg = ContrastivePretrainConfig(steps=1, checkpoint_every=1, batch_pairs=2)
        with pytest.raises(PipelineError):
            contrastive_pretrain(sup_encoder, bundle.unlabeled[:1], cfg, 0)

    def test_checkpoint_cadence_must_divide_budget(self):
        with pytest.raises(ValueError):
            ContrastivePretrainConfig(steps=601, checkpoint_every=100)


class TestFinetune:
    def test_best_weights_are_restored(self, bundle):
        cfg = FinetuneConfig(steps=4, batch_size=8, eval_every=1)
        res = finetune(fresh_model(), bundle.in_splits["train"], bundle.in_splits["val"], cfg, GridPoint(), seed=5)
        assert evaluate_model(res.model, bundle.in_splits["val"]) == res.best_val_metric
        assert res.model.encoder.provenance == "fine-tuned"

    def test_zero_budget_returns_initial_weights(self, bundle):
        model = fresh_model(seed=6)
        expected = evaluate_model(
            Model(model.encoder, model.head), bundle.in_splits["val"]
        )
        cfg = FinetuneConfig(steps=0, batch_size=8, eval_every=1)
        res = finetune(model, bundle.in_splits["train"], bundle.in_splits["val"], cfg, GridPoint(), seed=7)
        assert res.best_step == 0
        assert res.best_val_metric == expected

    def test_empty_train_with_budget_rejected(self, bundle):
        cfg = FinetuneConfig(steps=2, batch_size=8, eval_every=1)
        with pytest.raises(PipelineError):
            finetune(fresh_model(), [], bundle.in_splits["val"], cfg, GridPoint(), seed=0)

    def test_labels_must_fit_head(self, bundle):
        cfg = FinetuneConfig(steps=1, batch_size=8, eval_every=1)
        with pytest.raises(PipelineError):
            finetune(fresh_model(n_classes=2), bundle.in_splits["train"], bundle.in_splits["val"], cfg, GridPoint(), 0)

    def test_grid_must_be_non_empty(self):
        with pytest.raises(ValueError):
            FinetuneConfig(grid=())

    def test_history_covers_eval_points(self, bundle):
        cfg = FinetuneConfig(steps=4, batch_size=8, eval_every=2)
        res = finetune(fresh_model(seed=8), bundle.in_splits["train"], bundle.in_splits["val"], cfg, GridPoint(), 9)
        assert [h[0] for h in res.history] == [0, 2, 4]


class TestFinetuneInit:
    def id_model(self, bundle):
        cfg = FinetuneConfig(steps=1, batch_size=8, eval_every=1)
        return finetune(
            fresh_model(seed=10), bundle.in_splits["train"], bundle.in_splits["val"], cfg, GridPoint(), 11
        ).model

    def test_keep_head_copies_values_not_objects(self, bundle, sup_encoder):
        idm = self.id_model(bundle)
        init = make_finetune_init("finetuned+keep-head", sup_encoder, idm, 3, np.random.default_rng(0))
        assert content_hash(init.encoder.params) == content_hash(idm.encoder.params)
        assert content_hash(init.head.params) == content_hash(idm.head.params)
        assert init.head.params["w"] is not idm.head.params["w"]

    def test_random_head_resets_only_the_head(self, bundle, sup_encoder):
        idm = self.id_model(bundle)
        init = make_finetune_init("finetuned+random-head", sup_encoder, idm, 3, np.random.default_rng(1))
        assert content_hash(init.encoder.params) == content_hash(idm.encoder.params)
        assert content_hash(init.head.params) != content_hash(idm.head.params)

    def test_pretrained_scenario_ignores_id_model(self, sup_encoder):
        init = make_finetune_init("pretrained+random-head", sup_encoder, None, 3, np.random.default_rng(2))
        assert content_hash(init.encoder.params) == content_hash(sup_encoder.params)
        assert init.encoder.provenance == sup_encoder.provenance

    def test_finetuned_scenarios_need_the_id_model(self, sup_encoder):
        with pytest.raises(PipelineError):
            make_finetune_init("finetuned+keep-head", sup_encoder, None, 3, np.random.default_rng(3))

    def test_unknown_scenario(self, sup_encoder):
        with pytest.raises(PipelineError):
            make_finetune_init("linear-probe", sup_encoder, None, 3, np.random.default_rng(4))


class TestGridSearch:
    def test_max_wins_and_ties_break_earliest(self):
        points = (GridPoint(lr=1e-3), GridPoint(lr=3e-3), GridPoint(lr=1e-2))
        best, lb = grid_search(points, lambda gp: {1e-3: 0.7, 3e-3: 0.9, 1e-2: 0.9}[gp.lr])
        assert best == 1
        assert [r["val_metric"] for r in lb] == [0.7, 0.9, 0.9]
        assert lb[2]["point"]["lr"] == 1e-2

    def test_single_point(self):
        best, lb = grid_search((GridPoint(),), lambda gp: 0.5)
        assert best == 0 and len(lb) == 1


class TestEvaluate:
    def test_empty_records_rejected(self):
        with pytest.raises(PipelineError):
            evaluate_model(fresh_model(), [])

    def test_auc_needs_binary_head(self, bundle):
        with pytest.raises(PipelineError):
            evaluate_model(fresh_model(n_classes=3), bundle.in_splits["val"], metric="auc")

    def test_unknown_metric(self, bundle):
        with pytest.raises(PipelineError):
            evaluate_model(fresh_model(), bundle.in_splits["val"], metric="f1")

    def test_predict_proba_batching_is_invisible(self, bundle):
        model = fresh_model(seed=12)
        recs = bundle.in_splits["train"]
        p_small = predict_proba(model, recs, batch_size=3)
        p_large = predict_proba(model, recs, batch_size=256)
        # BLAS blocking differs with batch size, so only ULP-level agreement
        np.testing.assert_allclose(p_small, p_large, atol=1e-12, rtol=0)
        np.testing.assert_allclose(p_small.sum(axis=1), 1.0, atol=1e-12)


class TestSelfTrain:
    def test_smoke(self, sup_encoder, bundle):
        cfg = FinetuneConfig(steps=2, batch_size=8, eval_every=1)
        res = self_train(
            sup_encoder, 3, bundle.in_splits["train"], bundle.in_splits["val"],
            bundle.unlabeled, cfg, cfg, GridPoint(), GridPoint(), seed=13,
        )
        assert math.isfinite(res.teacher_val_metric)
        assert math.isfinite(res.student_val_metric)
        assert 0.0 < res.pseudo_label_mean_confidence <= 1.0
        assert res.student.encoder.provenance == "fine-tuned"


class TestProtocolSpecValidation:
    def base_kwargs(self):
        return dict(
            base_spec=BASE,
            upstream_spec=BaseSpec(image_size=16, n_classes=5, patterns=UPSTREAM_PATTERNS),
            archs=(("tiny", ENC_CFG),),
        )

    def test_repeats_floor(self):
        with pytest.raises(ValueError):
            ProtocolSpec(repeats=1, **self.base_kwargs())

    def test_fraction_rules(self):
        for bad in ((0.0, 0.5), (0.5, 1.0), (0.0, 0.5, 0.5, 1.0), (1.0, 0.0)):
            with pytest.raises(ValueError):
                ProtocolSpec(fractions=bad, **self.base_kwargs())

    def test_strategy_names(self):
        with pytest.raises(ValueError):
            ProtocolSpec(strategies=("supervised", "imagenet"), **self.base_kwargs())
        with pytest.raises(ValueError):
            ProtocolSpec(strategies=(), **self.base_kwargs())

    def test_ood_scenario_names(self):
        with pytest.raises(ValueError):
            ProtocolSpec(ood_scenario="zero-shot", **self.base_kwargs())
        for name in SCENARIOS + ("auto",):
            ProtocolSpec(ood_scenario=name, **self.base_kwargs())

    def test_image_sizes_must_match(self):
        with pytest.raises(ValueError):
            ProtocolSpec(
                base_spec=BASE,
                upstream_spec=BaseSpec(image_size=32, n_classes=5, patterns=UPSTREAM_PATTERNS),
                archs=(("tiny", ENC_CFG),),
            )

    def test_spec_hash_tracks_content(self):
        s1 = ProtocolSpec(seed=1, **self.base_kwargs())
        s2 = ProtocolSpec(seed=1, **self.base_kwargs())
        s3 = ProtocolSpec(seed=2, **self.base_kwargs())
        assert _spec_hash(s1) == _spec_hash(s2)
        assert _spec_hash(s1) != _spec_hash(s3)


def micro_spec(seed=3, **overrides):
    kw = dict(
        seed=seed,
        base_spec=BASE,
        shift_spec=ShiftSpec(intensity_delta=0.2, blur_sigma=0.8),
        sizes=SIZES,
        upstream_spec=BaseSpec(image_size=16, n_classes=5, patterns=UPSTREAM_PATTERNS),
        upstream_train=16,
        upstream_val=8,
        archs=(("tiny", ENC_CFG),),
        strategies=("supervised",),
        fractions=(0.0, 1.0),
        repeats=2,
        supervised_cfg=PretrainConfig(steps=4, batch_size=8, lr=0.05),
        contrastive_cfg=ContrastivePretrainConfig(steps=2, checkpoint_every=1, batch_pairs=4, projection_dim=8),
        finetune_cfg=FinetuneConfig(steps=2, batch_size=8, eval_every=1),
        emit_subgroups=False,
    )
    kw.update(overrides)
    return ProtocolSpec(**kw)


@pytest.fixture(scope="module")
def micro_result():
    return run_protocol(micro_spec(), workers=1)


class TestRunProtocol:
    def test_exact_row_accounting(self, micro_result):
        rows = micro_result.rows
        # phase A: 2 repeats x (in_dist + zero_shot); phase B: 1 nonzero
        # fraction x 2 repeats
        assert len(rows) == 6
        by_scenario = {}
        for r in rows:
            by_scenario.setdefault(r.scenario, []).append(r)
        assert len(by_scenario["in_dist"]) == 2
        assert len(by_scenario["zero_shot"]) == 2
        assert len(by_scenario["ood_finetune"]) == 2
        assert all(r.fraction == 1.0 for r in by_scenario["in_dist"])
        assert all(r.fraction == 0.0 for r in by_scenario["zero_shot"])
        assert all(0.0 <= r.value <= 1.0 for r in rows)

    def test_rows_sorted_canonically(self, micro_result):
        key = lambda r: (r.strategy, r.arch, r.scenario, r.fraction, r.repeat, r.metric_name)
        keys = [key(r) for r in micro_result.rows]
        assert keys == sorted(keys)

    def test_row_seeds_are_rederivable(self, micro_result):
        for r in micro_result.rows:
            if r.scenario == "ood_finetune":
                expected = derive_seed(3, r.strategy, r.arch, "ood", r.fraction, r.repeat)
            else:
                expected = derive_seed(3, r.strategy, r.arch, "id", r.repeat)
            assert r.seed == expected

    def test_manifest_structure(self, micro_result):
        m = micro_result.manifest
        assert m["format"] == "shiftlab-protocol-v1"
        assert m["strategies"] == ["supervised"]
        assert m["archs"] == ["tiny"]
        assert m["repeats"] == 2
        assert set(m["hyperparameters"]) == {"id", "ood", "ood_scenario"}
        assert m["hyperparameters"]["ood_scenario"]["supervised/tiny"] == "finetuned+keep-head"
        lin = m["lineage"]["supervised/tiny"]
        assert lin["provenance"] == "supervised-pretrained"
        assert lin["parent_hash"] is None
        assert micro_result.pretrain_logs["supervised"]["tiny"]["val_accuracy"] >= 0.0

    def test_save_protocol_layout(self, micro_result, tmp_path):
        save_protocol(micro_result, tmp_path)
        for name in ("metrics.csv", "metrics.jsonl", "manifest.json", "pretrain_logs.json"):
            assert (tmp_path / name).exists()
        csv_text = (tmp_path / "metrics.csv").read_text()
        assert csv_text == rows_to_csv(micro_result.rows)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest == micro_result.manifest


class TestSerialization:
    def rows(self):
        return [
            MetricRow("supervised", "small", "in_dist", 1.0, 0, "accuracy", 0.9125, 17, 2.34567),
            MetricRow("supervised", "small", "zero_shot", 0.0, 0, "accuracy", 1 / 3, 17, 0.5),
        ]

    def test_csv_header_and_float_round_trip(self):
        text = rows_to_csv(self.rows())
        lines = text.strip().split("\n")
        assert lines[0] == ",".join(_CSV_COLUMNS)
        cells = lines[2].split(",")
        assert cells[0] == "supervised"
        # repr round-trips the exact float64 value
        assert float(cells[6]) == 1 / 3
        assert "wall" not in text

    def test_jsonl_carries_rounded_wall_seconds(self):
        lines = rows_to_jsonl(self.rows()).strip().split("\n")
        first = json.loads(lines[0])
        assert first["wall_seconds"] == 2.3457
        assert first["value"] == 0.9125
        assert set(first) == set(_CSV_COLUMNS) | {"wall_seconds"}


class TestSubgroupRows:
    def test_row_naming_and_values(self, bundle):
        recs = bundle.out_splits["test"]
        preds = np.array([r.label for r in recs])  # perfect predictions
        rows = _subgroup_rows(preds, recs, "supervised", "tiny", repeat=1, seed=9)
        names = {r.metric_name for r in rows}
        assert names <= {"accuracy[texture=smooth]", "accuracy[texture=grainy]"}
        assert all(r.value == 1.0 for r in rows)
        assert all(r.scenario == "zero_shot" and r.fraction == 0.0 for r in rows)

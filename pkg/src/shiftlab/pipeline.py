"""Training pipeline: pretraining stages, fine-tuning, and the evaluation
protocol over a shifted task bundle.

Stages compose along a provenance chain the code enforces:

    random -> supervised-pretrained -> contrastive-pretrained -> fine-tuned

* :func:`supervised_pretrain` fits encoder + affine head on an upstream
  labeled proxy set with plain cross-entropy.
* :func:`contrastive_pretrain` adapts a supervised encoder to the unlabeled
  in-domain pool with the NT-Xent objective under LARS, snapshotting
  parameters on a fixed cadence; :func:`select_checkpoint` picks the lowest
  loss inside the final 0.1% window of the step budget (earliest step wins
  ties).
* :func:`finetune` trains encoder + classification head end to end with
  early stopping on a validation metric; the reported metric is the max over
  validation evaluations and the returned model reproduces it.
* :func:`run_protocol` sweeps strategies x architectures over in-distribution
  fine-tuning, zero-shot transfer to the shifted domain, and fine-tuning on
  nested label fractions of the shifted domain, with repeats, returning one
  metric row per cell.

Determinism: every work unit derives its own rng from the protocol seed and
the unit's identity, so results are identical no matter how many worker
processes execute the units.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import multiprocessing
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugmentPolicy, apply_policy, view_rng
from .contrastive import ContrastiveConfig, build_pair_batch, nt_xent_loss
from .datasynth import (
    BaseSpec,
    BundleSizes,
    Record,
    ShiftSpec,
    TaskBundle,
    UPSTREAM_PATTERNS,
    fingerprint,
    fingerprint_hash,
    generate_labeled_set,
    generate_task,
    subsample_fraction,
)
from .models import (
    ClassificationHead,
    EncoderConfig,
    EncoderState,
    Model,
    clone_params,
    content_hash,
    encode,
    forward_logits,
    init_classification_head,
    init_encoder,
    init_projection_head,
    project,
)
from .optim import OptimizerState, Schedule, apply_update, make_optimizer
from .stats import accuracy as _accuracy_metric
from .stats import auc as _auc_metric
from .stats import subgroup_metrics
from .tensor import GradTape, NumericError, Tensor

__all__ = [
    "PipelineError",
    "PretrainConfig",
    "ContrastivePretrainConfig",
    "GridPoint",
    "FinetuneConfig",
    "CheckpointRecord",
    "SupervisedResult",
    "ContrastiveResult",
    "FinetuneResult",
    "SelfTrainResult",
    "ProtocolSpec",
    "MetricRow",
    "ProtocolResult",
    "derive_rng",
    "derive_seed",
    "supervised_pretrain",
    "contrastive_pretrain",
    "select_checkpoint",
    "make_finetune_init",
    "finetune",
    "grid_search",
    "self_train",
    "evaluate_model",
    "predict_proba",
    "run_protocol",
    "rows_to_csv",
    "rows_to_jsonl",
    "save_protocol",
    "SCENARIOS",
]

SCENARIOS = ("pretrained+random-head", "finetuned+keep-head", "finetuned+random-head")


class PipelineError(Exception):
    """Training failed in a way worth reporting (divergence, bad config)."""


def derive_seed(seed: int, *tags) -> int:
    """Stable 32-bit seed from a master seed and string-able tags."""
    h = zlib.crc32(repr(int(seed)).encode())
    for t in tags:
        h = zlib.crc32(repr(t).encode(), h)
    return h & 0x7FFFFFFF


def derive_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(derive_seed(seed, *tags)))


def _clone_encoder(state: EncoderState) -> EncoderState:
    return EncoderState(
        config=state.config,
        params=clone_params(state.params),
        provenance=state.provenance,
        parent_hash=state.parent_hash,
        history=state.history,
    )


def _clone_head(head: ClassificationHead) -> ClassificationHead:
    return ClassificationHead(
        embed_dim=head.embed_dim,
        n_classes=head.n_classes,
        attention=head.attention,
        params=clone_params(head.params),
    )


# ---------------------------------------------------------------------------
# batching helpers


def _record_images(records: list[Record], multi_view: bool) -> np.ndarray:
    if multi_view:
        return np.stack([np.stack(r.images, axis=0) for r in records], axis=0)
    return np.stack([r.images[0] for r in records], axis=0)


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def predict_proba(model: Model, records: list[Record], batch_size: int = 256) -> np.ndarray:
    """Softmax probabilities, evaluated without recording gradients."""
    multi_view = model.head.attention and len(records[0].images) > 1
    probs = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        logits = forward_logits(model, _record_images(chunk, multi_view)).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(probs, axis=0)


def evaluate_model(model: Model, records: list[Record], metric: str = "accuracy") -> float:
    if not records:
        raise PipelineError("evaluate_model got an empty record list")
    probs = predict_proba(model, records)
    labels = np.array([r.label for r in records])
    if metric == "accuracy":
        return _accuracy_metric(probs.argmax(axis=1), labels)
    if metric == "auc":
        if probs.shape[1] != 2:
            raise PipelineError("auc metric needs a binary task")
        return _auc_metric(probs[:, 1], labels)
    raise PipelineError(f"unknown metric '{metric}'")


# ---------------------------------------------------------------------------
# supervised pretraining


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 400
    batch_size: int = 32
    optimizer: str = "sgd"
    lr: float = 0.05
    weight_decay: float = 1e-6
    momentum: float = 0.9
    schedule: str = "linear"
    augment: AugmentPolicy | None = None

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")


@dataclass
class SupervisedResult:
    encoder: EncoderState
    history: list[tuple[int, float]]
    val_accuracy: float


def _augmented_images(records, policy, seed, step) -> np.ndarray:
    imgs = [apply_policy(r.images[0], policy, view_rng(seed, r.id, epoch=step)) for r in records]
    return np.stack(imgs, axis=0)


def supervised_pretrain(
    encoder: EncoderState,
    train_records: list[Record],
    val_records: list[Record],
    cfg: PretrainConfig,
    seed: int,
) -> SupervisedResult:
    """Cross-entropy pretraining of a random encoder on a labeled proxy set."""
    if encoder.provenance != "random":
        raise PipelineError(
            f"supervised_pretrain starts from a random encoder, got '{encoder.provenance}'"
        )
    enc = _clone_encoder(encoder)
    n_classes = max(r.label for r in train_records) + 1
    head = init_classification_head(enc.config.embed_dim, n_classes, derive_rng(seed, "sup-head"))
    params = dict(enc.params)
    params.update({f"head.{k}": v for k, v in head.params.items()})
    opt = make_optimizer(cfg.optimizer, cfg.lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum)
    sched = Schedule(cfg.schedule, cfg.lr, cfg.steps)
    batch_rng = derive_rng(seed, "sup-batches")
    n = len(train_records)
    history: list[tuple[int, float]] = []
    for t in range(cfg.steps):
        idx = batch_rng.choice(n, size=min(cfg.batch_size, n), replace=n < cfg.batch_size)
        chunk = [train_records[i] for i in idx]
        if cfg.augment is not None:
            images = _augmented_images(chunk, cfg.augment, derive_seed(seed, "sup-aug"), t)
        else:
            images = _record_images(chunk, multi_view=False)
        targets = _one_hot(np.array([r.label for r in chunk]), n_classes)
        try:
            with GradTape() as tape:
                emb = encode(enc, images)
                logits = T.add(T.matmul(emb, head.params["w"]), head.params["b"])
                loss = T.softmax_cross_entropy(logits, targets)
            grads = tape.gradients(loss, params)
            apply_update(params, grads, opt, sched.value(t))
        except NumericError as e:
            raise PipelineError(f"supervised pretraining diverged at step {t}: {e}") from e
        history.append((t + 1, loss.item()))
    enc.advance("supervised-pretrained")
    val_acc = evaluate_model(Model(enc, head), val_records) if val_records else float("nan")
    return SupervisedResult(encoder=enc, history=history, val_accuracy=val_acc)


# ---------------------------------------------------------------------------
# contrastive pretraining


@dataclass(frozen=True)
class ContrastivePretrainConfig:
    steps: int = 600
    checkpoint_every: int = 100
    temperature: float = 0.1
    batch_pairs: int = 16
    projection_dim: int = 32
    lr: float = 0.3
    weight_decay: float = 1e-6
    momentum: float = 0.9
    eta: float = 0.001
    schedule: str = "constant"
    augment: AugmentPolicy = field(default_factory=AugmentPolicy.standard)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.checkpoint_every < 1 or self.steps % self.checkpoint_every != 0:
            raise ValueError(
                f"checkpoint_every ({self.checkpoint_every}) must divide steps ({self.steps}) "
                "so the final window always holds a snapshot"
            )


@dataclass
class CheckpointRecord:
    step: int
    loss: float
    params: dict[str, Tensor] | None = None  # parameter snapshot


@dataclass
class ContrastiveResult:
    encoder: EncoderState
    checkpoints: list[CheckpointRecord]
    selected_step: int
    history: list[tuple[int, float]]


def select_checkpoint(checkpoints: list[CheckpointRecord], total_steps: int) -> CheckpointRecord:
    """Lowest loss inside the final-window [ceil(0.999 * M), M]; earliest
    step breaks ties; an empty window is a config error."""
    lo = math.ceil(0.999 * total_steps)
    window = [c for c in checkpoints if lo <= c.step <= total_steps]
    if not window:
        raise PipelineError(
            f"no checkpoints inside the selection window [{lo}, {total_steps}]; "
            "checkpoint more densely (smaller checkpoint_every)"
        )
    return min(window, key=lambda c: (c.loss, c.step))


def contrastive_pretrain(
    encoder: EncoderState,
    unlabeled: list[Record],
    cfg: ContrastivePretrainConfig,
    seed: int,
) -> ContrastiveResult:
    """NT-Xent adaptation of a supervised encoder on the unlabeled pool.

    Runs the full step budget under LARS, snapshots at step 0, every
    ``checkpoint_every`` steps, and the final step, then rewinds to the
    checkpoint chosen by :func:`select_checkpoint`.
    """
    if encoder.provenance != "supervised-pretrained":
        raise PipelineError(
            "contrastive adaptation must start from a supervised-pretrained encoder, "
            f"got '{encoder.provenance}'"
        )
    if len(unlabeled) < 2:
        raise PipelineError("contrastive pretraining needs at least two records")
    parent = content_hash(encoder.params)
    enc = _clone_encoder(encoder)
    head = init_projection_head(enc.config.embed_dim, cfg.projection_dim, derive_rng(seed, "proj"))
    params = dict(enc.params)
    params.update({f"proj.{k}": v for k, v in head.params.items()})
    ccfg = ContrastiveConfig(cfg.temperature, cfg.batch_pairs, cfg.projection_dim)
    opt = make_optimizer(
        "lars", cfg.lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum, eta=cfg.eta
    )
    sched = Schedule(cfg.schedule, cfg.lr, cfg.steps)
    batch_rng = derive_rng(seed, "con-batches")
    n = len(unlabeled)

    def snapshot(step: int, loss: float) -> CheckpointRecord:
        return CheckpointRecord(step=step, loss=loss, params=clone_params(enc.params))

    history: list[tuple[int, float]] = []
    checkpoints: list[CheckpointRecord] = []
    loss_val = _probe_contrastive_loss(enc, head, unlabeled, ccfg, cfg.augment, seed)
    checkpoints.append(snapshot(0, loss_val))
    for t in range(cfg.steps):
        idx = batch_rng.choice(n, size=min(cfg.batch_pairs, n), replace=n < cfg.batch_pairs)
        batch, pairing = build_pair_batch(
            [unlabeled[i] for i in idx], cfg.augment, derive_seed(seed, "con-views"), epoch=t
        )
        try:
            with GradTape() as tape:
                z = project(head, encode(enc, batch))
                loss, _ = nt_xent_loss(z, pairing, cfg.temperature)
            grads = tape.gradients(loss, params)
            apply_update(params, grads, opt, sched.value(t))
        except NumericError as e:
            raise PipelineError(f"contrastive pretraining diverged at step {t}: {e}") from e
        loss_val = loss.item()
        history.append((t + 1, loss_val))
        if (t + 1) % cfg.checkpoint_every == 0:
            checkpoints.append(snapshot(t + 1, loss_val))
    chosen = select_checkpoint(checkpoints, cfg.steps)
    for k, v in chosen.params.items():
        enc.params[k].data = v.data.copy()
    enc.advance("contrastive-pretrained", parent_hash=parent)
    return ContrastiveResult(
        encoder=enc,
        checkpoints=[CheckpointRecord(c.step, c.loss) for c in checkpoints],
        selected_step=chosen.step,
        history=history,
    )


def _probe_contrastive_loss(enc, head, unlabeled, ccfg, policy, seed) -> float:
    """Loss of the initial weights on one deterministic probe batch."""
    rng = derive_rng(seed, "con-probe")
    idx = rng.choice(len(unlabeled), size=min(ccfg.batch_pairs, len(unlabeled)), replace=len(unlabeled) < ccfg.batch_pairs)
    batch, pairing = build_pair_batch(
        [unlabeled[i] for i in idx], policy, derive_seed(seed, "con-probe-views"), epoch=0
    )
    z = project(head, encode(enc, batch))
    loss, _ = nt_xent_loss(z, pairing, ccfg.temperature)
    return loss.item()


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass(frozen=True)
class GridPoint:
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    schedule: str = "constant"
    decay_factor: float = 0.1
    decay_step: int = 100


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 300
    batch_size: int = 32
    eval_every: int = 25
    patience: int | None = None  # evals without improvement; None runs the budget
    momentum: float = 0.9
    augment: AugmentPolicy | None = None
    grid: tuple[GridPoint, ...] = (GridPoint(),)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("bad finetune budget")
        if not self.grid:
            raise ValueError("finetune grid must hold at least one point")


@dataclass
class FinetuneResult:
    model: Model
    best_val_metric: float
    best_step: int
    history: list[tuple[int, float, float]]  # (step, train loss, val metric)


def make_finetune_init(
    scenario: str,
    pretrained_encoder: EncoderState,
    id_model: Model | None,
    n_classes: int,
    rng: np.random.Generator,
) -> Model:
    """Weights to start an out-of-distribution fine-tune from."""
    if scenario == "pretrained+random-head":
        enc = _clone_encoder(pretrained_encoder)
        head = init_classification_head(enc.config.embed_dim, n_classes, rng)
        return Model(enc, head)
    if id_model is None:
        raise PipelineError(f"scenario '{scenario}' needs the in-distribution fine-tuned model")
    if scenario == "finetuned+keep-head":
        return Model(_clone_encoder(id_model.encoder), _clone_head(id_model.head))
    if scenario == "finetuned+random-head":
        enc = _clone_encoder(id_model.encoder)
        head = init_classification_head(enc.config.embed_dim, n_classes, rng)
        return Model(enc, head)
    raise PipelineError(f"unknown fine-tune scenario '{scenario}' (choose from {SCENARIOS})")


def _soft_finetune(
    model: Model,
    train_records: list[Record],
    train_targets: np.ndarray,
    val_records: list[Record],
    cfg: FinetuneConfig,
    gp: GridPoint,
    seed: int,
    metric: str,
) -> FinetuneResult:
    """Shared trainer: records plus per-record target distributions."""
    if model.encoder.provenance != "fine-tuned":
        model.encoder.advance("fine-tuned", parent_hash=model.encoder.parent_hash)
    params = dict(model.encoder.params)
    params.update({f"head.{k}": v for k, v in model.head.params.items()})
    opt = make_optimizer(gp.optimizer, gp.lr, weight_decay=gp.weight_decay, momentum=cfg.momentum)
    sched = Schedule(gp.schedule, gp.lr, max(cfg.steps, 1), gp.decay_factor, gp.decay_step)
    multi_view = model.head.attention and train_records and len(train_records[0].images) > 1

    def val_metric() -> float:
        return evaluate_model(model, val_records, metric)

    best = val_metric()
    best_step = 0
    best_params = clone_params(params)
    history: list[tuple[int, float, float]] = [(0, float("nan"), best)]
    batch_rng = derive_rng(seed, "ft-batches")
    n = len(train_records)
    if n == 0 and cfg.steps > 0:
        raise PipelineError("finetune got an empty training split with a nonzero budget")
    stale = 0
    for t in range(cfg.steps):
        idx = batch_rng.choice(n, size=min(cfg.batch_size, n), replace=n < cfg.batch_size)
        chunk = [train_records[i] for i in idx]
        if cfg.augment is not None and not multi_view:
            images = _augmented_images(chunk, cfg.augment, derive_seed(seed, "ft-aug"), t)
        else:
            images = _record_images(chunk, multi_view)
        targets = train_targets[idx]
        try:
            with GradTape() as tape:
                logits = forward_logits(model, images)
                loss = T.softmax_cross_entropy(logits, targets)
            grads = tape.gradients(loss, params)
            apply_update(params, grads, opt, sched.value(t))
        except NumericError as e:
            raise PipelineError(f"fine-tuning diverged at step {t}: {e}") from e
        if (t + 1) % cfg.eval_every == 0 or t + 1 == cfg.steps:
            m = val_metric()
            history.append((t + 1, loss.item(), m))
            if m > best:
                best, best_step = m, t + 1
                best_params = clone_params(params)
                stale = 0
            else:
                stale += 1
                if cfg.patience is not None and stale >= cfg.patience:
                    break
    for k, v in best_params.items():
        params[k].data = v.data.copy()
    return FinetuneResult(model=model, best_val_metric=best, best_step=best_step, history=history)


def finetune(
    init: Model,
    train_records: list[Record],
    val_records: list[Record],
    cfg: FinetuneConfig,
    gp: GridPoint,
    seed: int,
    metric: str = "accuracy",
) -> FinetuneResult:
    """End-to-end fine-tune with early stopping; ``init`` is consumed
    (cloned by the caller when reuse matters)."""
    n_classes = init.head.n_classes
    labels = np.array([r.label for r in train_records], dtype=np.int64)
    if len(labels) and labels.max() >= n_classes:
        raise PipelineError("training labels exceed the head's class count")
    targets = _one_hot(labels, n_classes) if len(labels) else np.zeros((0, n_classes))
    return _soft_finetune(init, train_records, targets, val_records, cfg, gp, seed, metric)


def grid_search(
    points: tuple[GridPoint, ...],
    evaluate,
) -> tuple[int, list[dict]]:
    """Run ``evaluate(point) -> val metric`` for each point; best = max
    metric, ties broken by grid order.  Returns (best index, leaderboard)."""
    leaderboard = []
    best_idx = 0
    best_val = -math.inf
    for i, p in enumerate(points):
        val = evaluate(p)
        leaderboard.append({"grid_index": i, "point": dataclasses.asdict(p), "val_metric": val})
        if val > best_val:
            best_val, best_idx = val, i
    return best_idx, leaderboard


# ---------------------------------------------------------------------------
# self-training


@dataclass
class SelfTrainResult:
    student: Model
    teacher: Model
    teacher_val_metric: float
    student_val_metric: float
    pseudo_label_mean_confidence: float


def self_train(
    base_encoder: EncoderState,
    n_classes: int,
    in_train: list[Record],
    in_val: list[Record],
    unlabeled: list[Record],
    teacher_cfg: FinetuneConfig,
    student_cfg: FinetuneConfig,
    teacher_gp: GridPoint,
    student_gp: GridPoint,
    seed: int,
    metric: str = "accuracy",
) -> SelfTrainResult:
    """Teacher on the labeled split, soft labels on the unlabeled pool, then
    a student on the union (hard targets for labeled, teacher probabilities
    for unlabeled)."""
    rng_t = derive_rng(seed, "st-teacher-head")
    teacher_init = Model(
        _clone_encoder(base_encoder),
        init_classification_head(base_encoder.config.embed_dim, n_classes, rng_t),
    )
    t_res = finetune(teacher_init, in_train, in_val, teacher_cfg, teacher_gp, derive_seed(seed, "st-teacher"), metric)
    if unlabeled:
        soft = predict_proba(t_res.model, unlabeled)
    else:
        soft = np.zeros((0, n_classes))
    union = list(in_train) + list(unlabeled)
    hard = _one_hot(np.array([r.label for r in in_train], dtype=np.int64), n_classes)
    targets = np.concatenate([hard, soft], axis=0) if len(union) else hard
    rng_s = derive_rng(seed, "st-student-head")
    student_init = Model(
        _clone_encoder(base_encoder),
        init_classification_head(base_encoder.config.embed_dim, n_classes, rng_s),
    )
    s_res = _soft_finetune(
        student_init, union, targets, in_val, student_cfg, student_gp,
        derive_seed(seed, "st-student"), metric,
    )
    return SelfTrainResult(
        student=s_res.model,
        teacher=t_res.model,
        teacher_val_metric=t_res.best_val_metric,
        student_val_metric=s_res.best_val_metric,
        pseudo_label_mean_confidence=float(soft.max(axis=1).mean()) if len(soft) else float("nan"),
    )


# ---------------------------------------------------------------------------
# protocol


@dataclass(frozen=True)
class ProtocolSpec:
    seed: int = 0
    base_spec: BaseSpec = field(default_factory=BaseSpec)
    shift_spec: ShiftSpec = field(default_factory=lambda: ShiftSpec(intensity_delta=0.18, contrast_factor=0.65, blur_sigma=0.9))
    sizes: BundleSizes = field(default_factory=BundleSizes)
    upstream_spec: BaseSpec = field(
        default_factory=lambda: BaseSpec(n_classes=5, patterns=UPSTREAM_PATTERNS)
    )
    upstream_train: int = 1200
    upstream_val: int = 200
    archs: tuple[tuple[str, EncoderConfig], ...] = (("small", EncoderConfig.preset("small")),)
    strategies: tuple[str, ...] = ("supervised", "contrastive")
    fractions: tuple[float, ...] = (0.0, 0.1, 0.2, 0.5, 1.0)
    repeats: int = 10
    metric: str = "accuracy"
    supervised_cfg: PretrainConfig = field(default_factory=PretrainConfig)
    contrastive_cfg: ContrastivePretrainConfig = field(default_factory=ContrastivePretrainConfig)
    finetune_cfg: FinetuneConfig = field(default_factory=FinetuneConfig)
    # budget for shifted-domain adaptation; None reuses finetune_cfg
    ood_finetune_cfg: FinetuneConfig | None = None
    ood_scenario: str = "finetuned+keep-head"  # one of SCENARIOS or "auto"
    emit_subgroups: bool = True

    def __post_init__(self):
        if self.repeats < 2:
            raise ValueError("repeats must be >= 2")
        fr = self.fractions
        if list(fr) != sorted(set(fr)) or 0.0 not in fr or 1.0 not in fr:
            raise ValueError("fractions must be strictly increasing and include 0 and 1")
        if any(f < 0 or f > 1 for f in fr):
            raise ValueError("fractions must lie in [0, 1]")
        known = {"random", "supervised", "contrastive", "selftrain"}
        if not self.strategies or any(s not in known for s in self.strategies):
            raise ValueError(f"strategies must be a non-empty subset of {sorted(known)}")
        if self.ood_scenario != "auto" and self.ood_scenario not in SCENARIOS:
            raise ValueError(f"ood_scenario must be 'auto' or one of {SCENARIOS}")
        if self.base_spec.image_size != self.upstream_spec.image_size:
            raise ValueError("upstream and task image sizes must match")


@dataclass(frozen=True)
class MetricRow:
    strategy: str
    arch: str
    scenario: str  # in_dist | zero_shot | ood_finetune
    fraction: float
    repeat: int
    metric_name: str
    value: float
    seed: int
    wall_seconds: float = 0.0


@dataclass
class ProtocolResult:
    rows: list[MetricRow]
    manifest: dict
    pretrain_logs: dict


def _spec_hash(spec: ProtocolSpec) -> str:
    def default(o):
        if dataclasses.is_dataclass(o) and not isinstance(o, type):
            return dataclasses.asdict(o)
        raise TypeError(str(type(o)))

    blob = json.dumps(dataclasses.asdict(spec), sort_keys=True, default=default)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# worker context shared with forked pool processes
_CTX: dict = {}


def _subgroup_rows(preds, records, strategy, arch, repeat, seed):
    labels = np.array([r.label for r in records])
    attrs = sorted({k for r in records for k in r.subgroup})
    rows = []
    for attr in attrs:
        groups = np.array([r.subgroup.get(attr, "?") for r in records])
        for level, res in subgroup_metrics(preds, labels, groups).items():
            rows.append(
                MetricRow(
                    strategy=strategy, arch=arch, scenario="zero_shot", fraction=0.0,
                    repeat=repeat, metric_name=f"accuracy[{attr}={level}]",
                    value=res.value, seed=seed,
                )
            )
    return rows


def _id_unit(args: tuple) -> dict:
    """Phase A: one in-distribution repeat (fine-tune, ID test, zero-shot)."""
    strategy, arch, repeat = args
    ctx = _CTX
    spec: ProtocolSpec = ctx["spec"]
    bundle: TaskBundle = ctx["bundle"]
    start = time.perf_counter()
    seed = derive_seed(spec.seed, strategy, arch, "id", repeat)
    base_enc: EncoderState = ctx["encoders"][(strategy, arch)]
    n_classes = spec.base_spec.n_classes
    cfg: FinetuneConfig = spec.finetune_cfg
    gp: GridPoint = ctx["gp_id"][(strategy, arch)]
    if strategy == "selftrain":
        st = self_train(
            base_enc, n_classes, bundle.in_splits["train"], bundle.in_splits["val"],
            bundle.unlabeled, cfg, cfg, gp, ctx["gp_student"][(strategy, arch)],
            seed, spec.metric,
        )
        model = st.student
    else:
        init = Model(
            _clone_encoder(base_enc),
            init_classification_head(base_enc.config.embed_dim, n_classes, derive_rng(seed, "head")),
        )
        model = finetune(
            init, bundle.in_splits["train"], bundle.in_splits["val"], cfg, gp, seed, spec.metric
        ).model
    id_metric = evaluate_model(model, bundle.in_splits["test"], spec.metric)
    out_test = bundle.out_splits["test"]
    out_probs = predict_proba(model, out_test)
    out_labels = np.array([r.label for r in out_test])
    if spec.metric == "accuracy":
        zs_metric = _accuracy_metric(out_probs.argmax(axis=1), out_labels)
    else:
        zs_metric = evaluate_model(model, out_test, spec.metric)
    wall = time.perf_counter() - start
    rows = [
        MetricRow(strategy, arch, "in_dist", 1.0, repeat, spec.metric, id_metric, seed, wall),
        MetricRow(strategy, arch, "zero_shot", 0.0, repeat, spec.metric, zs_metric, seed, wall),
    ]
    if spec.emit_subgroups:
        rows.extend(
            _subgroup_rows(out_probs.argmax(axis=1), out_test, strategy, arch, repeat, seed)
        )
    return {
        "rows": rows,
        "model": {
            "encoder": {k: v.data for k, v in model.encoder.params.items()},
            "head": {k: v.data for k, v in model.head.params.items()},
        },
        "key": (strategy, arch, repeat),
    }


def _rebuild_model(ctx, strategy, arch, blob, n_classes) -> Model:
    base: EncoderState = ctx["encoders"][(strategy, arch)]
    enc = EncoderState(
        config=base.config,
        params={k: Tensor(v.copy(), requires_grad=True) for k, v in blob["encoder"].items()},
        provenance="fine-tuned",
        parent_hash=None,
        history=base.history + ("fine-tuned",),
    )
    head = ClassificationHead(
        embed_dim=base.config.embed_dim,
        n_classes=n_classes,
        attention=False,
        params={k: Tensor(v.copy(), requires_grad=True) for k, v in blob["head"].items()},
    )
    return Model(enc, head)


def _ood_unit(args: tuple) -> dict:
    """Phase B: one (fraction, repeat) fine-tune on the shifted domain."""
    strategy, arch, scenario, fraction, repeat = args
    ctx = _CTX
    spec: ProtocolSpec = ctx["spec"]
    bundle: TaskBundle = ctx["bundle"]
    start = time.perf_counter()
    seed = derive_seed(spec.seed, strategy, arch, "ood", fraction, repeat)
    n_classes = spec.base_spec.n_classes
    id_model = _rebuild_model(ctx, strategy, arch, ctx["id_models"][(strategy, arch, repeat)], n_classes)
    init = make_finetune_init(
        scenario, ctx["encoders"][(strategy, arch)], id_model, n_classes, derive_rng(seed, "head")
    )
    train = ctx["ood_train"][fraction]
    res = finetune(
        init, train, bundle.out_splits["val"], spec.ood_finetune_cfg or spec.finetune_cfg,
        ctx["gp_ood"][(strategy, arch)], seed, spec.metric,
    )
    value = evaluate_model(res.model, bundle.out_splits["test"], spec.metric)
    wall = time.perf_counter() - start
    return {
        "rows": [
            MetricRow(strategy, arch, "ood_finetune", fraction, repeat, spec.metric, value, seed, wall)
        ]
    }


def _map_units(fn, units, workers: int):
    if workers <= 1 or len(units) <= 1:
        return [fn(u) for u in units]
    ctxmp = multiprocessing.get_context("fork")
    with ctxmp.Pool(processes=min(workers, len(units))) as pool:
        return pool.map(fn, units)


def run_protocol(spec: ProtocolSpec, workers: int = 1) -> ProtocolResult:
    """Execute the full strategy x architecture evaluation grid."""
    bundle = generate_task(
        derive_seed(spec.seed, "bundle"), spec.base_spec, spec.shift_spec, spec.sizes
    )
    upstream = generate_labeled_set(
        derive_seed(spec.seed, "upstream"), spec.upstream_spec, spec.upstream_train, spec.upstream_val
    )
    needs_supervised = any(s in ("supervised", "contrastive", "selftrain") for s in spec.strategies)
    encoders: dict[tuple[str, str], EncoderState] = {}
    pretrain_logs: dict = {"supervised": {}, "contrastive": {}}
    lineage: dict = {}
    for arch_name, enc_cfg in spec.archs:
        rand = init_encoder(enc_cfg, derive_rng(spec.seed, arch_name, "init"))
        sup = None
        if needs_supervised:
            sup_res = supervised_pretrain(
                rand, upstream["train"], upstream["val"], spec.supervised_cfg,
                derive_seed(spec.seed, arch_name, "sup"),
            )
            sup = sup_res.encoder
            pretrain_logs["supervised"][arch_name] = {
                "val_accuracy": sup_res.val_accuracy,
                "final_loss": sup_res.history[-1][1] if sup_res.history else None,
            }
        for strategy in spec.strategies:
            if strategy == "random":
                encoders[(strategy, arch_name)] = rand
            elif strategy in ("supervised", "selftrain"):
                encoders[(strategy, arch_name)] = sup
            elif strategy == "contrastive":
                con_res = contrastive_pretrain(
                    sup, bundle.unlabeled, spec.contrastive_cfg,
                    derive_seed(spec.seed, arch_name, "con"),
                )
                # lineage check: the adapted encoder must descend from the
                # supervised weights we just produced
                if con_res.encoder.parent_hash != content_hash(sup.params):
                    raise PipelineError("contrastive encoder does not descend from the supervised init")
                encoders[(strategy, arch_name)] = con_res.encoder
                pretrain_logs["contrastive"][arch_name] = {
                    "selected_step": con_res.selected_step,
                    "checkpoints": [(c.step, c.loss) for c in con_res.checkpoints],
                    "final_loss": con_res.history[-1][1] if con_res.history else None,
                }
        for strategy in spec.strategies:
            enc = encoders[(strategy, arch_name)]
            lineage[f"{strategy}/{arch_name}"] = {
                "provenance": enc.provenance,
                "history": list(enc.history),
                "content_hash": content_hash(enc.params),
                "parent_hash": enc.parent_hash,
            }

    # nested shifted-domain subsets, fixed across repeats
    sub_seed = derive_seed(spec.seed, "ood-subsample")
    ood_train = {
        f: subsample_fraction(bundle.out_splits["train"], f, sub_seed)
        for f in spec.fractions
        if f > 0.0
    }

    # hyper-parameter selection (one deterministic pass per cell group)
    gp_id: dict = {}
    gp_student: dict = {}
    gp_ood: dict = {}
    ood_scenario: dict = {}
    hp_models: dict = {}
    leaderboards: dict = {}
    n_classes = spec.base_spec.n_classes
    cfg = spec.finetune_cfg
    for arch_name, _ in spec.archs:
        for strategy in spec.strategies:
            base_enc = encoders[(strategy, arch_name)]
            hp_seed = derive_seed(spec.seed, strategy, arch_name, "hp-id")
            results: dict[int, FinetuneResult] = {}

            def eval_id(gp: GridPoint, _s=strategy, _a=arch_name, _seed=hp_seed, _res=results) -> float:
                init = Model(
                    _clone_encoder(encoders[(_s, _a)]),
                    init_classification_head(
                        encoders[(_s, _a)].config.embed_dim, n_classes, derive_rng(_seed, "head")
                    ),
                )
                r = finetune(
                    init, bundle.in_splits["train"], bundle.in_splits["val"], cfg, gp, _seed, spec.metric
                )
                _res[len(_res)] = r
                return r.best_val_metric

            best_idx, lb = grid_search(cfg.grid, eval_id)
            gp_id[(strategy, arch_name)] = cfg.grid[best_idx]
            leaderboards[f"{strategy}/{arch_name}/in_dist"] = lb
            hp_models[(strategy, arch_name)] = results[best_idx].model

            if strategy == "selftrain":
                def eval_student(gp: GridPoint, _s=strategy, _a=arch_name) -> float:
                    seed_st = derive_seed(spec.seed, _s, _a, "hp-student")
                    st = self_train(
                        encoders[(_s, _a)], n_classes, bundle.in_splits["train"],
                        bundle.in_splits["val"], bundle.unlabeled, cfg, cfg,
                        gp_id[(_s, _a)], gp, seed_st, spec.metric,
                    )
                    return st.student_val_metric

                sbest, slb = grid_search(cfg.grid, eval_student)
                gp_student[(strategy, arch_name)] = cfg.grid[sbest]
                leaderboards[f"{strategy}/{arch_name}/student"] = slb

            # shifted-domain selection at fraction 1.0, reused for smaller ones
            ocfg = spec.ood_finetune_cfg or spec.finetune_cfg
            hp_ood_seed = derive_seed(spec.seed, strategy, arch_name, "hp-ood")
            scenarios = SCENARIOS if spec.ood_scenario == "auto" else (spec.ood_scenario,)
            best_combo = None
            ood_lb = []
            for scen in scenarios:
                def eval_ood(gp: GridPoint, _s=strategy, _a=arch_name, _scen=scen) -> float:
                    init = make_finetune_init(
                        _scen, encoders[(_s, _a)], hp_models[(_s, _a)], n_classes,
                        derive_rng(hp_ood_seed, "head", _scen),
                    )
                    r = finetune(
                        init, ood_train[1.0], bundle.out_splits["val"], ocfg, gp, hp_ood_seed, spec.metric
                    )
                    return r.best_val_metric

                idx, lb2 = grid_search(ocfg.grid, eval_ood)
                for row in lb2:
                    row["scenario"] = scen
                ood_lb.extend(lb2)
                cand = (lb2[idx]["val_metric"], scen, ocfg.grid[idx])
                if best_combo is None or cand[0] > best_combo[0]:
                    best_combo = cand
            gp_ood[(strategy, arch_name)] = best_combo[2]
            ood_scenario[(strategy, arch_name)] = best_combo[1]
            leaderboards[f"{strategy}/{arch_name}/ood"] = ood_lb

    # phase A: in-distribution repeats (parallel units)
    global _CTX
    _CTX = {
        "spec": spec,
        "bundle": bundle,
        "encoders": encoders,
        "gp_id": gp_id,
        "gp_student": gp_student,
        "ood_train": ood_train,
    }
    id_units = [
        (strategy, arch_name, r)
        for arch_name, _ in spec.archs
        for strategy in spec.strategies
        for r in range(spec.repeats)
    ]
    id_results = _map_units(_id_unit, id_units, workers)
    rows: list[MetricRow] = []
    id_models: dict = {}
    for res in id_results:
        rows.extend(res["rows"])
        id_models[res["key"]] = res["model"]

    # phase B: shifted-domain fine-tunes at each nonzero fraction
    _CTX["id_models"] = id_models
    _CTX["gp_ood"] = gp_ood
    ood_units = [
        (strategy, arch_name, ood_scenario[(strategy, arch_name)], f, r)
        for arch_name, _ in spec.archs
        for strategy in spec.strategies
        for f in spec.fractions
        if f > 0.0
        for r in range(spec.repeats)
    ]
    ood_results = _map_units(_ood_unit, ood_units, workers)
    for res in ood_results:
        rows.extend(res["rows"])
    _CTX = {}

    rows.sort(key=lambda r: (r.strategy, r.arch, r.scenario, r.fraction, r.repeat, r.metric_name))
    fp = fingerprint(bundle)
    manifest = {
        "format": "shiftlab-protocol-v1",
        "spec_hash": _spec_hash(spec),
        "seed": spec.seed,
        "metric": spec.metric,
        "strategies": list(spec.strategies),
        "archs": [a for a, _ in spec.archs],
        "fractions": list(spec.fractions),
        "repeats": spec.repeats,
        "bundle_fingerprint_hash": fingerprint_hash(fp),
        "lineage": lineage,
        "hyperparameters": {
            "id": {f"{s}/{a}": dataclasses.asdict(gp_id[(s, a)]) for a, _ in spec.archs for s in spec.strategies},
            "ood": {f"{s}/{a}": dataclasses.asdict(gp_ood[(s, a)]) for a, _ in spec.archs for s in spec.strategies},
            "ood_scenario": {f"{s}/{a}": ood_scenario[(s, a)] for a, _ in spec.archs for s in spec.strategies},
        },
        "leaderboards": leaderboards,
    }
    return ProtocolResult(rows=rows, manifest=manifest, pretrain_logs=pretrain_logs)


# ---------------------------------------------------------------------------
# persistence


_CSV_COLUMNS = ("strategy", "arch", "scenario", "fraction", "repeat", "metric_name", "value", "seed")


def rows_to_csv(rows: list[MetricRow]) -> str:
    """Deterministic CSV of the metric rows (no wall-clock column: byte-equal
    output for identical runs; timings live in the JSONL)."""
    lines = [",".join(_CSV_COLUMNS)]
    for r in rows:
        lines.append(
            f"{r.strategy},{r.arch},{r.scenario},{r.fraction!r},{r.repeat},{r.metric_name},{r.value!r},{r.seed}"
        )
    return "\n".join(lines) + "\n"


def rows_to_jsonl(rows: list[MetricRow]) -> str:
    out = []
    for r in rows:
        d = dataclasses.asdict(r)
        d["wall_seconds"] = round(d["wall_seconds"], 4)
        out.append(json.dumps(d, sort_keys=True))
    return "\n".join(out) + "\n"


def save_protocol(result: ProtocolResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(rows_to_csv(result.rows))
    (out / "metrics.jsonl").write_text(rows_to_jsonl(result.rows))
    (out / "manifest.json").write_text(json.dumps(result.manifest, indent=2, sort_keys=True) + "\n")
    (out / "pretrain_logs.json").write_text(json.dumps(result.pretrain_logs, indent=2, sort_keys=True) + "\n")

"""Contrastive objective and pretraining step.

The loss is the normalized temperature-scaled cross entropy over a batch of
2N projected views: for anchor i with partner j,

    loss_i = -log( exp(cos(z_i, z_j) / tau) / sum_{k != i} exp(cos(z_i, z_k) / tau) )

where the denominator runs over all other 2N - 1 embeddings in the batch
(in-batch negatives only) and the reported loss is the mean over all 2N
anchors.  Views are interleaved: rows 2k and 2k+1 are the two views of
record k, so the pairing is the involution swapping each even row with the
next odd one.

The whole computation is built from the autodiff primitives, so gradients
flow to the encoder and projection head through the similarity matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .augment import AugmentPolicy, make_view_pair, view_rng
from .models import EncoderState, ProjectionHead, encode, project
from .optim import OptimizerState, apply_update
from .tensor import GradTape, NumericError, Tensor, backward

__all__ = [
    "ContrastiveConfig",
    "interleaved_pairing",
    "nt_xent_loss",
    "build_pair_batch",
    "pretrain_step",
]


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    batch_pairs: int = 16  # N records -> 2N views per step
    projection_dim: int = 32

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.batch_pairs < 1:
            raise ValueError("batch_pairs must be >= 1")


def interleaved_pairing(n_pairs: int) -> np.ndarray:
    """pairing[2k] = 2k+1 and pairing[2k+1] = 2k: a fixed-point-free
    involution over the 2N rows."""
    p = np.empty(2 * n_pairs, dtype=np.int64)
    p[0::2] = np.arange(n_pairs) * 2 + 1
    p[1::2] = np.arange(n_pairs) * 2
    return p


def nt_xent_loss(z: Tensor, pairing: np.ndarray, temperature: float) -> tuple[Tensor, np.ndarray]:
    """Tensorized NT-Xent over (2N, P) embeddings.

    Returns the scalar mean loss (differentiable) and the detached per-anchor
    loss vector.  Zero-norm rows and non-positive temperatures are errors.
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    if z.ndim != 2 or z.shape[0] % 2 != 0 or z.shape[0] < 2:
        raise ValueError(f"nt_xent_loss expects (2N, P) embeddings, got {z.shape}")
    m = z.shape[0]
    pairing = np.asarray(pairing, dtype=np.int64)
    if pairing.shape != (m,) or np.any(pairing[pairing] != np.arange(m)) or np.any(pairing == np.arange(m)):
        raise ValueError("pairing must be a fixed-point-free involution over the batch")
    if np.any(np.linalg.norm(z.data, axis=1) == 0.0):
        raise NumericError("nt_xent_loss got a zero-norm embedding row")

    norms = T.l2_norm(z, axis=1, keepdims=True)  # (2N, 1)
    z_hat = T.div(z, norms)
    sims = T.matmul(z_hat, T.transpose(z_hat))  # cosine similarities
    logits = T.div(sims, Tensor(temperature))
    e = T.exp(logits)
    not_self = 1.0 - np.eye(m)
    pair_mask = np.zeros((m, m))
    pair_mask[np.arange(m), pairing] = 1.0
    denom = T.tsum(T.mul(e, Tensor(not_self)), axis=1)  # sum over k != i
    numer = T.tsum(T.mul(e, Tensor(pair_mask)), axis=1)  # exp(sim with partner)
    per_anchor = T.sub(T.log(denom), T.log(numer))
    loss = T.mean(per_anchor)
    return loss, per_anchor.data.copy()


def build_pair_batch(
    records,
    policy: AugmentPolicy,
    global_seed: int,
    epoch: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Two augmented views per record, interleaved into a (2N, H, W, C)
    array, plus the pairing.  Each record's augmentation stream is seeded
    from (global_seed, record id, epoch), so the batch content is independent
    of worker scheduling."""
    views = []
    for rec in records:
        rng = view_rng(global_seed, rec.id, epoch=epoch)
        a, b = make_view_pair(rec, policy, rng)
        views.append(a)
        views.append(b)
    batch = np.stack(views, axis=0)
    return batch, interleaved_pairing(len(records))


def pretrain_step(
    encoder: EncoderState,
    head: ProjectionHead,
    batch: np.ndarray,
    pairing: np.ndarray,
    cfg: ContrastiveConfig,
    opt: OptimizerState,
    lr_t: float | None = None,
) -> float:
    """One NT-Xent training step over an interleaved view batch; mutates the
    encoder/head parameters in place and returns the step loss."""
    params = dict(encoder.params)
    params.update({f"proj.{k}": v for k, v in head.params.items()})
    with GradTape() as tape:
        emb = encode(encoder, batch)
        z = project(head, emb)
        loss, _ = nt_xent_loss(z, pairing, cfg.temperature)
    grads = tape.gradients(loss, params)
    apply_update(params, grads, opt, lr_t)
    return loss.item()

"""Pretraining stages on a miniature setup.

Random encoder -> supervised pretraining on the upstream proxy ->
contrastive adaptation on the unlabeled shifted pool, with the loss
trajectory and checkpoint selection printed along the way.  Takes a few
seconds on a laptop core.
"""

import numpy as np

from shiftlab.datasynth import (
    BaseSpec, BundleSizes, ShiftSpec, UPSTREAM_PATTERNS,
    generate_labeled_set, generate_task,
)
from shiftlab.models import EncoderConfig, init_encoder
from shiftlab.pipeline import (
    ContrastivePretrainConfig, PretrainConfig,
    contrastive_pretrain, supervised_pretrain,
)

arch = EncoderConfig(image_size=16, stage_channels=(8, 8), groups=4, embed_dim=16)
task_base = BaseSpec(image_size=16, n_classes=3)

bundle = generate_task(1, task_base, ShiftSpec(intensity_delta=0.2, blur_sigma=1.0),
                       BundleSizes(unlabeled=48, in_train=32, in_val=16, in_test=16,
                                   out_train=16, out_val=16, out_test=32))
upstream = generate_labeled_set(2, BaseSpec(image_size=16, n_classes=5, patterns=UPSTREAM_PATTERNS), 96, 32)

encoder = init_encoder(arch, np.random.default_rng(0))
print("provenance:", encoder.provenance)

sup = supervised_pretrain(encoder, upstream["train"], upstream["val"],
                          PretrainConfig(steps=40, batch_size=16, lr=0.05), seed=3)
print(f"supervised: val accuracy {sup.val_accuracy:.3f}, "
      f"loss {sup.history[0][1]:.3f} -> {sup.history[-1][1]:.3f}")
print("provenance:", sup.encoder.provenance)

con = contrastive_pretrain(
    sup.encoder, bundle.unlabeled,
    ContrastivePretrainConfig(steps=30, checkpoint_every=5, batch_pairs=8,
                              projection_dim=8, lr=0.25),
    seed=4,
)
print("contrastive checkpoints (step, loss):")
for c in con.checkpoints:
    mark = "  <- selected" if c.step == con.selected_step else ""
    print(f"  {c.step:4d}  {c.loss:.4f}{mark}")
print("provenance:", con.encoder.provenance, "| lineage:", " -> ".join(con.encoder.history))

"""Augmentation gallery.

Renders one synthetic grayscale image, applies each transform, and writes
the results as PGM files under runs/demo-augment/ so they can be eyeballed
with any image viewer.
"""

from pathlib import Path

import numpy as np

from shiftlab.augment import (
    AugmentPolicy,
    adjust_brightness,
    adjust_contrast,
    apply_policy,
    elastic_deform,
    gaussian_blur_fixed,
    histogram_equalize,
    horizontal_flip,
    random_crop_resize,
    rotate,
    view_rng,
    write_pgm,
)
from shiftlab.datasynth import BaseSpec, BundleSizes, ShiftSpec, generate_task

out = Path("runs/demo-augment")
out.mkdir(parents=True, exist_ok=True)

bundle = generate_task(
    7, BaseSpec(n_classes=4), ShiftSpec(),
    BundleSizes(unlabeled=4, in_train=4, in_val=2, in_test=2, out_train=2, out_val=2, out_test=2),
)
img = bundle.unlabeled[0].images[0]

gallery = {
    "original": img,
    "flip": horizontal_flip(img),
    "rotate30": rotate(img, 30.0),
    "brightness": adjust_brightness(img, 0.25),
    "contrast": adjust_contrast(img, 1.8),
    "blur": gaussian_blur_fixed(img, sigma=1.5),
    "equalized": histogram_equalize(img),
    "elastic": elastic_deform(img, np.random.default_rng(3), alpha=4.0),
    "crop": random_crop_resize(img, np.random.default_rng(4), area_range=(0.4, 0.8)),
}

# two stochastic views of the same record, the contrastive way
policy = AugmentPolicy.standard()
rec = bundle.unlabeled[0]
gallery["view_a"] = apply_policy(img, policy, view_rng(11, rec.id, epoch=0, view_index=0))
gallery["view_b"] = apply_policy(img, policy, view_rng(11, rec.id, epoch=0, view_index=1))

for name, arr in gallery.items():
    write_pgm(out / f"{name}.pgm", arr)
    print(f"{name:11s} mean {arr.mean():.3f}  std {arr.std():.3f}  -> {out / (name + '.pgm')}")

print(f"\nwrote {len(gallery)} images; identical seeds reproduce identical views")

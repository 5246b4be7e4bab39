"""Procedural image tasks with controllable distribution shift.

A task bundle holds four dataset roles: an unlabeled in-domain pool for
contrastive adaptation, labeled in-distribution train/val/test splits, and
shifted out-of-distribution train/val/test splits (optionally a second shifted
domain).  Images are 32x32 by default: one of a small family of parametric
patterns (blob, ring, stripes, ...) whose identity is the class label, plus
per-record nuisances (jitter, rotation, phase, amplitude) and a subgroup-
dependent noise texture.

Shift axes (composable in one :class:`ShiftSpec`):

* technology: acquisition-style image transforms (blur, contrast about 0.5,
  additive intensity) applied to every shifted image,
* population: different class prevalence and subgroup mixture weights,
* behavior: label noise; exactly ``round(rate * n)`` records per split are
  flipped (the most ambiguous ones, ties by id) to the next class index, as a
  post-step over the clean records so the flips are diffable.

Determinism: every record's content is a pure function of (bundle seed,
record id), so regenerating a bundle reproduces it bit-for-bit and the
fingerprint is stable under record reordering.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import gaussian_blur_fixed

__all__ = [
    "BaseSpec",
    "ShiftSpec",
    "BundleSizes",
    "Record",
    "TaskBundle",
    "generate_task",
    "generate_labeled_set",
    "subsample_fraction",
    "fingerprint",
    "fingerprint_hash",
    "save_bundle",
    "load_bundle",
    "DOWNSTREAM_PATTERNS",
    "UPSTREAM_PATTERNS",
]

DOWNSTREAM_PATTERNS = ("blob", "ring", "stripes", "checker", "cross", "dots")
UPSTREAM_PATTERNS = ("double_blob", "stripes_steep", "arc", "corner_blob", "grid")


@dataclass(frozen=True)
class BaseSpec:
    """Shape of the clean (unshifted) data distribution."""

    image_size: int = 32
    channels: int = 1
    n_classes: int = 4
    views_per_record: int = 1
    patterns: tuple[str, ...] = DOWNSTREAM_PATTERNS
    class_prevalence: tuple[float, ...] | None = None  # None = uniform
    subgroup_attr: str = "texture"
    subgroup_levels: tuple[str, ...] = ("smooth", "grainy")
    subgroup_weights: tuple[float, ...] = (0.5, 0.5)
    subgroup_noise: tuple[float, ...] = (0.015, 0.08)
    nuisance: float = 1.0  # scales per-record jitter/rotation/scale variability

    def __post_init__(self):
        if self.n_classes < 2 or self.n_classes > len(self.patterns):
            raise ValueError(
                f"n_classes must be in [2, {len(self.patterns)}] for pattern set {self.patterns}"
            )
        if not 0.0 < self.nuisance <= 4.0:
            raise ValueError("nuisance must lie in (0, 4]")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.views_per_record < 1:
            raise ValueError("views_per_record must be >= 1")
        if self.class_prevalence is not None and len(self.class_prevalence) != self.n_classes:
            raise ValueError("class_prevalence length must equal n_classes")
        if not (len(self.subgroup_levels) == len(self.subgroup_weights) == len(self.subgroup_noise)):
            raise ValueError("subgroup levels/weights/noise lengths must match")

    def prevalence(self) -> np.ndarray:
        if self.class_prevalence is None:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        p = np.asarray(self.class_prevalence, dtype=np.float64)
        return p / p.sum()


@dataclass(frozen=True)
class ShiftSpec:
    """What changes in the shifted domain; identity() changes nothing."""

    # technology: image-level acquisition changes
    intensity_delta: float = 0.0
    contrast_factor: float = 1.0
    blur_sigma: float = 0.0
    # population: different mixtures
    class_prevalence: tuple[float, ...] | None = None
    subgroup_weights: tuple[float, ...] | None = None
    # behavior: labeling changes
    label_noise_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.label_noise_rate < 0.5:
            raise ValueError("label_noise_rate must be in [0, 0.5)")
        if self.contrast_factor <= 0.0:
            raise ValueError("contrast_factor must be positive")
        if self.blur_sigma < 0.0:
            raise ValueError("blur_sigma must be >= 0")

    @staticmethod
    def identity() -> "ShiftSpec":
        return ShiftSpec()

    def without_behavior(self) -> "ShiftSpec":
        return dataclasses.replace(self, label_noise_rate=0.0)


@dataclass(frozen=True)
class BundleSizes:
    unlabeled: int = 2000
    in_train: int = 1500
    in_val: int = 120
    in_test: int = 400
    out_train: int = 1700
    out_val: int = 430
    out_test: int = 660

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"size {f.name} must be >= 0")


@dataclass
class Record:
    """One example: 1..k views of the same underlying instance."""

    id: str
    label: int
    subgroup: dict[str, str]
    images: list[np.ndarray]
    ambiguity: float = 0.0


@dataclass
class TaskBundle:
    seed: int
    base_spec: BaseSpec
    shift_spec: ShiftSpec
    sizes: BundleSizes
    unlabeled: list[Record]
    in_splits: dict[str, list[Record]]
    out_splits: dict[str, list[Record]]
    secondary_shift: ShiftSpec | None = None
    secondary_splits: dict[str, list[Record]] | None = None

    def all_records(self):
        yield from self.unlabeled
        for split in ("train", "val", "test"):
            yield from self.in_splits[split]
            yield from self.out_splits[split]
        if self.secondary_splits is not None:
            for split in ("train", "val", "test"):
                yield from self.secondary_splits[split]


# ---------------------------------------------------------------------------
# pattern rendering


def _rotated(uu, vv, theta):
    c, s = math.cos(theta), math.sin(theta)
    return c * uu + s * vv, -s * uu + c * vv


def _pattern_field(name: str, uu: np.ndarray, vv: np.ndarray, phase: float) -> np.ndarray:
    r2 = uu * uu + vv * vv
    if name == "blob":
        return np.exp(-r2 / (2 * 0.45**2))
    if name == "ring":
        d = np.sqrt(r2)
        return np.exp(-((d - 0.55) ** 2) / (2 * 0.12**2))
    if name == "stripes":
        return 0.5 + 0.5 * np.sin(2 * math.pi * 1.25 * (uu + vv) + phase)
    if name == "checker":
        return 0.5 + 0.5 * np.sin(2 * math.pi * 0.9 * uu + phase) * np.sin(2 * math.pi * 0.9 * vv + phase)
    if name == "cross":
        return np.clip(np.exp(-(uu**2) / (2 * 0.18**2)) + np.exp(-(vv**2) / (2 * 0.18**2)), 0.0, 1.0)
    if name == "dots":
        return (0.5 + 0.5 * np.sin(2 * math.pi * 1.6 * uu + phase)) * (
            0.5 + 0.5 * np.sin(2 * math.pi * 1.6 * vv + phase)
        )
    if name == "double_blob":
        a = np.exp(-((uu - 0.4) ** 2 + vv**2) / (2 * 0.28**2))
        b = np.exp(-((uu + 0.4) ** 2 + vv**2) / (2 * 0.28**2))
        return np.clip(a + b, 0.0, 1.0)
    if name == "stripes_steep":
        return 0.5 + 0.5 * np.sin(2 * math.pi * 2.0 * uu + phase)
    if name == "arc":
        d = np.sqrt(r2)
        ang = np.arctan2(vv, uu)
        return np.exp(-((d - 0.55) ** 2) / (2 * 0.12**2)) * (0.5 + 0.5 * np.cos(ang + phase))
    if name == "corner_blob":
        return np.exp(-((uu - 0.45) ** 2 + (vv - 0.45) ** 2) / (2 * 0.35**2))
    if name == "grid":
        gu = 0.5 + 0.5 * np.sin(2 * math.pi * 2.4 * uu + phase)
        gv = 0.5 + 0.5 * np.sin(2 * math.pi * 2.4 * vv + phase)
        return np.maximum(gu, gv) ** 4
    raise ValueError(f"unknown pattern '{name}'")


def _record_rng(seed: int, record_id: str) -> np.random.Generator:
    rid = zlib.crc32(record_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, rid]))


def _render_record(
    spec: BaseSpec, seed: int, record_id: str, label: int, noise_level: float
) -> tuple[list[np.ndarray], float]:
    """All views for one record plus its ambiguity score."""
    rng = _record_rng(seed, record_id)
    size = spec.image_size
    grid = np.linspace(-1.0, 1.0, size)
    vv_base, uu_base = np.meshgrid(grid, grid, indexing="ij")

    nu = spec.nuisance
    cx, cy = rng.uniform(-0.15 * nu, 0.15 * nu, size=2)
    theta = rng.uniform(-0.35 * nu, 0.35 * nu)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    scale = rng.uniform(max(0.3, 1.0 - 0.15 * nu), 1.0 + 0.15 * nu)
    amplitude = rng.uniform(max(0.3, 0.65 - 0.1 * (nu - 1.0)), 0.95)

    pattern = spec.patterns[label]
    views = []
    for _ in range(spec.views_per_record):
        vcx = cx + rng.uniform(-0.04, 0.04)
        vcy = cy + rng.uniform(-0.04, 0.04)
        vtheta = theta + rng.uniform(-0.06, 0.06)
        uu, vv = _rotated((uu_base - vcx) / scale, (vv_base - vcy) / scale, vtheta)
        f = _pattern_field(pattern, uu, vv, phase)
        texture = rng.normal(0.0, 1.0, size=(size, size))
        texture = gaussian_blur_fixed(texture[..., None] * 0.5 + 0.5, sigma=1.5, kernel_frac=0.25)[..., 0]
        texture = (texture - texture.mean()) * 2.0  # roughly unit scale, zero mean
        pixel_noise = rng.normal(0.0, 0.01, size=(size, size))
        img = 0.08 + 0.58 * amplitude * f + noise_level * texture + pixel_noise
        img = np.clip(img, 0.0, 1.0)[..., None]
        if spec.channels == 3:
            tint = rng.uniform(0.9, 1.1, size=3)
            img = np.clip(img * tint.reshape(1, 1, 3), 0.0, 1.0)
        views.append(img)
    ambiguity = float(noise_level * 10.0 + math.hypot(cx, cy))
    return views, ambiguity


def _apply_technology(img: np.ndarray, shift: ShiftSpec) -> np.ndarray:
    out = img
    if shift.blur_sigma > 0.0:
        out = gaussian_blur_fixed(out, shift.blur_sigma, kernel_frac=0.15)
    if shift.contrast_factor != 1.0:
        out = np.clip((out - 0.5) * shift.contrast_factor + 0.5, 0.0, 1.0)
    if shift.intensity_delta != 0.0:
        out = np.clip(out + shift.intensity_delta, 0.0, 1.0)
    return out


def _sample_split(
    spec: BaseSpec,
    seed: int,
    domain: str,
    split: str,
    n: int,
    prevalence: np.ndarray,
    subgroup_weights: np.ndarray,
    noise_by_level: dict[str, float],
) -> list[Record]:
    assign_rng = np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(f"{domain}/{split}".encode())])
    )
    labels = assign_rng.choice(spec.n_classes, size=n, p=prevalence)
    level_idx = assign_rng.choice(len(spec.subgroup_levels), size=n, p=subgroup_weights)
    records = []
    for i in range(n):
        rid = f"{domain}-{split}-{i:05d}"
        level = spec.subgroup_levels[int(level_idx[i])]
        views, ambiguity = _render_record(spec, seed, rid, int(labels[i]), noise_by_level[level])
        records.append(
            Record(
                id=rid,
                label=int(labels[i]),
                subgroup={spec.subgroup_attr: level},
                images=views,
                ambiguity=ambiguity,
            )
        )
    return records


def _apply_behavior(records: list[Record], rate: float, n_classes: int) -> list[Record]:
    """Flip labels on exactly round(rate * n) records: the most ambiguous
    ones (ties by id), each to the next class index."""
    n_flips = int(math.floor(rate * len(records) + 0.5))
    if n_flips == 0:
        return records
    ranked = sorted(records, key=lambda r: (-r.ambiguity, r.id))
    to_flip = {r.id for r in ranked[:n_flips]}
    out = []
    for r in records:
        if r.id in to_flip:
            out.append(dataclasses.replace(r, label=(r.label + 1) % n_classes))
        else:
            out.append(r)
    return out


def _shifted_spec_views(spec: BaseSpec, shift: ShiftSpec) -> tuple[np.ndarray, np.ndarray]:
    prev = (
        np.asarray(shift.class_prevalence, dtype=np.float64)
        if shift.class_prevalence is not None
        else spec.prevalence()
    )
    prev = prev / prev.sum()
    if shift.class_prevalence is not None and len(prev) != spec.n_classes:
        raise ValueError("shift class_prevalence length must equal n_classes")
    weights = (
        np.asarray(shift.subgroup_weights, dtype=np.float64)
        if shift.subgroup_weights is not None
        else np.asarray(spec.subgroup_weights, dtype=np.float64)
    )
    if len(weights) != len(spec.subgroup_levels):
        raise ValueError("shift subgroup_weights length must match subgroup levels")
    weights = weights / weights.sum()
    return prev, weights


def _generate_domain(
    spec: BaseSpec,
    seed: int,
    domain: str,
    split_sizes: dict[str, int],
    shift: ShiftSpec,
) -> dict[str, list[Record]]:
    prev, weights = _shifted_spec_views(spec, shift)
    noise_by_level = dict(zip(spec.subgroup_levels, spec.subgroup_noise))
    out: dict[str, list[Record]] = {}
    for split, n in split_sizes.items():
        records = _sample_split(spec, seed, domain, split, n, prev, weights, noise_by_level)
        for r in records:
            r.images = [_apply_technology(img, shift) for img in r.images]
        out[split] = _apply_behavior(records, shift.label_noise_rate, spec.n_classes)
    return out


def generate_task(
    seed: int,
    base_spec: BaseSpec | None = None,
    shift_spec: ShiftSpec | None = None,
    sizes: BundleSizes | None = None,
    secondary_shift: ShiftSpec | None = None,
) -> TaskBundle:
    """Build a full task bundle: unlabeled pool, in-distribution splits, and
    shifted out-of-distribution splits (all deterministic in ``seed``)."""
    base_spec = base_spec or BaseSpec()
    shift_spec = shift_spec or ShiftSpec.identity()
    sizes = sizes or BundleSizes()
    identity = ShiftSpec.identity()
    unlabeled = _generate_domain(base_spec, seed, "u", {"pool": sizes.unlabeled}, identity)["pool"]
    in_splits = _generate_domain(
        base_spec,
        seed,
        "in",
        {"train": sizes.in_train, "val": sizes.in_val, "test": sizes.in_test},
        identity,
    )
    out_splits = _generate_domain(
        base_spec,
        seed,
        "out",
        {"train": sizes.out_train, "val": sizes.out_val, "test": sizes.out_test},
        shift_spec,
    )
    secondary_splits = None
    if secondary_shift is not None:
        secondary_splits = _generate_domain(
            base_spec,
            seed,
            "out2",
            {"train": sizes.out_train, "val": sizes.out_val, "test": sizes.out_test},
            secondary_shift,
        )
    return TaskBundle(
        seed=seed,
        base_spec=base_spec,
        shift_spec=shift_spec,
        sizes=sizes,
        unlabeled=unlabeled,
        in_splits=in_splits,
        out_splits=out_splits,
        secondary_shift=secondary_shift,
        secondary_splits=secondary_splits,
    )


def generate_labeled_set(
    seed: int,
    spec: BaseSpec,
    n_train: int,
    n_val: int,
    domain: str = "up",
) -> dict[str, list[Record]]:
    """A standalone labeled set (used as the upstream pretraining proxy)."""
    return _generate_domain(
        spec, seed, domain, {"train": n_train, "val": n_val}, ShiftSpec.identity()
    )


# ---------------------------------------------------------------------------
# subsampling


def subsample_fraction(records: list[Record], fraction: float, seed: int) -> list[Record]:
    """Stratified subsample: per class, round(fraction * count) half-up, at
    least one record per present class for fraction > 0.  For a fixed seed,
    subsets are nested across fractions (per-class shuffle prefixes)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    if fraction == 0.0:
        return []
    if fraction == 1.0:
        return list(records)
    by_class: dict[int, list[Record]] = {}
    for r in records:
        by_class.setdefault(r.label, []).append(r)
    chosen: list[Record] = []
    for label in sorted(by_class):
        group = sorted(by_class[label], key=lambda r: r.id)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, label]))
        order = rng.permutation(len(group))
        take = max(1, int(math.floor(fraction * len(group) + 0.5)))
        chosen.extend(group[i] for i in order[:take])
    chosen.sort(key=lambda r: r.id)
    return chosen


# ---------------------------------------------------------------------------
# fingerprints


def _spec_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def _split_stats(records: list[Record], n_classes: int) -> dict:
    hist = [0] * n_classes
    total = 0.0
    total_sq = 0.0
    count = 0
    for r in sorted(records, key=lambda r: r.id):
        hist[r.label] += 1
        for img in r.images:
            total += float(img.sum())
            total_sq += float((img * img).sum())
            count += img.size
    if count:
        mean = total / count
        var = max(total_sq / count - mean * mean, 0.0)
        moments = {"mean": round(mean, 10), "std": round(math.sqrt(var), 10)}
    else:
        moments = {"mean": 0.0, "std": 0.0}
    return {"count": len(records), "class_histogram": hist, "intensity": moments}


def fingerprint(bundle: TaskBundle) -> dict:
    """Structured summary of a bundle; invariant to record iteration order."""
    k = bundle.base_spec.n_classes
    spec_blob = json.dumps(
        {
            "seed": bundle.seed,
            "base": _spec_dict(bundle.base_spec),
            "shift": _spec_dict(bundle.shift_spec),
            "sizes": _spec_dict(bundle.sizes),
            "secondary": _spec_dict(bundle.secondary_shift) if bundle.secondary_shift else None,
        },
        sort_keys=True,
    )
    fp = {
        "spec_hash": hashlib.sha256(spec_blob.encode()).hexdigest()[:16],
        "unlabeled": _split_stats(bundle.unlabeled, k),
        "in": {s: _split_stats(rs, k) for s, rs in sorted(bundle.in_splits.items())},
        "out": {s: _split_stats(rs, k) for s, rs in sorted(bundle.out_splits.items())},
    }
    if bundle.secondary_splits is not None:
        fp["out2"] = {s: _split_stats(rs, k) for s, rs in sorted(bundle.secondary_splits.items())}
    return fp


def fingerprint_hash(fp: dict) -> str:
    return hashlib.sha256(json.dumps(fp, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# persistence: meta.json + index.jsonl + images.bin (raw float64 LE)


def save_bundle(bundle: TaskBundle, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups = [("u", "pool", bundle.unlabeled)]
    groups += [("in", s, bundle.in_splits[s]) for s in ("train", "val", "test")]
    groups += [("out", s, bundle.out_splits[s]) for s in ("train", "val", "test")]
    if bundle.secondary_splits is not None:
        groups += [("out2", s, bundle.secondary_splits[s]) for s in ("train", "val", "test")]
    offset = 0
    index_lines = []
    with open(out / "images.bin", "wb") as blob:
        for domain, split, records in groups:
            for r in records:
                views = []
                for img in r.images:
                    arr = np.ascontiguousarray(img, dtype="<f8")
                    blob.write(arr.tobytes())
                    views.append({"offset": offset, "shape": list(arr.shape)})
                    offset += arr.nbytes
                index_lines.append(
                    json.dumps(
                        {
                            "id": r.id,
                            "domain": domain,
                            "split": split,
                            "label": r.label,
                            "subgroup": r.subgroup,
                            "ambiguity": r.ambiguity,
                            "views": views,
                        },
                        sort_keys=True,
                    )
                )
    (out / "index.jsonl").write_text("\n".join(index_lines) + "\n")
    meta = {
        "format": "shiftlab-bundle-v1",
        "seed": bundle.seed,
        "base_spec": _spec_dict(bundle.base_spec),
        "shift_spec": _spec_dict(bundle.shift_spec),
        "sizes": _spec_dict(bundle.sizes),
        "secondary_shift": _spec_dict(bundle.secondary_shift) if bundle.secondary_shift else None,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    fp = fingerprint(bundle)
    fp["fingerprint_hash"] = fingerprint_hash(fp)
    (out / "fingerprint.json").write_text(json.dumps(fp, indent=2, sort_keys=True) + "\n")


def _spec_from(cls, d: dict | None):
    if d is None:
        return None
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in d:
            v = d[f.name]
            if isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
    return cls(**kwargs)


def load_bundle(in_dir) -> TaskBundle:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    if meta.get("format") != "shiftlab-bundle-v1":
        raise ValueError(f"unrecognized bundle format in {src}")
    blob = (src / "images.bin").read_bytes()
    base_spec = _spec_from(BaseSpec, meta["base_spec"])
    shift_spec = _spec_from(ShiftSpec, meta["shift_spec"])
    sizes = _spec_from(BundleSizes, meta["sizes"])
    secondary = _spec_from(ShiftSpec, meta.get("secondary_shift"))
    buckets: dict[tuple[str, str], list[Record]] = {}
    for line in (src / "index.jsonl").read_text().splitlines():
        row = json.loads(line)
        images = []
        for view in row["views"]:
            shape = tuple(view["shape"])
            n = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=view["offset"]).reshape(shape)
            images.append(arr.copy())
        rec = Record(
            id=row["id"],
            label=int(row["label"]),
            subgroup=dict(row["subgroup"]),
            images=images,
            ambiguity=float(row["ambiguity"]),
        )
        buckets.setdefault((row["domain"], row["split"]), []).append(rec)
    secondary_splits = None
    if any(d == "out2" for d, _ in buckets):
        secondary_splits = {s: buckets.get(("out2", s), []) for s in ("train", "val", "test")}
    return TaskBundle(
        seed=int(meta["seed"]),
        base_spec=base_spec,
        shift_spec=shift_spec,
        sizes=sizes,
        unlabeled=buckets.get(("u", "pool"), []),
        in_splits={s: buckets.get(("in", s), []) for s in ("train", "val", "test")},
        out_splits={s: buckets.get(("out", s), []) for s in ("train", "val", "test")},
        secondary_shift=secondary,
        secondary_splits=secondary_splits,
    )

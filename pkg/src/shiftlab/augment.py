"""Stochastic image augmentations for contrastive view generation.

Images are numpy arrays of shape (H, W, C), C in {1, 3}, float64 values in
[0, 1].  Every op clamps back into [0, 1] before returning and never mutates
its input.

Exactness guarantees (relied on by the identity test suite):

* bilinear sampling is computed as nested lerps, so constant images stay
  bit-identical and integer-coordinate sampling is an exact copy,
* blur is computed in offset space ``v + sum_k w_k * (v_k - v)`` with
  replicated edges, so constant images pass through bit-exactly,
* neutral parameters (strength 0, delta 0, factor 1, alpha 0, angle 0) return
  the input unchanged,
* axis-aligned rotations (multiples of 90 degrees) use exact trig values.

Randomness: ops take a ``numpy.random.Generator``.  Per-example streams come
from :func:`view_rng`, which derives a generator from (global seed, record id,
epoch, view index) so results do not depend on scheduling or thread count.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "AugmentPolicy",
    "view_rng",
    "random_crop_resize",
    "horizontal_flip",
    "resize_bilinear",
    "adjust_brightness",
    "adjust_contrast",
    "adjust_saturation",
    "adjust_hue",
    "color_distort",
    "gaussian_blur",
    "gaussian_blur_fixed",
    "rotate",
    "random_rotation",
    "histogram_equalize",
    "elastic_deform",
    "apply_policy",
    "make_view_pair",
    "read_pgm",
    "write_pgm",
]

_LUMA = np.array([0.299, 0.587, 0.114])


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"image must be (H, W, C) with C in {{1, 3}}, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def _clamp(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def view_rng(global_seed: int, record_id: str, epoch: int = 0, view_index: int = 0) -> np.random.Generator:
    """Deterministic per-(record, epoch, view) generator; crc32 keeps the
    record-id hash stable across platforms and processes."""
    rid = zlib.crc32(record_id.encode("utf-8"))
    return np.random.default_rng(
        np.random.SeedSequence([int(global_seed) & 0xFFFFFFFF, rid, int(epoch), int(view_index)])
    )


# ---------------------------------------------------------------------------
# sampling primitives


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) at float coords with clamp-to-edge; nested lerps."""
    h, w = img.shape[:2]
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    c00 = img[y0c, x0c]
    c01 = img[y0c, x1c]
    c10 = img[y1c, x0c]
    c11 = img[y1c, x1c]
    top = c00 + fx * (c01 - c00)
    bot = c10 + fx * (c11 - c10)
    return top + fy * (bot - top)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize; scale 1 is an exact copy."""
    img = _check_image(img)
    h, w = img.shape[:2]
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return _clamp(_bilinear(img, grid_y, grid_x))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


# ---------------------------------------------------------------------------
# geometric ops


def random_crop_resize(
    img: np.ndarray,
    rng: np.random.Generator,
    area_range: tuple[float, float] = (0.08, 1.0),
    aspect_range: tuple[float, float] | None = (3.0 / 4.0, 4.0 / 3.0),
    out_size: tuple[int, int] | None = None,
) -> np.ndarray:
    """Inception-style crop: sample an area fraction and aspect ratio, crop,
    then resize to ``out_size`` (default: source size).

    ``aspect_range=None`` keeps the source aspect ratio.  With area range
    (1, 1), source aspect, and source out_size the op is an exact identity.
    """
    img = _check_image(img)
    h, w = img.shape[:2]
    lo, hi = area_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"bad area_range {area_range}")
    frac = rng.uniform(lo, hi)
    if aspect_range is None:
        aspect = w / h
    else:
        aspect = rng.uniform(aspect_range[0], aspect_range[1])
    area = frac * h * w
    cw = min(max(_round_half_up(np.sqrt(area * aspect)), 1), w)
    ch = min(max(_round_half_up(np.sqrt(area / aspect)), 1), h)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = img[top : top + ch, left : left + cw]
    oh, ow = out_size if out_size is not None else (h, w)
    if (ch, cw) == (oh, ow):
        return crop.copy()
    return resize_bilinear(crop, oh, ow)


def horizontal_flip(img: np.ndarray) -> np.ndarray:
    img = _check_image(img)
    return img[:, ::-1].copy()


_EXACT_TRIG = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center (positive = counterclockwise), bilinear
    sampling, out-of-bounds filled with 0."""
    img = _check_image(img)
    h, w = img.shape[:2]
    key = degrees % 360.0
    if key in _EXACT_TRIG:
        cos_t, sin_t = _EXACT_TRIG[key]
    else:
        rad = np.deg2rad(degrees)
        cos_t, sin_t = np.cos(rad), np.sin(rad)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy = rr - cy
    dx = cc - cx
    sy = cy + cos_t * dy + sin_t * dx
    sx = cx - sin_t * dy + cos_t * dx
    inside = (sy >= 0.0) & (sy <= h - 1) & (sx >= 0.0) & (sx <= w - 1)
    out = _bilinear(img, sy, sx)
    out[~inside] = 0.0
    return _clamp(out)


def random_rotation(img: np.ndarray, rng: np.random.Generator, range_degrees: float = 45.0) -> np.ndarray:
    angle = rng.uniform(-range_degrees, range_degrees)
    if angle == 0.0:
        return _check_image(img).copy()
    return rotate(img, angle)


# ---------------------------------------------------------------------------
# photometric ops


def adjust_brightness(img: np.ndarray, delta: float) -> np.ndarray:
    """Additive brightness: v -> v + delta, clamped."""
    img = _check_image(img)
    if delta == 0.0:
        return img.copy()
    return _clamp(img + delta)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    """Contrast about the per-channel mean: v -> (v - mu) * factor + mu."""
    img = _check_image(img)
    if factor == 1.0:
        return img.copy()
    mu = img.mean(axis=(0, 1), keepdims=True)
    return _clamp((img - mu) * factor + mu)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    """Blend with the luminance image; factor 0 is grayscale, 1 is identity."""
    img = _check_image(img)
    if factor == 1.0 or img.shape[2] == 1:
        return img.copy()
    gray = (img @ _LUMA)[..., None]
    return _clamp(gray + factor * (img - gray))


def _rgb_to_hsv(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=2)
    minc = img.min(axis=2)
    v = maxc
    span = maxc - minc
    safe = np.where(span == 0.0, 1.0, span)
    s = np.where(maxc == 0.0, 0.0, span / np.where(maxc == 0.0, 1.0, maxc))
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span == 0.0, 0.0, (h / 6.0) % 1.0)
    return h, s, v


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=2)


def adjust_hue(img: np.ndarray, offset: float) -> np.ndarray:
    """Rotate hue by ``offset`` (fraction of the hue circle)."""
    img = _check_image(img)
    if offset == 0.0 or img.shape[2] == 1:
        return img.copy()
    h, s, v = _rgb_to_hsv(img)
    return _clamp(_hsv_to_rgb((h + offset) % 1.0, s, v))


def color_distort(img: np.ndarray, rng: np.random.Generator, strength: float = 1.0) -> np.ndarray:
    """Jitter brightness/contrast/saturation/hue with amplitudes proportional
    to ``strength``; grayscale images skip the saturation/hue draws."""
    img = _check_image(img)
    if strength < 0.0:
        raise ValueError("strength must be >= 0")
    out = adjust_brightness(img, rng.uniform(-0.4 * strength, 0.4 * strength))
    out = adjust_contrast(out, rng.uniform(1.0 - 0.4 * strength, 1.0 + 0.4 * strength))
    if img.shape[2] == 3:
        out = adjust_saturation(out, rng.uniform(1.0 - 0.4 * strength, 1.0 + 0.4 * strength))
        out = adjust_hue(out, rng.uniform(-0.1 * strength, 0.1 * strength))
    return out


# ---------------------------------------------------------------------------
# blur


def _gaussian_weights(sigma: float, side: int) -> np.ndarray:
    r = side // 2
    k = np.arange(-r, r + 1, dtype=np.float64)
    raw = np.exp(-0.5 * (k / sigma) ** 2)
    return raw / raw.sum()


def _shift_replicate(img: np.ndarray, off: int, axis: int) -> np.ndarray:
    n = img.shape[axis]
    idx = np.clip(np.arange(n) + off, 0, n - 1)
    return np.take(img, idx, axis=axis)


def _blur_axis(img: np.ndarray, weights: np.ndarray, axis: int) -> np.ndarray:
    # offset space keeps constants exact: sum of w_k * (v_k - v) is zero when
    # every neighbor equals the center
    r = len(weights) // 2
    acc = np.zeros_like(img)
    for off, wk in zip(range(-r, r + 1), weights):
        if off == 0:
            continue
        acc += wk * (_shift_replicate(img, off, axis) - img)
    return img + acc


def gaussian_blur_fixed(img: np.ndarray, sigma: float, kernel_frac: float = 0.1) -> np.ndarray:
    """Separable Gaussian blur with a fixed sigma.  Kernel side per axis is
    ``max(1, round(kernel_frac * dim))`` forced odd; edges replicate."""
    img = _check_image(img)
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    h, w = img.shape[:2]
    side_h = max(1, _round_half_up(kernel_frac * h)) | 1
    side_w = max(1, _round_half_up(kernel_frac * w)) | 1
    out = img
    if side_h > 1:
        out = _blur_axis(out, _gaussian_weights(sigma, side_h), axis=0)
    if side_w > 1:
        out = _blur_axis(out, _gaussian_weights(sigma, side_w), axis=1)
    return _clamp(out) if out is not img else img.copy()


def gaussian_blur(
    img: np.ndarray,
    rng: np.random.Generator,
    sigma_range: tuple[float, float] = (0.1, 2.0),
    kernel_frac: float = 0.1,
) -> np.ndarray:
    sigma = rng.uniform(sigma_range[0], sigma_range[1])
    return gaussian_blur_fixed(img, sigma, kernel_frac)


# ---------------------------------------------------------------------------
# histogram equalization


def _equalize_channel(ch: np.ndarray) -> np.ndarray:
    # quantize to 256 levels, then map through the normalized CDF:
    # v -> (cdf(v) - cdf_min) / (1 - cdf_min)
    levels = np.minimum((ch * 255.0 + 0.5).astype(np.int64), 255)
    hist = np.bincount(levels.reshape(-1), minlength=256)
    cdf = np.cumsum(hist) / levels.size
    nonzero = cdf[hist > 0]
    cdf_min = nonzero[0]
    if cdf_min >= 1.0:  # single-level image: equalization is the identity
        return ch.copy()
    return (cdf[levels] - cdf_min) / (1.0 - cdf_min)


def histogram_equalize(img: np.ndarray) -> np.ndarray:
    """Spread the intensity CDF to uniform.  A constant image is returned
    unchanged by convention.  3-channel images equalize luminance and rescale
    RGB by the luminance ratio."""
    img = _check_image(img)
    if np.all(img == img.reshape(-1)[0]):
        return img.copy()
    if img.shape[2] == 1:
        return _clamp(_equalize_channel(img[..., 0])[..., None])
    luma = img @ _LUMA
    eq = _equalize_channel(luma)
    ratio = np.where(luma == 0.0, 0.0, eq / np.where(luma == 0.0, 1.0, luma))
    return _clamp(img * ratio[..., None])


# ---------------------------------------------------------------------------
# elastic deformation


def elastic_deform(
    img: np.ndarray,
    rng: np.random.Generator,
    alpha: float = 1.0,
    sigma: float = 2.0,
) -> np.ndarray:
    """Random smooth warp: a U(-1, 1) displacement field per axis is
    Gaussian-smoothed with ``sigma``, scaled by ``alpha``, and applied with
    bilinear clamp-to-edge sampling.  alpha 0 is an exact identity."""
    img = _check_image(img)
    h, w = img.shape[:2]
    dy = rng.uniform(-1.0, 1.0, size=(h, w))
    dx = rng.uniform(-1.0, 1.0, size=(h, w))
    if alpha != 0.0:
        side = (2 * int(np.ceil(3.0 * sigma)) + 1) if sigma > 0 else 1
        if side > 1:
            weights = _gaussian_weights(sigma, side)
            dy = _blur_axis(_blur_axis(dy[..., None], weights, 0), weights, 1)[..., 0]
            dx = _blur_axis(_blur_axis(dx[..., None], weights, 0), weights, 1)[..., 0]
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return _clamp(_bilinear(img, rr + alpha * dy, cc + alpha * dx))


# ---------------------------------------------------------------------------
# policy


@dataclass(frozen=True)
class AugmentPolicy:
    """Which ops run and with what parameters, applied in a fixed order:
    crop+flip, equalize, color, rotation, blur, elastic."""

    out_size: tuple[int, int] | None = None
    crop: bool = True
    crop_area: tuple[float, float] = (0.4, 1.0)
    crop_aspect: tuple[float, float] | None = (3.0 / 4.0, 4.0 / 3.0)
    flip_prob: float = 0.5
    equalize: bool = False
    color: bool = True
    color_strength: float = 1.0
    rotation: bool = True
    rotation_degrees: float = 45.0
    blur: bool = True
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    blur_kernel_frac: float = 0.1
    blur_prob: float = 0.5
    elastic: bool = False
    elastic_alpha: float = 1.0
    elastic_sigma: float = 2.0

    @staticmethod
    def standard(**overrides) -> "AugmentPolicy":
        """Crop, color, rotation, blur: the default view policy."""
        return replace(AugmentPolicy(), **overrides)

    @staticmethod
    def grayscale_strong(**overrides) -> "AugmentPolicy":
        """Adds histogram equalization and elastic warps for grayscale work."""
        return replace(AugmentPolicy(equalize=True, elastic=True), **overrides)

    @staticmethod
    def identity(out_size: tuple[int, int] | None = None) -> "AugmentPolicy":
        """Neutral parameters everywhere: applying this policy is a bit-exact
        identity (used by tests and as a fine-tune default)."""
        return AugmentPolicy(
            out_size=out_size,
            crop_area=(1.0, 1.0),
            crop_aspect=None,
            flip_prob=0.0,
            color_strength=0.0,
            rotation_degrees=0.0,
            blur_prob=0.0,
            elastic=False,
        )


def apply_policy(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    img = _check_image(img)
    out = img
    if policy.crop:
        out = random_crop_resize(out, rng, policy.crop_area, policy.crop_aspect, policy.out_size)
        if policy.flip_prob > 0.0 and rng.random() < policy.flip_prob:
            out = horizontal_flip(out)
    elif policy.out_size is not None and policy.out_size != out.shape[:2]:
        out = resize_bilinear(out, *policy.out_size)
    if policy.equalize:
        out = histogram_equalize(out)
    if policy.color:
        out = color_distort(out, rng, policy.color_strength)
    if policy.rotation:
        out = random_rotation(out, rng, policy.rotation_degrees)
    if policy.blur and rng.random() < policy.blur_prob:
        out = gaussian_blur(out, rng, policy.blur_sigma, policy.blur_kernel_frac)
    if policy.elastic:
        out = elastic_deform(out, rng, policy.elastic_alpha, policy.elastic_sigma)
    return out if out is not img else img.copy()


def make_view_pair(record, policy: AugmentPolicy, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views of one record.  Records expose an
    ``images`` list; each view picks one image uniformly when there are
    several."""
    images = record.images if hasattr(record, "images") else list(record)
    views = []
    for _ in range(2):
        idx = int(rng.integers(0, len(images))) if len(images) > 1 else 0
        views.append(apply_policy(images[idx], policy, rng))
    return views[0], views[1]


# ---------------------------------------------------------------------------
# tiny PGM i/o for fixtures and demos


def write_pgm(path, img: np.ndarray) -> None:
    """Write a single-channel image as binary PGM (maxval 255)."""
    img = _check_image(img)
    if img.shape[2] != 1:
        raise ValueError("write_pgm takes single-channel images")
    h, w = img.shape[:2]
    data = np.minimum((img[..., 0] * 255.0 + 0.5).astype(np.uint8), 255)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM into an (H, W, 1) float array in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P5":
        raise ValueError("only binary PGM (P5) is supported")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return (data.reshape(h, w, 1).astype(np.float64)) / float(maxval)

"""Image preparation: spacing normalization, fixed-size framing, surface-coil
shading correction, intensity normalization and the training-time augmentations.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError

BIAS_SIGMA_PX = 60.0
DEFAULT_OUT_SIZE = (400, 400)


@dataclass
class Image:
    """2-D scalar field with physical pixel spacing (row, col) in mm."""

    pixels: np.ndarray
    spacing_mm: tuple

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ConfigError(f"image must be 2-D, got shape {self.pixels.shape}")
        h, w = self.pixels.shape
        if h < 16 or w < 16:
            raise ConfigError(f"image extents must be >= 16, got {h}x{w}")
        self.spacing_mm = (float(self.spacing_mm[0]), float(self.spacing_mm[1]))
        if min(self.spacing_mm) <= 0:
            raise ConfigError(f"pixel spacing must be > 0, got {self.spacing_mm}")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class PreprocRecord:
    """Coordinate bookkeeping for one preprocessed image.

    original -> processed coordinates: multiply by `scale` (per axis, row/col)
    then add `offset`; the inverse map undoes both exactly.
    """

    scale: tuple
    offset: tuple
    out_size: tuple
    in_shape: tuple
    in_spacing: tuple
    normalized: bool = True


@dataclass
class AugmentConfig:
    p_corrected: float = 0.5
    p_noise: float = 0.5
    noise_sigma_range: tuple = (0.10, 0.30)
    p_blur: float = 0.5
    blur_sigmas: tuple = (0.5, 1.0, 2.0)

    def __post_init__(self):
        for name in ("p_corrected", "p_noise", "p_blur"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {p}")
        lo, hi = self.noise_sigma_range
        if lo > hi:
            raise ConfigError(f"noise_sigma_range low {lo} > high {hi}")
        if not self.blur_sigmas:
            raise ConfigError("blur_sigmas must be nonempty")


def none_augment():
    """Config with every augmentation disabled."""
    return AugmentConfig(p_corrected=0.0, p_noise=0.0, p_blur=0.0)


def _bilinear(pixels, rows, cols):
    h, w = pixels.shape
    r = np.clip(rows, 0.0, h - 1.0)
    c = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0).astype(np.float32)
    fc = (c - c0).astype(np.float32)
    top = pixels[r0, c0] * (1 - fc) + pixels[r0, c1] * fc
    bot = pixels[r1, c0] * (1 - fc) + pixels[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def resample_to_1mm(image):
    """Bilinear resample to exactly 1.0 mm spacing on both axes.

    Returns the resampled image and the per-axis coordinate scale
    (original px -> resampled px is multiplication by the scale).
    """
    sr, sc = image.spacing_mm
    scale = (sr, sc)
    if sr == 1.0 and sc == 1.0:
        return Image(image.pixels.copy(), (1.0, 1.0)), scale
    h, w = image.pixels.shape
    oh = int(round(h * sr))
    ow = int(round(w * sc))
    rows = (np.arange(oh, dtype=np.float64) / sr)[:, None]
    cols = (np.arange(ow, dtype=np.float64) / sc)[None, :]
    out = _bilinear(image.pixels, np.broadcast_to(rows, (oh, ow)),
                    np.broadcast_to(cols, (oh, ow)))
    return Image(out.astype(np.float32), (1.0, 1.0)), scale


def pad_crop(image, out_size=DEFAULT_OUT_SIZE):
    """Center-aligned zero-pad / symmetric crop to `out_size`.

    Any off-center remainder goes to the high-index side.  Returns the framed
    image and the (row, col) offset mapping original to output coordinates.
    """
    oh, ow = out_size
    h, w = image.pixels.shape
    out = np.zeros((oh, ow), dtype=np.float32)
    offs = []
    src = []
    dst = []
    for n, m in ((h, oh), (w, ow)):
        if n <= m:
            lo = (m - n) // 2
            offs.append(lo)
            src.append(slice(0, n))
            dst.append(slice(lo, lo + n))
        else:
            lo = (n - m) // 2
            offs.append(-lo)
            src.append(slice(lo, lo + m))
            dst.append(slice(0, m))
    out[dst[0], dst[1]] = image.pixels[src[0], src[1]]
    return Image(out, image.spacing_mm), (float(offs[0]), float(offs[1]))


def pad_crop_400(image):
    return pad_crop(image, DEFAULT_OUT_SIZE)


def _block_mean(px, k):
    h, w = px.shape
    hp = -(-h // k) * k
    wp = -(-w // k) * k
    padded = np.zeros((hp, wp), dtype=np.float64)
    padded[:h, :w] = px
    return padded.reshape(hp // k, k, wp // k, k).mean(axis=(1, 3))


def bias_correct(image, max_iter=200, flat_tol=0.01):
    """Divide out a slowly-varying shading field, preserving the image mean.

    The field is a broad Gaussian low-pass of the image (sigma 60 px),
    normalized over the nonzero signal support so empty background does not
    drag the estimate down, and floor-clamped at 5% of its own mean.  The
    low-pass/divide step repeats until the estimated field is flat (within
    `flat_tol` of its mean), which makes the correction idempotent: a second
    call sees a flat field on its first estimate and returns the input
    unchanged.  Since the field is smooth by construction, the iteration runs
    on a decimated grid and the accumulated field is applied once at full
    resolution.
    """
    px = image.pixels
    mean0 = float(px.mean())
    if mean0 == 0.0:
        return Image(px.copy(), image.spacing_mm)

    k = max(1, int(round(BIAS_SIGMA_PX / 15.0)))
    small = _block_mean(px, k)
    support = small > 0
    sigma = BIAS_SIGMA_PX / k
    weight = gaussian_filter(support.astype(np.float64), sigma=sigma,
                             mode="constant")
    weight = np.maximum(weight, 1e-6)
    total = np.ones_like(small)
    cur = small.copy()
    prev_spread = math.inf
    for _ in range(max_iter):
        bias = gaussian_filter(cur, sigma=sigma, mode="constant") / weight
        bias = np.maximum(bias, 0.05 * bias.mean())
        ref = bias[support]
        spread = 0.0 if ref.size == 0 else float(np.abs(ref / ref.mean() - 1.0).max())
        if spread <= flat_tol or spread > prev_spread * 0.999:  # flat or stalled
            break
        prev_spread = spread
        cur = cur / bias
        total *= bias / ref.mean()  # keep the accumulated field near unit mean

    h, w = px.shape
    rows = (np.arange(h, dtype=np.float64) + 0.5) / k - 0.5
    cols = (np.arange(w, dtype=np.float64) + 0.5) / k - 0.5
    field = _bilinear(total, np.broadcast_to(rows[:, None], (h, w)),
                      np.broadcast_to(cols[None, :], (h, w)))
    out = px / np.maximum(field, 1e-6)
    out *= mean0 / out.mean()
    return Image(out.astype(np.float32), image.spacing_mm)


def augment(image, config, rng_seed, corrected=None):
    """Training-time augmentation, deterministic for a fixed seed.

    In order: pick the original vs the bias-corrected version, add Gaussian
    noise (sigma a uniform fraction of the chosen image's mean), then blur
    with a kernel width drawn from the configured set.  `corrected` may pass a
    precomputed bias-corrected variant; otherwise it is computed on demand.
    """
    rng = np.random.default_rng(rng_seed)
    take_corrected = rng.random() < config.p_corrected
    add_noise = rng.random() < config.p_noise
    do_blur = rng.random() < config.p_blur

    if take_corrected:
        base = corrected if corrected is not None else bias_correct(image)
        px = base.pixels.copy()
    else:
        px = image.pixels.copy()

    if add_noise:
        lo, hi = config.noise_sigma_range
        sigma = rng.uniform(lo, hi) * float(px.mean())
        if sigma > 0:
            px = px + rng.normal(0.0, sigma, size=px.shape).astype(np.float32)
    if do_blur:
        s = config.blur_sigmas[rng.integers(len(config.blur_sigmas))]
        px = gaussian_filter(px, sigma=float(s), mode="nearest")
    return Image(px.astype(np.float32), image.spacing_mm)


def normalize_intensity(pixels):
    """Zero-mean/unit-variance over the nonzero support; zeros stay zero.

    Returns (normalized pixels, True) or (unchanged pixels, False) when the
    nonzero support is empty or has zero variance.
    """
    mask = pixels != 0
    if not mask.any():
        return pixels.copy(), False
    vals = pixels[mask]
    sd = float(vals.std())
    if sd == 0.0:
        return pixels.copy(), False
    out = np.where(mask, (pixels - float(vals.mean())) / sd, 0.0)
    return out.astype(np.float32), True


def preprocess_pipeline(image, out_size=DEFAULT_OUT_SIZE, normalize=True):
    """Resample to 1 mm, frame to `out_size`, then normalize intensity.

    Returns the framed image and a PreprocRecord composing both coordinate
    transforms (record.normalized is False when normalization was skipped).
    """
    in_shape = image.pixels.shape
    in_spacing = image.spacing_mm
    resampled, scale = resample_to_1mm(image)
    framed, offset = pad_crop(resampled, out_size)
    normalized = False
    if normalize:
        px, normalized = normalize_intensity(framed.pixels)
        framed = Image(px, framed.spacing_mm)
    record = PreprocRecord(
        scale=scale,
        offset=offset,
        out_size=tuple(out_size),
        in_shape=tuple(in_shape),
        in_spacing=tuple(in_spacing),
        normalized=normalized,
    )
    return framed, record

"""Conversion between named landmark points and per-pixel probability maps.

Encoding blurs each present landmark with an isotropic Gaussian, derives the
background channel as the complement, and normalizes every pixel onto the
4-channel simplex.  Decoding applies a presence threshold on the per-channel
peak and reads the coordinate as the probability-weighted centroid of the
half-max superlevel set (global threshold: two tied far-apart peaks yield the
centroid of both regions).

Coordinates are (x, y) = (column, row) in pixel units of a stated frame.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError

VIEWS = {
    "CH2": ("A_P", "I_P", "APEX"),
    "CH3": ("IL_P", "AS_P", "APEX"),
    "CH4": ("AL_P", "IS_P", "APEX"),
    "SAX": ("A_RVI", "P_RVI", "C_LV"),
}

LAX_VIEWS = ("CH2", "CH3", "CH4")

VALID_LABELS = tuple(sorted({s for slots in VIEWS.values() for s in slots}))

DEFAULT_SIGMA_PX = 5.0
DEFAULT_TAU = 0.5


@dataclass
class LandmarkSet:
    """Named 2-D points with presence flags, bound to a view and a frame.

    `points` maps every slot of the view to an (x, y) tuple or None (absent).
    `frame` is (H, W) of the coordinate frame; `spacing_mm` is (row, col).
    """

    view: str
    points: dict
    frame: tuple
    spacing_mm: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ConfigError(f"unknown view {self.view!r}; expected one of {sorted(VIEWS)}")
        slots = VIEWS[self.view]
        if tuple(self.points.keys()) != slots:
            missing = [s for s in slots if s not in self.points]
            extra = [s for s in self.points if s not in slots]
            raise ConfigError(
                f"view {self.view} needs slots {slots} in order; "
                f"missing {missing}, unexpected {extra}"
            )

    @property
    def slots(self):
        return VIEWS[self.view]

    def present(self, slot):
        return self.points[slot] is not None

    def present_slots(self):
        return tuple(s for s in self.slots if self.points[s] is not None)

    def presence_pattern(self):
        return tuple(self.points[s] is not None for s in self.slots)

    @classmethod
    def empty(cls, view, frame, spacing_mm=(1.0, 1.0)):
        return cls(view, {s: None for s in VIEWS[view]}, tuple(frame), tuple(spacing_mm))


@dataclass
class HeatmapStack:
    """Per-pixel class probabilities: channel 0 background, 1..3 the view slots."""

    probs: np.ndarray  # (4, H, W), each pixel sums to 1
    sigma_px: float


def encode(landmarks, H, W, sigma_px=DEFAULT_SIGMA_PX):
    """Gaussian-blur present landmarks into a normalized 4-channel stack."""
    if sigma_px <= 0:
        raise ConfigError(f"sigma_px must be > 0, got {sigma_px}")
    ys = np.arange(H, dtype=np.float64)[:, None]
    xs = np.arange(W, dtype=np.float64)[None, :]
    chans = np.zeros((4, H, W), dtype=np.float64)
    inv = 1.0 / (2.0 * sigma_px * sigma_px)
    for k, slot in enumerate(landmarks.slots):
        pt = landmarks.points[slot]
        if pt is None:
            continue
        x, y = pt
        chans[k + 1] = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) * inv)
    fg = chans[1:].sum(axis=0)
    chans[0] = np.maximum(0.0, 1.0 - fg)
    chans /= chans.sum(axis=0, keepdims=True)
    return HeatmapStack(chans.astype(np.float32), float(sigma_px))


def decode(stack, tau=DEFAULT_TAU, view=None, spacing_mm=(1.0, 1.0)):
    """Read landmarks back out of a probability stack.

    A slot is present iff its channel's peak probability reaches `tau`; its
    coordinate is the probability-weighted centroid over pixels at >= half the
    channel peak.
    """
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"tau must be in (0,1), got {tau}")
    probs = stack.probs if isinstance(stack, HeatmapStack) else np.asarray(stack)
    if view is None:
        raise UsageError("decode needs the view to name the landmark slots")
    C, H, W = probs.shape
    ys = np.arange(H, dtype=np.float64)[:, None]
    xs = np.arange(W, dtype=np.float64)[None, :]
    points = {}
    for k, slot in enumerate(VIEWS[view]):
        ch = probs[k + 1].astype(np.float64)
        peak = ch.max()
        if peak < tau:
            points[slot] = None
            continue
        mask = ch >= 0.5 * peak
        wsum = ch[mask].sum()
        x = float((ch * xs)[mask].sum() / wsum)
        y = float((ch * ys)[mask].sum() / wsum)
        points[slot] = (x, y)
    return LandmarkSet(view, points, (H, W), tuple(spacing_mm))


def to_original_frame(landmarks, record):
    """Map landmark coordinates back through a preprocessing record.

    Exact inverse of the resample + pad/crop coordinate map; restores the
    original frame extents and pixel spacing.
    """
    if tuple(landmarks.frame) != tuple(record.out_size):
        raise UsageError(
            f"landmark frame {landmarks.frame} does not match the "
            f"preprocessing output size {record.out_size}"
        )
    off_r, off_c = record.offset
    sc_r, sc_c = record.scale
    points = {}
    for slot in landmarks.slots:
        pt = landmarks.points[slot]
        if pt is None:
            points[slot] = None
        else:
            x, y = pt
            points[slot] = ((x - off_c) / sc_c, (y - off_r) / sc_r)
    return LandmarkSet(
        landmarks.view, points, tuple(record.in_shape), tuple(record.in_spacing)
    )


def to_processed_frame(landmarks, record):
    """Forward companion of :func:`to_original_frame` (original -> processed)."""
    if tuple(landmarks.frame) != tuple(record.in_shape):
        raise UsageError(
            f"landmark frame {landmarks.frame} does not match the "
            f"preprocessing input shape {record.in_shape}"
        )
    off_r, off_c = record.offset
    sc_r, sc_c = record.scale
    points = {}
    for slot in landmarks.slots:
        pt = landmarks.points[slot]
        if pt is None:
            points[slot] = None
        else:
            x, y = pt
            points[slot] = (x * sc_c + off_c, y * sc_r + off_r)
    return LandmarkSet(landmarks.view, points, tuple(record.out_size), (1.0, 1.0))

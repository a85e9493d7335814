"""Procedural cardiac phantoms with analytically known landmarks.

SAX slices render an anti-aliased myocardial annulus with an RV crescent whose
attachment points are the RVI landmarks; LAX views render a half-ellipse
myocardium with a valve-plane break and an apical taper.  A smooth intensity
ramp and Gaussian noise are applied on top.  Realism is deliberately low: the
point is a fully known geometry for pipeline verification, not MR physics.
"""

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import dataio
from .errors import ConfigError
from .heatmap import VIEWS, LandmarkSet
from .preprocess import Image

DEFAULT_FRAME = (160, 160)
_MARGIN_PX = 18  # landmarks stay at least this far from every border
_RV_BULGE = 0.6  # RV arc center distance as a fraction of the epicardial radius
_RV_WALL_MM = 3.0


@dataclass(frozen=True)
class PhantomParams:
    view: str
    center: tuple  # LV reference point, (x, y) px
    long_axis_mm: float
    cavity_radius_mm: float
    wall_mm: float
    intensities: tuple = (1.0, 0.45, 0.08)  # blood, myocardium, background
    rv_center_angle_deg: float = 180.0
    rv_half_angle_deg: float = 45.0
    slice_offset_mm: float = 0.0  # SAX only; beyond long_axis -> empty slice
    rotation_deg: float = 0.0
    bias_amp: float = 0.2
    bias_angle_deg: float = 0.0
    noise_sigma: float = 0.02
    contrast: str = "cine"
    frame: tuple = DEFAULT_FRAME
    spacing_mm: float = 1.0

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ConfigError(f"unknown view {self.view!r}")
        if self.cavity_radius_mm <= 2.0 or self.wall_mm <= 1.0:
            raise ConfigError("cavity radius must exceed 2 mm and wall 1 mm")
        if self.long_axis_mm <= 2.0 * self.cavity_radius_mm:
            raise ConfigError("long axis must exceed the cavity diameter")
        if not 5.0 <= self.rv_half_angle_deg <= 80.0:
            raise ConfigError("rv_half_angle_deg must be in [5, 80]")
        if self.spacing_mm <= 0:
            raise ConfigError("spacing must be positive")

    @property
    def empty_slice(self):
        return self.view == "SAX" and self.slice_offset_mm >= self.long_axis_mm


def _cov(d_mm, spacing):
    # anti-aliased coverage over a 1-pixel band of a signed distance (mm)
    return np.clip(0.5 - d_mm / spacing, 0.0, 1.0)


def _ellipse_sdf(u, v, a, b):
    f = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    g = np.sqrt(u ** 2 / a ** 4 + v ** 2 / b ** 4)
    return np.where(g > 1e-12, (f - 1.0) * f / np.maximum(g, 1e-12),
                    (f - 1.0) * min(a, b))


def _paint(img, cov, level):
    img *= 1.0 - cov
    img += level * cov


def _local_grid(params):
    H, W = params.frame
    s = params.spacing_mm
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    cx, cy = params.center
    dx = (xs - cx) * s
    dy = (ys - cy) * s
    th = math.radians(params.rotation_deg)
    u = math.cos(th) * dx + math.sin(th) * dy
    v = -math.sin(th) * dx + math.cos(th) * dy
    return u, v


def _to_frame(params, u, v):
    # local mm -> frame px, rotating about the LV reference point
    th = math.radians(params.rotation_deg)
    s = params.spacing_mm
    gx = (math.cos(th) * u - math.sin(th) * v) / s + params.center[0]
    gy = (math.sin(th) * u + math.cos(th) * v) / s + params.center[1]
    return (gx, gy)


def _render_sax(params):
    blood, myo, bg = params.intensities
    H, W = params.frame
    img = np.full((H, W), bg, dtype=np.float64)
    if params.empty_slice:
        return img, {s: None for s in VIEWS["SAX"]}
    u, v = _local_grid(params)
    s = params.spacing_mm
    shrink = math.sqrt(max(1e-6, 1.0 - (params.slice_offset_mm / params.long_axis_mm) ** 2))
    rc = params.cavity_radius_mm * shrink
    rw = (params.cavity_radius_mm + params.wall_mm) * shrink

    phi = math.radians(params.rv_center_angle_deg)
    psi = math.radians(params.rv_half_angle_deg)
    c_rv = (_RV_BULGE * rw * math.cos(phi), _RV_BULGE * rw * math.sin(phi))
    r_rv = rw * math.sqrt(1.0 + _RV_BULGE ** 2 - 2.0 * _RV_BULGE * math.cos(psi))

    d_lv = np.hypot(u, v) - rw
    d_rv = np.hypot(u - c_rv[0], v - c_rv[1]) - r_rv
    outside_lv = _cov(-d_lv, s)  # ~1 outside the epicardium

    _paint(img, _cov(d_rv, s) * (1.0 - outside_lv), myo)  # RV free wall / crescent
    _paint(img, _cov(d_rv + _RV_WALL_MM, s) * (1.0 - outside_lv), blood)  # RV cavity
    _paint(img, _cov(d_lv, s), myo)  # LV myocardium disk
    _paint(img, _cov(np.hypot(u, v) - rc, s), blood)  # LV blood pool
    return img, _sax_marks(params)


def _render_lax(params):
    blood, myo, bg = params.intensities
    H, W = params.frame
    img = np.full((H, W), bg, dtype=np.float64)
    u, v = _local_grid(params)
    s = params.spacing_mm
    L = params.long_axis_mm
    a = params.cavity_radius_mm
    w = params.wall_mm
    vb = v + L / 2.0  # distance from the valve plane toward the apex

    below_valve = _cov(-vb, s)
    d_outer = _ellipse_sdf(u, vb, a + w, L + w)
    d_inner = _ellipse_sdf(u, vb, a, L)
    _paint(img, _cov(d_outer, s) * below_valve, myo)
    _paint(img, _cov(d_inner, s) * below_valve, blood)
    return img, _lax_marks(params)


def gen_sample(params, seed):
    """Render one phantom; returns (Image, LandmarkSet), deterministic per seed."""
    if params.view == "SAX":
        img, marks = _render_sax(params)
    else:
        img, marks = _render_lax(params)
    H, W = params.frame
    for slot, pt in marks.items():
        if pt is None:
            continue
        if not (0 <= pt[0] < W and 0 <= pt[1] < H):
            raise ConfigError(
                f"phantom landmark {slot} at {pt} falls outside the {H}x{W} frame"
            )

    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    beta = math.radians(params.bias_angle_deg)
    proj = (xs - params.center[0]) * math.cos(beta) + (ys - params.center[1]) * math.sin(beta)
    img = img * (1.0 + params.bias_amp * proj / max(H, W))
    if params.noise_sigma > 0:
        img = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
    img = np.maximum(img, 0.0)

    spacing = (params.spacing_mm, params.spacing_mm)
    landmarks = LandmarkSet(params.view, marks, (H, W), spacing)
    return Image(img.astype(np.float32), spacing), landmarks


def random_params(view, contrast, rng, frame=DEFAULT_FRAME):
    """Draw plausible phantom parameters; landmarks land well inside the frame."""
    H, W = frame
    for _attempt in range(64):
        if contrast == "cine":
            intens = (rng.uniform(0.90, 1.05), rng.uniform(0.40, 0.55),
                      rng.uniform(0.05, 0.10))
        elif contrast == "inverted":
            intens = (rng.uniform(0.22, 0.32), rng.uniform(0.85, 1.00),
                      rng.uniform(0.04, 0.08))
        else:
            raise ConfigError(f"unknown contrast mode {contrast!r}")
        params = PhantomParams(
            view=view,
            center=(W / 2.0 + rng.uniform(-10, 10), H / 2.0 + rng.uniform(-10, 10)),
            long_axis_mm=rng.uniform(58, 84),
            cavity_radius_mm=(rng.uniform(15, 22) if view == "SAX"
                              else rng.uniform(16, 24)),
            wall_mm=rng.uniform(6, 10),
            intensities=intens,
            rv_center_angle_deg=rng.uniform(150, 210),
            rv_half_angle_deg=rng.uniform(35, 55),
            slice_offset_mm=(rng.uniform(0.0, 0.45) * 70.0 if view == "SAX" else 0.0),
            rotation_deg=rng.uniform(-25, 25),
            bias_amp=rng.uniform(0.10, 0.35),
            bias_angle_deg=rng.uniform(0, 360),
            noise_sigma=rng.uniform(0.010, 0.030),
            contrast=contrast,
            frame=frame,
        )
        if _landmarks_in_margin(params):
            return params
    raise ConfigError("could not draw in-frame phantom parameters after 64 tries")


def _landmarks_in_margin(params):
    marks = _sax_marks(params) if params.view == "SAX" else _lax_marks(params)
    H, W = params.frame
    for pt in marks.values():
        if pt is None:
            continue
        if not (_MARGIN_PX <= pt[0] <= W - 1 - _MARGIN_PX
                and _MARGIN_PX <= pt[1] <= H - 1 - _MARGIN_PX):
            return False
    return True


def _sax_marks(params):
    if params.empty_slice:
        return {s: None for s in VIEWS["SAX"]}
    shrink = math.sqrt(max(1e-6, 1.0 - (params.slice_offset_mm / params.long_axis_mm) ** 2))
    rw = (params.cavity_radius_mm + params.wall_mm) * shrink
    phi = math.radians(params.rv_center_angle_deg)
    psi = math.radians(params.rv_half_angle_deg)
    return {
        "A_RVI": _to_frame(params, rw * math.cos(phi + psi), rw * math.sin(phi + psi)),
        "P_RVI": _to_frame(params, rw * math.cos(phi - psi), rw * math.sin(phi - psi)),
        "C_LV": _to_frame(params, 0.0, 0.0),
    }


def _lax_marks(params):
    L = params.long_axis_mm
    a = params.cavity_radius_mm
    s0, s1, s2 = VIEWS[params.view]
    return {
        s0: _to_frame(params, -a, -L / 2.0),
        s1: _to_frame(params, a, -L / 2.0),
        s2: _to_frame(params, 0.0, L / 2.0),
    }


def gen_dataset(n, views, contrast, seed, out_dir, frame=DEFAULT_FRAME,
                patients_per_group=4, empty_sax_every=8, sequence=None):
    """Write `n` phantoms plus `manifest.json` into `out_dir`.

    Views are assigned round-robin from `views`; every `patients_per_group`
    consecutive samples share a synthetic patient id; every
    `empty_sax_every`-th SAX sample is an above-the-LV empty slice.
    """
    if n < 1:
        raise ConfigError(f"need n >= 1 samples, got {n}")
    views = tuple(views)
    for v in views:
        if v not in VIEWS:
            raise ConfigError(f"unknown view {v!r}")
    if sequence is None:
        sequence = "cine" if contrast == "cine" else "LGE"
    os.makedirs(out_dir, exist_ok=True)

    samples = []
    sax_count = 0
    for i in range(n):
        view = views[i % len(views)]
        rng = np.random.default_rng([seed, i])
        params = random_params(view, contrast, rng, frame=frame)
        if view == "SAX":
            sax_count += 1
            if empty_sax_every and sax_count % empty_sax_every == 0:
                params = replace(params, slice_offset_mm=1.5 * params.long_axis_mm)
        image, landmarks = gen_sample(params, seed=[seed, i, 1])
        name = f"img_{i:05d}.f32"
        dataio.write_image(os.path.join(out_dir, name), image)
        samples.append(
            dataio.Sample(
                image=name,
                view=view,
                sequence=sequence,
                patient=f"pt{i // patients_per_group:04d}",
                spacing_mm=image.spacing_mm,
                landmarks={s: landmarks.points[s] for s in landmarks.slots},
            )
        )
    manifest = dataio.Manifest(samples=samples, root=str(out_dir))
    dataio.save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest

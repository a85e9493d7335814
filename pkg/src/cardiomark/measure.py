"""Evaluation metrics: detection classification, mm distances, RV-insertion
angle, LV length, longitudinal shortening, Welch's t-test, and report files.

Angle convention: angles are measured from the image +x (column) axis with a
y-up sign (atan2(-delta_row, delta_col)), in degrees on (-180, 180].  Only
angle differences are reported, so any fixed convention is consistent.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, StatisticsError, UsageError
from .heatmap import LAX_VIEWS, VIEWS

ANGLE_CONVENTION = "degrees CCW from image +x axis, y up; range (-180, 180]"


@dataclass
class DetectionOutcome:
    success: bool
    missed: tuple = ()
    spurious: tuple = ()


def detection_outcome(pred, truth):
    """Slot-wise presence comparison; coordinates are never consulted."""
    if pred.view != truth.view:
        raise UsageError(f"view mismatch: pred {pred.view} vs truth {truth.view}")
    missed = tuple(
        s for s in truth.slots if truth.present(s) and not pred.present(s)
    )
    spurious = tuple(
        s for s in truth.slots if not truth.present(s) and pred.present(s)
    )
    return DetectionOutcome(not missed and not spurious, missed, spurious)


def detection_rate(outcomes):
    outcomes = list(outcomes)
    if not outcomes:
        raise UsageError("detection_rate needs at least one outcome")
    return sum(1 for o in outcomes if o.success) / len(outcomes)


def l2_mm(a, b, spacing_mm):
    """Euclidean distance in mm between (x, y) pixel points."""
    sr, sc = spacing_mm
    drow = (a[1] - b[1]) * sr
    dcol = (a[0] - b[0]) * sc
    return math.hypot(drow, dcol)


def a_rvi_angle(landmarks):
    """Angle of the C_LV -> A_RVI vector in mm-scaled coordinates, degrees."""
    if landmarks.view != "SAX":
        raise UsageError(f"a_rvi_angle needs a SAX set, got {landmarks.view}")
    a = landmarks.points["A_RVI"]
    c = landmarks.points["C_LV"]
    if a is None or c is None:
        raise UsageError("a_rvi_angle needs A_RVI and C_LV present")
    sr, sc = landmarks.spacing_mm
    drow = (a[1] - c[1]) * sr
    dcol = (a[0] - c[0]) * sc
    if drow == 0.0 and dcol == 0.0:
        raise GeometryError("A_RVI coincides with C_LV")
    return math.degrees(math.atan2(-drow, dcol))


def angle_diff(a, b):
    """Signed wrapped difference a - b in degrees, in (-180, 180]."""
    d = math.fmod(a - b, 360.0)
    if d <= -180.0:
        d += 360.0
    elif d > 180.0:
        d -= 360.0
    return d


def lv_length(landmarks, spacing_mm=None):
    """Distance in mm from APEX to the midpoint of the two valve points."""
    if landmarks.view not in LAX_VIEWS:
        raise UsageError(f"lv_length needs a LAX set, got {landmarks.view}")
    v1s, v2s, apexs = VIEWS[landmarks.view]
    v1 = landmarks.points[v1s]
    v2 = landmarks.points[v2s]
    apex = landmarks.points[apexs]
    if v1 is None or v2 is None or apex is None:
        raise UsageError(f"lv_length needs all 3 {landmarks.view} slots present")
    if spacing_mm is None:
        spacing_mm = landmarks.spacing_mm
    mid = ((v1[0] + v2[0]) / 2.0, (v1[1] + v2[1]) / 2.0)
    return l2_mm(apex, mid, spacing_mm)


def longitudinal_shortening(len_ed, len_es):
    """100 * (L_ED - L_ES) / L_ED; negative values are allowed (flagged upstream)."""
    if len_ed <= 0:
        raise UsageError(f"len_ed must be > 0, got {len_ed}")
    return 100.0 * (len_ed - len_es) / len_ed


def _betacf(a, b, x, max_iter=300, eps=3e-14):
    # continued fraction for the incomplete beta (modified Lentz)
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def reg_inc_beta(a, b, x):
    """Regularized incomplete beta function I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def welch_t(sample_a, sample_b):
    """Welch's unequal-variance t-test.

    Returns (t, p two-sided); p comes from the Student-t CDF evaluated through
    the regularized incomplete beta with Welch-Satterthwaite degrees of freedom.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise StatisticsError(f"welch_t needs n >= 2 per sample, got {a.size}/{b.size}")
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        raise StatisticsError("welch_t needs nonzero variance")
    sa = va / a.size
    sb = vb / b.size
    t = (a.mean() - b.mean()) / math.sqrt(sa + sb)
    dof = (sa + sb) ** 2 / (
        sa ** 2 / (a.size - 1) + sb ** 2 / (b.size - 1)
    )
    if t == 0.0:
        return 0.0, 1.0
    p = reg_inc_beta(dof / 2.0, 0.5, dof / (dof + t * t))
    return float(t), float(min(max(p, 0.0), 1.0))


def _mean_sd(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return None, None
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def _derived_p(pred_vals, truth_vals):
    try:
        t, p = welch_t(pred_vals, truth_vals)
    except StatisticsError:
        # zero-variance degenerate case: identical constants agree perfectly
        same = np.allclose(np.mean(pred_vals), np.mean(truth_vals))
        t, p = 0.0, (1.0 if same else 0.0)
    return t, p


@dataclass
class MetricsReport:
    """Per-group detection and distance statistics with derived measures."""

    groups: list = field(default_factory=list)
    conventions: dict = field(default_factory=lambda: {
        "distance_unit": "mm",
        "angle": ANGLE_CONVENTION,
        "lv_length_diff": "100 * |L_pred - L_truth| / L_truth, percent",
        "l2_statistics": "successfully detected cases only",
    })

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump({"conventions": self.conventions, "groups": self.groups},
                      f, indent=1, sort_keys=True)
            f.write("\n")

    def to_csv(self, path):
        cols = [
            "sequence", "view", "n_tested", "n_success", "detection_rate",
            "landmark", "l2_mm_mean", "l2_mm_sd", "n_l2",
            "derived_kind", "derived_diff_mean", "derived_diff_sd", "derived_p",
        ]
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(cols)
            for g in self.groups:
                d = g.get("derived") or {}
                for slot, st in g["landmarks"].items():
                    wr.writerow([
                        g["sequence"], g["view"], g["n_tested"], g["n_success"],
                        g["detection_rate"], slot,
                        st["l2_mm_mean"], st["l2_mm_sd"], st["n"],
                        d.get("kind"), d.get("diff_mean"), d.get("diff_sd"),
                        d.get("p"),
                    ])


def build_report(pred_sets, truth_sets, sequences):
    """Aggregate predictions against labels into a MetricsReport.

    `sequences` carries the imaging sequence label (cine|LGE|T1) per sample;
    groups are (sequence, view) pairs in first-appearance order.
    """
    if not (len(pred_sets) == len(truth_sets) == len(sequences)):
        raise UsageError(
            f"misaligned inputs: {len(pred_sets)} preds, {len(truth_sets)} "
            f"truths, {len(sequences)} sequence labels"
        )
    buckets = {}
    order = []
    for pred, truth, seq in zip(pred_sets, truth_sets, sequences):
        key = (seq, truth.view)
        if key not in buckets:
            buckets[key] = []
            order.append(key)
        buckets[key].append((pred, truth))

    groups = []
    for seq, view in order:
        pairs = buckets[(seq, view)]
        outcomes = [detection_outcome(p, t) for p, t in pairs]
        successes = [pt for pt, o in zip(pairs, outcomes) if o.success]
        rate = detection_rate(outcomes)

        lm_stats = {}
        for slot in VIEWS[view]:
            dists = [
                l2_mm(p.points[slot], t.points[slot], t.spacing_mm)
                for p, t in successes
                if t.present(slot)
            ]
            mean, sd = _mean_sd(dists)
            lm_stats[slot] = {"l2_mm_mean": mean, "l2_mm_sd": sd, "n": len(dists)}

        derived = None
        if view == "SAX":
            pv, tv, diffs = [], [], []
            for p, t in successes:
                if t.present("A_RVI") and t.present("C_LV"):
                    ap = a_rvi_angle(p)
                    at = a_rvi_angle(t)
                    pv.append(ap)
                    tv.append(at)
                    diffs.append(angle_diff(ap, at))
            if diffs:
                mean, sd = _mean_sd(diffs)
                t_stat, p_val = _derived_p(pv, tv)
                derived = {"kind": "a_rvi_angle_deg", "diff_mean": mean,
                           "diff_sd": sd, "t": t_stat, "p": p_val, "n": len(diffs)}
        else:
            pv, tv, diffs = [], [], []
            for p, t in successes:
                if all(t.present(s) for s in VIEWS[view]):
                    lp = lv_length(p)
                    lt = lv_length(t)
                    pv.append(lp)
                    tv.append(lt)
                    diffs.append(100.0 * abs(lp - lt) / lt)
            if diffs:
                mean, sd = _mean_sd(diffs)
                t_stat, p_val = _derived_p(pv, tv)
                derived = {"kind": "lv_length_pct", "diff_mean": mean,
                           "diff_sd": sd, "t": t_stat, "p": p_val, "n": len(diffs)}

        groups.append({
            "sequence": seq,
            "view": view,
            "n_tested": len(pairs),
            "n_success": sum(1 for o in outcomes if o.success),
            "detection_rate": rate,
            "landmarks": lm_stats,
            "derived": derived,
        })
    return MetricsReport(groups=groups)

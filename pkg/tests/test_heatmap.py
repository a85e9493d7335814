"""Landmark <-> heat-map codec contracts and round-trip accuracy."""

import math

import numpy as np
import pytest

from cardiomark.errors import ConfigError, UsageError
from cardiomark.heatmap import (
    VIEWS,
    HeatmapStack,
    LandmarkSet,
    decode,
    encode,
    to_original_frame,
    to_processed_frame,
)
from cardiomark.preprocess import PreprocRecord


def _set(view, pts, frame=(128, 128), spacing=(1.0, 1.0)):
    return LandmarkSet(view, dict(zip(VIEWS[view], pts)), frame, spacing)


def random_set(rng, view, frame=(128, 128), min_sep=20.0, margin=15.0,
               presence=(True, True, True)):
    """Random landmark set with phantom-like pairwise separation."""
    H, W = frame
    pts = []
    while len(pts) < 3:
        c = (rng.uniform(margin, W - 1 - margin), rng.uniform(margin, H - 1 - margin))
        if all((c[0] - p[0]) ** 2 + (c[1] - p[1]) ** 2 >= min_sep ** 2
               for p in pts if p is not None):
            pts.append(c)
    pts = [p if keep else None for p, keep in zip(pts, presence)]
    return _set(view, pts, frame)


class TestLandmarkSet:
    def test_slot_schema_enforced(self):
        with pytest.raises(ConfigError):
            LandmarkSet("CH2", {"A_P": None, "APEX": None}, (64, 64))
        with pytest.raises(ConfigError):
            LandmarkSet("XX", {}, (64, 64))

    def test_slot_order_per_view(self):
        assert VIEWS["CH2"] == ("A_P", "I_P", "APEX")
        assert VIEWS["CH3"] == ("IL_P", "AS_P", "APEX")
        assert VIEWS["CH4"] == ("AL_P", "IS_P", "APEX")
        assert VIEWS["SAX"] == ("A_RVI", "P_RVI", "C_LV")


class TestEncode:
    def test_all_absent_is_pure_background(self):
        st = encode(LandmarkSet.empty("SAX", (64, 64)), 64, 64, 5.0)
        np.testing.assert_array_equal(st.probs[0], 1.0)
        np.testing.assert_array_equal(st.probs[1:], 0.0)

    def test_peak_at_landmark_and_gaussian_decay(self):
        lm = _set("CH2", [(40.0, 40.0), None, None], frame=(80, 80))
        st = encode(lm, 80, 80, 5.0)
        ch = st.probs[1]
        assert np.unravel_index(ch.argmax(), ch.shape) == (40, 40)
        # 3 sigma away: raw value <= e^-4.5 (background complement keeps sum 1,
        # so the normalized value matches the raw one here)
        assert ch[40, 40 + 15] <= math.exp(-4.5) + 1e-6

    def test_value_at_one_sigma(self):
        lm = _set("CH2", [(40.0, 40.0), None, None], frame=(80, 80))
        st = encode(lm, 80, 80, 5.0)
        np.testing.assert_allclose(st.probs[1][40, 45], math.exp(-0.5), atol=1e-5)

    def test_pixel_sums_are_one(self, rng):
        lm = random_set(rng, "SAX")
        st = encode(lm, 128, 128, 5.0)
        np.testing.assert_allclose(st.probs.sum(axis=0), 1.0, atol=1e-6)

    def test_sigma_domain(self):
        with pytest.raises(ConfigError):
            encode(LandmarkSet.empty("SAX", (64, 64)), 64, 64, 0.0)

    def test_deterministic_and_permutation_equivariant(self, rng):
        pts = [(30.0, 40.0), (80.0, 50.0), (60.0, 100.0)]
        a = encode(_set("SAX", pts), 128, 128, 5.0).probs
        b = encode(_set("SAX", pts), 128, 128, 5.0).probs
        np.testing.assert_array_equal(a, b)
        rolled = encode(_set("SAX", [pts[1], pts[2], pts[0]]), 128, 128, 5.0).probs
        np.testing.assert_array_equal(rolled[1], a[2])
        np.testing.assert_array_equal(rolled[2], a[3])
        np.testing.assert_array_equal(rolled[3], a[1])


class TestDecode:
    def test_uniform_probs_all_absent(self):
        probs = np.full((4, 32, 32), 0.25, dtype=np.float32)
        out = decode(HeatmapStack(probs, 5.0), 0.5, "SAX")
        assert out.present_slots() == ()

    def test_tau_domain_and_view_required(self):
        probs = np.full((4, 8, 8), 0.25, dtype=np.float32)
        with pytest.raises(ConfigError):
            decode(HeatmapStack(probs, 5.0), 0.0, "SAX")
        with pytest.raises(UsageError):
            decode(HeatmapStack(probs, 5.0), 0.5)

    def test_two_equal_peaks_use_global_threshold_centroid(self):
        probs = np.zeros((4, 64, 64), dtype=np.float32)
        probs[0] = 1.0
        for y, x in ((20, 20), (50, 50)):
            probs[1, y, x] = 0.5
            probs[0, y, x] = 0.5
        out = decode(HeatmapStack(probs, 5.0), 0.5, "CH2")
        assert out.present("A_P")
        np.testing.assert_allclose(out.points["A_P"], (35.0, 35.0))

    def test_roundtrip_with_random_presence(self, rng):
        views = list(VIEWS)
        for i in range(200):
            view = views[i % 4]
            presence = tuple(rng.random() > 0.25 for _ in range(3))
            lm = random_set(rng, view, presence=presence)
            dec = decode(encode(lm, 128, 128, 5.0), 0.5, view)
            assert dec.presence_pattern() == lm.presence_pattern()
            for s in VIEWS[view]:
                if lm.present(s):
                    err = math.hypot(dec.points[s][0] - lm.points[s][0],
                                     dec.points[s][1] - lm.points[s][1])
                    assert err <= 1.0


class TestFrameMapping:
    def test_identity_record(self):
        rec = PreprocRecord(scale=(1.0, 1.0), offset=(0.0, 0.0), out_size=(128, 128),
                            in_shape=(128, 128), in_spacing=(1.0, 1.0))
        lm = _set("CH2", [(30.0, 40.0), (50.0, 60.0), (70.0, 90.0)])
        out = to_original_frame(lm, rec)
        for s in VIEWS["CH2"]:
            np.testing.assert_allclose(out.points[s], lm.points[s])

    def test_pad_offset_subtraction(self):
        rec = PreprocRecord(scale=(1.0, 1.0), offset=(50.0, 50.0), out_size=(400, 400),
                            in_shape=(300, 300), in_spacing=(1.0, 1.0))
        lm = _set("CH2", [(120.0, 130.0), None, None], frame=(400, 400))
        out = to_original_frame(lm, rec)
        np.testing.assert_allclose(out.points["A_P"], (70.0, 80.0))
        assert out.frame == (300, 300)

    def test_inverse_scaling(self):
        rec = PreprocRecord(scale=(2.0, 2.0), offset=(0.0, 0.0), out_size=(400, 400),
                            in_shape=(200, 200), in_spacing=(2.0, 2.0))
        lm = _set("CH2", [(100.0, 100.0), None, None], frame=(400, 400))
        out = to_original_frame(lm, rec)
        np.testing.assert_allclose(out.points["A_P"], (50.0, 50.0))
        assert out.spacing_mm == (2.0, 2.0)

    def test_frame_mismatch_rejected(self):
        rec = PreprocRecord(scale=(1.0, 1.0), offset=(0.0, 0.0), out_size=(400, 400),
                            in_shape=(300, 300), in_spacing=(1.0, 1.0))
        lm = _set("CH2", [(1.0, 1.0), None, None], frame=(128, 128))
        with pytest.raises(UsageError):
            to_original_frame(lm, rec)

    def test_forward_backward_compose_to_identity(self, rng):
        rec = PreprocRecord(scale=(1.4, 1.875), offset=(21.0, 65.0),
                            out_size=(400, 400), in_shape=(256, 144),
                            in_spacing=(1.4, 1.875))
        lm = _set("CH4", [(30.0, 40.0), (100.0, 120.0), (70.0, 200.0)],
                  frame=(256, 144), spacing=(1.4, 1.875))
        back = to_original_frame(to_processed_frame(lm, rec), rec)
        for s in VIEWS["CH4"]:
            np.testing.assert_allclose(back.points[s], lm.points[s], atol=1e-9)

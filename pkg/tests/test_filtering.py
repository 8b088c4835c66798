"""Filter rules, rule ordering, and crop geometry."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facecap.filtering import (
    BUILTIN_PROFILES,
    DatasetProfile,
    GeometryError,
    check_image,
    compute_crop,
    similarity_align,
)

from synth import record_with

LAION = BUILTIN_PROFILES["laion_face"]


def _detection(box, image_size=(1024, 1024), face_count=1):
    x0, y0, x1, y1 = box
    inside = [
        [x0 + 1, y0 + 1], [x1 - 1, y0 + 1], [(x0 + x1) / 2, (y0 + y1) / 2],
        [x0 + 1, y1 - 1], [x1 - 1, y1 - 1],
    ]
    return {
        "image_size": list(image_size),
        "detection": {"face_count": face_count, "box": list(box), "landmarks": inside, "confidence": 0.95},
    }


class TestCheckImage:
    def test_multiple_faces_rejected(self):
        r = record_with("multi", **_detection((100, 100, 400, 420), face_count=2))
        v = check_image(r, LAION)
        assert (v.accepted, v.reason) == (False, "multiple_faces")

    def test_all_rules_pass(self):
        r = record_with("ok", **_detection((100, 100, 400, 420)))
        v = check_image(r, LAION)
        assert (v.accepted, v.reason) == (True, "ok")

    def test_min_side_under_250_rejected(self):
        # 240 x 260 box: min side 240 < 250.
        r = record_with("small", **_detection((0, 0, 240, 260)))
        assert check_image(r, LAION).reason == "low_resolution"

    def test_min_side_at_250_accepted(self):
        r = record_with("edge", **_detection((0, 0, 250, 250)))
        assert check_image(r, LAION).accepted

    def test_no_face(self):
        r = record_with(
            "empty",
            detection={"face_count": 0, "box": None, "landmarks": None, "confidence": 0.0},
        )
        assert check_image(r, LAION).reason == "no_face"

    def test_not_real_human(self):
        r = record_with("toon", **_detection((0, 0, 400, 400)), clip={"is_real_human": False})
        assert check_image(r, LAION).reason == "not_real_human"

    def test_text_overlay(self):
        r = record_with("poster", **_detection((0, 0, 400, 400)), clip={"has_text_overlay": True})
        assert check_image(r, LAION).reason == "text_overlay"

    def test_rule_order_face_count_before_resolution(self):
        r = record_with("both", **_detection((0, 0, 100, 100), face_count=3))
        assert check_image(r, LAION).reason == "multiple_faces"

    def test_rule_order_resolution_before_clip(self):
        r = record_with("small_toon", **_detection((0, 0, 100, 100)), clip={"is_real_human": False})
        assert check_image(r, LAION).reason == "low_resolution"

    def test_pure_function(self):
        r = record_with("pure", **_detection((0, 0, 300, 300)))
        assert check_image(r, LAION) == check_image(r, LAION)

    @pytest.mark.parametrize("profile_name", ["easyportrait", "ffhq"])
    def test_curated_profiles_never_reject_on_resolution(self, profile_name):
        profile = BUILTIN_PROFILES[profile_name]
        assert profile.min_face_side_px is None
        r = record_with("tiny", **_detection((0, 0, 10, 10), image_size=(64, 64)))
        assert check_image(r, profile).accepted

    def test_curated_profiles_skip_clip_checks(self):
        r = record_with(
            "cartoonish", **_detection((0, 0, 300, 300)),
            clip={"is_real_human": False, "has_text_overlay": True},
        )
        assert check_image(r, BUILTIN_PROFILES["ffhq"]).accepted
        assert not check_image(r, LAION).accepted


class TestComputeCrop:
    def test_identity_when_already_square(self):
        assert compute_crop((100, 100, 200, 200), None, (400, 400), margin=1.0) == (100, 100, 200, 200)

    def test_tall_box_becomes_square(self):
        # side 200 around center (150, 200)
        assert compute_crop((100, 100, 200, 300), None, (400, 400), margin=1.0) == (50, 100, 250, 300)

    def test_shifted_not_shrunk_at_edge(self):
        crop = compute_crop((350, 100, 450, 200), None, (480, 480), margin=1.2)
        x0, y0, x1, y1 = crop
        assert x1 - x0 == y1 - y0 == 120
        assert 0 <= x0 and x1 <= 480 and 0 <= y0 and y1 <= 480
        assert x0 <= 400 <= x1 and y0 <= 150 <= y1  # contains box center

    def test_shrunk_only_when_exceeding_image(self):
        crop = compute_crop((10, 10, 290, 290), None, (300, 200), margin=1.3)
        x0, y0, x1, y1 = crop
        assert x1 - x0 == y1 - y0 == 200  # min image dim

    def test_degenerate_box_raises(self):
        with pytest.raises(GeometryError):
            compute_crop((100, 100, 100, 200), None, (400, 400))

    def test_margin_below_one_raises(self):
        with pytest.raises(GeometryError):
            compute_crop((0, 0, 10, 10), None, (100, 100), margin=0.5)

    @settings(max_examples=300, deadline=None)
    @given(
        w=st.integers(50, 2000),
        h=st.integers(50, 2000),
        data=st.data(),
        margin=st.floats(1.0, 2.5),
    )
    def test_crop_square_inside_and_contains_center(self, w, h, data, margin):
        x0 = data.draw(st.integers(0, w - 2))
        x1 = data.draw(st.integers(x0 + 1, w))
        y0 = data.draw(st.integers(0, h - 2))
        y1 = data.draw(st.integers(y0 + 1, h))
        crop = compute_crop((x0, y0, x1, y1), None, (w, h), margin=margin)
        cx0, cy0, cx1, cy1 = crop
        assert cx1 - cx0 == cy1 - cy0 > 0
        assert 0 <= cx0 < cx1 <= w and 0 <= cy0 < cy1 <= h
        bx, by = (x0 + x1) / 2, (y0 + y1) / 2
        assert cx0 <= bx <= cx1 and cy0 <= by <= cy1


class TestSimilarityAlign:
    def test_recovers_known_transform(self):
        template = ((0.31, 0.46), (0.69, 0.46), (0.50, 0.64), (0.35, 0.82), (0.65, 0.82))
        side = 512
        dst = np.array(template) * side
        # Build landmarks by applying a known inverse similarity to the template.
        theta, scale, shift = 0.21, 1.7, np.array([31.0, -12.0])
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        src = (dst @ rot.T) * scale + shift
        m = similarity_align(tuple(map(tuple, src)), template, output_side=side)
        mapped = src @ m[:, :2].T + m[:, 2]
        assert np.allclose(mapped, dst, atol=1e-6)

    def test_degenerate_landmarks_raise(self):
        pts = ((5.0, 5.0),) * 5
        with pytest.raises(GeometryError):
            similarity_align(pts)


def test_profile_invariants_from_builtin_table():
    assert BUILTIN_PROFILES["easyportrait"].min_face_side_px is None
    assert BUILTIN_PROFILES["ffhq"].min_face_side_px is None
    assert BUILTIN_PROFILES["laion_face"].min_face_side_px == 250
    for p in BUILTIN_PROFILES.values():
        assert isinstance(p, DatasetProfile)

import re
import xml.etree.ElementTree as ET

import numpy as np

from lanebev.segments import CLASS_CROSSWALK, CLASS_LANE, LaneSegment
from lanebev.viz import render_frame_svg, validate_svg


def seg(y, cls=CLASS_LANE, score=1.0):
    xs = np.linspace(-10.0, 10.0, 6)
    c = np.stack([xs, np.full(6, float(y))], axis=1)
    return LaneSegment(c, c + [0.0, 1.5], c - [0.0, 1.5], cls, score)


def test_svg_well_formed():
    svg = render_frame_svg([seg(0.0), seg(5.0, CLASS_CROSSWALK)], [seg(0.2, score=0.9)])
    validate_svg(svg)
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")


def test_groundtruth_only_single_panel():
    svg = render_frame_svg([seg(0.0)], None)
    assert "groundtruth" in svg
    assert "prediction" not in svg


def test_oracle_predictions_identical_geometry():
    gts = [seg(0.0), seg(4.0, CLASS_CROSSWALK)]
    svg = render_frame_svg(gts, gts)
    polys = re.findall(r'<polyline points="([^"]+)"', svg)
    # both panels draw 3 polylines per segment; point lists differ only by
    # the panel's horizontal offset
    assert len(polys) == 12
    left, right = polys[:6], polys[6:]

    def xs_ys(s):
        pts = [tuple(map(float, p.split(","))) for p in s.split()]
        return pts

    dx = xs_ys(right[0])[0][0] - xs_ys(left[0])[0][0]
    for a, b in zip(left, right):
        for (xa, ya), (xb, yb) in zip(xs_ys(a), xs_ys(b)):
            assert abs((xb - xa) - dx) < 1e-6
            assert ya == yb


def test_score_threshold_filters():
    gts = [seg(0.0)]
    preds = [seg(0.0, score=0.9), seg(5.0, score=0.1)]
    svg = render_frame_svg(gts, preds)
    polys = re.findall(r"<polyline", svg)
    # 3 gt polylines + 3 for the one surviving prediction
    assert len(polys) == 6


def test_class_colors_used():
    svg = render_frame_svg([seg(0.0), seg(5.0, CLASS_CROSSWALK)], None)
    assert "#2a9d2a" in svg and "#e07b20" in svg

import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from somtom.errors import PlacementDegraded, ValidationError
from somtom.font import GLYPH_H, GLYPH_W, render_text
from somtom.geometry import BBox, Point2
from somtom.som import (
    MarkSet,
    PixelBox,
    apply_som,
    apply_som_points,
    box_to_pixels,
    find_optimal_corner,
    get_mark_size,
    load_boxes,
    mark_scale,
)


def blank(h=400, w=400, value=30):
    return np.full((h, w, 3), value, np.uint8)


def corner_point(r: PixelBox, corner: str):
    return {"TL": (r.x, r.y), "TR": (r.x1, r.y), "BL": (r.x, r.y1), "BR": (r.x1, r.y1)}[corner]


def label_touches_corner(tb: PixelBox, r: PixelBox, corner: str) -> bool:
    cx, cy = corner_point(r, corner)
    xs = {tb.x, tb.x1}
    ys = {tb.y, tb.y1}
    return cx in xs and cy in ys


def test_mark_size_examples():
    assert get_mark_size("7", (512, 512)) == (16, 12)
    assert get_mark_size("12", (512, 512)) == (16, 20)
    assert get_mark_size("7", (1024, 1024)) == (32, 24)


def test_mark_size_validation():
    with pytest.raises(ValidationError):
        get_mark_size("", (512, 512))
    with pytest.raises(ValidationError):
        get_mark_size("1a", (512, 512))


def test_mark_scale_rounds_half_up():
    assert mark_scale(100, 100) == 1
    assert mark_scale(767, 2000) == 1
    assert mark_scale(768, 2000) == 2
    assert mark_scale(1280, 1280) == 3


def test_empty_drawn_picks_tl():
    c = find_optimal_corner(PixelBox(100, 100, 50, 50), [], (400, 400), (16, 12))
    assert c.corner == "TL" and not c.degraded


def test_box_touching_top_left_maximin():
    # distances from the corners to the drawn box: TL 0, TR 50, BL 50, BR 50*sqrt(2)
    b = PixelBox(100, 100, 50, 50)
    drawn = [PixelBox(60, 60, 40, 40)]
    c = find_optimal_corner(b, drawn, (400, 400), (16, 12))
    assert c.corner == "BR"
    assert c.anchor == (150, 150)


def test_box_touching_top_left_near_bottom_edge_picks_tr():
    # bottom labels would leave the image, leaving TL (distance 0) and TR (50)
    b = PixelBox(100, 350, 50, 50)
    drawn = [PixelBox(60, 310, 40, 40)]
    c = find_optimal_corner(b, drawn, (400, 400), (16, 12))
    assert c.corner == "TR"


def test_tie_order_between_equal_corners():
    # drawn box centered below b: TL and TR equally far, BL and BR closer
    b = PixelBox(100, 100, 60, 40)
    drawn = [PixelBox(100, 200, 60, 20)]
    assert find_optimal_corner(b, drawn, (400, 400), (16, 12)).corner == "TL"


def test_full_image_box_falls_back():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        c = find_optimal_corner(BBox(0, 0, 1, 1), [], (200, 300), (16, 12))
    assert c.corner == "TL" and c.degraded
    assert c.text_box.inside(300, 200)
    assert any(issubclass(w.category, PlacementDegraded) for w in caught)


def test_distance_to_box_is_zero_inside():
    # TL corner of b lies inside the drawn box, so TL scores 0
    b = PixelBox(100, 100, 50, 50)
    drawn = [PixelBox(80, 80, 40, 40)]
    assert find_optimal_corner(b, drawn, (400, 400), (16, 12)).corner != "TL"


def test_apply_som_zero_boxes():
    img = blank()
    out, marks, placements = apply_som(img, [])
    assert np.array_equal(out, img) and len(marks) == 0 and placements == []


def test_apply_som_opposite_corners():
    img = blank()
    boxes = [BBox(0.05, 0.1, 0.2, 0.2), BBox(0.7, 0.65, 0.25, 0.3)]
    out, marks, placements = apply_som(img, boxes)
    assert marks.labels == [1, 2]
    rects = [box_to_pixels(b, 400, 400) for b in boxes]
    for p in placements:
        for r in rects:
            interior = PixelBox(r.x + 1, r.y + 1, r.w - 2, r.h - 2)
            assert not p.text_box.intersects(interior)


def test_apply_som_labels_at_corners_and_marks_unchanged():
    rng = np.random.default_rng(0)
    boxes = [BBox(*rng.uniform(0.1, 0.4, 2), *rng.uniform(0.05, 0.3, 2)) for _ in range(12)]
    out, marks, placements = apply_som(blank(), boxes, image_ref="img.png")
    assert marks.labels == list(range(1, 13))
    assert marks.image_ref == "img.png"
    for label, b in zip(marks.labels, boxes):
        assert marks[label] is b or marks[label] == b
    for p, b in zip(placements, boxes):
        r = box_to_pixels(b, 400, 400)
        assert p.text_box.inside(400, 400)
        if not p.degraded:
            assert label_touches_corner(p.text_box, r, p.corner)


def test_apply_som_draws_white_text_on_palette():
    out, _, placements = apply_som(blank(), [BBox(0.3, 0.3, 0.3, 0.3)])
    tb = placements[0].text_box
    patch = out[tb.y : tb.y1, tb.x : tb.x1]
    colors = {tuple(c) for c in patch.reshape(-1, 3)}
    assert (255, 255, 255) in colors
    assert (230, 25, 75) in colors
    assert len(colors) == 2


def test_apply_som_is_deterministic():
    boxes = [BBox(0.1, 0.1, 0.3, 0.3), BBox(0.15, 0.15, 0.3, 0.3), BBox(0.1, 0.1, 0.3, 0.3)]
    a = apply_som(blank(), boxes)[0]
    b = apply_som(blank(), boxes)[0]
    assert a.tobytes() == b.tobytes()


def test_raster_validation():
    with pytest.raises(ValidationError):
        apply_som(np.zeros((10, 10), np.uint8), [])
    with pytest.raises(ValidationError):
        apply_som(np.zeros((10, 10, 3), np.float32), [])


def test_points_center():
    out, marks, placements = apply_som_points(blank(), [Point2(0.5, 0.5)])
    assert marks.to_json()["marks"] == {"1": [0.5, 0.5]}
    assert len(placements) == 1 and placements[0].text_box.inside(400, 400)
    assert not np.array_equal(out, blank())


def test_point_at_origin_label_inside():
    _, _, placements = apply_som_points(blank(), [Point2(0.0, 0.0)])
    tb = placements[0].text_box
    assert tb.inside(400, 400) and tb.x > 0 and tb.y > 0


def test_clustered_points():
    pts = [Point2(0.5 + 0.01 * i, 0.5) for i in range(5)]
    _, marks, placements = apply_som_points(blank(), pts)
    assert marks.labels == [1, 2, 3, 4, 5]
    assert all(p.text_box.inside(400, 400) for p in placements)


def test_points_outside_rejected():
    with pytest.raises(ValidationError):
        apply_som_points(blank(), [Point2(1.2, 0.5)])


def test_markset_validation_and_json():
    with pytest.raises(ValidationError):
        MarkSet({0: Point2(0.1, 0.1)})
    ms = MarkSet.from_items([BBox(0.1, 0.1, 0.2, 0.2), Point2(0.3, 0.4)], "x.png")
    data = json.loads(json.dumps(ms.to_json()))
    assert data["marks"]["1"] == pytest.approx([0.1, 0.1, 0.2, 0.2])
    back = MarkSet.from_json(data)
    assert back.labels == [1, 2] and back.is_consecutive()
    assert back.point_of(1) == Point2(pytest.approx(0.2), pytest.approx(0.2))
    assert not ms.subset([2]).is_consecutive()


def test_load_boxes(tmp_path):
    path = tmp_path / "boxes.jsonl"
    path.write_text(json.dumps({"boxes": [[0.1, 0.1, 0.2, 0.2]]}) + "\n" + json.dumps({"boxes": [[0.5, 0.5, 0.1, 0.1]]}) + "\n")
    assert len(load_boxes(path)) == 2
    path.write_text('{"boxes": [[0.9, 0.1, 0.2, 0.2]]}\n')
    with pytest.raises(ValidationError):
        load_boxes(path)


def test_font_glyph_sizes():
    assert render_text("0123456789").shape == (GLYPH_H, 10 * GLYPH_W)
    assert render_text("8", 3).shape == (3 * GLYPH_H, 3 * GLYPH_W)
    masks = [render_text(str(d)).tobytes() for d in range(10)]
    assert len(set(masks)) == 10


boxes_strategy = st.lists(
    st.tuples(
        st.floats(0.0, 0.9), st.floats(0.0, 0.9), st.floats(0.02, 0.5), st.floats(0.02, 0.5)
    ).map(lambda t: BBox(t[0], t[1], min(t[2], 1 - t[0]), min(t[3], 1 - t[1]))),
    max_size=15,
)


@settings(max_examples=40, deadline=None)
@given(boxes_strategy, st.sampled_from([(120, 200), (300, 300), (600, 1100)]))
def test_placement_properties(boxes, dims):
    h, w = dims
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PlacementDegraded)
        out, marks, placements = apply_som(blank(h, w), boxes)
    assert marks.labels == list(range(1, len(boxes) + 1))
    for p, b in zip(placements, boxes):
        assert p.text_box.inside(w, h)
        if not p.degraded:
            assert label_touches_corner(p.text_box, box_to_pixels(b, w, h), p.corner)
            m_h, m_w = get_mark_size(str(p.label), (h, w))
            assert (p.text_box.h, p.text_box.w) == (m_h, m_w)

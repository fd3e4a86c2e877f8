import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partassoc.assigner import (
    BodyAnnotation,
    PartAnnotation,
    Scene,
    SceneError,
    UNSURE,
    anchor_match,
    assign,
    responsible_cells,
)
from partassoc.geometry import Box
from partassoc.representation import (
    ExtendedObject,
    GridSpec,
    Variant,
    decode_cell,
    encode_targets,
    offset_in_range,
)
from partassoc.synth import SynthConfig, gen_scenes, spec_for


def one_body_scene(body, parts, size=512, contact=None):
    annotated = [None if p is None else PartAnnotation(Box(*p[0]), p[1], contact) for p in parts]
    return Scene("img", size, size, [BodyAnnotation("b0", Box(*body), annotated)])


def test_neighbor_rule_example():
    assert responsible_cells(99, 99, 8, 64, 64) == [(12, 12, False), (11, 12, True), (12, 11, True)]


def test_neighbor_rule_right_and_down_side():
    assert responsible_cells(101, 101, 8, 64, 64) == [(12, 12, False), (13, 12, True), (12, 13, True)]


def test_neighbor_at_exact_half_is_not_encodable():
    # fraction 0.5 selects the right/down side, whose relative centre -0.5 lies outside (-0.5, 1.5)
    assert responsible_cells(100, 100, 8, 64, 64) == [(12, 12, False)]


def test_neighbors_clipped_at_the_border():
    assert responsible_cells(2, 2, 8, 64, 64) == [(0, 0, False)]


def test_anchor_match_examples():
    assert anchor_match(16, 16, (16, 16))
    assert not anchor_match(16, 16, (64, 64))
    assert anchor_match(16, 16, (63, 63))
    with pytest.raises(ValueError):
        anchor_match(0, 16, (16, 16))


def test_anchor_match_64px_body_at_stride_8():
    # strict ratio test: 64/16 = 4 is not < 4, so only the (32, 32) anchor matches
    matched = [a for a in ((8, 8), (16, 16), (32, 32)) if anchor_match(64, 64, a)]
    assert matched == [(32, 32)]


def test_empty_scene_gives_empty_targets():
    spec = GridSpec(("head",), 128, 128)
    out = assign(Scene("e", 128, 128, []), spec)
    assert out.records == []
    for t in out.tensors:
        assert np.all(t[:, spec.layout.obj] == 0)
        assert np.all(t[:, spec.layout.box] == 0)
        assert np.all(np.isnan(t[:, spec.layout.off]))


def test_body_at_99_targets_three_cells_and_matched_anchors_only():
    spec = GridSpec(("head",), 512, 512)
    scene = one_body_scene(Box.from_cxcywh(99, 99, 64, 64).as_tuple(), [None])
    out = assign(scene, spec)
    at8 = [(r.anchor, r.col, r.row) for r in out.records if r.stride == 8]
    assert at8 == [(2, 12, 12), (2, 11, 12), (2, 12, 11)]
    mask = out.obj_mask(0)
    assert mask.sum() == 3 and mask[2, 12, 12] and mask[2, 12, 11] and mask[2, 11, 12]
    for si, stride in enumerate(spec.strides):
        n = sum(1 for r in out.records if r.stride == stride)
        per_anchor = {r.anchor for r in out.records if r.stride == stride}
        assert n == 0 or n // len(per_anchor) in (1, 2, 3)


def test_small_objects_are_skipped_with_warning():
    spec = GridSpec(("head",), 128, 128)
    scene = one_body_scene((10, 10, 60, 90), [((20, 12, 21.5, 30), 1)], size=128)
    out = assign(scene, spec)
    assert out.diagnostics["skipped_small"] == 1
    assert any("smaller than 2px" in w for w in out.warnings)
    assert all(r.slot is None for r in out.records)


def test_invalid_scene_raises():
    spec = GridSpec(("head",), 128, 128)
    with pytest.raises(SceneError):
        assign(one_body_scene((10, 10, 200, 90), [None], size=128), spec)
    with pytest.raises(SceneError):
        assign(Scene("x", 256, 128, []), spec)
    with pytest.raises(SceneError, match="contact"):
        assign(one_body_scene((10, 10, 60, 90), [((20, 12, 40, 30), 1)], size=128,
                              contact=(0, 1, 2, 0)), spec)


def test_invisible_parts_contribute_no_offsets():
    spec = GridSpec(("head", "hand"), 256, 256)
    scene = one_body_scene((40, 40, 120, 200), [((60, 45, 100, 80), 0), ((50, 120, 70, 140), 1)],
                           size=256)
    out = assign(scene, spec)
    lay = spec.layout
    for t in out.tensors:
        assert np.all(np.isnan(t[:, lay.off.start:lay.off.start + 2]))  # slot 0 offsets masked
    assert all(r.slot != 0 for r in out.records)
    hand_offsets = np.concatenate([t[:, lay.off.start + 2:lay.off.stop].ravel() for t in out.tensors])
    assert np.isfinite(hand_offsets).any()


def test_contact_targets_default_to_unsure():
    spec = GridSpec(("lh", "rh"), 256, 256, variant=Variant.CONTACT)
    scene = one_body_scene((40, 40, 160, 220), [((50, 120, 75, 145), 1), None], size=256,
                           contact=(1, 0, 0, 2))
    out = assign(scene, spec)
    lay = spec.layout
    body = [r for r in out.records if r.slot is None][0]
    si = spec.stride_index(body.stride)
    cts = out.tensors[si][body.anchor, lay.cts, body.row, body.col].reshape(2, 4)
    assert cts[0].tolist() == [1, 0, 0, 2]
    assert np.all(cts[1] == UNSURE)


def _expected_cell(record, obj_box, points, spec):
    """Per-cell reference using encode_targets on the cell-relative object."""
    s = record.stride
    sx, sy = (v / s for v in spec.anchors[spec.stride_index(s)][record.anchor])
    cx, cy = obj_box.center
    box = Box.from_cxcywh(cx / s - record.col, cy / s - record.row, obj_box.width / s, obj_box.height / s)
    d = points / s - np.array([record.col, record.row])
    for j in range(spec.k):
        if np.isnan(d[j, 0]) or not (offset_in_range(d[j, 0], sx) and offset_in_range(d[j, 1], sy)):
            d[j] = np.nan
    obj = ExtendedObject("x", None, box, np.full(spec.k + 1, 0.5), d)
    return encode_targets(obj, spec, s, record.anchor)


def _object_table(scene, spec):
    table = {}
    for body in scene.bodies:
        pts = np.full((spec.k, 2), np.nan)
        for j, p in enumerate(body.parts):
            if p is not None and p.visible:
                pts[j] = p.box.center
                own = np.full((spec.k, 2), np.nan)
                own[j] = body.box.center
                table[f"{body.body_id}/{j}"] = (p.box, own)
        table[body.body_id] = (body.box, pts)
    return table


def test_vectorised_assign_matches_per_cell_encode():
    cfg = SynthConfig(seed=5, n_images=8, preset="humanoid-k6", image_w=512, image_h=512)
    spec = spec_for(cfg)
    lay = spec.layout
    checked = 0
    for scene in gen_scenes(cfg):
        out = assign(scene, spec)
        table = _object_table(scene, spec)
        for r in out.records:
            if r.overwritten:
                continue
            box, pts = table[r.object_id]
            want = _expected_cell(r, box, pts.copy(), spec)
            got = out.tensors[spec.stride_index(r.stride)][r.anchor, :, r.row, r.col]
            for sl in (lay.box, lay.off):
                np.testing.assert_allclose(got[sl], want[sl], atol=1e-12, equal_nan=True)
            checked += 1
    assert checked > 100


def test_every_visible_part_gets_an_exact_body_offset():
    cfg = SynthConfig(seed=11, n_images=10, preset="humanoid-k2-hands", image_w=512, image_h=512)
    spec = spec_for(cfg)
    lay = spec.layout
    for scene in gen_scenes(cfg, spec):
        out = assign(scene, spec)
        for bi, body in enumerate(scene.bodies):
            recs = [r for r in out.records if r.body_index == bi and r.slot is None and not r.overwritten]
            for j, p in enumerate(body.parts):
                if p is None or not p.visible:
                    continue
                best = np.inf
                for r in recs:
                    raw = out.tensors[spec.stride_index(r.stride)][r.anchor, :, r.row, r.col]
                    if np.isnan(raw[lay.off][2 * j]):
                        continue
                    filled = np.where(np.isnan(raw), 0.0, raw)
                    dec = decode_cell(filled, spec, r.stride, r.anchor, (r.col, r.row))
                    pt = r.stride * (dec.offsets[j] + (r.col, r.row))
                    best = min(best, float(np.max(np.abs(pt - np.array(p.box.center)))))
                assert best < 1e-4  # pixels; 1e-5 grid units at the coarsest stride is 6.4e-4


def test_assign_is_deterministic():
    cfg = SynthConfig(seed=3, n_images=3, preset="quadruped-k5", image_w=512, image_h=512)
    spec = spec_for(cfg)
    for scene in gen_scenes(cfg):
        a, b = assign(scene, spec), assign(scene, spec)
        for ta, tb in zip(a.tensors, b.tensors):
            assert ta.tobytes() == tb.tobytes()


def test_collision_later_object_wins():
    spec = GridSpec(("head",), 128, 128)
    body = (30, 30, 62, 62)
    scene = Scene("c", 128, 128, [BodyAnnotation("b0", Box(*body), [None]),
                                  BodyAnnotation("b1", Box(31, 31, 63, 63), [None])])
    out = assign(scene, spec)
    assert out.diagnostics["collisions"] > 0
    assert all(r.overwritten for r in out.records if r.object_id == "b0")


def test_anchor_free_targets_sides_at_center_cell():
    spec = GridSpec(("head",), 128, 128, variant=Variant.ANCHOR_FREE)
    scene = one_body_scene((20, 20, 60, 100), [((30, 22, 50, 40), 1)], size=128)
    out = assign(scene, spec)
    lay = spec.layout
    r = [r for r in out.records if r.slot is None and r.stride == 8][0]
    assert (r.col, r.row) == (5, 7)
    sides = out.tensors[0][0, lay.box, r.row, r.col]
    assert sides.tolist() == pytest.approx([5.5 - 2.5, 7.5 - 2.5, 7.5 - 5.5, 12.5 - 7.5])


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 511.99), st.floats(0, 511.99), st.sampled_from([8, 16, 32, 64]))
def test_responsible_cells_count_and_range(cx, cy, stride):
    n = 512 // stride
    cells = responsible_cells(cx, cy, stride, n, n)
    assert 1 <= len(cells) <= 3
    assert not cells[0][2]
    for c, r, _ in cells:
        assert -0.5 < cx / stride - c < 1.5 and -0.5 < cy / stride - r < 1.5

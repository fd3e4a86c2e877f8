import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partassoc.assigner import assign
from partassoc.decoder import (
    AssociatedDetection,
    DecodeConfig,
    PartDetection,
    associate,
    decode_image,
    double_check,
    fuse_contact,
    nms,
)
from partassoc.geometry import Box, inner_iou
from partassoc.representation import Variant
from partassoc.synth import NoiseConfig, SynthConfig, gen_scenes, perfect_prediction, render_predicted, spec_for
from oracles import associate_oracle, nms_reference, random_association_case


def test_decode_config_defaults():
    c = DecodeConfig()
    assert (c.body_conf, c.body_iou, c.part_conf, c.part_iou, c.inner_iou) == (0.05, 0.6, 0.1, 0.3, 0.6)
    assert c.max_detections == 300 and (c.contact_hand_weight, c.contact_body_weight) == (0.6, 0.4)
    with pytest.raises(ValueError):
        DecodeConfig(body_iou=1.5)


def _pair_with_iou(target):
    # two 10x10 boxes shifted horizontally: IoU = (10 - d) / (10 + d)
    d = 10 * (1 - target) / (1 + target)
    return np.array([[0, 0, 10, 10], [d, 0, 10 + d, 10]], dtype=float)


def test_nms_examples():
    scores = np.array([0.9, 0.8])
    assert nms(_pair_with_iou(0.7), scores, 0.05, 0.6).tolist() == [0]
    assert nms(_pair_with_iou(0.2), scores, 0.05, 0.6).tolist() == [0, 1]
    assert nms(_pair_with_iou(0.7), np.array([0.8, 0.9]), 0.05, 0.6).tolist() == [1]


def test_nms_conf_threshold_and_ties():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10], [50, 50, 60, 60]], dtype=float)
    assert nms(boxes, np.array([0.5, 0.5, 0.05]), 0.05, 0.5).tolist() == [0]
    assert nms(boxes, np.array([0.5, 0.5, 0.3]), 0.05, 0.5, max_keep=1).tolist() == [0]
    assert nms(np.zeros((0, 4)), np.zeros(0), 0.05, 0.5).tolist() == []


def test_nms_matches_quadratic_reference():
    rng = np.random.default_rng(0)
    for _ in range(100):
        xy = rng.uniform(0, 300, (200, 2))
        wh = rng.uniform(5, 80, (200, 2))
        boxes = np.hstack([xy, xy + wh])
        scores = np.round(rng.uniform(0, 1, 200), 2)  # rounding forces ties
        for thr in (0.3, 0.6):
            assert nms(boxes, scores, 0.05, thr).tolist() == nms_reference(boxes, scores, 0.05, thr)


def test_associate_confidence_beats_distance():
    body = np.array([[0, 0, 100, 100.0]])
    points = np.array([[[50.0, 50.0]]])
    parts = np.array([[44, 44, 54, 54], [75, 75, 85, 85.0]])  # A centred (49,49), B centred (80,80)
    slots = associate(body, points, parts, np.array([0.8, 0.9]), np.array([0, 0]))
    assert slots.tolist() == [[1]]
    nearest = associate(body, points, parts, np.array([0.8, 0.9]), np.array([0, 0]), update_rule="nearest_wins")
    assert nearest.tolist() == [[0]]


def test_associate_gate_and_empty_inputs():
    body = np.array([[0, 0, 100, 100.0]])
    points = np.array([[[50.0, 50.0]]])
    outside = np.array([[200, 200, 210, 210.0]])
    assert associate(body, points, outside, np.array([0.9]), np.array([0])).tolist() == [[-1]]
    assert associate(body, points, np.zeros((0, 4)), np.zeros(0), np.zeros(0)).tolist() == [[-1]]
    assert associate(np.zeros((0, 4)), np.zeros((0, 1, 2)), outside, np.array([0.9]), np.array([0])).shape == (0, 1)


def test_associate_matches_exhaustive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n_b, n_p, k = int(rng.integers(1, 11)), int(rng.integers(0, 31)), int(rng.integers(1, 4))
        case = random_association_case(rng, n_b, n_p, k)
        got = associate(*case, inner_thresh=0.6)
        assert got.tolist() == associate_oracle(*case, gate=0.6).tolist()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_associate_is_order_insensitive_for_distinct_scores(seed):
    rng = np.random.default_rng(seed)
    bodies, points, parts, _, slots = random_association_case(rng, 5, 20, 2)
    scores = rng.permutation(np.linspace(0.05, 0.95, 20))
    base = associate(bodies, points, parts, scores, slots)
    perm = rng.permutation(20)
    shuffled = associate(bodies, points, parts[perm], scores[perm], slots[perm])
    mapped = np.where(shuffled >= 0, perm[np.maximum(shuffled, 0)], -1)
    assert mapped.tolist() == base.tolist()
    for b, row in enumerate(base):
        for pi in row[row >= 0]:
            assert inner_iou(Box.from_seq(bodies[b]), Box.from_seq(parts[pi])) > 0.6


def test_double_check():
    part = PartDetection(Box(0, 0, 1, 1), 0.9, 0)
    dets = [AssociatedDetection(Box(0, 0, 5, 5), 0.9, [part, None]),
            AssociatedDetection(Box(0, 0, 5, 5), 0.8, [None, part])]
    kept, dropped = double_check(dets, 0, 2)
    assert kept == dets[:1] and dropped == 1
    with pytest.raises(ValueError):
        double_check(dets, 2, 2)


def test_fuse_contact_examples(caplog):
    assert fuse_contact([1.0], [0.0])[0] == pytest.approx(0.6)
    assert fuse_contact([0.3, 0.7], [0.9, 0.1], 1.0, 0.0).tolist() == [0.3, 0.7]
    for w in (0.1, 0.5, 0.9):
        assert fuse_contact([0.42], [0.42], w, 1 - w)[0] == pytest.approx(0.42)
    assert fuse_contact([1.0], [0.0], 3.0, 2.0)[0] == pytest.approx(0.6)
    assert "normalising" in caplog.text


@pytest.mark.parametrize("preset,variant", [
    ("humanoid-k1-head", Variant.ANCHOR_BASED),
    ("humanoid-k2-hands", Variant.CONTACT),
    ("humanoid-k6", Variant.ANCHOR_BASED),
    ("quadruped-k5", Variant.ANCHOR_BASED),
])
def test_exact_predictions_recover_every_pair(preset, variant):
    cfg = SynthConfig(seed=4, n_images=6, preset=preset)
    spec = spec_for(cfg, variant)
    for scene in gen_scenes(cfg, spec):
        targets = assign(scene, spec)
        det = decode_image(perfect_prediction(targets, scene), spec, image_id=scene.image_id)
        assert len(det.bodies) == len(scene.bodies)
        for gt in scene.bodies:
            match = [d for d in det.bodies if np.allclose(d.box.as_tuple(), gt.box.as_tuple(), atol=1e-3)]
            assert len(match) == 1
            d = match[0]
            for j, p in enumerate(gt.parts):
                if p is None or not p.visible:
                    assert d.parts[j] is None
                else:
                    assert d.parts[j] is not None
                    assert np.allclose(d.parts[j].box.as_tuple(), p.box.as_tuple(), atol=1e-3)
                    if variant is Variant.CONTACT and p.contact is not None and j in spec.contact_slots:
                        fused = np.array(d.contact_scores[j])
                        scored = np.array(p.contact) != 2
                        assert np.allclose(fused[scored], np.array(p.contact)[scored], atol=1e-3)


def test_decode_emits_only_gated_parts_and_is_deterministic():
    cfg = SynthConfig(seed=8, n_images=4, preset="humanoid-k6", noise=NoiseConfig.uniform(0.5, fp_rate=0.3))
    spec = spec_for(cfg)
    conf = DecodeConfig()
    for i, scene in enumerate(gen_scenes(cfg, spec)):
        pred = render_predicted(scene, spec, cfg.noise, seed=cfg.seed, index=i)
        a = decode_image(pred, spec, conf)
        b = decode_image(pred, spec, conf)
        assert repr(a) == repr(b)
        for d in a.bodies:
            for p in d.parts:
                if p is not None:
                    assert inner_iou(d.box, p.box) > conf.inner_iou


def test_require_association_drops_bodies_without_the_slot():
    cfg = SynthConfig(seed=1, n_images=3, preset="humanoid-k1-head", noise=NoiseConfig.uniform(0.25))
    spec = spec_for(cfg)
    for i, scene in enumerate(gen_scenes(cfg, spec)):
        pred = render_predicted(scene, spec, cfg.noise, seed=1, index=i)
        plain = decode_image(pred, spec, DecodeConfig())
        checked = decode_image(pred, spec, DecodeConfig(require_association=0))
        expected = [d for d in plain.bodies if d.parts[0] is not None]
        assert [d.box for d in checked.bodies] == [d.box for d in expected]
        assert checked.stats["double_check_dropped"] == len(plain.bodies) - len(expected)

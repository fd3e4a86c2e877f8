import io

import numpy as np
import pytest

from partassoc.assigner import assign
from partassoc.decoder import decode_image
from partassoc.geometry import inner_iou, iou
from partassoc.io import write_scenes
from partassoc.losses import loss_bpd
from partassoc.representation import Variant
from partassoc.synth import (
    PRESETS,
    NoiseConfig,
    SynthConfig,
    SynthError,
    config_from_dict,
    gen_scenes,
    image_streams,
    load_preset,
    perfect_prediction,
    render_predicted,
    spec_for,
)


def ndjson(scenes):
    buf = io.StringIO()
    write_scenes(scenes, buf)
    return buf.getvalue()


def test_presets_cover_the_part_counts():
    ks = sorted(len(load_preset(name)["slots"]) for name in PRESETS)
    assert ks == [1, 2, 5, 6]


def test_same_seed_gives_identical_ndjson():
    cfg = SynthConfig(seed=123, n_images=5, preset="humanoid-k6")
    assert ndjson(gen_scenes(cfg)) == ndjson(gen_scenes(cfg))
    assert ndjson(gen_scenes(cfg)) != ndjson(gen_scenes(SynthConfig(seed=124, n_images=5, preset="humanoid-k6")))


def test_streams_are_per_image():
    # image 3 does not depend on how many images precede it
    a = gen_scenes(SynthConfig(seed=7, n_images=4))[3]
    b = gen_scenes(SynthConfig(seed=7, n_images=10))[3]
    assert ndjson([a]) == ndjson([b])
    x = image_streams(7, 0)[0].random()
    assert x == np.random.Generator(np.random.PCG64(np.random.SeedSequence([7, 0]).spawn(3)[0])).random()


@pytest.mark.parametrize("preset", PRESETS)
def test_scenes_are_valid_and_parts_contained(preset):
    cfg = SynthConfig(seed=1, n_images=10, preset=preset)
    k = len(cfg.layout["slots"])
    for scene in gen_scenes(cfg):
        scene.validate(k, require_containment=True)
        for b in scene.bodies:
            for p in b.parts:
                if p is not None:
                    assert inner_iou(b.box, p.box) == 1.0


def test_occlusion_cap_zero_gives_disjoint_bodies():
    cfg = SynthConfig(seed=2, n_images=10, occlusion_cap=0.0, bodies_per_image=(4, 8))
    for scene in gen_scenes(cfg):
        boxes = [b.box for b in scene.bodies]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                assert iou(a, b) == 0.0
                assert not (min(a.x2, b.x2) > max(a.x1, b.x1) and min(a.y2, b.y2) > max(a.y1, b.y1))


def test_visibility_zero_gives_bodies_only():
    for scene in gen_scenes(SynthConfig(seed=3, n_images=5, preset="humanoid-k6", visibility=0.0)):
        assert scene.bodies
        assert all(p is None for b in scene.bodies for p in b.parts)


def test_infeasible_configs_raise():
    layout = load_preset("humanoid-k1-head")
    layout["slots"][0] = {**layout["slots"][0], "width": [0.5, 1.4]}
    with pytest.raises(SynthError, match="wider"):
        load_preset(layout)
    with pytest.raises(SynthError):
        load_preset("no-such-preset")
    with pytest.raises(SynthError, match="does not fit"):
        gen_scenes(SynthConfig(image_w=64, image_h=64, body_width=(80, 90)))
    with pytest.raises(SynthError):
        SynthConfig(occlusion_cap=1.5)
    with pytest.raises(SynthError):
        config_from_dict({"seed": 1, "bogus": 2})
    with pytest.raises(SynthError, match="k="):
        gen_scenes(SynthConfig(preset="humanoid-k6"), spec_for(SynthConfig(preset="humanoid-k1-head")))


def test_contact_states_only_in_contact_variant():
    cfg = SynthConfig(seed=4, n_images=5, preset="humanoid-k2-hands")
    plain = gen_scenes(cfg)
    assert all(p.contact is None for s in plain for b in s.bodies for p in b.parts if p is not None)
    spec = spec_for(cfg, Variant.CONTACT)
    states = [p.contact for s in gen_scenes(cfg, spec) for b in s.bodies for p in b.parts if p is not None]
    assert states and all(c is not None and set(c) <= {0, 1, 2} for c in states)


def test_sigma_zero_render_equals_perfect_prediction():
    cfg = SynthConfig(seed=5, n_images=3, preset="humanoid-k6")
    spec = spec_for(cfg)
    for i, scene in enumerate(gen_scenes(cfg, spec)):
        targets = assign(scene, spec)
        a = render_predicted(scene, spec, NoiseConfig(), seed=5, index=i, targets=targets)
        b = perfect_prediction(targets, scene)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_offset_noise_bpd_equals_injected_noise_statistic():
    cfg = SynthConfig(seed=6, n_images=20, preset="humanoid-k2-hands")
    spec = spec_for(cfg)
    lay = spec.layout
    sigma = 0.5
    total_loss, slots_over_cells = 0.0, 0.0
    for i, scene in enumerate(gen_scenes(cfg, spec)):
        targets = assign(scene, spec)
        pred = render_predicted(scene, spec, NoiseConfig(offset=sigma), seed=6, index=i, targets=targets)
        clean = perfect_prediction(targets, scene)
        value = loss_bpd(pred, targets.tensors, spec)[0]
        stat = 0.0
        for p, c, t in zip(pred, clean, targets.tensors):
            mask = t[:, lay.obj] > 0.5
            n = int(mask.sum())
            if not n:
                continue
            d = t[:, lay.off].transpose(0, 2, 3, 1)[mask]
            z = (p[:, lay.off] - c[:, lay.off]).transpose(0, 2, 3, 1)[mask]
            stat += float(np.where(np.isnan(d), 0.0, z ** 2).sum() / n)
            slots_over_cells += float((~np.isnan(d)).sum() / n)
        assert value > 0
        assert value == pytest.approx(stat, rel=1e-9)
        total_loss += value
    # the expectation of the statistic is sigma^2 per visible coordinate
    expected = sigma ** 2 * slots_over_cells
    assert total_loss == pytest.approx(expected, rel=0.1)


def test_fp_injection_raises_detection_count():
    excess = []
    for seed in range(50):
        cfg = SynthConfig(seed=seed, n_images=2, preset="humanoid-k1-head")
        spec = spec_for(cfg)
        for i, scene in enumerate(gen_scenes(cfg, spec)):
            pred = render_predicted(scene, spec, NoiseConfig(fp_rate=0.2), seed=seed, index=i)
            det = decode_image(pred, spec)
            found = sum(1 for d in det.bodies for p in d.parts if p is not None) + len(det.unassociated)
            gt = sum(1 for b in scene.bodies for p in b.parts if p is not None)
            excess.append(found - gt)
    assert np.mean(excess) > 0
    assert min(excess) >= 0


def test_fn_injection_removes_objects():
    cfg = SynthConfig(seed=9, n_images=5, preset="humanoid-k1-head", bodies_per_image=(4, 6))
    spec = spec_for(cfg)
    lost = 0
    for i, scene in enumerate(gen_scenes(cfg, spec)):
        det = decode_image(render_predicted(scene, spec, NoiseConfig(fn_rate=0.5), seed=9, index=i), spec)
        lost += len(scene.bodies) - len(det.bodies)
    assert lost > 0


def test_config_round_trip():
    cfg = SynthConfig(seed=11, noise=NoiseConfig.uniform(0.2, fp_rate=0.1))
    assert config_from_dict(cfg.to_dict()) == cfg

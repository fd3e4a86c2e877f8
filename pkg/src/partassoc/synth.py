"""Deterministic synthetic scenes and "predicted" grids rendered from them.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence([seed, image_index])``; each image owns independent child
streams for layout, noise and error injection, so one image can be
regenerated without the others and the same seed always yields the same
data.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Any, Sequence

import numpy as np

from .assigner import (
    UNSURE,
    BodyAnnotation,
    PartAnnotation,
    Scene,
    TargetGrids,
    anchor_match,
    assign,
)
from .geometry import Box, iou
from .representation import (
    PROB_EPS,
    GridSpec,
    Variant,
    clamp_prob,
    logit,
)

PRESETS = ("humanoid-k1-head", "humanoid-k2-hands", "humanoid-k6", "quadruped-k5")

_STREAM_LAYOUT, _STREAM_NOISE, _STREAM_INJECT = range(3)


class SynthError(ValueError):
    pass


def load_preset(name_or_layout: str | dict) -> dict:
    """Part layout model: a shipped preset name or a layout dictionary."""
    if isinstance(name_or_layout, dict):
        layout = dict(name_or_layout)
    else:
        if name_or_layout not in PRESETS:
            raise SynthError(f"unknown preset {name_or_layout!r}; choose from {', '.join(PRESETS)}")
        text = resources.files("partassoc.presets").joinpath(f"{name_or_layout}.json").read_text()
        layout = json.loads(text)
    for key in ("body_width", "body_aspect", "slots"):
        if key not in layout:
            raise SynthError(f"part layout missing {key!r}")
    for slot in layout["slots"]:
        lo, hi = slot["width"]
        if not 0 < lo <= hi:
            raise SynthError(f"slot {slot.get('label')!r}: invalid width range {slot['width']}")
        if hi > 1.0:
            raise SynthError(f"slot {slot.get('label')!r}: part wider than its body")
        if hi * slot["aspect"][1] > min(layout["body_aspect"]):
            raise SynthError(f"slot {slot.get('label')!r}: part taller than its body")
    return layout


@dataclass
class NoiseConfig:
    box: float = 0.0
    offset: float = 0.0
    score: float = 0.0
    fp_rate: float = 0.0
    fn_rate: float = 0.0

    @classmethod
    def uniform(cls, sigma: float, **kw) -> "NoiseConfig":
        return cls(box=sigma, offset=sigma, score=sigma, **kw)


@dataclass
class SynthConfig:
    seed: int = 0
    n_images: int = 10
    preset: str | dict = "humanoid-k1-head"
    image_w: int = 512
    image_h: int = 512
    bodies_per_image: tuple[int, int] = (1, 6)
    body_width: tuple[float, float] | None = None
    visibility: float | None = None
    occlusion_cap: float = 0.3
    part_iou_cap: float = 0.2
    contact_prob: float = 0.35
    unsure_prob: float = 0.05
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    max_attempts: int = 200

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        self.bodies_per_image = tuple(self.bodies_per_image)
        lo, hi = self.bodies_per_image
        if lo < 0 or hi < lo:
            raise SynthError(f"invalid bodies_per_image {self.bodies_per_image}")
        if not 0.0 <= self.occlusion_cap <= 1.0:
            raise SynthError("occlusion_cap must lie in [0, 1]")
        if self.visibility is not None and not 0.0 <= self.visibility <= 1.0:
            raise SynthError("visibility must lie in [0, 1]")
        if not 0 <= self.seed < 2 ** 64:
            raise SynthError("seed must be an unsigned 64-bit integer")

    @property
    def layout(self) -> dict:
        return load_preset(self.preset)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bodies_per_image"] = list(self.bodies_per_image)
        return d


def image_streams(seed: int, index: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence([seed, index]).spawn(3)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def spec_for(config: SynthConfig, variant: Variant | str = Variant.ANCHOR_BASED, **kw) -> GridSpec:
    layout = config.layout
    labels = tuple(s["label"] for s in layout["slots"])
    extra = dict(kw)
    if Variant(variant) is Variant.CONTACT:
        extra.setdefault("contact_slots", tuple(layout.get("contact_slots", (0, 1))))
    return GridSpec(labels, config.image_w, config.image_h, variant=Variant(variant), **extra)


def _r2(v: float) -> float:
    return round(float(v), 2)


def _draw_body(rng, config: SynthConfig, layout: dict, index: int, spec: GridSpec | None) -> BodyAnnotation:
    wmin, wmax = config.body_width or layout["body_width"]
    amin, amax = layout["body_aspect"]
    w = rng.uniform(wmin, wmax)
    h = w * rng.uniform(amin, amax)
    if w > config.image_w or h > config.image_h:
        raise SynthError(f"body {w:.1f}x{h:.1f} does not fit a {config.image_w}x{config.image_h} image")
    x1 = rng.uniform(0.0, config.image_w - w)
    y1 = rng.uniform(0.0, config.image_h - h)
    box = Box(_r2(x1), _r2(y1), _r2(min(x1 + w, config.image_w)), _r2(min(y1 + h, config.image_h)))
    contact_slots = set(layout.get("contact_slots", ())) if spec is not None and spec.has_contact else set()
    parts: list[PartAnnotation | None] = []
    for j, slot in enumerate(layout["slots"]):
        pw = box.width * rng.uniform(*slot["width"])
        ph = pw * rng.uniform(*slot["aspect"])
        cx = box.x1 + box.width * rng.uniform(*slot["center_x"])
        cy = box.y1 + box.height * rng.uniform(*slot["center_y"])
        cx = min(max(cx, box.x1 + pw / 2), box.x2 - pw / 2)
        cy = min(max(cy, box.y1 + ph / 2), box.y2 - ph / 2)
        px1, py1 = _r2(max(cx - pw / 2, box.x1)), _r2(max(cy - ph / 2, box.y1))
        pbox = Box(px1, py1, _r2(min(px1 + pw, box.x2)), _r2(min(py1 + ph, box.y2)))
        p_visible = slot.get("visible", 1.0) if config.visibility is None else config.visibility
        visible = int(rng.random() < p_visible)
        states = rng.random(4)
        unsure = rng.random(4) < config.unsure_prob
        contact = None
        if j in contact_slots:
            contact = tuple(int(UNSURE) if u else int(s < config.contact_prob) for s, u in zip(states, unsure))
        parts.append(PartAnnotation(pbox, visible, contact) if visible else None)
    return BodyAnnotation(f"b{index}", box, parts)


def _compatible(body: BodyAnnotation, placed: list[BodyAnnotation], config: SynthConfig) -> bool:
    for other in placed:
        if iou(body.box, other.box) > config.occlusion_cap:
            return False
        if config.occlusion_cap == 0.0 and _overlaps(body.box, other.box):
            return False
        for p, q in zip(body.parts, other.parts):
            if p is not None and q is not None and iou(p.box, q.box) > config.part_iou_cap:
                return False
    return True


def _overlaps(a: Box, b: Box) -> bool:
    return min(a.x2, b.x2) > max(a.x1, b.x1) and min(a.y2, b.y2) > max(a.y1, b.y1)


def unresolved_bodies(targets: TargetGrids, scene: Scene) -> set[int]:
    """Bodies whose own target (with every offset) or a visible part's target was overwritten away."""
    spec = targets.spec
    alive: dict[str, list] = {}
    for r in targets.records:
        if not r.overwritten:
            alive.setdefault(r.object_id, []).append(r)
    bad = set()
    lay = spec.layout
    for bi, body in enumerate(scene.bodies):
        visible = [j for j, p in enumerate(body.parts) if p is not None and p.visible]
        recs = alive.get(body.body_id, [])
        complete = False
        for r in recs:
            si = spec.stride_index(r.stride)
            off = targets.tensors[si][r.anchor, lay.off, r.row, r.col].reshape(spec.k, 2)
            if all(not np.isnan(off[j]).any() for j in visible):
                complete = True
                break
        if not complete:
            bad.add(bi)
        for j in visible:
            if not alive.get(f"{body.body_id}/{j}"):
                bad.add(bi)
    return bad


def gen_scene(config: SynthConfig, index: int, spec: GridSpec | None = None) -> Scene:
    layout = config.layout
    rng = image_streams(config.seed, index)[_STREAM_LAYOUT]
    lo, hi = config.bodies_per_image
    n_bodies = int(rng.integers(lo, hi + 1))
    placed: list[BodyAnnotation] = []
    attempts = 0
    while len(placed) < n_bodies and attempts < config.max_attempts:
        attempts += 1
        body = _draw_body(rng, config, layout, len(placed), spec)
        if _compatible(body, placed, config):
            placed.append(body)
    scene = Scene(f"img{index:06d}", config.image_w, config.image_h, placed)
    if spec is not None:
        while scene.bodies:
            bad = unresolved_bodies(assign(scene, spec), scene)
            if not bad:
                break
            drop = max(bad)
            scene.bodies = [b for i, b in enumerate(scene.bodies) if i != drop]
            for i, b in enumerate(scene.bodies):
                b.body_id = f"b{i}"
    return scene


def gen_scenes(config: SynthConfig, spec: GridSpec | None = None) -> list[Scene]:
    """Generate ``config.n_images`` scenes; with ``spec`` every scene is assignable without loss."""
    if spec is not None and spec.k != len(config.layout["slots"]):
        raise SynthError(f"grid spec has k={spec.k}, layout has {len(config.layout['slots'])} slots")
    return [gen_scene(config, i, spec) for i in range(config.n_images)]


# -- predicted grids ------------------------------------------------------------

def _saturated_raw(value: float, scale: float) -> float:
    u = min(max(value / scale, -2.0 + 4e-3), 2.0 - 4e-3)
    return logit((u + 2.0) / 4.0)


def perfect_prediction(targets: TargetGrids, scene: Scene) -> list[np.ndarray]:
    """Raw grids a flawless network would output for ``targets``.

    Offsets the target could not represent are written saturated toward the
    true point rather than left at zero.
    """
    spec = targets.spec
    lay = spec.layout
    out = []
    for t in targets.tensors:
        p = np.array(t, dtype=np.float64)
        if lay.obj is not None:
            p[:, lay.obj] = logit(clamp_prob(t[:, lay.obj]))
        p[:, lay.cls] = logit(clamp_prob(t[:, lay.cls]))
        if lay.cts:
            h = t[:, lay.cts]
            p[:, lay.cts] = np.where(h == UNSURE, 0.0, logit(clamp_prob(np.where(h == UNSURE, 0.5, h))))
        out.append(p)
    points = _object_points(scene, spec)
    for r in targets.records:
        if r.overwritten:
            continue
        si = spec.stride_index(r.stride)
        cell = out[si][r.anchor, :, r.row, r.col]
        if spec.variant is Variant.ANCHOR_FREE:
            sx = sy = 1.0
            ox, oy = r.col + 0.5, r.row + 0.5
        else:
            bw, bh = spec.anchors[si][r.anchor]
            sx, sy = bw / r.stride, bh / r.stride
            ox, oy = r.col, r.row
        for j, (px, py) in enumerate(points[r.object_id]):
            ix = lay.off.start + 2 * j
            if math.isnan(px) or not math.isnan(cell[ix]):
                continue
            cell[ix] = _saturated_raw(px / r.stride - ox, sx)
            cell[ix + 1] = _saturated_raw(py / r.stride - oy, sy)
    for p in out:
        np.nan_to_num(p, copy=False, nan=0.0)
    return out


def _object_points(scene: Scene, spec: GridSpec) -> dict[str, np.ndarray]:
    pts = {}
    for body in scene.bodies:
        own = np.full((spec.k, 2), np.nan)
        for j, p in enumerate(body.parts):
            if p is not None and p.visible:
                own[j] = p.box.center
                back = np.full((spec.k, 2), np.nan)
                back[j] = body.box.center
                pts[f"{body.body_id}/{j}"] = back
        pts[body.body_id] = own
    return pts


def render_predicted(scene: Scene, spec: GridSpec, noise: NoiseConfig | None = None, seed: int = 0,
                     index: int = 0, layout: dict | None = None,
                     targets: TargetGrids | None = None) -> list[np.ndarray]:
    """assign -> perfect raw prediction -> configured noise and error injection."""
    noise = noise or NoiseConfig()
    targets = targets or assign(scene, spec)
    pred = perfect_prediction(targets, scene)
    _, rng_noise, rng_inject = image_streams(seed, index)
    lay = spec.layout
    score_ch = [c for c in ([lay.obj] if lay.obj is not None else [])]
    score_ch += list(range(lay.cls.start, lay.cls.stop))
    if lay.cts:
        score_ch += list(range(lay.cts.start, lay.cts.stop))
    box_ch = list(range(lay.box.start, lay.box.stop))
    off_ch = list(range(lay.off.start, lay.off.stop))
    for p in pred if (noise.box or noise.offset or noise.score) else ():
        a, _, h, w = p.shape
        z_box = rng_noise.standard_normal((a, len(box_ch), h, w))
        z_off = rng_noise.standard_normal((a, len(off_ch), h, w))
        z_score = rng_noise.standard_normal((a, len(score_ch), h, w))
        if noise.box:
            p[:, box_ch] += noise.box * z_box
        if noise.offset:
            p[:, off_ch] += noise.offset * z_off
        if noise.score:
            p[:, score_ch] += noise.score * z_score
    _inject_false_negatives(pred, targets, spec, noise.fn_rate, rng_inject)
    _inject_false_positives(pred, targets, scene, spec, noise.fp_rate, rng_inject, layout)
    return pred


def _inject_false_negatives(pred, targets, spec, rate, rng):
    lay = spec.layout
    ids = sorted({r.object_id for r in targets.records})
    draws = rng.random(len(ids))
    if rate <= 0:
        return
    dropped = {oid for oid, u in zip(ids, draws) if u < rate}
    off = logit(PROB_EPS)
    for r in targets.records:
        if r.object_id in dropped:
            cell = pred[spec.stride_index(r.stride)][r.anchor, :, r.row, r.col]
            if lay.obj is not None:
                cell[lay.obj] = off
            else:
                cell[lay.cls] = off


def _inject_false_positives(pred, targets, scene, spec, rate, rng, layout):
    """Scatter spurious part predictions over free cells."""
    n_parts = sum(1 for b in scene.bodies for p in b.parts if p is not None and p.visible)
    count = int(rng.binomial(n_parts, rate)) if rate > 0 and n_parts else 0
    lay = spec.layout
    taken = {(spec.stride_index(r.stride), r.anchor, r.row, r.col) for r in targets.records}
    for _ in range(count):
        slot = int(rng.integers(spec.k))
        size = float(rng.uniform(6.0, 24.0))
        pw, ph = size, size * float(rng.uniform(0.8, 1.25))
        cx = float(rng.uniform(pw / 2, spec.image_w - pw / 2))
        cy = float(rng.uniform(ph / 2, spec.image_h - ph / 2))
        conf = float(rng.uniform(0.3, 0.9))
        placed = False
        for si, s in enumerate(spec.strides):
            for ai, anchor in enumerate(spec.anchors[si]):
                if spec.variant is not Variant.ANCHOR_FREE and not anchor_match(pw, ph, anchor, spec.anchor_ratio_max):
                    continue
                col, row = int(cx // s), int(cy // s)
                if (si, ai, row, col) in taken:
                    continue
                cell = pred[si][ai, :, row, col]
                cls = np.full(spec.k + 1, PROB_EPS)
                cls[slot + 1] = 1.0 - PROB_EPS
                cell[lay.cls] = logit(cls)
                if spec.variant is Variant.ANCHOR_FREE:
                    px, py = col + 0.5, row + 0.5
                    cell[lay.box] = [px - (cx - pw / 2) / s, py - (cy - ph / 2) / s,
                                     (cx + pw / 2) / s - px, (cy + ph / 2) / s - py]
                    cell[lay.cls] = logit(np.where(np.arange(spec.k + 1) == slot + 1, conf, PROB_EPS))
                else:
                    sx, sy = anchor[0] / s, anchor[1] / s
                    rel = ((cx / s - col + 0.5) / 2.0, (cy / s - row + 0.5) / 2.0,
                           math.sqrt(pw / s / sx) / 2.0, math.sqrt(ph / s / sy) / 2.0)
                    cell[lay.box] = logit(clamp_prob(np.asarray(rel)))
                    cell[lay.obj] = logit(conf)
                cell[lay.off] = 0.0
                taken.add((si, ai, row, col))
                placed = True
                break
            if placed:
                break


def identity_predictions(scenes: Sequence[Scene], spec: GridSpec) -> list[list[np.ndarray]]:
    return [perfect_prediction(assign(s, spec), s) for s in scenes]


def config_from_dict(d: dict[str, Any]) -> SynthConfig:
    known = set(SynthConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise SynthError(f"unknown synth config keys: {sorted(unknown)}")
    return SynthConfig(**d)

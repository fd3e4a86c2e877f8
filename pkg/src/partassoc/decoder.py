"""Predicted grids -> associated body/part detections."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box, inner_iou
from .representation import Candidates, GridSpec, decode_grid

log = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    body_conf: float = 0.05
    body_iou: float = 0.6
    part_conf: float = 0.1
    part_iou: float = 0.3
    inner_iou: float = 0.6
    require_association: int | None = None
    max_detections: int = 300
    contact_hand_weight: float = 0.6
    contact_body_weight: float = 0.4
    update_rule: str = "confidence"  # "confidence" or "nearest_wins" (non-default)

    def __post_init__(self):
        for name in ("body_conf", "body_iou", "part_conf", "part_iou", "inner_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be positive")
        if self.update_rule not in ("confidence", "nearest_wins"):
            raise ValueError("update_rule must be 'confidence' or 'nearest_wins'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PartDetection:
    box: Box
    score: float
    slot: int
    contact: np.ndarray | None = None  # (4,) probabilities from the part instance

    @property
    def center(self) -> tuple[float, float]:
        return self.box.center


@dataclass
class AssociatedDetection:
    box: Box
    score: float
    parts: list[PartDetection | None]
    points: np.ndarray | None = None   # (k, 2) predicted part centers
    contact: np.ndarray | None = None  # (2, 4) body instance contact probabilities
    contact_scores: list[list[float] | None] = field(default_factory=list)


@dataclass
class ImageDetections:
    image_id: str
    bodies: list[AssociatedDetection]
    unassociated: list[PartDetection] = field(default_factory=list)
    stats: dict = field(default_factory=dict)


def nms(boxes: np.ndarray, scores: np.ndarray, conf_thresh: float, iou_thresh: float,
        max_keep: int | None = None) -> np.ndarray:
    """Greedy NMS over one group; returns kept indices in descending score.

    Boxes scoring at or below ``conf_thresh`` are dropped first. Equal scores
    keep the lower index first.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    cand = np.flatnonzero(scores > conf_thresh)
    if len(cand) == 0:
        return cand
    cand = cand[np.lexsort((cand, -scores[cand]))]
    b = boxes[cand]
    x1, y1, x2, y2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    area = (x2 - x1) * (y2 - y1)
    alive = np.ones(len(cand), dtype=bool)
    keep = []
    for i in range(len(cand)):
        if not alive[i]:
            continue
        keep.append(cand[i])
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = np.flatnonzero(alive[i + 1:]) + i + 1
        if len(rest) == 0:
            break
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = area[i] + area[rest] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            overlap = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        alive[rest[overlap > iou_thresh]] = False
    return np.asarray(keep, dtype=np.int64)


def fuse_contact(hand_probs, body_probs, w_hand: float = 0.6, w_body: float = 0.4) -> np.ndarray:
    """Weighted sum of hand-instance and body-instance contact probabilities."""
    if w_hand < 0 or w_body < 0 or w_hand + w_body <= 0:
        raise ValueError(f"invalid contact fusion weights ({w_hand}, {w_body})")
    total = w_hand + w_body
    if not math.isclose(total, 1.0, abs_tol=1e-12):
        log.warning("contact fusion weights (%g, %g) do not sum to 1; normalising", w_hand, w_body)
        w_hand, w_body = w_hand / total, w_body / total
    return w_hand * np.asarray(hand_probs, dtype=np.float64) + w_body * np.asarray(body_probs, dtype=np.float64)


def associate(body_boxes: np.ndarray, body_points: np.ndarray, part_boxes: np.ndarray,
              part_scores: np.ndarray, part_slots: np.ndarray, inner_thresh: float = 0.6,
              update_rule: str = "confidence") -> np.ndarray:
    """Assign parts to body slots; returns an ``(n_bodies, k)`` index array (-1 = empty).

    Parts are visited in the given order. Each part looks only at the body
    whose predicted center for the part's slot is nearest (lowest index on
    ties) and replaces the slot's occupant when its confidence is strictly
    higher and the inner-IoU gate passes.
    """
    body_boxes = np.asarray(body_boxes, dtype=np.float64).reshape(-1, 4)
    n_b = len(body_boxes)
    body_points = np.asarray(body_points, dtype=np.float64)
    k = body_points.shape[1] if body_points.ndim == 3 else 0
    if n_b == 0:
        return np.zeros((0, k), dtype=np.int64)
    slots = np.full((n_b, k), -1, dtype=np.int64)
    stored_conf = np.zeros((n_b, k))
    stored_dist = np.full((n_b, k), np.inf)
    for pi in range(len(part_scores)):
        box = part_boxes[pi]
        j = int(part_slots[pi])
        cx, cy = (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0
        dist = np.hypot(body_points[:, j, 0] - cx, body_points[:, j, 1] - cy)
        b = int(np.argmin(dist))
        gate = inner_iou(Box.from_seq(body_boxes[b]), Box.from_seq(box)) > inner_thresh
        if not gate:
            continue
        if update_rule == "confidence":
            better = part_scores[pi] > stored_conf[b, j]
        else:
            better = dist[b] < stored_dist[b, j]
        if better:
            slots[b, j] = pi
            stored_conf[b, j] = part_scores[pi]
            stored_dist[b, j] = dist[b]
    return slots


def double_check(detections: list[AssociatedDetection], slot: int, k: int):
    """Keep only bodies whose ``slot`` holds an associated part."""
    if not 0 <= slot < k:
        raise ValueError(f"check slot {slot} out of range for k={k}")
    kept = [d for d in detections if d.parts[slot] is not None]
    return kept, len(detections) - len(kept)


def gather_candidates(grids: Sequence[np.ndarray], spec: GridSpec, config: DecodeConfig) -> Candidates:
    floor = np.full(spec.k + 1, config.part_conf)
    floor[0] = config.body_conf
    items, base = [], 0
    for s, g in zip(spec.strides, grids):
        items.append(decode_grid(g, spec, s, conf_floor=float(floor.min()), class_floor=floor, base_order=base))
        base += int(np.prod(g.shape)) // g.shape[1]
    return Candidates.concat(items, spec.k, spec.has_contact)


def decode_image(grids: Sequence[np.ndarray], spec: GridSpec, config: DecodeConfig | None = None,
                 image_id: str = "") -> ImageDetections:
    """NMS, association and optional double check for one image."""
    config = config or DecodeConfig()
    cand = gather_candidates(grids, spec, config)
    body_idx = np.flatnonzero(cand.classes == 0)
    kept_b = body_idx[nms(cand.boxes[body_idx], cand.scores[body_idx], config.body_conf,
                          config.body_iou, config.max_detections)]
    part_keep = []
    for j in range(spec.k):
        idx = np.flatnonzero(cand.classes == j + 1)
        part_keep.append(idx[nms(cand.boxes[idx], cand.scores[idx], config.part_conf,
                                 config.part_iou, config.max_detections)])
    kept_p = np.concatenate(part_keep) if part_keep else np.zeros(0, dtype=np.int64)
    if len(kept_p):
        kept_p = kept_p[np.lexsort((cand.order[kept_p], -cand.scores[kept_p]))]
    bodies, parts = cand.take(kept_b), cand.take(kept_p)
    slots = associate(bodies.boxes, bodies.points, parts.boxes, parts.scores, parts.classes - 1,
                      config.inner_iou, config.update_rule)

    def part_at(pi: int) -> PartDetection:
        slot = int(parts.classes[pi]) - 1
        contact = None
        if parts.contact is not None:
            block = spec.contact_block(slot)
            if block is not None:
                contact = parts.contact[pi, block]
        return PartDetection(Box.from_seq(parts.boxes[pi]), float(parts.scores[pi]), slot, contact)

    used = set()
    out = []
    for bi in range(len(bodies)):
        det_parts: list[PartDetection | None] = []
        fused: list[list[float] | None] = []
        for j in range(spec.k):
            pi = int(slots[bi, j])
            if pi < 0:
                det_parts.append(None)
                fused.append(None)
                continue
            used.add(pi)
            p = part_at(pi)
            det_parts.append(p)
            block = spec.contact_block(j)
            if block is not None and p.contact is not None and bodies.contact is not None:
                fused.append([float(v) for v in fuse_contact(p.contact, bodies.contact[bi, block],
                                                              config.contact_hand_weight,
                                                              config.contact_body_weight)])
            else:
                fused.append(None)
        out.append(AssociatedDetection(Box.from_seq(bodies.boxes[bi]), float(bodies.scores[bi]),
                                       det_parts, bodies.points[bi],
                                       None if bodies.contact is None else bodies.contact[bi], fused))
    unassociated = [part_at(pi) for pi in range(len(parts)) if pi not in used]
    stats = {"candidates": len(cand), "bodies_after_nms": len(bodies), "parts_after_nms": len(parts)}
    if config.require_association is not None:
        out, dropped = double_check(out, config.require_association, spec.k)
        stats["double_check_dropped"] = dropped
        unassociated = []
    return ImageDetections(image_id, out, unassociated, stats)

"""Detection and association metrics.

All curves are step curves over the sorted distinct score thresholds, so a
detection's position inside a group of tied scores never changes a metric.
Matching is greedy, highest score first, each ground truth used at most once
(best-IoU unmatched ground truth above the threshold).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .assigner import Scene
from .decoder import ImageDetections
from .geometry import iou_matrix

MR_FLOOR = 1e-10


@dataclass
class MatchProtocol:
    iou_threshold: float = 0.5
    fppi_points: tuple[float, ...] = tuple(float(v) for v in np.logspace(-2.0, 0.0, 9))
    ap_interpolation: str = "all-point"
    pair_score: str = "body"  # body | min | part

    def __post_init__(self):
        self.fppi_points = tuple(float(v) for v in self.fppi_points)
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie in (0, 1)")
        if list(self.fppi_points) != sorted(self.fppi_points):
            raise ValueError("fppi_points must be sorted ascending")
        if self.ap_interpolation != "all-point":
            raise ValueError("only all-point interpolation is supported")
        if self.pair_score not in ("body", "min", "part"):
            raise ValueError("pair_score must be body, min or part")

    def to_dict(self) -> dict:
        return {"iou_threshold": self.iou_threshold, "fppi_points": list(self.fppi_points),
                "ap_interpolation": self.ap_interpolation, "pair_score": self.pair_score}


@dataclass
class ImageBoxes:
    """Scored detections and ground truths of one class in one image."""

    det_boxes: np.ndarray
    det_scores: np.ndarray
    gt_boxes: np.ndarray
    det_keys: np.ndarray | None = None  # optional secondary ranking key

    @classmethod
    def make(cls, det_boxes, det_scores, gt_boxes, det_keys=None) -> "ImageBoxes":
        return cls(np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4),
                   np.asarray(det_scores, dtype=np.float64).reshape(-1),
                   np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4),
                   None if det_keys is None else np.asarray(det_keys, dtype=np.float64).reshape(-1))


@dataclass
class Ranked:
    """Detections in global rank order with their outcome."""

    keys: list[tuple]   # ranking key per detection (distinct keys define thresholds)
    tp: np.ndarray
    fp: np.ndarray
    npos: int
    extra: dict = field(default_factory=dict)


def rank_order(scores: np.ndarray, image_index: np.ndarray, boxes: np.ndarray,
               secondary: np.ndarray | None = None) -> np.ndarray:
    """Deterministic order: score desc, secondary desc, image, then box coordinates."""
    cols = [boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], image_index]
    if secondary is not None:
        cols.append(-secondary)
    cols.append(-scores)
    return np.lexsort(cols)


def greedy_match(det_boxes: np.ndarray, gt_boxes: np.ndarray, thresh: float,
                 taken: np.ndarray | None = None) -> np.ndarray:
    """Match detections (already in rank order) to ground truths; -1 = unmatched."""
    out = np.full(len(det_boxes), -1, dtype=np.int64)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return out
    ious = iou_matrix(det_boxes, gt_boxes)
    used = np.zeros(len(gt_boxes), dtype=bool) if taken is None else taken
    for i in range(len(det_boxes)):
        row = np.where(used, -1.0, ious[i])
        g = int(np.argmax(row))
        if row[g] >= thresh:
            out[i] = g
            used[g] = True
    return out


def _rank_images(images: Sequence[ImageBoxes]):
    boxes, scores, img, sec, local = [], [], [], [], []
    for ii, im in enumerate(images):
        n = len(im.det_scores)
        boxes.append(im.det_boxes)
        scores.append(im.det_scores)
        img.append(np.full(n, ii))
        sec.append(im.det_keys if im.det_keys is not None else np.zeros(n))
        local.append(np.arange(n))
    if not images:
        return (np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0),
                np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    boxes, scores = np.concatenate(boxes), np.concatenate(scores)
    img, sec, local = np.concatenate(img).astype(np.int64), np.concatenate(sec), np.concatenate(local)
    has_sec = any(im.det_keys is not None for im in images)
    order = rank_order(scores, img, boxes, sec if has_sec else None)
    return boxes, scores, img, sec, local, order


def rank_detections(images: Sequence[ImageBoxes], thresh: float) -> Ranked:
    boxes, scores, img, sec, local, order = _rank_images(images)
    tp = np.zeros(len(order), dtype=bool)
    matched = np.full(len(order), -1, dtype=np.int64)
    for ii, im in enumerate(images):
        pos = np.flatnonzero(img[order] == ii)
        if len(pos) == 0:
            continue
        m = greedy_match(boxes[order][pos], im.gt_boxes, thresh)
        tp[pos] = m >= 0
        matched[pos] = m
    keys = list(zip((-scores[order]).tolist(), (-sec[order]).tolist()))
    npos = sum(len(im.gt_boxes) for im in images)
    return Ranked(keys, tp, ~tp, npos, {"matched": matched, "image": img[order], "local": local[order]})


def _group_ends(keys: list[tuple]) -> np.ndarray:
    n = len(keys)
    return np.asarray([i for i in range(n) if i == n - 1 or keys[i] != keys[i + 1]], dtype=np.int64)


def pr_curve(r: Ranked) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision at every distinct threshold."""
    if len(r.keys) == 0 or r.npos == 0:
        return np.zeros(0), np.zeros(0)
    ends = _group_ends(r.keys)
    ctp = np.cumsum(r.tp)[ends]
    cfp = np.cumsum(r.fp)[ends]
    return ctp / r.npos, ctp / np.maximum(ctp + cfp, 1)


def ap_from_curve(recall: np.ndarray, precision: np.ndarray) -> float:
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def voc_ap(images: Sequence[ImageBoxes], protocol: MatchProtocol | None = None) -> float | None:
    protocol = protocol or MatchProtocol()
    ranked = rank_detections(images, protocol.iou_threshold)
    if ranked.npos == 0:
        return None
    return ap_from_curve(*pr_curve(ranked))


def fppi_curve(r: Ranked, n_images: int) -> tuple[np.ndarray, np.ndarray]:
    """FPPI and miss rate at every distinct threshold, preceded by the empty operating point."""
    if len(r.keys) == 0:
        return np.zeros(1), np.ones(1)
    ends = _group_ends(r.keys)
    ctp = np.cumsum(r.tp)[ends]
    cfp = np.cumsum(r.fp)[ends]
    fppi = np.concatenate([[0.0], cfp / max(n_images, 1)])
    miss = np.concatenate([[1.0], 1.0 - ctp / r.npos])
    return fppi, miss


def log_average(fppi: np.ndarray, values: np.ndarray, refs: Sequence[float], missing: float = 1.0) -> float:
    """Log-average of ``values`` sampled at each reference FPPI.

    Each reference takes the last operating point whose FPPI does not exceed
    it; references below every operating point use ``missing``.
    """
    samples = []
    for ref in refs:
        idx = np.flatnonzero(fppi <= ref)
        samples.append(values[idx[-1]] if len(idx) else missing)
    samples = np.maximum(np.asarray(samples, dtype=np.float64), MR_FLOOR)
    out = float(np.exp(np.mean(np.log(samples))))
    return 0.0 if out <= MR_FLOOR * (1.0 + 1e-9) else out


def mr2(images: Sequence[ImageBoxes], protocol: MatchProtocol | None = None,
        n_images: int | None = None) -> float | None:
    protocol = protocol or MatchProtocol()
    ranked = rank_detections(images, protocol.iou_threshold)
    if ranked.npos == 0:
        return None
    fppi, miss = fppi_curve(ranked, len(images) if n_images is None else n_images)
    return log_average(fppi, miss, protocol.fppi_points)


# -- pair metrics --------------------------------------------------------------

@dataclass
class PairImage:
    """Detected bodies with their slot parts, and ground-truth pairs, for one image.

    Part entries are ``None`` or ``(box, score)``; ground-truth part entries
    are ``None`` or a box.
    """

    det_bodies: np.ndarray
    det_scores: np.ndarray
    det_parts: list[list[tuple[np.ndarray, float] | None]]
    gt_bodies: np.ndarray
    gt_parts: list[list[np.ndarray | None]]


def _box_iou(a, b) -> float:
    return float(iou_matrix(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def mmr2_curve(images: Sequence[PairImage], protocol: MatchProtocol, slots: Sequence[int] | None = None):
    """FPPI and miss-matching rate per distinct pair-score threshold."""
    thr = protocol.iou_threshold
    rows = []  # (score, image, body rank, slot, is_fp, body_matched, correct)
    gt_pairs = 0
    for ii, im in enumerate(images):
        k = len(im.det_parts[0]) if im.det_parts else (len(im.gt_parts[0]) if im.gt_parts else 0)
        use = range(k) if slots is None else slots
        gt_pairs += sum(1 for parts in im.gt_parts for j in use if parts[j] is not None)
        order = rank_order(im.det_scores, np.zeros(len(im.det_scores)), im.det_bodies)
        match = np.full(len(order), -1, dtype=np.int64)
        match[order] = greedy_match(im.det_bodies[order], im.gt_bodies, thr)
        for rank, bi in enumerate(order):
            for j in use:
                part = im.det_parts[bi][j]
                if part is None:
                    continue
                pbox, pscore = part
                bscore = float(im.det_scores[bi])
                score = {"body": bscore, "part": pscore, "min": min(bscore, pscore)}[protocol.pair_score]
                g = int(match[bi])
                correct = False
                if g >= 0:
                    gpart = im.gt_parts[g][j]
                    correct = gpart is not None and _box_iou(pbox, gpart) >= thr
                rows.append((-score, ii, rank, j, g < 0, g >= 0, correct))
    if gt_pairs == 0:
        return None
    rows.sort(key=lambda r: r[:4])
    if not rows:
        return np.zeros(0), np.zeros(0)
    keys = [(r[0],) for r in rows]
    ends = _group_ends(keys)
    cfp = np.cumsum([r[4] for r in rows])[ends]
    n_p = np.cumsum([r[5] for r in rows])[ends]
    n_mp = np.cumsum([r[6] for r in rows])[ends]
    mmr = np.where(n_p > 0, 1.0 - n_mp / np.maximum(n_p, 1), 1.0)
    return cfp / max(len(images), 1), mmr


def mmr2(images: Sequence[PairImage], protocol: MatchProtocol | None = None,
         slots: Sequence[int] | None = None) -> float | None:
    protocol = protocol or MatchProtocol()
    curve = mmr2_curve(images, protocol, slots)
    if curve is None:
        return None
    fppi, mmr = curve
    return log_average(fppi, mmr, protocol.fppi_points, missing=1.0)


def _pair_outcomes(images: Sequence[PairImage], slot: int, thr: float):
    """Rank detected pairs of one slot by part score; match parts then check bodies."""
    rows = []
    npos = 0
    for ii, im in enumerate(images):
        gt_idx = [g for g, parts in enumerate(im.gt_parts) if parts[slot] is not None]
        npos += len(gt_idx)
        gt_boxes = np.asarray([im.gt_parts[g][slot] for g in gt_idx], dtype=np.float64).reshape(-1, 4)
        pairs = [(bi, im.det_parts[bi][slot]) for bi in range(len(im.det_parts))
                 if im.det_parts[bi][slot] is not None]
        if not pairs:
            continue
        pboxes = np.asarray([p[0] for _, p in pairs], dtype=np.float64).reshape(-1, 4)
        pscores = np.asarray([p[1] for _, p in pairs], dtype=np.float64)
        order = rank_order(pscores, np.zeros(len(pairs)), pboxes)
        m = greedy_match(pboxes[order], gt_boxes, thr)
        for pos, pi in enumerate(order):
            bi = pairs[pi][0]
            part_ok = m[pos] >= 0
            body_ok = part_ok and _box_iou(im.det_bodies[bi], im.gt_bodies[gt_idx[m[pos]]]) >= thr
            rows.append((-float(pscores[pi]), ii, pos, part_ok, body_ok))
    rows.sort(key=lambda r: r[:3])
    return rows, npos


def joint_ap(images: Sequence[PairImage], protocol: MatchProtocol | None = None,
             slot: int = 0) -> float | None:
    protocol = protocol or MatchProtocol()
    rows, npos = _pair_outcomes(images, slot, protocol.iou_threshold)
    if npos == 0:
        return None
    tp = np.asarray([r[4] for r in rows], dtype=bool)
    ranked = Ranked([(r[0],) for r in rows], tp, ~tp, npos)
    return ap_from_curve(*pr_curve(ranked))


def cond_accuracy(images: Sequence[PairImage], protocol: MatchProtocol | None = None,
                  slot: int = 0) -> float | None:
    protocol = protocol or MatchProtocol()
    rows, _ = _pair_outcomes(images, slot, protocol.iou_threshold)
    matched = [r for r in rows if r[3]]
    if not matched:
        return None
    return 100.0 * sum(1 for r in matched if r[4]) / len(matched)


# -- contact -------------------------------------------------------------------

CONTACT_STATE_NAMES = ("NC", "SC", "PC", "OC")


@dataclass
class ContactImage:
    det_boxes: np.ndarray      # (n, 4)
    det_box_scores: np.ndarray  # (n,)
    det_state_scores: np.ndarray  # (n, 4)
    gt_boxes: np.ndarray       # (m, 4)
    gt_states: np.ndarray      # (m, 4) in {0, 1, 2}


def contact_ap(images: Sequence[ContactImage], protocol: MatchProtocol | None = None) -> dict:
    """Per-state AP ranked by state score (box score breaks ties) plus their mean."""
    protocol = protocol or MatchProtocol()
    thr = protocol.iou_threshold
    aps: dict[str, float | None] = {}
    for state, name in enumerate(CONTACT_STATE_NAMES):
        rows = []
        npos = 0
        for ii, im in enumerate(images):
            gstates = np.asarray(im.gt_states).reshape(-1, 4)
            npos += int(np.sum(gstates[:, state] == 1))
            if len(im.det_boxes) == 0:
                continue
            scores = np.asarray(im.det_state_scores)[:, state]
            order = rank_order(scores, np.zeros(len(scores)), im.det_boxes, im.det_box_scores)
            m = greedy_match(im.det_boxes[order], np.asarray(im.gt_boxes).reshape(-1, 4), thr)
            for pos, di in enumerate(order):
                g = int(m[pos])
                label = gstates[g, state] if g >= 0 else 0
                if label == 2:
                    continue
                rows.append((-float(scores[di]), -float(im.det_box_scores[di]), ii, pos, label == 1))
        if npos == 0:
            aps[name] = None
            continue
        rows.sort(key=lambda r: r[:4])
        tp = np.asarray([r[4] for r in rows], dtype=bool)
        ranked = Ranked([r[:2] for r in rows], tp, ~tp, npos)
        aps[name] = ap_from_curve(*pr_curve(ranked))
    present = [v for v in aps.values() if v is not None]
    return {"per_state": aps, "mAP": float(np.mean(present)) if present else None}


def precision(images: Sequence[ImageBoxes], thresh: float = 0.5) -> float | None:
    ranked = rank_detections(images, thresh)
    n = len(ranked.tp)
    return None if n == 0 else float(ranked.tp.sum() / n)


# -- whole-report evaluation -------------------------------------------------------

def _align(detections: Sequence[ImageDetections], scenes: Sequence[Scene]) -> list[ImageDetections]:
    by_id = {}
    for d in detections:
        if d.image_id in by_id:
            raise ValueError(f"duplicate detection record for image {d.image_id!r}")
        by_id[d.image_id] = d
    known = {s.image_id for s in scenes}
    unknown = sorted(set(by_id) - known)
    if unknown:
        raise ValueError(f"detections for images missing from ground truth: {unknown[:5]}")
    return [by_id.get(s.image_id, ImageDetections(s.image_id, [])) for s in scenes]


def _boxes(items) -> np.ndarray:
    return np.asarray([b.as_tuple() for b in items], dtype=np.float64).reshape(-1, 4)


def evaluate(detections: Sequence[ImageDetections], scenes: Sequence[Scene], part_labels: Sequence[str],
             protocol: MatchProtocol | None = None, contact_slots: Sequence[int] | None = None,
             curves: bool = True) -> dict:
    protocol = protocol or MatchProtocol()
    dets = _align(detections, scenes)
    k = len(part_labels)
    n_images = len(scenes)
    thr = protocol.iou_threshold
    report: dict = {"n_images": n_images, "protocol": protocol.to_dict(), "part_labels": list(part_labels)}
    curve_out: dict = {}

    body_imgs = [ImageBoxes.make(_boxes(d.box for d in det.bodies), [d.score for d in det.bodies],
                                 _boxes(b.box for b in sc.bodies)) for det, sc in zip(dets, scenes)]
    report["body"] = _class_metrics(body_imgs, protocol, n_images, curve_out, "body")
    report["parts"] = {}
    for j, label in enumerate(part_labels):
        imgs = []
        for det, sc in zip(dets, scenes):
            found = [p for d in det.bodies for p in [d.parts[j]] if p is not None]
            found += [p for p in det.unassociated if p.slot == j]
            gts = [b.parts[j].box for b in sc.bodies if b.parts[j] is not None and b.parts[j].visible]
            imgs.append(ImageBoxes.make(_boxes(p.box for p in found), [p.score for p in found], _boxes(gts)))
        entry = _class_metrics(imgs, protocol, n_images, curve_out, label)
        entry["precision"] = precision(imgs, thr)
        report["parts"][label] = entry

    pair_imgs = []
    for det, sc in zip(dets, scenes):
        pair_imgs.append(PairImage(
            _boxes(d.box for d in det.bodies), np.asarray([d.score for d in det.bodies], dtype=np.float64),
            [[None if p is None else (np.asarray(p.box.as_tuple()), p.score) for p in d.parts] for d in det.bodies],
            _boxes(b.box for b in sc.bodies),
            [[None if (p is None or not p.visible) else np.asarray(p.box.as_tuple()) for p in b.parts]
             for b in sc.bodies]))
    per_slot_mmr = {label: mmr2(pair_imgs, protocol, [j]) for j, label in enumerate(part_labels)}
    per_slot_jap = {label: joint_ap(pair_imgs, protocol, j) for j, label in enumerate(part_labels)}
    per_slot_acc = {label: cond_accuracy(pair_imgs, protocol, j) for j, label in enumerate(part_labels)}
    report["pairs"] = {
        "mmr2": mmr2(pair_imgs, protocol),
        "mmr2_per_slot": per_slot_mmr,
        "joint_ap": _mean_present(per_slot_jap.values()),
        "joint_ap_per_slot": per_slot_jap,
        "cond_accuracy": _pooled_accuracy(pair_imgs, protocol, k),
        "cond_accuracy_per_slot": per_slot_acc,
    }
    if curves:
        c = mmr2_curve(pair_imgs, protocol)
        if c is not None:
            curve_out["pairs"] = {"fppi_mmr": [[float(f), float(m)] for f, m in zip(*c)]}
    if contact_slots:
        cimgs = []
        for det, sc in zip(dets, scenes):
            boxes, bscores, sscores, gboxes, gstates = [], [], [], [], []
            for d in det.bodies:
                for j in contact_slots:
                    p = d.parts[j]
                    if p is not None and j < len(d.contact_scores) and d.contact_scores[j] is not None:
                        boxes.append(p.box.as_tuple())
                        bscores.append(p.score)
                        sscores.append(d.contact_scores[j])
            for b in sc.bodies:
                for j in contact_slots:
                    p = b.parts[j]
                    if p is not None and p.visible and p.contact is not None:
                        gboxes.append(p.box.as_tuple())
                        gstates.append(p.contact)
            cimgs.append(ContactImage(np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                                      np.asarray(bscores, dtype=np.float64),
                                      np.asarray(sscores, dtype=np.float64).reshape(-1, 4),
                                      np.asarray(gboxes, dtype=np.float64).reshape(-1, 4),
                                      np.asarray(gstates, dtype=np.int64).reshape(-1, 4)))
        report["contact"] = contact_ap(cimgs, protocol)
    if curves:
        report["curves"] = curve_out
    return report


def _class_metrics(imgs, protocol, n_images, curve_out, name) -> dict:
    ranked = rank_detections(imgs, protocol.iou_threshold)
    if ranked.npos == 0:
        return {"ap": None, "mr2": None, "n_gt": 0, "n_det": len(ranked.tp)}
    recall, prec = pr_curve(ranked)
    fppi, miss = fppi_curve(ranked, n_images)
    curve_out[name] = {"pr": [[float(r), float(p)] for r, p in zip(recall, prec)],
                       "fppi_mr": [[float(f), float(m)] for f, m in zip(fppi, miss)]}
    return {"ap": ap_from_curve(recall, prec), "mr2": log_average(fppi, miss, protocol.fppi_points),
            "n_gt": ranked.npos, "n_det": len(ranked.tp)}


def _mean_present(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _pooled_accuracy(images, protocol, k) -> float | None:
    matched = correct = 0
    for j in range(k):
        rows, _ = _pair_outcomes(images, j, protocol.iou_threshold)
        matched += sum(1 for r in rows if r[3])
        correct += sum(1 for r in rows if r[4])
    return None if matched == 0 else 100.0 * correct / matched


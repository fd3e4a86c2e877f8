"""Ground-truth scenes and their conversion into target grids.

A target grid uses the prediction channel layout with label semantics:
objectness holds the hit indicator ``o`` in {0, 1}, box and offset channels
hold raw (pre-sigmoid) encoded values, class channels hold the one-hot class,
contact channels hold the ground-truth state in {0, 1, 2}.  Offset slots that
carry no target are ``nan``; contact states without a target are 2 (Unsure).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, inner_iou
from .representation import (
    N_CONTACT_HANDS,
    N_CONTACT_STATES,
    GridSpec,
    Variant,
    clamp_prob,
    logit,
    offset_in_range,
)

MIN_OBJECT_SIZE = 2.0
UNSURE = 2


class SceneError(ValueError):
    pass


@dataclass
class PartAnnotation:
    box: Box
    visible: int = 1
    contact: tuple[int, ...] | None = None


@dataclass
class BodyAnnotation:
    body_id: str
    box: Box
    parts: list[PartAnnotation | None]


@dataclass
class Scene:
    image_id: str
    width: int
    height: int
    bodies: list[BodyAnnotation] = field(default_factory=list)

    def validate(self, k: int | None = None, require_containment: bool = False, contact: bool | None = None):
        frame = Box(0.0, 0.0, float(self.width), float(self.height))
        for b in self.bodies:
            where = f"image {self.image_id!r} body {b.body_id!r}"
            if not frame.contains(b.box):
                raise SceneError(f"{where}: box {b.box.as_tuple()} outside image bounds")
            if k is not None and len(b.parts) != k:
                raise SceneError(f"{where}: {len(b.parts)} part slots, expected {k}")
            for j, p in enumerate(b.parts):
                if p is None:
                    continue
                if not frame.contains(p.box):
                    raise SceneError(f"{where} slot {j}: part box outside image bounds")
                if p.visible not in (0, 1):
                    raise SceneError(f"{where} slot {j}: visible must be 0 or 1")
                if require_containment and inner_iou(b.box, p.box) < 1.0:
                    raise SceneError(f"{where} slot {j}: part not contained in body")
                if p.contact is not None:
                    if contact is False:
                        raise SceneError(f"{where} slot {j}: contact states need the contact variant")
                    if len(p.contact) != N_CONTACT_STATES or any(s not in (0, 1, 2) for s in p.contact):
                        raise SceneError(f"{where} slot {j}: contact must be 4 states in {{0,1,2}}")


@dataclass
class MatchRecord:
    object_id: str
    body_index: int
    slot: int | None  # None for the body itself
    stride: int
    anchor: int
    row: int
    col: int
    neighbor: bool
    overwritten: bool = False


@dataclass
class TargetGrids:
    spec: GridSpec
    tensors: list[np.ndarray]
    records: list[MatchRecord]
    warnings: list[str]
    diagnostics: dict[str, int]

    def obj_mask(self, si: int) -> np.ndarray:
        return target_obj_mask(self.tensors[si], self.spec)


def target_obj_mask(tensor: np.ndarray, spec: GridSpec) -> np.ndarray:
    """``(A, H, W)`` boolean mask of cells that carry an object target."""
    lay = spec.layout
    if lay.obj is not None:
        return tensor[:, lay.obj] > 0.5
    return tensor[:, lay.cls].max(axis=1) > 0.5


def anchor_match(gt_w: float, gt_h: float, anchor: tuple[float, float], r_max: float = 4.0) -> bool:
    bw, bh = anchor
    if gt_w <= 0 or gt_h <= 0 or bw <= 0 or bh <= 0:
        raise ValueError(f"dimensions must be positive: gt=({gt_w}, {gt_h}) anchor=({bw}, {bh})")
    return max(gt_w / bw, bw / gt_w) < r_max and max(gt_h / bh, bh / gt_h) < r_max


def responsible_cells(cx: float, cy: float, stride: int, rows: int, cols: int,
                      candidates: int = 2) -> list[tuple[int, int, bool]]:
    """Cells ``(col, row, is_neighbor)`` that predict a center at pixel ``(cx, cy)``.

    Neighbours whose relative center would fall outside the open decode
    range (-0.5, 1.5) are left out.
    """
    gx, gy = cx / stride, cy / stride
    col, row = min(int(math.floor(gx)), cols - 1), min(int(math.floor(gy)), rows - 1)
    cells = [(col, row, False)]
    if candidates == 0:
        return cells
    fx, fy = gx - col, gy - row
    if candidates == 2:
        around = [(col - 1 if fx < 0.5 else col + 1, row), (col, row - 1 if fy < 0.5 else row + 1)]
    else:
        around = [(col - 1, row), (col + 1, row), (col, row - 1), (col, row + 1)]
    for c, r in around:
        if not (0 <= c < cols and 0 <= r < rows):
            continue
        if -0.5 < gx - c < 1.5 and -0.5 < gy - r < 1.5:
            cells.append((c, r, True))
    return cells


@dataclass
class _Obj:
    object_id: str
    body_index: int
    slot: int | None
    box: Box
    class_index: int
    points: np.ndarray  # (k, 2) pixel target points, nan = none
    contact: np.ndarray  # (2, 4) states


def _objects(scene: Scene, spec: GridSpec, warnings: list[str]) -> list[_Obj]:
    k = spec.k
    objs = []
    for bi, body in enumerate(scene.bodies):
        visible = [(j, p) for j, p in enumerate(body.parts) if p is not None and p.visible]
        points = np.full((k, 2), np.nan)
        contact = np.full((N_CONTACT_HANDS, N_CONTACT_STATES), UNSURE, dtype=np.float64)
        for j, p in visible:
            points[j] = p.box.center
            block = spec.contact_block(j)
            if block is not None and p.contact is not None:
                contact[block] = p.contact
        objs.append(_Obj(body.body_id, bi, None, body.box, 0, points, contact))
        for j, p in visible:
            pts = np.full((k, 2), np.nan)
            pts[j] = body.box.center
            pc = np.full((N_CONTACT_HANDS, N_CONTACT_STATES), UNSURE, dtype=np.float64)
            block = spec.contact_block(j)
            if block is not None and p.contact is not None:
                pc[block] = p.contact
            objs.append(_Obj(f"{body.body_id}/{j}", bi, j, p.box, j + 1, pts, pc))
    kept = []
    for o in objs:
        if o.box.width < MIN_OBJECT_SIZE or o.box.height < MIN_OBJECT_SIZE:
            warnings.append(f"image {scene.image_id!r}: object {o.object_id!r} smaller than "
                            f"{MIN_OBJECT_SIZE:g}px ({o.box.width:g}x{o.box.height:g}), skipped")
            continue
        kept.append(o)
    return kept


def assign(scene: Scene, spec: GridSpec) -> TargetGrids:
    """Write object targets for every body and visible part of ``scene``."""
    if (scene.width, scene.height) != (spec.image_w, spec.image_h):
        raise SceneError(f"image {scene.image_id!r} is {scene.width}x{scene.height}, "
                         f"grid spec expects {spec.image_w}x{spec.image_h}")
    scene.validate(spec.k, contact=spec.has_contact)
    lay = spec.layout
    tensors = []
    for s in spec.strides:
        t = np.zeros(spec.grid_shape(s))
        t[:, lay.off] = np.nan
        if lay.cts:
            t[:, lay.cts] = UNSURE
        tensors.append(t)
    warnings: list[str] = []
    diag = {"objects": 0, "collisions": 0, "offsets_dropped": 0, "skipped_small": 0,
            "unmatched_objects": 0, "records": 0}
    objs = _objects(scene, spec, warnings)
    diag["skipped_small"] = len(warnings)
    diag["objects"] = len(objs)
    records: list[MatchRecord] = []
    owner: dict[tuple[int, int, int, int], int] = {}
    for o in objs:
        before = len(records)
        if spec.variant is Variant.ANCHOR_FREE:
            _assign_free(o, spec, tensors, records, owner, diag)
        else:
            _assign_anchor_based(o, spec, tensors, records, owner, diag)
        if len(records) == before:
            diag["unmatched_objects"] += 1
    diag["records"] = len(records)
    return TargetGrids(spec, tensors, records, warnings, diag)


def _claim(key, records, owner, diag, record):
    prev = owner.get(key)
    if prev is not None:
        diag["collisions"] += 1
        records[prev].overwritten = True
    owner[key] = len(records)
    records.append(record)


def _write_labels(cell: np.ndarray, o: _Obj, spec: GridSpec):
    lay = spec.layout
    if lay.obj is not None:
        cell[lay.obj] = 1.0
    cls = np.zeros(spec.k + 1)
    cls[o.class_index] = 1.0
    cell[lay.cls] = cls
    if lay.cts:
        cell[lay.cts] = o.contact.reshape(-1)


def _assign_anchor_based(o: _Obj, spec: GridSpec, tensors, records, owner, diag):
    """Targets for every (matched anchor, responsible cell) pair of ``o``.

    Produces the same raw values as :func:`encode_targets` on each
    cell-relative object, computed for all pairs of a stride at once.
    """
    lay = spec.layout
    cx, cy = o.box.center
    w, h = o.box.width, o.box.height
    visible = ~np.isnan(o.points[:, 0])
    labels = np.zeros(lay.total)
    _write_labels(labels, o, spec)
    for si, s in enumerate(spec.strides):
        rows, cols = spec.image_h // s, spec.image_w // s
        matched = [ai for ai, anchor in enumerate(spec.anchors[si])
                   if anchor_match(w, h, anchor, spec.anchor_ratio_max)]
        if not matched:
            continue
        cells = responsible_cells(cx, cy, s, rows, cols, spec.neighbor_candidates)
        cell_xy = np.array([(c, r) for c, r, _ in cells], dtype=np.float64)
        cell_rc = (cell_xy[:, 1].astype(np.intp), cell_xy[:, 0].astype(np.intp))
        rel = np.column_stack([cx / s - cell_xy[:, 0], cy / s - cell_xy[:, 1]])
        center_raw = logit(clamp_prob((rel + 0.5) / 2.0))
        with_offsets = np.array([spec.offsets_at_neighbors or not nb for _, _, nb in cells])
        d = o.points[None, :, :] / s - cell_xy[:, None, :]  # (cells, k, 2)
        for ai in matched:
            sx, sy = spec.anchors[si][ai][0] / s, spec.anchors[si][ai][1] / s
            scale = np.array([sx, sy])
            size_raw = logit(clamp_prob(np.sqrt(np.array([w, h]) / s / scale) / 2.0))
            inside = ((-2.0 * scale < d) & (d < 2.0 * scale)).all(axis=2)  # (cells, k)
            keep = inside & visible[None, :] & with_offsets[:, None]
            diag["offsets_dropped"] += int((~inside & visible[None, :] & with_offsets[:, None]).sum())
            off_raw = logit(clamp_prob((d / scale + 2.0) / 4.0))
            off_raw = np.where(keep[:, :, None], off_raw, np.nan).reshape(len(cells), -1)
            block = np.tile(labels, (len(cells), 1))
            block[:, lay.box.start:lay.box.start + 2] = center_raw
            block[:, lay.box.start + 2:lay.box.stop] = size_raw
            block[:, lay.off] = off_raw
            tensors[si][ai][:, cell_rc[0], cell_rc[1]] = block.T
            for col, row, is_neighbor in cells:
                _claim((si, ai, row, col), records, owner, diag,
                       MatchRecord(o.object_id, o.body_index, o.slot, s, ai, row, col, is_neighbor))


def _assign_free(o: _Obj, spec: GridSpec, tensors, records, owner, diag):
    lay = spec.layout
    cx, cy = o.box.center
    for si, s in enumerate(spec.strides):
        rows, cols = spec.image_h // s, spec.image_w // s
        col, row = min(int(cx // s), cols - 1), min(int(cy // s), rows - 1)
        px, py = col + 0.5, row + 0.5
        b = o.box
        sides = np.array([px - b.x1 / s, py - b.y1 / s, b.x2 / s - px, b.y2 / s - py])
        if np.any(sides < 0):
            continue
        offsets = np.full(2 * spec.k, np.nan)
        for j in range(spec.k):
            tx, ty = o.points[j]
            if math.isnan(tx):
                continue
            dx, dy = tx / s - px, ty / s - py
            if offset_in_range(dx, 1.0) and offset_in_range(dy, 1.0):
                offsets[2 * j] = math.log((dx + 2.0) / (2.0 - dx))
                offsets[2 * j + 1] = math.log((dy + 2.0) / (2.0 - dy))
            else:
                diag["offsets_dropped"] += 1
        cell = tensors[si][0, :, row, col]
        cell[lay.box] = sides
        cell[lay.off] = offsets
        _write_labels(cell, o, spec)
        _claim((si, 0, row, col), records, owner, diag,
               MatchRecord(o.object_id, o.body_index, o.slot, s, 0, row, col, False))

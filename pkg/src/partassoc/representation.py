"""Per-cell channel layout and the raw <-> decoded object transforms.

A prediction at anchor ``i`` of cell ``(x, y)`` on a stride-``s`` grid is a
vector of ``A_o`` raw values laid out as::

    obj, bx, by, bw, bh, c0 .. ck, dx0, dy0 .. dx{k-1}, dy{k-1} [, h0_0 .. h1_3]

``c0`` is the body class, ``c{j+1}`` the part in slot ``j``.  The anchor-free
variant drops ``obj`` and stores side distances ``bl, bt, br, bb`` instead of
``bx .. bh``.  The contact variant appends 2 x 4 hand contact channels.
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .geometry import Box

PROB_EPS = 1e-6
N_CONTACT_STATES = 4
N_CONTACT_HANDS = 2
DEFAULT_STRIDES = (8, 16, 32, 64)


class RangeError(ValueError):
    """A field lies outside the range a transform can represent."""


class Variant(str, enum.Enum):
    ANCHOR_BASED = "anchor_based"
    ANCHOR_FREE = "anchor_free"
    CONTACT = "anchor_based_contact"


def sigmoid(x):
    arr = np.asarray(x, dtype=np.float64)
    flat = np.atleast_1d(arr)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.reshape(arr.shape) if arr.ndim else float(out[0])


def logit(p):
    arr = np.asarray(p, dtype=np.float64)
    out = np.log(arr) - np.log1p(-arr)
    return out if arr.ndim else float(out)


def clamp_prob(p, eps: float = PROB_EPS):
    return np.clip(p, eps, 1.0 - eps)


def default_anchors(strides: Sequence[int]) -> tuple:
    """Three square anchors per stride at 1x, 2x and 4x the stride."""
    return tuple(tuple((float(m * s), float(m * s)) for m in (1, 2, 4)) for s in strides)


@dataclass(frozen=True)
class Layout:
    obj: int | None
    box: slice
    cls: slice
    off: slice
    cts: slice | None
    total: int


@dataclass(frozen=True)
class GridSpec:
    part_labels: tuple[str, ...]
    image_w: int
    image_h: int
    strides: tuple[int, ...] = DEFAULT_STRIDES
    anchors: tuple = ()
    variant: Variant = Variant.ANCHOR_BASED
    anchor_ratio_max: float = 4.0
    neighbor_candidates: int = 2
    offsets_at_neighbors: bool = True
    contact_slots: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "part_labels", tuple(self.part_labels))
        object.__setattr__(self, "contact_slots", tuple(int(c) for c in self.contact_slots))
        if not self.part_labels:
            raise ValueError("part_count k must be positive")
        if list(self.strides) != sorted(set(self.strides)) or self.strides[0] <= 0:
            raise ValueError(f"strides must be positive and strictly ascending: {self.strides}")
        if self.variant is Variant.ANCHOR_FREE:
            anchors = tuple(((float(s), float(s)),) for s in self.strides)
        elif self.anchors:
            anchors = tuple(tuple((float(w), float(h)) for w, h in per) for per in self.anchors)
        else:
            anchors = default_anchors(self.strides)
        object.__setattr__(self, "anchors", anchors)
        if len(anchors) != len(self.strides):
            raise ValueError("need one anchor list per stride")
        if len({len(a) for a in anchors}) != 1 or not anchors[0]:
            raise ValueError("every stride needs the same positive number of anchors")
        for per in anchors:
            for w, h in per:
                if w <= 0 or h <= 0:
                    raise ValueError(f"anchor dimensions must be positive: {(w, h)}")
        top = self.strides[-1]
        if self.image_w <= 0 or self.image_h <= 0 or self.image_w % top or self.image_h % top:
            raise ValueError(f"image size {self.image_w}x{self.image_h} not divisible by max stride {top}")
        if self.neighbor_candidates not in (0, 2, 4):
            raise ValueError("neighbor_candidates must be 0, 2 or 4")
        if self.variant is Variant.CONTACT:
            if len(self.contact_slots) != N_CONTACT_HANDS or any(
                    not 0 <= c < self.k for c in self.contact_slots):
                raise ValueError(f"contact_slots {self.contact_slots} invalid for k={self.k}")

    @property
    def k(self) -> int:
        return len(self.part_labels)

    @property
    def anchors_per_stride(self) -> int:
        return len(self.anchors[0])

    @property
    def has_objectness(self) -> bool:
        return self.variant is not Variant.ANCHOR_FREE

    @property
    def has_contact(self) -> bool:
        return self.variant is Variant.CONTACT

    @property
    def channels(self) -> int:
        return self.layout.total

    @functools.cached_property
    def layout(self) -> Layout:
        k = self.k
        start = 1 if self.has_objectness else 0
        box = slice(start, start + 4)
        cls = slice(box.stop, box.stop + k + 1)
        off = slice(cls.stop, cls.stop + 2 * k)
        cts = slice(off.stop, off.stop + 8) if self.has_contact else None
        total = cts.stop if cts else off.stop
        return Layout(0 if self.has_objectness else None, box, cls, off, cts, total)

    def grid_shape(self, stride: int) -> tuple[int, int, int, int]:
        return (self.anchors_per_stride, self.channels, self.image_h // stride, self.image_w // stride)

    def stride_index(self, stride: int) -> int:
        return self.strides.index(stride)

    def contact_block(self, slot: int) -> int | None:
        if not self.has_contact or slot not in self.contact_slots:
            return None
        return self.contact_slots.index(slot)

    def with_image(self, image_w: int, image_h: int) -> "GridSpec":
        return GridSpec(**{**self._fields(), "image_w": image_w, "image_h": image_h})

    def _fields(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    def to_dict(self) -> dict[str, Any]:
        return {
            "strides": list(self.strides),
            "anchors": [[list(a) for a in per] for per in self.anchors],
            "part_labels": list(self.part_labels),
            "variant": self.variant.value,
            "image_w": self.image_w,
            "image_h": self.image_h,
            "anchor_ratio_max": self.anchor_ratio_max,
            "neighbor_candidates": self.neighbor_candidates,
            "offsets_at_neighbors": self.offsets_at_neighbors,
            "contact_slots": list(self.contact_slots),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GridSpec":
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {key: d[key] for key in known if key in d}
        if "anchors" in kwargs:
            kwargs["anchors"] = tuple(tuple(tuple(a) for a in per) for per in kwargs["anchors"])
        for key in ("strides", "part_labels", "contact_slots"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        missing = {"part_labels", "image_w", "image_h"} - kwargs.keys()
        if missing:
            raise ValueError(f"grid spec missing fields: {sorted(missing)}")
        return cls(**kwargs)


def channel_layout(spec: GridSpec) -> dict[str, int]:
    """Name -> channel index map, ordered as in a prediction vector."""
    names: list[str] = []
    if spec.has_objectness:
        names += ["obj", "bx", "by", "bw", "bh"]
    else:
        names += ["bl", "bt", "br", "bb"]
    names += [f"c{i}" for i in range(spec.k + 1)]
    for j in range(spec.k):
        names += [f"dx{j}", f"dy{j}"]
    if spec.has_contact:
        names += [f"h{hand}_{state}" for hand in range(N_CONTACT_HANDS)
                  for state in range(N_CONTACT_STATES)]
    return {name: i for i, name in enumerate(names)}


@dataclass
class ExtendedObject:
    """One decoded body or part prediction.

    Coordinates are in the frame named by ``frame``: ``"cell"`` means grid
    units relative to ``origin`` (the cell corner), ``"grid"`` means absolute
    grid units, ``"pixel"`` absolute image pixels. Offsets hold the target
    point of each slot relative to ``origin`` (cell/grid frames) or as an
    absolute pixel point; ``nan`` marks an unset slot.
    """

    kind: str
    slot: int | None
    box: Box
    class_scores: np.ndarray
    offsets: np.ndarray
    objectness: float | None = None
    contact: np.ndarray | None = None
    origin: tuple[float, float] = (0.0, 0.0)
    frame: str = "cell"
    stride: int | None = None
    anchor: int | None = None
    degenerate: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def class_index(self) -> int:
        return 0 if self.kind == "body" else int(self.slot) + 1

    @property
    def confidence(self) -> float:
        c = float(self.class_scores[self.class_index])
        return c if self.objectness is None else self.objectness * c


def _check_finite(raw: np.ndarray, stride, anchor, cell):
    if not np.all(np.isfinite(raw)):
        bad = [i for i, v in enumerate(raw) if not math.isfinite(v)]
        raise ValueError(
            f"non-finite raw values at stride {stride}, anchor {anchor}, cell {tuple(cell)}: channels {bad}")


def _kind_from_scores(scores: np.ndarray) -> tuple[str, int | None]:
    best = int(np.argmax(scores))
    return ("body", None) if best == 0 else ("part", best - 1)


def decode_cell(raw, spec: GridSpec, stride: int, anchor: int, cell: tuple[int, int]) -> ExtendedObject:
    """Decode one anchor-based prediction into cell-relative grid units."""
    if spec.variant is Variant.ANCHOR_FREE:
        raise ValueError("decode_cell needs an anchor-based spec")
    raw = np.asarray(raw, dtype=np.float64)
    _check_finite(raw, stride, anchor, cell)
    lay = spec.layout
    bw_anchor, bh_anchor = spec.anchors[spec.stride_index(stride)][anchor]
    sx, sy = bw_anchor / stride, bh_anchor / stride
    tx, ty, tw, th = sigmoid(raw[lay.box])
    cx, cy = 2.0 * tx - 0.5, 2.0 * ty - 0.5
    w, h = (2.0 * tw) ** 2 * sx, (2.0 * th) ** 2 * sy
    d = (4.0 * sigmoid(raw[lay.off]) - 2.0).reshape(spec.k, 2)
    d[:, 0] *= sx
    d[:, 1] *= sy
    scores = sigmoid(raw[lay.cls])
    kind, slot = _kind_from_scores(scores)
    contact = sigmoid(raw[lay.cts]).reshape(N_CONTACT_HANDS, N_CONTACT_STATES) if lay.cts else None
    return ExtendedObject(kind, slot, Box.from_cxcywh(cx, cy, w, h), scores, d,
                          objectness=float(sigmoid(raw[lay.obj])), contact=contact,
                          origin=(float(cell[0]), float(cell[1])), frame="cell",
                          stride=stride, anchor=anchor)


def decode_cell_free(raw, spec: GridSpec, stride: int, location: tuple[float, float]) -> ExtendedObject:
    """Decode one anchor-free prediction anchored at ``location`` (grid units)."""
    if spec.variant is not Variant.ANCHOR_FREE:
        raise ValueError("decode_cell_free needs an anchor-free spec")
    raw = np.asarray(raw, dtype=np.float64)
    _check_finite(raw, stride, 0, location)
    lay = spec.layout
    sides = raw[lay.box]
    degenerate = bool(np.any(sides < 0))
    l, t, r, b = np.clip(sides, 0.0, None)
    px, py = float(location[0]), float(location[1])
    box = Box(px - l, py - t, px + r, py + b)
    degenerate = degenerate or box.area <= 0.0
    d = (4.0 * sigmoid(raw[lay.off]) - 2.0).reshape(spec.k, 2)
    scores = sigmoid(raw[lay.cls])
    kind, slot = _kind_from_scores(scores)
    return ExtendedObject(kind, slot, box, scores, d + np.array([px, py]), objectness=None,
                          origin=(0.0, 0.0), frame="grid", stride=stride, anchor=0,
                          degenerate=degenerate)


def rescale(obj: ExtendedObject, stride: int, origin: tuple[float, float] | None = None) -> ExtendedObject:
    """Map a grid-frame object to pixels: ``s * (value + origin)``."""
    ox, oy = obj.origin if origin is None else origin
    b = obj.box
    box = Box(stride * (b.x1 + ox), stride * (b.y1 + oy), stride * (b.x2 + ox), stride * (b.y2 + oy))
    offsets = stride * (obj.offsets + np.array([ox, oy]))
    return ExtendedObject(obj.kind, obj.slot, box, obj.class_scores, offsets,
                          objectness=obj.objectness, contact=obj.contact, origin=(0.0, 0.0),
                          frame="pixel", stride=obj.stride, anchor=obj.anchor,
                          degenerate=obj.degenerate, meta=dict(obj.meta))


def _strict_range(name: str, value: float, lo: float, hi: float):
    if not (lo < value < hi):
        raise RangeError(f"{name}={value!r} outside the open range ({lo}, {hi})")


def encode_targets(obj: ExtendedObject, spec: GridSpec, stride: int, anchor: int) -> np.ndarray:
    """Raw channel values that :func:`decode_cell` maps back onto ``obj``.

    ``obj`` is in cell-relative grid units. Unset offsets (``nan``) stay
    ``nan`` in the raw vector.
    """
    if spec.variant is Variant.ANCHOR_FREE:
        raise ValueError("encode_targets needs an anchor-based spec")
    lay = spec.layout
    bw_anchor, bh_anchor = spec.anchors[spec.stride_index(stride)][anchor]
    sx, sy = bw_anchor / stride, bh_anchor / stride
    raw = np.zeros(lay.total)
    cx, cy, w, h = obj.box.to_cxcywh()
    _strict_range("center_x", cx, -0.5, 1.5)
    _strict_range("center_y", cy, -0.5, 1.5)
    _strict_range("width", w, 0.0, 4.0 * sx)
    _strict_range("height", h, 0.0, 4.0 * sy)
    raw[lay.box] = logit(clamp_prob(np.array([
        (cx + 0.5) / 2.0, (cy + 0.5) / 2.0, math.sqrt(w / sx) / 2.0, math.sqrt(h / sy) / 2.0])))
    raw[lay.off] = _encode_offsets(obj.offsets, spec.k, sx, sy)
    raw[lay.obj] = logit(clamp_prob(1.0 if obj.objectness is None else obj.objectness))
    raw[lay.cls] = logit(clamp_prob(np.asarray(obj.class_scores, dtype=np.float64)))
    if lay.cts:
        contact = np.full((N_CONTACT_HANDS, N_CONTACT_STATES), 0.5) if obj.contact is None else obj.contact
        raw[lay.cts] = logit(clamp_prob(np.asarray(contact, dtype=np.float64).reshape(-1)))
    return raw


def _encode_offsets(offsets, k: int, sx: float, sy: float) -> np.ndarray:
    d = np.asarray(offsets, dtype=np.float64).reshape(k, 2)
    scale = np.array([sx, sy])
    bad = ~np.isnan(d) & ~((-2.0 * scale < d) & (d < 2.0 * scale))
    if bad.any():
        j, axis = (int(v) for v in np.argwhere(bad)[0])
        _strict_range(f"offset[{j}].{'xy'[axis]}", float(d[j, axis]), -2.0 * scale[axis], 2.0 * scale[axis])
    return logit(clamp_prob((d / scale + 2.0) / 4.0)).reshape(-1)


def offset_in_range(value: float, scale: float) -> bool:
    return -2.0 * scale < value < 2.0 * scale


def encode_free(obj: ExtendedObject, spec: GridSpec, location: tuple[float, float]) -> np.ndarray:
    """Inverse of :func:`decode_cell_free` for an object in absolute grid units."""
    if spec.variant is not Variant.ANCHOR_FREE:
        raise ValueError("encode_free needs an anchor-free spec")
    lay = spec.layout
    px, py = location
    b = obj.box
    sides = np.array([px - b.x1, py - b.y1, b.x2 - px, b.y2 - py])
    for name, v in zip("ltrb", sides):
        if v < 0:
            raise RangeError(f"side distance {name}={v!r} is negative")
    raw = np.zeros(lay.total)
    raw[lay.box] = sides
    rel = np.asarray(obj.offsets, dtype=np.float64).reshape(spec.k, 2) - np.array([px, py])
    raw[lay.off] = _encode_offsets(rel, spec.k, 1.0, 1.0)
    raw[lay.cls] = logit(clamp_prob(np.asarray(obj.class_scores, dtype=np.float64)))
    return raw


# -- vectorised decoding of whole grids -------------------------------------

@dataclass
class Candidates:
    """Flat arrays of decoded, pixel-space predictions from one image."""

    boxes: np.ndarray        # (n, 4) corner form, pixels
    scores: np.ndarray       # (n,)
    classes: np.ndarray      # (n,) 0 = body, j + 1 = part slot j
    points: np.ndarray       # (n, k, 2) absolute pixel points from offsets
    contact: np.ndarray | None  # (n, 2, 4)
    order: np.ndarray        # (n,) enumeration index, used for tie-breaks

    @classmethod
    def empty(cls, k: int, contact: bool) -> "Candidates":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64),
                   np.zeros((0, k, 2)), np.zeros((0, 2, 4)) if contact else None,
                   np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.scores)

    def take(self, idx) -> "Candidates":
        return Candidates(self.boxes[idx], self.scores[idx], self.classes[idx], self.points[idx],
                          None if self.contact is None else self.contact[idx], self.order[idx])

    @classmethod
    def concat(cls, items: list["Candidates"], k: int, contact: bool) -> "Candidates":
        if not items:
            return cls.empty(k, contact)
        return cls(np.concatenate([c.boxes for c in items]),
                   np.concatenate([c.scores for c in items]),
                   np.concatenate([c.classes for c in items]),
                   np.concatenate([c.points for c in items]),
                   np.concatenate([c.contact for c in items]) if contact else None,
                   np.concatenate([c.order for c in items]))


def decode_grid(values: np.ndarray, spec: GridSpec, stride: int, conf_floor: float = 0.0,
                class_floor: np.ndarray | None = None, base_order: int = 0) -> Candidates:
    """Decode every prediction of one stride whose confidence passes a floor.

    ``class_floor`` optionally gives a per-class confidence threshold
    (strict ``>``); ``conf_floor`` is a cheap objectness prefilter.
    Candidate order follows the ``[anchor][row][col]`` memory order.
    """
    lay = spec.layout
    a_count, _, rows, cols = values.shape
    flat = np.ascontiguousarray(values, dtype=np.float64).transpose(0, 2, 3, 1).reshape(-1, lay.total)
    if lay.obj is not None:
        obj = sigmoid(flat[:, lay.obj])
        keep = np.flatnonzero(obj > conf_floor)
        flat, obj = flat[keep], obj[keep]
    else:
        keep = np.arange(flat.shape[0])
        obj = None
    cls_p = sigmoid(flat[:, lay.cls]) if len(keep) else np.zeros((0, spec.k + 1))
    best = np.argmax(cls_p, axis=1) if len(keep) else np.zeros(0, dtype=np.int64)
    conf = cls_p[np.arange(len(keep)), best]
    if obj is not None:
        conf = obj * conf
    if class_floor is not None:
        sel = conf > class_floor[best]
    else:
        sel = conf > conf_floor
    keep, flat, conf, best = keep[sel], flat[sel], conf[sel], best[sel]
    anchor_idx = keep // (rows * cols)
    row = (keep // cols) % rows
    col = keep % cols
    k = spec.k
    if spec.variant is Variant.ANCHOR_FREE:
        sides = np.clip(flat[:, lay.box], 0.0, None)
        px, py = col + 0.5, row + 0.5
        boxes = np.stack([px - sides[:, 0], py - sides[:, 1], px + sides[:, 2], py + sides[:, 3]], axis=1) * stride
        d = 4.0 * sigmoid(flat[:, lay.off]).reshape(-1, k, 2) - 2.0
        points = (d + np.stack([px, py], axis=1)[:, None, :]) * stride
    else:
        anchors = np.asarray(spec.anchors[spec.stride_index(stride)])[anchor_idx]  # (n, 2) pixels
        t = sigmoid(flat[:, lay.box])
        cx = (2.0 * t[:, 0] - 0.5 + col) * stride
        cy = (2.0 * t[:, 1] - 0.5 + row) * stride
        w = (2.0 * t[:, 2]) ** 2 * anchors[:, 0]
        h = (2.0 * t[:, 3]) ** 2 * anchors[:, 1]
        boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
        d = (4.0 * sigmoid(flat[:, lay.off]) - 2.0).reshape(-1, k, 2) * anchors[:, None, :]
        points = d + (np.stack([col, row], axis=1) * stride)[:, None, :]
    contact = None
    if lay.cts:
        contact = sigmoid(flat[:, lay.cts]).reshape(-1, N_CONTACT_HANDS, N_CONTACT_STATES)
    return Candidates(boxes, conf, best.astype(np.int64), points, contact,
                      (base_order + keep).astype(np.int64))

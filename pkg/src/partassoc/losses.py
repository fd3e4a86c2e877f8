"""Forward values of the multi-task training losses.

Predictions are raw grids; targets are label grids as produced by
:func:`partassoc.assigner.assign`.  Every component is a sum over strides of
a per-stride mean, so strides without matched cells contribute nothing.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .assigner import UNSURE, target_obj_mask
from .geometry import ciou_pairs
from .representation import GridSpec, Variant, sigmoid

DEFAULT_BALANCE = (4.0, 1.0, 0.25, 0.06)


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    alpha: float = 0.05
    beta: float = 0.7
    gamma: float = 0.3
    lam: float = 0.015
    mu: float = 0.01
    alpha_u: float = 7.5
    beta_u: float = 1.5
    gamma_u: float = 0.5
    lambda_u: float | None = None  # None -> 1/k
    balance: tuple[float, ...] = DEFAULT_BALANCE
    batch_size: int = 1
    obj_target_mode: str = "ciou"

    def __post_init__(self):
        self.balance = tuple(float(w) for w in self.balance)
        weights = {k: v for k, v in asdict(self).items()
                   if k in ("alpha", "beta", "gamma", "lam", "mu", "alpha_u", "beta_u", "gamma_u", "lambda_u")}
        for name, value in weights.items():
            if value is not None and value < 0:
                raise LossError(f"loss weight {name} must be non-negative, got {value}")
        if any(w < 0 for w in self.balance):
            raise LossError(f"stride balance weights must be non-negative: {self.balance}")
        if self.batch_size < 1:
            raise LossError("batch_size must be >= 1")
        if self.obj_target_mode not in ("ciou", "binary"):
            raise LossError("obj_target_mode must be 'ciou' or 'binary'")

    def lambda_free(self, k: int) -> float:
        return 1.0 / k if self.lambda_u is None else self.lambda_u

    def to_dict(self, k: int | None = None) -> dict:
        d = asdict(self)
        d["balance"] = list(self.balance)
        if k is not None:
            d["lambda_u"] = self.lambda_free(k)
        return d


@dataclass
class LossReport:
    L_box: float
    L_obj: float | None
    L_cls: float
    L_bpd: float
    L_cts: float | None
    total: float
    per_stride: dict[str, dict[str, float]]
    counts: dict[str, int]
    flags: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    variant: str = Variant.ANCHOR_BASED.value

    def to_dict(self) -> dict:
        out = {
            "components": {"L_box": self.L_box, "L_obj": self.L_obj, "L_cls": self.L_cls,
                           "L_bpd": self.L_bpd, "L_cts": self.L_cts},
            "total": self.total,
            "per_stride": self.per_stride,
            "counts": self.counts,
            "flags": self.flags,
            "variant": self.variant,
            "config": self.config,
        }
        if self.variant == Variant.ANCHOR_FREE.value:
            out["components"]["L_dfl"] = "not_modeled"
        return out


def bce_logits(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Binary cross-entropy of ``sigmoid(x)`` against target ``t``."""
    return np.logaddexp(0.0, x) - t * x


def _balance(spec: GridSpec, config: LossConfig) -> tuple[float, ...]:
    if len(config.balance) != len(spec.strides):
        raise LossError(f"{len(config.balance)} balance weights for {len(spec.strides)} strides")
    return config.balance


def _check_shapes(pred, target, spec):
    if len(pred) != len(spec.strides) or len(target) != len(spec.strides):
        raise LossError("need one prediction and one target grid per stride")
    for s, p, t in zip(spec.strides, pred, target):
        if p.shape != spec.grid_shape(s) or t.shape != spec.grid_shape(s):
            raise LossError(f"grid shape mismatch at stride {s}: pred {p.shape}, target {t.shape}, "
                            f"expected {spec.grid_shape(s)}")


def _matched(tensor, spec):
    return np.nonzero(target_obj_mask(tensor, spec))


def decode_boxes_at(tensor: np.ndarray, spec: GridSpec, stride: int, idx) -> np.ndarray:
    """Corner-form boxes (grid units, relative to each cell) at indices ``(a, r, c)``."""
    lay = spec.layout
    a = idx[0]
    raw = tensor[a, lay.box, idx[1], idx[2]]  # (n, 4)
    if spec.variant is Variant.ANCHOR_FREE:
        sides = np.clip(raw, 0.0, None)
        return np.stack([0.5 - sides[:, 0], 0.5 - sides[:, 1], 0.5 + sides[:, 2], 0.5 + sides[:, 3]], axis=1)
    anchors = np.asarray(spec.anchors[spec.stride_index(stride)]) / stride
    t = sigmoid(raw)
    cx, cy = 2.0 * t[:, 0] - 0.5, 2.0 * t[:, 1] - 0.5
    w = (2.0 * t[:, 2]) ** 2 * anchors[a, 0]
    h = (2.0 * t[:, 3]) ** 2 * anchors[a, 1]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


DEGENERATE_CIOU = -1.0


def _degenerate(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])


def _ciou_at(pred, target, spec, stride, idx):
    """CIoU per matched cell; a predicted box with no area scores ``DEGENERATE_CIOU``."""
    if len(idx[0]) == 0:
        return np.zeros(0)
    p = decode_boxes_at(pred, spec, stride, idx)
    t = decode_boxes_at(target, spec, stride, idx)
    out = np.full(len(p), DEGENERATE_CIOU)
    ok = ~_degenerate(p)
    if ok.any():
        out[ok] = ciou_pairs(p[ok], t[ok])
    return out


def count_degenerate(pred, target, spec: GridSpec) -> int:
    """Matched cells whose predicted box has zero width or height."""
    n = 0
    for s, p, t in zip(spec.strides, pred, target):
        idx = _matched(t, spec)
        if len(idx[0]):
            n += int(_degenerate(decode_boxes_at(p, spec, s, idx)).sum())
    return n


def loss_box(pred, target, spec: GridSpec):
    _check_shapes(pred, target, spec)
    total, per, count = 0.0, [], 0
    for s, p, t in zip(spec.strides, pred, target):
        idx = _matched(t, spec)
        n = len(idx[0])
        value = float(np.mean(1.0 - _ciou_at(p, t, spec, s, idx))) if n else 0.0
        per.append(value)
        total += value
        count += n
    return total, per, count


def loss_obj(pred, target, spec: GridSpec, config: LossConfig | None = None):
    config = config or LossConfig()
    _check_shapes(pred, target, spec)
    if not spec.has_objectness:
        raise LossError("anchor-free grids carry no objectness channel")
    weights = _balance(spec, config)
    lay = spec.layout
    total, per = 0.0, []
    for s, w_s, p, t in zip(spec.strides, weights, pred, target):
        o = t[:, lay.obj]
        goal = np.zeros_like(o)
        idx = _matched(t, spec)
        if len(idx[0]):
            if config.obj_target_mode == "ciou":
                goal[idx] = np.clip(_ciou_at(p, t, spec, s, idx), 0.0, 1.0)
            else:
                goal[idx] = 1.0
        value = w_s * float(np.mean(bce_logits(p[:, lay.obj], goal)))
        per.append(value)
        total += value
    return total, per


def loss_cls(pred, target, spec: GridSpec):
    _check_shapes(pred, target, spec)
    lay = spec.layout
    total, per, count = 0.0, [], 0
    for p, t in zip(pred, target):
        idx = _matched(t, spec)
        n = len(idx[0])
        if n:
            x = p[idx[0], lay.cls, idx[1], idx[2]]
            c = t[idx[0], lay.cls, idx[1], idx[2]]
            value = float(np.mean(np.mean(bce_logits(x, c), axis=1)))
        else:
            value = 0.0
        per.append(value)
        total += value
        count += n
    return total, per, count


def loss_bpd(pred, target, spec: GridSpec):
    """Squared offset error over visible slots, averaged over matched cells."""
    _check_shapes(pred, target, spec)
    lay = spec.layout
    total, per, elements = 0.0, [], 0
    for p, t in zip(pred, target):
        idx = _matched(t, spec)
        n = len(idx[0])
        if n:
            d_hat = p[idx[0], lay.off, idx[1], idx[2]].reshape(n, spec.k, 2)
            d = t[idx[0], lay.off, idx[1], idx[2]].reshape(n, spec.k, 2)
            visible = ~np.isnan(d).any(axis=2)
            sq = np.where(visible, ((d_hat - np.nan_to_num(d)) ** 2).sum(axis=2), 0.0)
            value = float(sq.sum() / n)
            elements += int(visible.sum())
        else:
            value = 0.0
        per.append(value)
        total += value
    return total, per, elements


def loss_cts(pred, target, spec: GridSpec):
    _check_shapes(pred, target, spec)
    lay = spec.layout
    if lay.cts is None:
        raise LossError("contact channels absent: loss_cts needs the anchor_based_contact variant")
    total, per, elements = 0.0, [], 0
    for p, t in zip(pred, target):
        idx = _matched(t, spec)
        n = len(idx[0])
        if n:
            x = p[idx[0], lay.cts, idx[1], idx[2]]
            h = t[idx[0], lay.cts, idx[1], idx[2]]
            scored = h != UNSURE
            value = float(np.where(scored, bce_logits(x, np.where(scored, h, 0.0)), 0.0).sum() / n)
            elements += int(scored.sum())
        else:
            value = 0.0
        per.append(value)
        total += value
    return total, per, elements


def loss_total(components: dict, config: LossConfig, variant: Variant | str = Variant.ANCHOR_BASED,
               k: int | None = None) -> float:
    variant = Variant(variant)
    if variant is Variant.ANCHOR_FREE:
        if k is None:
            raise LossError("anchor-free total needs the part count k")
        inner = (config.alpha_u * components["L_box"] + config.gamma_u * components["L_cls"]
                 + config.lambda_free(k) * components["L_bpd"])
    else:
        inner = (config.alpha * components["L_box"] + config.beta * components["L_obj"]
                 + config.gamma * components["L_cls"] + config.lam * components["L_bpd"])
        if variant is Variant.CONTACT:
            inner += config.mu * components["L_cts"]
    return config.batch_size * inner


def compute_losses(pred: Sequence[np.ndarray], target: Sequence[np.ndarray], spec: GridSpec,
                   config: LossConfig | None = None) -> LossReport:
    config = config or LossConfig()
    pred = [np.asarray(p, dtype=np.float64) for p in pred]
    target = [np.asarray(t, dtype=np.float64) for t in target]
    l_box, box_per, matched = loss_box(pred, target, spec)
    l_cls, cls_per, _ = loss_cls(pred, target, spec)
    l_bpd, bpd_per, bpd_elems = loss_bpd(pred, target, spec)
    l_obj, obj_per = loss_obj(pred, target, spec, config) if spec.has_objectness else (None, None)
    l_cts, cts_per, cts_elems = loss_cts(pred, target, spec) if spec.has_contact else (None, None, 0)
    components = {"L_box": l_box, "L_obj": l_obj, "L_cls": l_cls, "L_bpd": l_bpd, "L_cts": l_cts}
    total = loss_total(components, config, spec.variant, spec.k)
    per_stride = {}
    for i, s in enumerate(spec.strides):
        row = {"L_box": box_per[i], "L_cls": cls_per[i], "L_bpd": bpd_per[i]}
        if obj_per is not None:
            row["L_obj"] = obj_per[i]
        if cts_per is not None:
            row["L_cts"] = cts_per[i]
        per_stride[str(s)] = row
    flags = []
    if matched == 0:
        flags.append("no_matched_cells")
    if bpd_elems == 0:
        flags.append("no_offset_targets")
    return LossReport(l_box, l_obj, l_cls, l_bpd, l_cts, total, per_stride,
                      {"matched_cells": matched, "offset_slots": bpd_elems, "contact_states": cts_elems,
                       "degenerate_pred_boxes": count_degenerate(pred, target, spec)},
                      flags, config.to_dict(spec.k), spec.variant.value)

"""File formats: Scene and Detection NDJSON, GridSpec JSON, GridDump binary.

Every reader error names the file and the line (NDJSON) or byte offset
(GridDump) at which it failed.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Sequence

import numpy as np

from .assigner import BodyAnnotation, PartAnnotation, Scene
from .decoder import AssociatedDetection, ImageDetections, PartDetection
from .geometry import Box
from .representation import GridSpec

MAGIC = b"BPJG"
VERSION = 1
DECIMALS = 6


class FormatError(ValueError):
    """Malformed input file; the message carries file and position."""


# -- numbers -------------------------------------------------------------------

def _num(v: float) -> float | int:
    r = round(float(v), DECIMALS)
    return int(r) if r.is_integer() and abs(r) < 2 ** 53 else r


def _box(b: Box) -> list:
    return [_num(v) for v in b.as_tuple()]


def dumps_line(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


# -- scenes --------------------------------------------------------------------

def scene_to_record(scene: Scene) -> dict:
    bodies = []
    for b in scene.bodies:
        parts = []
        for p in b.parts:
            if p is None:
                parts.append(None)
                continue
            entry: dict[str, Any] = {"box": _box(p.box), "visible": int(p.visible)}
            if p.contact is not None:
                entry["contact"] = [int(s) for s in p.contact]
            parts.append(entry)
        bodies.append({"body_id": b.body_id, "box": _box(b.box), "parts": parts})
    return {"image_id": scene.image_id, "width": int(scene.width), "height": int(scene.height), "bodies": bodies}


class _Where:
    def __init__(self, path: str, line: int):
        self.path, self.line = path, line

    def fail(self, field_name: str, msg: str):
        raise FormatError(f"{self.path}:{self.line}: field {field_name!r}: {msg}")


def _req(d: dict, key: str, where: _Where, kind, path: str):
    if not isinstance(d, dict) or key not in d:
        where.fail(path + key, "missing")
    v = d[key]
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            where.fail(path + key, f"expected a number, got {v!r}")
    elif kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            where.fail(path + key, f"expected an integer, got {v!r}")
    elif not isinstance(v, kind):
        where.fail(path + key, f"expected {kind.__name__}, got {type(v).__name__}")
    return v


def _parse_box(v, where: _Where, name: str) -> Box:
    if not isinstance(v, list) or len(v) != 4 or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        where.fail(name, f"expected [x1, y1, x2, y2], got {v!r}")
    try:
        return Box(*(float(x) for x in v))
    except ValueError as exc:  # inverted corners or DegenerateBoxError
        where.fail(name, str(exc))


def scene_from_record(d: dict, where: _Where, k: int | None = None) -> Scene:
    if not isinstance(d, dict):
        where.fail("<record>", "expected a JSON object")
    image_id = _req(d, "image_id", where, str, "")
    width = _req(d, "width", where, int, "")
    height = _req(d, "height", where, int, "")
    bodies = []
    for bi, b in enumerate(_req(d, "bodies", where, list, "")):
        pre = f"bodies[{bi}]."
        body_id = _req(b, "body_id", where, str, pre)
        box = _parse_box(_req(b, "box", where, list, pre), where, pre + "box")
        raw_parts = _req(b, "parts", where, list, pre)
        if k is not None and len(raw_parts) != k:
            where.fail(pre + "parts", f"{len(raw_parts)} entries, expected k={k}")
        parts: list[PartAnnotation | None] = []
        for j, p in enumerate(raw_parts):
            ppre = f"{pre}parts[{j}]."
            if p is None:
                parts.append(None)
                continue
            pbox = _parse_box(_req(p, "box", where, list, ppre), where, ppre + "box")
            visible = _req(p, "visible", where, int, ppre)
            if visible not in (0, 1):
                where.fail(ppre + "visible", f"must be 0 or 1, got {visible}")
            contact = p.get("contact")
            if contact is not None:
                if (not isinstance(contact, list) or len(contact) != 4
                        or any(isinstance(s, bool) or s not in (0, 1, 2) for s in contact)):
                    where.fail(ppre + "contact", f"expected 4 states in {{0,1,2}}, got {contact!r}")
                contact = tuple(int(s) for s in contact)
            parts.append(PartAnnotation(pbox, visible, contact))
        bodies.append(BodyAnnotation(body_id, box, parts))
    return Scene(image_id, width, height, bodies)


# -- detections ----------------------------------------------------------------

def detections_to_record(det: ImageDetections) -> dict:
    bodies = []
    for b in det.bodies:
        parts = []
        for j, p in enumerate(b.parts):
            if p is None:
                parts.append(None)
                continue
            box = _box(p.box)
            # centre of the written box, so a re-read file serialises to the same bytes
            entry: dict[str, Any] = {"box": box, "score": _num(p.score),
                                     "center": [_num((box[0] + box[2]) / 2), _num((box[1] + box[3]) / 2)]}
            fused = b.contact_scores[j] if j < len(b.contact_scores) else None
            if fused is not None:
                entry["contact_scores"] = [_num(v) for v in fused]
            parts.append(entry)
        bodies.append({"box": _box(b.box), "score": _num(b.score), "parts": parts})
    rec: dict[str, Any] = {"image_id": det.image_id, "bodies": bodies}
    if det.unassociated:
        rec["unassociated"] = [{"box": _box(p.box), "score": _num(p.score), "slot": p.slot}
                               for p in det.unassociated]
    return rec


def _score(v, where: _Where, name: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
        where.fail(name, f"score must be a number in [0, 1], got {v!r}")
    return float(v)


def detections_from_record(d: dict, where: _Where, k: int | None = None) -> ImageDetections:
    if not isinstance(d, dict):
        where.fail("<record>", "expected a JSON object")
    image_id = _req(d, "image_id", where, str, "")
    bodies = []
    for bi, b in enumerate(_req(d, "bodies", where, list, "")):
        pre = f"bodies[{bi}]."
        box = _parse_box(_req(b, "box", where, list, pre), where, pre + "box")
        score = _score(_req(b, "score", where, float, pre), where, pre + "score")
        raw_parts = _req(b, "parts", where, list, pre)
        if k is not None and len(raw_parts) != k:
            where.fail(pre + "parts", f"{len(raw_parts)} entries, expected k={k}")
        parts: list[PartDetection | None] = []
        fused: list[list[float] | None] = []
        for j, p in enumerate(raw_parts):
            ppre = f"{pre}parts[{j}]."
            if p is None:
                parts.append(None)
                fused.append(None)
                continue
            pbox = _parse_box(_req(p, "box", where, list, ppre), where, ppre + "box")
            pscore = _score(_req(p, "score", where, float, ppre), where, ppre + "score")
            cs = p.get("contact_scores")
            if cs is not None:
                if not isinstance(cs, list) or len(cs) != 4:
                    where.fail(ppre + "contact_scores", "expected 4 numbers")
                cs = [_score(v, where, ppre + "contact_scores") for v in cs]
            parts.append(PartDetection(pbox, pscore, j))
            fused.append(cs)
        bodies.append(AssociatedDetection(box, score, parts, contact_scores=fused))
    loose = []
    for pi, p in enumerate(d.get("unassociated") or []):
        pre = f"unassociated[{pi}]."
        pbox = _parse_box(_req(p, "box", where, list, pre), where, pre + "box")
        pscore = _score(_req(p, "score", where, float, pre), where, pre + "score")
        slot = _req(p, "slot", where, int, pre)
        if k is not None and not 0 <= slot < k:
            where.fail(pre + "slot", f"slot {slot} outside [0, {k})")
        loose.append(PartDetection(pbox, pscore, slot))
    return ImageDetections(image_id, bodies, loose)


# -- NDJSON streams ------------------------------------------------------------

def _open_text(path, mode):
    return open(path, mode, encoding="utf-8", newline="\n")


def iter_ndjson(path: str | Path) -> Iterator[tuple[dict, _Where]]:
    """Yield ``(object, position)`` for each non-blank line."""
    name = str(path)
    with _open_text(path, "r") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = _Where(name, n)
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{name}:{n}: malformed JSON: {exc.msg} (column {exc.colno})") from None
            yield obj, where


def read_scenes(path: str | Path, k: int | None = None) -> list[Scene]:
    return [scene_from_record(obj, where, k) for obj, where in iter_ndjson(path)]


def read_detections(path: str | Path, k: int | None = None) -> list[ImageDetections]:
    return [detections_from_record(obj, where, k) for obj, where in iter_ndjson(path)]


def write_ndjson(records: Iterable[dict], out: str | Path | IO[str]):
    if hasattr(out, "write"):
        for r in records:
            out.write(dumps_line(r) + "\n")
        return
    with _open_text(out, "w") as fh:
        for r in records:
            fh.write(dumps_line(r) + "\n")


def write_scenes(scenes: Iterable[Scene], out):
    write_ndjson((scene_to_record(s) for s in scenes), out)


def write_detections(dets: Iterable[ImageDetections], out):
    write_ndjson((detections_to_record(d) for d in dets), out)


# -- GridSpec JSON -------------------------------------------------------------

def read_spec(path: str | Path) -> GridSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: malformed JSON: {exc.msg}") from None
    return spec_from_json(d, str(path))


def spec_from_json(d: Any, source: str = "<spec>") -> GridSpec:
    if not isinstance(d, dict):
        raise FormatError(f"{source}: grid spec must be a JSON object")
    try:
        return GridSpec.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{source}: invalid grid spec: {exc}") from None


def write_spec(spec: GridSpec, path: str | Path):
    with _open_text(path, "w") as fh:
        fh.write(json.dumps(spec.to_dict(), indent=2) + "\n")


# -- GridDump ------------------------------------------------------------------

@dataclass
class GridDump:
    spec: GridSpec
    images: list[str]
    grids: list[list[np.ndarray]]  # per image, per stride (ascending)
    header: dict = field(default_factory=dict)  # full header, unknown keys included


def payload_size(spec: GridSpec, n_images: int) -> int:
    per_image = sum(int(np.prod(spec.grid_shape(s))) for s in spec.strides)
    return 4 * per_image * n_images


def _stride_order(spec: GridSpec) -> list[int]:
    return sorted(range(len(spec.strides)), key=lambda i: spec.strides[i])


def write_grid_dump(path_or_fh, spec: GridSpec, images: Sequence[str], grids: Sequence[Sequence[np.ndarray]],
                    extra: dict | None = None):
    if len(images) != len(grids):
        raise ValueError("one grid set per image id required")
    header = dict(extra or {})
    header.update(spec.to_dict())
    header["images"] = list(images)
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    for image_id, per_stride in zip(images, grids):
        if len(per_stride) != len(spec.strides):
            raise ValueError(f"image {image_id!r}: {len(per_stride)} grids for {len(spec.strides)} strides")
        for si in _stride_order(spec):
            g = np.asarray(per_stride[si])
            if g.shape != spec.grid_shape(spec.strides[si]):
                raise ValueError(f"image {image_id!r} stride {spec.strides[si]}: shape {g.shape}, "
                                 f"expected {spec.grid_shape(spec.strides[si])}")
            chunks.append(np.ascontiguousarray(g, dtype="<f4").tobytes())
    data = b"".join(chunks)
    if hasattr(path_or_fh, "write"):
        path_or_fh.write(data)
    else:
        with open(path_or_fh, "wb") as fh:
            fh.write(data)


def read_grid_dump(path: str | Path) -> GridDump:
    data = Path(path).read_bytes()
    return parse_grid_dump(data, str(path))


def parse_grid_dump(data: bytes, source: str = "<grid dump>") -> GridDump:
    if len(data) < 12:
        raise FormatError(f"{source}: offset 0: file too short for a grid dump header ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise FormatError(f"{source}: offset 0: bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"{source}: offset 4: unsupported format version {version}, expected {VERSION}")
    if 12 + hlen > len(data):
        raise FormatError(f"{source}: offset 8: header length {hlen} exceeds file size {len(data)}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: offset 12: malformed header JSON: {exc}") from None
    if not isinstance(header, dict) or "images" not in header:
        raise FormatError(f"{source}: offset 12: header field 'images' missing")
    spec = spec_from_json(header, f"{source}: offset 12: header")
    images = header["images"]
    if not isinstance(images, list) or not all(isinstance(i, str) for i in images):
        raise FormatError(f"{source}: offset 12: header field 'images' must be a list of strings")
    start = 12 + hlen
    expected = payload_size(spec, len(images))
    actual = len(data) - start
    if actual != expected:
        raise FormatError(f"{source}: offset {start}: payload is {actual} bytes, expected {expected}")
    flat = np.frombuffer(data, dtype="<f4", offset=start)
    grids, pos = [], 0
    order = _stride_order(spec)
    for _ in images:
        per = [None] * len(spec.strides)
        for si in order:
            shape = spec.grid_shape(spec.strides[si])
            n = int(np.prod(shape))
            per[si] = flat[pos:pos + n].reshape(shape)
            pos += n
        grids.append(per)
    return GridDump(spec, images, grids, header)

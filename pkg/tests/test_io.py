import io
import json
import struct

import numpy as np
import pytest

from partassoc.assigner import assign
from partassoc.decoder import decode_image
from partassoc.io import (
    MAGIC,
    FormatError,
    detections_to_record,
    parse_grid_dump,
    payload_size,
    read_detections,
    read_grid_dump,
    read_scenes,
    read_spec,
    scene_to_record,
    write_detections,
    write_grid_dump,
    write_scenes,
    write_spec,
)
from partassoc.representation import GridSpec, Variant
from partassoc.synth import NoiseConfig, SynthConfig, gen_scenes, render_predicted, spec_for


def test_payload_size_64px_k1():
    spec = GridSpec(("head",), 64, 64)
    # per image: 3 anchors x 9 channels x (64 + 16 + 4 + 1) cells x 4 bytes
    assert payload_size(spec, 1) == 3 * 9 * 85 * 4 == 9180


def test_grid_dump_round_trip_and_layout(tmp_path):
    spec = GridSpec(("head",), 64, 64)
    rng = np.random.default_rng(0)
    grids = [[rng.normal(size=spec.grid_shape(s)).astype(np.float32) for s in spec.strides] for _ in range(2)]
    path = tmp_path / "g.bin"
    write_grid_dump(path, spec, ["a", "b"], grids, extra={"kind": "pred", "future": {"x": 1}})
    data = path.read_bytes()
    assert data[:4] == MAGIC
    version, hlen = struct.unpack_from("<II", data, 4)
    assert version == 1
    assert len(data) - 12 - hlen == payload_size(spec, 2) == 2 * 9180
    header = json.loads(data[12:12 + hlen])
    assert header["kind"] == "pred" and header["images"] == ["a", "b"]
    assert header["part_labels"] == ["head"]
    dump = read_grid_dump(path)
    assert dump.spec == spec and dump.images == ["a", "b"]
    assert dump.header["future"] == {"x": 1}
    for got, want in zip(dump.grids, grids):
        for g, w in zip(got, want):
            assert np.array_equal(g, w)
    # payload order: image, ascending stride, [anchor][channel][row][col], little-endian float32
    first = np.frombuffer(data, dtype="<f4", offset=12 + hlen, count=3 * 9 * 64)
    assert np.array_equal(first, grids[0][0].ravel())


def test_grid_dump_errors(tmp_path):
    spec = GridSpec(("head",), 64, 64)
    buf = io.BytesIO()
    write_grid_dump(buf, spec, ["a"], [[np.zeros(spec.grid_shape(s)) for s in spec.strides]])
    data = buf.getvalue()
    with pytest.raises(FormatError, match="offset 0: bad magic"):
        parse_grid_dump(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="offset 4: unsupported format version 2"):
        parse_grid_dump(data[:4] + struct.pack("<I", 2) + data[8:])
    hlen = struct.unpack_from("<I", data, 8)[0]
    with pytest.raises(FormatError, match=f"offset {12 + hlen}: payload is 9176 bytes, expected 9180"):
        parse_grid_dump(data[:-4])
    with pytest.raises(FormatError, match="offset 0: file too short"):
        parse_grid_dump(data[:6])
    with pytest.raises(FormatError, match="offset 8"):
        parse_grid_dump(data[:8] + struct.pack("<I", 10 ** 6) + data[12:])
    with pytest.raises(ValueError):
        write_grid_dump(io.BytesIO(), spec, ["a"], [[np.zeros((1, 9, 8, 8))] * 4])


def test_scene_ndjson_round_trip(tmp_path):
    cfg = SynthConfig(seed=1, n_images=4, preset="humanoid-k2-hands")
    spec = spec_for(cfg, Variant.CONTACT)
    scenes = gen_scenes(cfg, spec)
    path = tmp_path / "s.ndjson"
    write_scenes(scenes, path)
    back = read_scenes(path, k=2)
    assert [scene_to_record(s) for s in back] == [scene_to_record(s) for s in scenes]
    path2 = tmp_path / "s2.ndjson"
    write_scenes(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_detection_ndjson_round_trip(tmp_path):
    cfg = SynthConfig(seed=2, n_images=3, preset="humanoid-k2-hands", noise=NoiseConfig.uniform(0.2, fp_rate=0.3))
    spec = spec_for(cfg, Variant.CONTACT)
    dets = []
    for i, s in enumerate(gen_scenes(cfg, spec)):
        dets.append(decode_image(render_predicted(s, spec, cfg.noise, seed=2, index=i, targets=assign(s, spec)),
                                 spec, image_id=s.image_id))
    path = tmp_path / "d.ndjson"
    write_detections(dets, path)
    back = read_detections(path, k=2)
    assert len(back) == len(dets)
    path2 = tmp_path / "d2.ndjson"
    write_detections(back, path2)
    assert path2.read_bytes() == path.read_bytes()
    for a, b in zip(back, dets):
        assert detections_to_record(a)["bodies"] == detections_to_record(b)["bodies"]


@pytest.mark.parametrize("line,message", [
    ('{"image_id": "a", "width": 64, "height": 64}', "field 'bodies': missing"),
    ('{"image_id": "a", "width": "64", "height": 64, "bodies": []}', "field 'width': expected an integer"),
    ('{"image_id": "a", "width": 64, "height": 64, "bodies": [{"body_id": "b", "box": [0, 0, 1], "parts": [null]}]}',
     r"field 'bodies\[0\].box'"),
    ('{"image_id": "a", "width": 64, "height": 64, "bodies": [{"body_id": "b", "box": [5, 0, 1, 1], "parts": [null]}]}',
     r"field 'bodies\[0\].box'"),
    ('{"image_id": "a", "width": 64, "height": 64, "bodies": [{"body_id": "b", "box": [0, 0, 9, 9], "parts": []}]}',
     r"field 'bodies\[0\].parts': 0 entries, expected k=1"),
    ('{"image_id": "a", "width": 64, "height": 64, "bodies": [{"body_id": "b", "box": [0, 0, 9, 9], '
     '"parts": [{"box": [1, 1, 2, 2], "visible": 3}]}]}', r"parts\[0\].visible"),
    ('{"image_id": "a", "width": 64, "height": 64, "bodies": [{"body_id": "b", "box": [0, 0, 9, 9], '
     '"parts": [{"box": [1, 1, 2, 2], "visible": 1, "contact": [0, 1, 5, 0]}]}]}', r"parts\[0\].contact"),
    ('{"image_id": "a", "width": 64', "malformed JSON"),
])
def test_scene_errors_name_file_line_and_field(tmp_path, line, message):
    path = tmp_path / "bad.ndjson"
    good = '{"image_id": "ok", "width": 64, "height": 64, "bodies": []}'
    path.write_text(good + "\n\n" + line + "\n")
    with pytest.raises(FormatError, match=rf"bad.ndjson:3: .*{message}"):
        read_scenes(path, k=1)


def test_detection_errors(tmp_path):
    path = tmp_path / "d.ndjson"
    path.write_text('{"image_id": "a", "bodies": [{"box": [0, 0, 9, 9], "score": 1.5, "parts": [null]}]}\n')
    with pytest.raises(FormatError, match=r"d.ndjson:1: field 'bodies\[0\].score'"):
        read_detections(path)
    path.write_text('{"image_id": "a", "bodies": [], "unassociated": [{"box": [0, 0, 1, 1], "score": 0.5, "slot": 4}]}\n')
    with pytest.raises(FormatError, match="slot 4"):
        read_detections(path, k=2)


def test_spec_json_round_trip_and_errors(tmp_path):
    spec = GridSpec(("lh", "rh"), 128, 64, variant=Variant.CONTACT)
    path = tmp_path / "spec.json"
    write_spec(spec, path)
    assert read_spec(path) == spec
    path.write_text('{"part_labels": ["a"], "image_w": 100, "image_h": 64}')
    with pytest.raises(FormatError, match="invalid grid spec"):
        read_spec(path)
    path.write_text("{")
    with pytest.raises(FormatError, match="malformed JSON"):
        read_spec(path)

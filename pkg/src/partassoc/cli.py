"""Command-line interface: synth, assign, loss, decode, eval, report.

Exit status is 0 on success, 1 on usage errors and 2 on data or format
errors.  Settings resolve as command-line flags over a ``--config`` JSON file
over built-in defaults; the effective values are embedded in every JSON
report and can be printed with ``--print-config``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import io as bio
from .assigner import SceneError, assign
from .decoder import DecodeConfig, decode_image
from .geometry import DegenerateBoxError
from .losses import LossConfig, LossError, compute_losses
from .metrics import MatchProtocol, evaluate
from .parallel import map_ordered, resolve_workers
from .representation import GridSpec, RangeError, Variant
from .synth import PRESETS, NoiseConfig, SynthConfig, SynthError, gen_scenes, render_predicted, spec_for

log = logging.getLogger("partassoc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# -- flag tables: (flag, section, key, type, help) -------------------------------

DECODE_FLAGS = [
    ("--tb-conf", "body_conf", float, "body confidence threshold"),
    ("--tb-iou", "body_iou", float, "body NMS IoU threshold"),
    ("--tp-conf", "part_conf", float, "part confidence threshold"),
    ("--tp-iou", "part_iou", float, "part NMS IoU threshold"),
    ("--inner-iou", "inner_iou", float, "inner-IoU association gate"),
    ("--require-association", "require_association", int, "keep only bodies whose SLOT is filled"),
    ("--max-det", "max_detections", int, "detections kept per class after NMS"),
    ("--w-hand", "contact_hand_weight", float, "contact fusion weight of the part instance"),
    ("--w-body", "contact_body_weight", float, "contact fusion weight of the body instance"),
    ("--update-rule", "update_rule", str, "slot update rule: confidence | nearest_wins"),
]
LOSS_FLAGS = [
    ("--alpha", "alpha", float, "box loss weight"),
    ("--beta", "beta", float, "objectness loss weight"),
    ("--gamma", "gamma", float, "class loss weight"),
    ("--lambda", "lam", float, "offset loss weight"),
    ("--mu", "mu", float, "contact loss weight"),
    ("--batch-size", "batch_size", int, "batch size multiplier of the total"),
    ("--obj-target", "obj_target_mode", str, "objectness target: ciou | binary"),
]
EVAL_FLAGS = [
    ("--match-iou", "iou_threshold", float, "IoU threshold for a true positive"),
]


def _add_flags(p: argparse.ArgumentParser, table, section: str):
    for flag, key, typ, help_text in table:
        p.add_argument(flag, dest=f"{section}.{key}", type=typ, default=None, metavar=key.upper(),
                       help=help_text)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with sections decode/loss/eval/synth")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("--config-out", help="also write the effective config to this path")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (0 = auto); capped by BPJ_THREADS")
    p.add_argument("--out", help="output path (default: stdout where applicable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="partassoc", description="Body/part grid encoding, decoding and evaluation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="generate synthetic scenes and predicted grids")
    _common(p)
    p.add_argument("--preset", choices=PRESETS, default=None)
    p.add_argument("--layout", help="part layout JSON file (instead of --preset)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-images", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--bodies", type=int, nargs=2, metavar=("MIN", "MAX"), default=None)
    p.add_argument("--occlusion-cap", type=float, default=None)
    p.add_argument("--visibility", type=float, default=None)
    p.add_argument("--variant", choices=[v.value for v in Variant], default=None)
    p.add_argument("--noise", type=float, default=None, help="sigma for box, offset and score channels")
    p.add_argument("--noise-box", type=float, default=None)
    p.add_argument("--noise-offset", type=float, default=None)
    p.add_argument("--noise-score", type=float, default=None)
    p.add_argument("--fp-rate", type=float, default=None)
    p.add_argument("--fn-rate", type=float, default=None)
    p.add_argument("--grids", help="also write predicted grids to this grid dump")
    p.add_argument("--spec-out", help="write the grid spec JSON here")

    p = sub.add_parser("assign", help="encode scenes into target grids")
    _common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--spec", required=True)

    p = sub.add_parser("loss", help="loss values of predicted grids against targets")
    _common(p)
    p.add_argument("--pred", required=True, help="predicted grid dump")
    p.add_argument("--target", help="target grid dump (from assign)")
    p.add_argument("--scenes", help="scenes NDJSON to assign on the fly instead of --target")
    _add_flags(p, LOSS_FLAGS, "loss")

    p = sub.add_parser("decode", help="grid dump -> associated detections NDJSON")
    _common(p)
    p.add_argument("--grids", required=True)
    p.add_argument("--spec", help="grid spec JSON (default: the dump header)")
    _add_flags(p, DECODE_FLAGS, "decode")

    for name, help_text in (("eval", "score detections against ground truth"),
                            ("report", "evaluation table plus curve figures")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--det", required=name == "eval", help="detections NDJSON")
        p.add_argument("--gt", required=name == "eval", help="ground-truth scenes NDJSON")
        p.add_argument("--spec", help="grid spec JSON providing part labels and contact slots")
        _add_flags(p, EVAL_FLAGS, "eval")
        if name == "report":
            p.add_argument("--report", help="existing eval report JSON (instead of --det/--gt)")
            p.add_argument("--fig-dir", help="directory for figures (default: next to --out or .)")
    return parser


# -- config resolution ---------------------------------------------------------

def _defaults() -> dict[str, dict]:
    return {
        "decode": DecodeConfig().to_dict(),
        "loss": LossConfig().to_dict(),
        "eval": MatchProtocol().to_dict(),
        "synth": SynthConfig().to_dict(),
    }


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    """Effective settings: flags over config file over defaults."""
    conf = _defaults()
    if getattr(args, "config", None):
        path = args.config
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise bio.FormatError(f"{path}:{exc.lineno}: malformed JSON: {exc.msg}") from None
        if not isinstance(loaded, dict):
            raise bio.FormatError(f"{path}: config must be a JSON object")
        for section, values in loaded.items():
            if section not in conf:
                raise bio.FormatError(f"{path}: unknown config section {section!r}")
            if not isinstance(values, dict):
                raise bio.FormatError(f"{path}: section {section!r} must be an object")
            for key, value in values.items():
                if key not in conf[section]:
                    raise bio.FormatError(f"{path}: field {section}.{key} is not a known setting")
                conf[section][key] = value
    for dest, value in vars(args).items():
        if "." in dest and value is not None:
            section, key = dest.split(".", 1)
            conf[section][key] = value
    if args.command == "synth":
        _synth_flags(args, conf["synth"])
    conf["workers"] = resolve_workers(args.workers)
    return conf


def _synth_flags(args, s: dict):
    simple = {"preset": "preset", "seed": "seed", "n_images": "n_images", "width": "image_w",
              "height": "image_h", "bodies": "bodies_per_image", "occlusion_cap": "occlusion_cap",
              "visibility": "visibility"}
    for attr, key in simple.items():
        v = getattr(args, attr)
        if v is not None:
            s[key] = list(v) if isinstance(v, list) else v
    if args.layout:
        with open(args.layout, encoding="utf-8") as fh:
            s["preset"] = json.load(fh)
    noise = dict(s["noise"])
    if args.noise is not None:
        noise.update(box=args.noise, offset=args.noise, score=args.noise)
    for attr, key in (("noise_box", "box"), ("noise_offset", "offset"), ("noise_score", "score"),
                      ("fp_rate", "fp_rate"), ("fn_rate", "fn_rate")):
        v = getattr(args, attr)
        if v is not None:
            noise[key] = v
    s["noise"] = noise
    s.setdefault("variant", Variant.ANCHOR_BASED.value)
    if args.variant is not None:
        s["variant"] = args.variant


def _build(cls, values: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise bio.FormatError(f"config section {section!r}: unknown fields {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {section} setting: {exc}") from None


def _protocol(conf) -> MatchProtocol:
    return _build(MatchProtocol, conf["eval"], "eval")


# -- output helpers ------------------------------------------------------------

def _emit_text(text: str, out: str | None):
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _load_spec(path: str | None, fallback: GridSpec | None = None) -> GridSpec:
    if path:
        return bio.read_spec(path)
    if fallback is None:
        raise UsageError("a grid spec is required (--spec)")
    return fallback


# -- subcommands ---------------------------------------------------------------

def _render_one(job):
    scene, spec, noise, seed, index = job
    return render_predicted(scene, spec, noise, seed=seed, index=index)


def cmd_synth(args, conf) -> int:
    s = dict(conf["synth"])
    variant = s.pop("variant")
    cfg = _build(SynthConfig, s, "synth")
    spec = spec_for(cfg, variant)
    scenes = gen_scenes(cfg, spec)
    bio.write_scenes(scenes, args.out or sys.stdout)
    if args.spec_out:
        bio.write_spec(spec, args.spec_out)
    if args.grids:
        jobs = [(sc, spec, cfg.noise, cfg.seed, i) for i, sc in enumerate(scenes)]
        grids = map_ordered(_render_one, jobs, conf["workers"])
        bio.write_grid_dump(args.grids, spec, [sc.image_id for sc in scenes], grids,
                            extra={"kind": "predicted", "synth": _clean(cfg.to_dict())})
    return 0


def _assign_one(job):
    scene, spec = job
    t = assign(scene, spec)
    return t.tensors, t.diagnostics, t.warnings


def cmd_assign(args, conf) -> int:
    if not args.out:
        raise UsageError("assign writes a binary grid dump and needs --out")
    spec = bio.read_spec(args.spec)
    scenes = bio.read_scenes(args.scenes, spec.k)
    results = map_ordered(_assign_one, [(sc, spec) for sc in scenes], conf["workers"])
    totals: dict[str, int] = {}
    for sc, (_, diag, warns) in zip(scenes, results):
        for w in warns:
            log.warning("%s: %s", args.scenes, w)
        for key, v in diag.items():
            totals[key] = totals.get(key, 0) + v
    bio.write_grid_dump(args.out, spec, [sc.image_id for sc in scenes], [r[0] for r in results],
                        extra={"kind": "targets"})
    sys.stderr.write(json.dumps({"diagnostics": totals}) + "\n")
    return 0


def cmd_loss(args, conf) -> int:
    pred = bio.read_grid_dump(args.pred)
    spec = pred.spec
    if args.target:
        tgt = bio.read_grid_dump(args.target)
        if tgt.spec != spec:
            raise bio.FormatError(f"{args.target}: grid spec differs from {args.pred}")
        if tgt.images != pred.images:
            raise bio.FormatError(f"{args.target}: image list differs from {args.pred}")
        targets = tgt.grids
    elif args.scenes:
        scenes = {s.image_id: s for s in bio.read_scenes(args.scenes, spec.k)}
        missing = [i for i in pred.images if i not in scenes]
        if missing:
            raise bio.FormatError(f"{args.scenes}: no scene for image {missing[0]!r}")
        targets = [assign(scenes[i], spec).tensors for i in pred.images]
    else:
        raise UsageError("loss needs --target or --scenes")
    lconf = _build(LossConfig, conf["loss"], "loss")
    per_image = []
    for image_id, p, t in zip(pred.images, pred.grids, targets):
        rep = compute_losses(p, t, spec, lconf).to_dict()
        per_image.append({"image_id": image_id, **{k: rep[k] for k in ("components", "total", "per_stride",
                                                                      "counts", "flags")}})
    mean = {}
    for key in ("L_box", "L_obj", "L_cls", "L_bpd", "L_cts"):
        vals = [r["components"][key] for r in per_image if isinstance(r["components"].get(key), float)]
        mean[key] = float(np.mean(vals)) if vals else None
    mean["total"] = float(np.mean([r["total"] for r in per_image])) if per_image else None
    report = {"variant": spec.variant.value, "n_images": len(per_image), "mean": mean,
              "images": per_image, "config": conf_echo(conf, spec)}
    _emit_text(_json_text(_clean(report)), args.out)
    return 0


def _decode_one(job):
    grids, spec, dconf, image_id = job
    return bio.detections_to_record(decode_image(grids, spec, dconf, image_id))


def decode_records(dump: bio.GridDump, spec: GridSpec, dconf: DecodeConfig, workers: int = 1) -> list[dict]:
    jobs = [(g, spec, dconf, image_id) for image_id, g in zip(dump.images, dump.grids)]
    return map_ordered(_decode_one, jobs, workers)


def cmd_decode(args, conf) -> int:
    dump = bio.read_grid_dump(args.grids)
    spec = _load_spec(args.spec, dump.spec)
    if spec != dump.spec:
        raise bio.FormatError(f"{args.grids}: header grid spec differs from {args.spec}")
    dconf = _build(DecodeConfig, conf["decode"], "decode")
    if dconf.require_association is not None and not 0 <= dconf.require_association < spec.k:
        raise UsageError(f"--require-association {dconf.require_association} outside [0, {spec.k})")
    records = decode_records(dump, spec, dconf, conf["workers"])
    bio.write_ndjson(records, args.out or sys.stdout)
    return 0


def _labels_and_contact(args, scenes) -> tuple[list[str], list[int] | None]:
    if args.spec:
        spec = bio.read_spec(args.spec)
        return list(spec.part_labels), (list(spec.contact_slots) if spec.has_contact else None)
    k = max((len(b.parts) for s in scenes for b in s.bodies), default=0)
    if k == 0:
        raise bio.FormatError(f"{args.gt}: cannot infer the part count k; pass --spec")
    slots = sorted({j for s in scenes for b in s.bodies for j, p in enumerate(b.parts)
                    if p is not None and p.contact is not None})
    return [f"part{j}" for j in range(k)], (slots or None)


def run_eval(args, conf) -> dict:
    scenes = bio.read_scenes(args.gt)
    labels, contact_slots = _labels_and_contact(args, scenes)
    for s in scenes:
        s.validate(len(labels))
    dets = bio.read_detections(args.det, len(labels))
    report = evaluate(dets, scenes, labels, _protocol(conf), contact_slots)
    report["config"] = conf_echo(conf)
    return _clean(report)


def cmd_eval(args, conf) -> int:
    _emit_text(_json_text(run_eval(args, conf)), args.out)
    return 0


def cmd_report(args, conf) -> int:
    from .report import render_figures, summary_rows, to_tsv

    if args.report:
        with open(args.report, encoding="utf-8") as fh:
            try:
                report = json.load(fh)
            except json.JSONDecodeError as exc:
                raise bio.FormatError(f"{args.report}:{exc.lineno}: malformed JSON: {exc.msg}") from None
    elif args.det and args.gt:
        report = run_eval(args, conf)
    else:
        raise UsageError("report needs --report, or both --det and --gt")
    fig_dir = Path(args.fig_dir) if args.fig_dir else (Path(args.out).parent if args.out else Path("."))
    paths = render_figures(report, fig_dir)
    _emit_text(to_tsv(summary_rows(report)), args.out)
    for p in paths:
        sys.stderr.write(f"figure: {p}\n")
    return 0


def conf_echo(conf: dict, spec: GridSpec | None = None) -> dict:
    out = {key: conf[key] for key in ("decode", "loss", "eval", "workers")}
    if spec is not None and out["loss"].get("lambda_u") is None:
        out["loss"] = dict(out["loss"], lambda_u=1.0 / spec.k)
    return _clean(out)


COMMANDS = {"synth": cmd_synth, "assign": cmd_assign, "loss": cmd_loss, "decode": cmd_decode,
            "eval": cmd_eval, "report": cmd_report}

DATA_ERRORS = (bio.FormatError, SceneError, SynthError, LossError, RangeError, DegenerateBoxError,
               ValueError, OSError)


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        conf = resolve_config(args)
        if args.print_config or args.config_out:
            text = _json_text(_clean(conf))
            if args.config_out:
                Path(args.config_out).write_text(text, encoding="utf-8")
            if args.print_config:
                sys.stdout.write(text)
                return 0
        return COMMANDS[args.command](args, conf)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except DATA_ERRORS as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Joint body and body-part detection on multi-scale prediction grids.

The package encodes annotated scenes into per-stride target grids that carry
part/body center offsets next to the usual box, objectness and class
channels, evaluates the multi-task losses, decodes predicted grids into
associated body/part detections and scores them with AP, MR, mMR, Joint AP
and related metrics.  A seeded synthetic scene generator supplies ground
truth and "predicted" grids so every stage can be checked end to end.
"""
from .assigner import BodyAnnotation, PartAnnotation, Scene, TargetGrids, assign
from .decoder import DecodeConfig, ImageDetections, decode_image
from .geometry import Box, ciou, inner_iou, iou
from .losses import LossConfig, compute_losses
from .metrics import MatchProtocol, evaluate
from .representation import GridSpec, Variant, channel_layout
from .synth import NoiseConfig, SynthConfig, gen_scenes, render_predicted, spec_for

__version__ = "0.1.0"

__all__ = [
    "Box", "iou", "inner_iou", "ciou",
    "GridSpec", "Variant", "channel_layout",
    "Scene", "BodyAnnotation", "PartAnnotation", "TargetGrids", "assign",
    "LossConfig", "compute_losses",
    "DecodeConfig", "ImageDetections", "decode_image",
    "MatchProtocol", "evaluate",
    "SynthConfig", "NoiseConfig", "gen_scenes", "render_predicted", "spec_for",
]

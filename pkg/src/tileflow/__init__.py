"""Privacy-preserving distributed preprocessing of very large tiled images.

Pipeline: generate -> strip metadata -> split into tiles -> encode and scatter
over shards -> plan shard placement (cost vs makespan) -> simulate distributed
detection -> decode and aggregate into a per-class artifact mask.
"""

from .aggregation import ArtifactMask, aggregate, baseline_mask, evaluate, render_mask
from .detectors import DetectorSet, calibrate, detect
from .privacy import EncodedPartition, PerturbationSecret, audit, decode, encode, partition
from .scheduler import (
    EtModel,
    Infrastructure,
    ParetoFront,
    PlanPoint,
    eval_cost,
    eval_makespan,
    plan_exhaustive,
    plan_heuristic,
    select_plan,
)
from .simnet import DetectionOutput, ExecutionTrace, WorldConfig, replay, simulate
from .wsi import ARTIFACT_CLASSES, PlantedArtifact, SlideImage, generate_slide, split_tiles, strip_metadata

__version__ = "0.1.0"

__all__ = [
    "ARTIFACT_CLASSES",
    "ArtifactMask",
    "DetectionOutput",
    "DetectorSet",
    "EncodedPartition",
    "EtModel",
    "ExecutionTrace",
    "Infrastructure",
    "ParetoFront",
    "PerturbationSecret",
    "PlanPoint",
    "PlantedArtifact",
    "SlideImage",
    "WorldConfig",
    "aggregate",
    "audit",
    "baseline_mask",
    "calibrate",
    "decode",
    "detect",
    "encode",
    "eval_cost",
    "eval_makespan",
    "evaluate",
    "generate_slide",
    "partition",
    "plan_exhaustive",
    "plan_heuristic",
    "render_mask",
    "replay",
    "select_plan",
    "simulate",
    "split_tiles",
    "strip_metadata",
]

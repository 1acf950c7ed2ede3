"""Trusted-server aggregation: decode detector outputs into a per-class tile mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detectors import DetectorSet, detect
from .errors import ValidationError
from .metrics import binary_metrics
from .privacy import PerturbationSecret, decode
from .wsi import ARTIFACT_CLASSES, SlideImage, slide_to_bytes, split_tiles, truth_planes

PALETTE = {
    "background": (24, 24, 24),
    "blood": (220, 20, 30),
    "blur": (0, 200, 220),
    "fold": (140, 60, 180),
    "damage": (255, 140, 0),
    "bubble": (250, 230, 40),
    "multi": (255, 255, 255),
}


@dataclass(frozen=True, eq=False)
class ArtifactMask:
    planes: np.ndarray  # (5, rows, cols) bool

    def __post_init__(self):
        if self.planes.ndim != 3 or self.planes.shape[0] != len(ARTIFACT_CLASSES):
            raise ValidationError(f"mask planes must have shape (5, rows, cols), got {self.planes.shape}")

    @property
    def rows(self) -> int:
        return self.planes.shape[1]

    @property
    def cols(self) -> int:
        return self.planes.shape[2]

    def __eq__(self, other):
        return isinstance(other, ArtifactMask) and np.array_equal(self.planes, other.planes)

    def plane(self, kind: str) -> np.ndarray:
        return self.planes[ARTIFACT_CLASSES.index(kind)]

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "planes": {k: "".join("1" if b else "0" for b in self.plane(k).ravel()) for k in ARTIFACT_CLASSES},
        }

    @classmethod
    def from_dict(cls, d: dict) -> ArtifactMask:
        rows, cols = int(d["rows"]), int(d["cols"])
        planes = np.zeros((len(ARTIFACT_CLASSES), rows, cols), dtype=bool)
        for i, k in enumerate(ARTIFACT_CLASSES):
            bits = d["planes"][k]
            if len(bits) != rows * cols or set(bits) - {"0", "1"}:
                raise ValidationError(f"mask plane {k!r} is not a {rows}x{cols} bitstring")
            planes[i] = np.frombuffer(bits.encode(), dtype=np.uint8).reshape(rows, cols) == ord("1")
        return cls(planes)


def aggregate(outputs, secret: PerturbationSecret, shape: tuple[int, int], partitions=None) -> ArtifactMask:
    """Decode a complete output set into the mask aligned with the tile grid."""
    if tuple(shape) != secret.shape:
        raise ValidationError(f"grid shape {tuple(shape)} does not match the secret's {secret.shape}")
    aligned = decode(outputs, secret, partitions)
    if aligned.shape[2] != len(ARTIFACT_CLASSES):
        raise ValidationError(f"expected {len(ARTIFACT_CLASSES)} verdict bits, got {aligned.shape[2]}")
    return ArtifactMask(np.moveaxis(aligned, 2, 0).astype(bool))


def baseline_mask(slide: SlideImage, tile_size: int, detector: DetectorSet | None = None) -> ArtifactMask:
    """Single-machine reference: split, detect every tile in row-major order."""
    grid, _ = split_tiles(slide, tile_size)
    planes = np.zeros((len(ARTIFACT_CLASSES), grid.rows, grid.cols), dtype=bool)
    for t in grid.tiles:
        planes[:, t.row, t.col] = detect(t.pixels, detector)
    return ArtifactMask(planes)


def render_mask(mask: ArtifactMask, cell: int = 8) -> np.ndarray:
    """Colour-coded overlay, one ``cell``x``cell`` square per tile."""
    counts = mask.planes.sum(axis=0)
    img = np.empty((mask.rows, mask.cols, 3), dtype=np.uint8)
    img[:] = PALETTE["background"]
    for i, k in enumerate(ARTIFACT_CLASSES):
        img[(counts == 1) & mask.planes[i]] = PALETTE[k]
    img[counts > 1] = PALETTE["multi"]
    return np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)


def overlay_bytes(image: np.ndarray) -> bytes:
    """Overlay in the slide container format, without a metadata block."""
    h, w = image.shape[:2]
    return slide_to_bytes(SlideImage(w, h, image))


def evaluate(mask: ArtifactMask, truth) -> dict:
    """Per-class tile precision/recall/F1 against planted ground truth.

    ``truth`` is either an ArtifactMask, a (5, rows, cols) array, or a
    sequence of PlantedArtifact.
    """
    if isinstance(truth, ArtifactMask):
        planes = truth.planes
    elif isinstance(truth, np.ndarray):
        planes = truth.astype(bool)
    else:
        planes = truth_planes(truth, mask.rows, mask.cols)
    if planes.shape != mask.planes.shape:
        raise ValidationError(f"ground truth shape {planes.shape} does not match mask {mask.planes.shape}")
    return {k: binary_metrics(mask.planes[i], planes[i]) for i, k in enumerate(ARTIFACT_CLASSES)}


def summary_report(
    mask: ArtifactMask,
    metrics: dict | None = None,
    plan: dict | None = None,
    simulation: dict | None = None,
    audit: dict | None = None,
) -> dict:
    n = mask.rows * mask.cols
    counts = {k: int(mask.plane(k).sum()) for k in ARTIFACT_CLASSES}
    clean = int((~mask.planes.any(axis=0)).sum())
    return {
        "tiles": n,
        "class_counts": counts,
        "class_fractions": {k: c / n for k, c in counts.items()},
        "artifact_free_fraction": clean / n,
        "metrics": metrics,
        "plan": plan,
        "simulation": simulation,
        "privacy_audit": audit,
    }

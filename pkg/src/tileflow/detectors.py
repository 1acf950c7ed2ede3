"""Deterministic per-tile artifact detectors.

Five closed-form rules stand in for a learned ensemble. Each rule reads one
statistic of the tile and emits one bit; bit order follows
``ARTIFACT_CLASSES`` (blood, blur, fold, damage, bubble).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ValidationError
from .metrics import binary_metrics
from .wsi import split_tiles, strip_metadata, truth_planes

NEAR_WHITE = 230  # every channel at or above this counts as near-white

DEFAULT_THRESHOLDS = {
    "theta_blood": 80.0,
    "theta_blur": 20.0,
    "theta_fold": 70.0,
    "theta_fold_sat": 0.45,
    "theta_grad": 100.0,
    "theta_damage": 0.25,
    "theta_bubble": 0.5,
}

CALIBRATION_FACTORS = tuple(round(0.5 + 0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class DetectorSet:
    theta_blood: float = DEFAULT_THRESHOLDS["theta_blood"]
    theta_blur: float = DEFAULT_THRESHOLDS["theta_blur"]
    theta_fold: float = DEFAULT_THRESHOLDS["theta_fold"]
    theta_fold_sat: float = DEFAULT_THRESHOLDS["theta_fold_sat"]
    theta_grad: float = DEFAULT_THRESHOLDS["theta_grad"]
    theta_damage: float = DEFAULT_THRESHOLDS["theta_damage"]
    theta_bubble: float = DEFAULT_THRESHOLDS["theta_bubble"]
    window: int = 5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != "window" and not np.isfinite(value):
                raise ValidationError(f"{name} must be finite")
        if self.window < 3 or self.window % 2 == 0:
            raise ValidationError(f"window must be odd and >= 3, got {self.window}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> DetectorSet:
        fields = dict(d)
        fields["window"] = int(fields.get("window", 5))
        return cls(**fields)


def luminance(tile: np.ndarray) -> np.ndarray:
    rgb = tile.astype(np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def mean_local_variance(lum: np.ndarray, window: int) -> float:
    """Mean over all fully-contained ``window``x``window`` patches of the patch variance."""
    h, w = lum.shape
    if h < window or w < window:
        return float(lum.var())
    s1 = np.zeros((h + 1, w + 1))
    s2 = np.zeros((h + 1, w + 1))
    s1[1:, 1:] = lum.cumsum(0).cumsum(1)
    s2[1:, 1:] = (lum * lum).cumsum(0).cumsum(1)

    def box(s):
        return s[window:, window:] - s[:-window, window:] - s[window:, :-window] + s[:-window, :-window]

    n = window * window
    mean = box(s1) / n
    var = box(s2) / n - mean * mean
    return float(np.maximum(var, 0.0).mean())


def saturation(tile: np.ndarray) -> np.ndarray:
    rgb = tile.astype(np.float64)
    hi = rgb.max(axis=-1)
    lo = rgb.min(axis=-1)
    return np.divide(hi - lo, hi, out=np.zeros_like(hi), where=hi > 0)


def gradient_magnitude(lum: np.ndarray) -> np.ndarray:
    gx = lum[:-1, 1:] - lum[:-1, :-1]
    gy = lum[1:, :-1] - lum[:-1, :-1]
    return np.hypot(gx, gy)


def tile_statistics(tile: np.ndarray, window: int = 5, theta_grad: float = DEFAULT_THRESHOLDS["theta_grad"]) -> dict:
    """The five per-class statistics the rules compare against thresholds."""
    rgb = tile.astype(np.float64)
    lum = luminance(tile)
    return {
        "redness": float(rgb[..., 0].mean() - ((rgb[..., 1] + rgb[..., 2]) / 2).mean()),
        "local_variance": mean_local_variance(lum, window),
        "luminance": float(lum.mean()),
        "saturation": float(saturation(tile).mean()),
        "edge_fraction": float((gradient_magnitude(lum) > theta_grad).mean()),
        "white_fraction": float((tile >= NEAR_WHITE).all(axis=-1).mean()),
    }


def _verdicts(stats: dict, ds: DetectorSet) -> tuple[int, ...]:
    return (
        int(stats["redness"] > ds.theta_blood),
        int(stats["local_variance"] < ds.theta_blur),
        int(stats["luminance"] < ds.theta_fold and stats["saturation"] > ds.theta_fold_sat),
        int(stats["edge_fraction"] > ds.theta_damage),
        int(stats["white_fraction"] > ds.theta_bubble),
    )


def detect(tile: np.ndarray, ds: DetectorSet | None = None, tile_size: int | None = None) -> tuple[int, ...]:
    """Return the 5-bit verdict vector for one square RGB8 tile."""
    ds = ds or DetectorSet()
    tile = np.asarray(tile)
    if tile.ndim != 3 or tile.shape[2] != 3 or tile.shape[0] != tile.shape[1]:
        raise ValidationError(f"tile must be a square RGB block, got shape {tile.shape}")
    if tile_size is not None and tile.shape[0] != tile_size:
        raise ValidationError(f"tile is {tile.shape[0]}px, expected {tile_size}px")
    return _verdicts(tile_statistics(tile, ds.window, ds.theta_grad), ds)


# --- calibration -------------------------------------------------------------


def _corpus_tiles(slides):
    tiles, truth = [], []
    for slide in slides:
        if slide.tile_size is None:
            raise ValidationError("calibration slides must come from generate_slide (missing tile grid)")
        clean = strip_metadata(slide)[0] if not slide.stripped else slide
        grid, _ = split_tiles(clean, slide.tile_size)
        planes = truth_planes(slide.planted, grid.rows, grid.cols)
        for t in grid.tiles:
            tiles.append(t.pixels)
            truth.append(planes[:, t.row, t.col])
    return tiles, np.asarray(truth, dtype=bool)


def _pick(candidates, score):
    """Highest score; ties go to the candidate nearest the defaults, then the smallest."""
    best = max(score(c) for c in candidates)
    tied = [c for c in candidates if score(c) == best]
    return min(tied, key=lambda c: (sum(abs(f - 1.0) for f, _ in c), tuple(v for _, v in c)))


def calibrate(slides, window: int = 5, factors=CALIBRATION_FACTORS) -> DetectorSet:
    """Grid-search thresholds that maximize per-class tile F1 on a planted corpus.

    Candidates are the defaults scaled by ``factors``; fold and damage search
    their two thresholds jointly.
    """
    slides = list(slides)
    if not slides:
        raise ValidationError("calibration corpus is empty")
    tiles, truth = _corpus_tiles(slides)
    d = DEFAULT_THRESHOLDS
    base = [tile_statistics(t, window) for t in tiles]
    stat = {k: np.array([s[k] for s in base]) for k in base[0]}
    grads = [gradient_magnitude(luminance(t)) for t in tiles]

    def cands(name):
        return [(f, d[name] * f) for f in factors]

    def f1(pred, k):
        return binary_metrics(pred, truth[:, k])["f1"]

    blood = _pick([(c,) for c in cands("theta_blood")], lambda c: f1(stat["redness"] > c[0][1], 0))
    blur = _pick([(c,) for c in cands("theta_blur")], lambda c: f1(stat["local_variance"] < c[0][1], 1))
    fold = _pick(
        list(itertools.product(cands("theta_fold"), cands("theta_fold_sat"))),
        lambda c: f1((stat["luminance"] < c[0][1]) & (stat["saturation"] > c[1][1]), 2),
    )
    edge_cache = {}

    def edges(theta):
        if theta not in edge_cache:
            edge_cache[theta] = np.array([(g > theta).mean() for g in grads])
        return edge_cache[theta]

    damage = _pick(
        list(itertools.product(cands("theta_grad"), cands("theta_damage"))),
        lambda c: f1(edges(c[0][1]) > c[1][1], 3),
    )
    bubble = _pick([(c,) for c in cands("theta_bubble")], lambda c: f1(stat["white_fraction"] > c[0][1], 4))
    return DetectorSet(
        theta_blood=blood[0][1],
        theta_blur=blur[0][1],
        theta_fold=fold[0][1],
        theta_fold_sat=fold[1][1],
        theta_grad=damage[0][1],
        theta_damage=damage[1][1],
        theta_bubble=bubble[0][1],
        window=window,
    )



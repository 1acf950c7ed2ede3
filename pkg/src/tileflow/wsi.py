"""Synthetic slides, metadata stripping and tile-grid splitting.

A slide is an RGB8 pixel grid plus a privacy-sensitive header. The header has
to be moved into a :class:`MetadataVault` before the image may be split into
tiles; :func:`split_tiles` refuses unstripped input.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AlreadyStrippedError, InvalidSpecError, PrivacyError, ValidationError

ARTIFACT_CLASSES = ("blood", "blur", "fold", "damage", "bubble")
MAGIC = b"TFLW1"

# Pixel signatures planted by the generator. They are co-designed with the
# default detector thresholds in ``detectors.DEFAULT_THRESHOLDS``: every
# planted statistic clears its threshold by at least 20%, and the background
# stays at least 20% on the quiet side of every threshold.
TISSUE_PINK = (225, 175, 205)
TISSUE_PURPLE = (180, 130, 200)
BACKGROUND_NOISE = 20
BLOOD_RGB = (220, 40, 50)
FOLD_RGB = (80, 25, 100)
BUBBLE_LEVEL = 243
DAMAGE_LIGHT = (215, 190, 200)
DAMAGE_DARK = (90, 60, 80)
SIGNATURE_NOISE = {"blood": 10, "fold": 10, "bubble": 11, "damage": 4}


@dataclass(frozen=True)
class MetadataVault:
    patient_id: str
    scanner_id: str
    acquisition_date: str
    site_name: str
    sentinel: str

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "scanner_id": self.scanner_id,
            "acquisition_date": self.acquisition_date,
            "site_name": self.site_name,
            "sentinel": self.sentinel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetadataVault:
        return cls(**{k: str(d[k]) for k in ("patient_id", "scanner_id", "acquisition_date", "site_name", "sentinel")})

    def values(self) -> tuple[str, ...]:
        return tuple(self.to_dict().values())


@dataclass(frozen=True)
class PlantedArtifact:
    """Ground-truth artifact covering a rectangle of whole tiles.

    ``row``/``col`` give the top-left tile, ``n_rows``/``n_cols`` the extent.
    """

    kind: str
    row: int
    col: int
    n_rows: int = 1
    n_cols: int = 1

    def cells(self):
        for i in range(self.row, self.row + self.n_rows):
            for j in range(self.col, self.col + self.n_cols):
                yield i, j


@dataclass(frozen=True, eq=False)
class SlideImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8
    header: MetadataVault | None = None
    planted: tuple[PlantedArtifact, ...] = ()
    tile_size: int | None = None  # grid the planted regions refer to

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"slide dimensions must be positive, got {self.width}x{self.height}")
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ValidationError(
                f"pixel buffer must be uint8 of shape {(self.height, self.width, 3)}, got {self.pixels.dtype}{self.pixels.shape}"
            )

    @property
    def stripped(self) -> bool:
        return self.header is None

    def checksum(self) -> str:
        return hashlib.sha256(self.pixels.tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class Tile:
    tile_id: int
    row: int
    col: int
    pixels: np.ndarray  # (tile_size, tile_size, 3) uint8, zero-padded at edges


@dataclass(frozen=True)
class TileRef:
    tile_id: int
    row: int
    col: int


@dataclass(frozen=True, eq=False)
class TileGrid:
    tile_size: int
    rows: int
    cols: int
    tiles: list[Tile] = field(default_factory=list)
    width: int = 0
    height: int = 0

    def __len__(self) -> int:
        return len(self.tiles)

    def tile(self, tile_id: int) -> Tile:
        return self.tiles[tile_id]


@dataclass(frozen=True)
class CoordinateMatrix:
    """Tile-distribution record: entry (i, j) points at the tile whose origin is (i, j)."""

    rows: int
    cols: int
    entries: tuple[TileRef, ...]

    def at(self, i: int, j: int) -> TileRef:
        return self.entries[i * self.cols + j]

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @classmethod
    def for_shape(cls, rows: int, cols: int) -> CoordinateMatrix:
        return cls(rows, cols, tuple(TileRef(i * cols + j, i, j) for i in range(rows) for j in range(cols)))


def grid_shape(width: int, height: int, tile_size: int) -> tuple[int, int]:
    return math.ceil(height / tile_size), math.ceil(width / tile_size)


def _synthetic_header(rng: np.random.Generator, seed: int, sentinel: str | None) -> MetadataVault:
    sites = ("St. Olav", "Haukeland", "Radboud", "Karolinska", "Charite")
    year = int(rng.integers(2015, 2024))
    month = int(rng.integers(1, 13))
    day = int(rng.integers(1, 29))
    return MetadataVault(
        patient_id="PID-" + "".join(f"{int(b):02X}" for b in rng.integers(0, 256, size=6)),
        scanner_id="SCN-" + "".join(f"{int(b):02X}" for b in rng.integers(0, 256, size=4)),
        acquisition_date=f"{year:04d}-{month:02d}-{day:02d}",
        site_name=f"{sites[int(rng.integers(len(sites)))]} Pathology Lab {int(rng.integers(1, 100))}",
        sentinel=sentinel if sentinel is not None else f"VAULT-MARK-{seed}",
    )


def _shared_noise(rng: np.random.Generator, shape: tuple[int, int], amplitude: int) -> np.ndarray:
    """Integer noise in [-amplitude, amplitude], identical across RGB channels."""
    return rng.integers(-amplitude, amplitude + 1, size=shape, dtype=np.int16)[..., None]


def _tissue(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    # low-frequency eosin/hematoxylin mix; gradients stay far below the damage threshold
    px, py, fx, fy = rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi), rng.uniform(30, 60), rng.uniform(30, 60)
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    mix = 0.5 + 0.5 * np.sin(xs / fx + px) * np.cos(ys / fy + py)
    pink = np.asarray(TISSUE_PINK, dtype=np.float64)
    purple = np.asarray(TISSUE_PURPLE, dtype=np.float64)
    return pink + mix[..., None] * (purple - pink)


def _paint(kind: str, smooth: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Return an int16 RGB block carrying the pixel signature of ``kind``."""
    h, w = smooth.shape[:2]
    if kind == "blur":
        return np.rint(smooth).astype(np.int16)
    if kind == "damage":
        # torn tissue: 2-px alternating stripes with a large luminance jump
        stripes = (np.arange(w) // 2) % 2 == 0
        base = np.where(stripes[None, :, None], np.asarray(DAMAGE_LIGHT), np.asarray(DAMAGE_DARK))
        base = np.broadcast_to(base, (h, w, 3)).astype(np.int16)
        return base + _shared_noise(rng, (h, w), SIGNATURE_NOISE["damage"])
    if kind == "bubble":
        base = np.full((h, w, 3), BUBBLE_LEVEL, dtype=np.int16)
        return base + _shared_noise(rng, (h, w), SIGNATURE_NOISE["bubble"])
    rgb = {"blood": BLOOD_RGB, "fold": FOLD_RGB}[kind]
    base = np.broadcast_to(np.asarray(rgb, dtype=np.int16), (h, w, 3))
    return base + _shared_noise(rng, (h, w), SIGNATURE_NOISE[kind])


def validate_artifacts(width: int, height: int, tile_size: int, artifacts) -> None:
    rows, cols = grid_shape(width, height, tile_size)
    for a in artifacts:
        if a.kind not in ARTIFACT_CLASSES:
            raise InvalidSpecError(f"unknown artifact class {a.kind!r}")
        if a.n_rows < 1 or a.n_cols < 1 or a.row < 0 or a.col < 0:
            raise InvalidSpecError(f"degenerate region {a}")
        if a.row + a.n_rows > rows or a.col + a.n_cols > cols:
            raise InvalidSpecError(f"region {a} lies outside the {rows}x{cols} tile grid")


def generate_slide(
    seed: int,
    width: int,
    height: int,
    artifacts=(),
    tile_size: int = 128,
    sentinel: str | None = None,
) -> SlideImage:
    """Build a deterministic tissue-like slide with planted artifact regions.

    Regions are painted in list order, so a later region overwrites an
    earlier one where they overlap.
    """
    if tile_size <= 0:
        raise InvalidSpecError("tile_size must be positive")
    if width < tile_size or height < tile_size:
        raise InvalidSpecError(f"slide {width}x{height} is smaller than one {tile_size}px tile")
    artifacts = tuple(artifacts)
    validate_artifacts(width, height, tile_size, artifacts)

    rng = np.random.default_rng(seed)
    header = _synthetic_header(rng, seed, sentinel)
    smooth = _tissue(rng, height, width)
    img = np.rint(smooth).astype(np.int16) + _shared_noise(rng, (height, width), BACKGROUND_NOISE)
    for a in artifacts:
        y0, y1 = a.row * tile_size, min((a.row + a.n_rows) * tile_size, height)
        x0, x1 = a.col * tile_size, min((a.col + a.n_cols) * tile_size, width)
        img[y0:y1, x0:x1] = _paint(a.kind, smooth[y0:y1, x0:x1], rng)
    pixels = np.clip(img, 0, 255).astype(np.uint8)
    return SlideImage(width, height, pixels, header=header, planted=artifacts, tile_size=tile_size)


def strip_metadata(slide: SlideImage) -> tuple[SlideImage, MetadataVault]:
    if slide.header is None:
        raise AlreadyStrippedError("slide has no metadata header; it was already stripped")
    return replace(slide, header=None), slide.header


def split_tiles(slide: SlideImage, tile_size: int) -> tuple[TileGrid, CoordinateMatrix]:
    if not slide.stripped:
        raise PrivacyError("refusing to split a slide that still carries its metadata header")
    if tile_size <= 0:
        raise ValidationError("tile_size must be positive")
    rows, cols = grid_shape(slide.width, slide.height, tile_size)
    padded = np.zeros((rows * tile_size, cols * tile_size, 3), dtype=np.uint8)
    padded[: slide.height, : slide.width] = slide.pixels
    tiles = []
    for i in range(rows):
        for j in range(cols):
            block = padded[i * tile_size : (i + 1) * tile_size, j * tile_size : (j + 1) * tile_size].copy()
            tiles.append(Tile(i * cols + j, i, j, block))
    grid = TileGrid(tile_size, rows, cols, tiles, width=slide.width, height=slide.height)
    return grid, CoordinateMatrix.for_shape(rows, cols)


def reassemble(grid: TileGrid, coords: CoordinateMatrix) -> np.ndarray:
    """Put tiles back at their recorded coordinates and crop the padding."""
    ts = grid.tile_size
    out = np.zeros((grid.rows * ts, grid.cols * ts, 3), dtype=np.uint8)
    for ref in coords.entries:
        out[ref.row * ts : (ref.row + 1) * ts, ref.col * ts : (ref.col + 1) * ts] = grid.tile(ref.tile_id).pixels
    return out[: grid.height, : grid.width]


def truth_planes(planted, rows: int, cols: int) -> np.ndarray:
    """Per-class boolean planes (5, rows, cols) marking planted tiles."""
    planes = np.zeros((len(ARTIFACT_CLASSES), rows, cols), dtype=bool)
    for a in planted:
        k = ARTIFACT_CLASSES.index(a.kind)
        for i, j in a.cells():
            planes[k, i, j] = True
    return planes


# --- container file ----------------------------------------------------------


def slide_to_bytes(slide: SlideImage) -> bytes:
    parts = [MAGIC, struct.pack("<II", slide.width, slide.height), slide.pixels.tobytes()]
    if slide.header is not None:
        meta = json.dumps(slide.header.to_dict(), sort_keys=True).encode("utf-8")
        parts += [struct.pack("<I", len(meta)), meta]
    return b"".join(parts)


def slide_from_bytes(data: bytes) -> SlideImage:
    if data[:5] != MAGIC:
        raise ValidationError("not a slide container (bad magic)")
    width, height = struct.unpack_from("<II", data, 5)
    start = 13
    end = start + width * height * 3
    if len(data) < end:
        raise ValidationError("truncated pixel buffer")
    pixels = np.frombuffer(data[start:end], dtype=np.uint8).reshape(height, width, 3).copy()
    header = None
    if len(data) > end:
        (n,) = struct.unpack_from("<I", data, end)
        blob = data[end + 4 : end + 4 + n]
        if len(blob) != n:
            raise ValidationError("truncated metadata block")
        header = MetadataVault.from_dict(json.loads(blob.decode("utf-8")))
    return SlideImage(width, height, pixels, header=header)


def write_slide(path, slide: SlideImage) -> None:
    with open(path, "wb") as fh:
        fh.write(slide_to_bytes(slide))


def read_slide(path) -> SlideImage:
    with open(path, "rb") as fh:
        return slide_from_bytes(fh.read())


def tile_manifest(grid: TileGrid) -> list[dict]:
    block = grid.tile_size * grid.tile_size * 3
    return [{"tile_id": t.tile_id, "row": t.row, "col": t.col, "byte_offset": t.tile_id * block} for t in grid.tiles]


def tiles_blob(grid: TileGrid) -> bytes:
    return b"".join(t.pixels.tobytes() for t in grid.tiles)


def grid_from_blob(manifest: list[dict], blob: bytes, tile_size: int, width: int, height: int) -> TileGrid:
    rows, cols = grid_shape(width, height, tile_size)
    block = tile_size * tile_size * 3
    tiles = []
    for rec in sorted(manifest, key=lambda r: r["tile_id"]):
        off = rec["byte_offset"]
        px = np.frombuffer(blob[off : off + block], dtype=np.uint8).reshape(tile_size, tile_size, 3).copy()
        tiles.append(Tile(rec["tile_id"], rec["row"], rec["col"], px))
    if len(tiles) != rows * cols:
        raise ValidationError(f"manifest lists {len(tiles)} tiles, expected {rows * cols}")
    return TileGrid(tile_size, rows, cols, tiles, width=width, height=height)

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tileflow.detectors import DEFAULT_THRESHOLDS, luminance
from tileflow.errors import AlreadyStrippedError, InvalidSpecError, PrivacyError
from tileflow.wsi import (
    CoordinateMatrix,
    PlantedArtifact,
    SlideImage,
    generate_slide,
    grid_from_blob,
    reassemble,
    read_slide,
    slide_from_bytes,
    slide_to_bytes,
    split_tiles,
    strip_metadata,
    tile_manifest,
    tiles_blob,
    write_slide,
)


def brute_local_variance(lum, window):
    h, w = lum.shape
    vals = []
    for y in range(h - window + 1):
        for x in range(w - window + 1):
            patch = lum[y : y + window, x : x + window]
            m = sum(patch.ravel()) / patch.size
            vals.append(sum((v - m) ** 2 for v in patch.ravel()) / patch.size)
    return sum(vals) / len(vals)


def test_generate_is_deterministic():
    a = generate_slide(7, 512, 512, [])
    b = generate_slide(7, 512, 512, [])
    assert slide_to_bytes(a) == slide_to_bytes(b)


def test_generate_is_seed_sensitive():
    planted = [PlantedArtifact("blood", 1, 1)]
    a = generate_slide(7, 512, 512, planted)
    b = generate_slide(8, 512, 512, planted)
    assert a.pixels.tobytes() != b.pixels.tobytes()


def test_planted_blur_region_has_low_local_variance():
    slide = generate_slide(7, 512, 512, [PlantedArtifact("blur", 0, 0, 2, 2)])
    lum = luminance(slide.pixels[:40, :40])
    assert brute_local_variance(lum, 5) < DEFAULT_THRESHOLDS["theta_blur"]
    # the untouched background is far noisier
    bg = luminance(slide.pixels[300:340, 300:340])
    assert brute_local_variance(bg, 5) > 5 * DEFAULT_THRESHOLDS["theta_blur"]


@pytest.mark.parametrize(
    "region",
    [PlantedArtifact("blood", 4, 0), PlantedArtifact("blur", 0, 3, 1, 2), PlantedArtifact("smudge", 0, 0)],
)
def test_invalid_regions_rejected(region):
    with pytest.raises(InvalidSpecError):
        generate_slide(1, 512, 512, [region])


def test_slide_smaller_than_tile_rejected():
    with pytest.raises(InvalidSpecError):
        generate_slide(1, 100, 512, [], tile_size=128)


def test_header_carries_sentinel():
    slide = generate_slide(13, 256, 256, [], tile_size=128)
    assert slide.header.sentinel == "VAULT-MARK-13"
    assert b"VAULT-MARK-13" in slide_to_bytes(slide)


def test_strip_removes_every_metadata_value():
    slide = generate_slide(13, 256, 256, [], tile_size=128)
    clean, vault = strip_metadata(slide)
    blob = slide_to_bytes(clean)
    assert clean.header is None
    assert blob.count(b"VAULT-MARK-13") == 0
    for value in vault.values():
        assert value.encode() not in blob
    assert vault == slide.header


def test_strip_twice_raises():
    clean, _ = strip_metadata(generate_slide(1, 256, 256, [], tile_size=128))
    with pytest.raises(AlreadyStrippedError):
        strip_metadata(clean)


def test_strip_leaves_pixels_untouched():
    slide = generate_slide(2, 300, 200, [PlantedArtifact("fold", 0, 0)], tile_size=128)
    before = slide.checksum()
    clean, _ = strip_metadata(slide)
    assert clean.checksum() == before


def test_split_requires_stripped_slide():
    with pytest.raises(PrivacyError):
        split_tiles(generate_slide(1, 256, 256, [], tile_size=128), 128)


def test_split_512_by_128():
    clean, _ = strip_metadata(generate_slide(1, 512, 512, []))
    grid, coords = split_tiles(clean, 128)
    assert (grid.rows, grid.cols, len(grid)) == (4, 4, 16)
    assert coords.shape == (4, 4)


def test_split_pads_edge_tiles():
    clean, _ = strip_metadata(generate_slide(1, 130, 130, [], tile_size=128))
    grid, _ = split_tiles(clean, 128)
    assert (grid.rows, grid.cols) == (2, 2)
    edge = grid.tile(3).pixels
    assert edge.shape == (128, 128, 3)
    assert not edge[2:].any() and not edge[:, 2:].any()
    np.testing.assert_array_equal(edge[:2, :2], clean.pixels[128:, 128:])


def test_coordinate_matrix_is_a_bijection():
    clean, _ = strip_metadata(generate_slide(1, 640, 384, [], tile_size=128))
    grid, coords = split_tiles(clean, 128)
    ids = [ref.tile_id for ref in coords.entries]
    assert sorted(ids) == list(range(len(grid)))
    for i in range(coords.rows):
        for j in range(coords.cols):
            ref = coords.at(i, j)
            assert (ref.row, ref.col) == (i, j)
            t = grid.tile(ref.tile_id)
            assert (t.row, t.col) == (i, j)


@settings(max_examples=60, deadline=None)
@given(
    width=st.integers(1, 70),
    height=st.integers(1, 70),
    data=st.data(),
)
def test_split_reassemble_round_trip(width, height, data):
    tile_size = data.draw(st.integers(1, max(width, height)))
    rng = np.random.default_rng(width * 1000 + height)
    pixels = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    slide = SlideImage(width, height, pixels)
    grid, coords = split_tiles(slide, tile_size)
    np.testing.assert_array_equal(reassemble(grid, coords), pixels)


def test_container_round_trip(tmp_path):
    slide = generate_slide(5, 256, 128, [], tile_size=128)
    path = tmp_path / "s.tflw"
    write_slide(path, slide)
    data = path.read_bytes()
    assert data[:5] == b"TFLW1"
    assert int.from_bytes(data[5:9], "little") == 256
    assert int.from_bytes(data[9:13], "little") == 128
    back = read_slide(path)
    assert back.header == slide.header
    np.testing.assert_array_equal(back.pixels, slide.pixels)
    clean, _ = strip_metadata(back)
    assert len(slide_to_bytes(clean)) == 13 + 256 * 128 * 3
    assert slide_from_bytes(slide_to_bytes(clean)).header is None


def test_tile_manifest_offsets_index_the_blob():
    clean, _ = strip_metadata(generate_slide(5, 300, 200, [], tile_size=64))
    grid, _ = split_tiles(clean, 64)
    manifest = json.loads(json.dumps(tile_manifest(grid)))
    assert [m["tile_id"] for m in manifest] == list(range(len(grid)))
    back = grid_from_blob(manifest, tiles_blob(grid), 64, 300, 200)
    np.testing.assert_array_equal(reassemble(back, CoordinateMatrix.for_shape(grid.rows, grid.cols)), clean.pixels)

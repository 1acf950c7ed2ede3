import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import prepare
from tileflow.errors import IncompleteAggregationError, PrivacyError, ValidationError
from tileflow.privacy import (
    NOISE_MAGNITUDE,
    EncodedPartition,
    PerturbationSecret,
    audit,
    decode,
    decode_matrix,
    encode,
    shard_assignment,
)
from tileflow.simnet import DetectionOutput
from tileflow.wsi import CoordinateMatrix, PlantedArtifact, generate_slide


def adjacent_pairs(rows, cols):
    for i, j in itertools.product(range(rows), range(cols)):
        if i + 1 < rows:
            yield (i, j), (i + 1, j)
        if j + 1 < cols:
            yield (i, j), (i, j + 1)


def brute_pearson(xs, ys):
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    return sxy / math.sqrt(sxx * syy)


@settings(max_examples=500, deadline=None)
@given(rows=st.integers(1, 24), cols=st.integers(1, 24), seed=st.integers(0, 2**31))
def test_encode_decode_round_trip(rows, cols, seed):
    coords = CoordinateMatrix.for_shape(rows, cols)
    secret = PerturbationSecret.from_seed(seed, rows, cols)
    assert decode_matrix(encode(coords, secret), secret) == coords


def test_identity_secret_leaves_coordinates_alone():
    coords = CoordinateMatrix.for_shape(3, 5)
    enc = encode(coords, PerturbationSecret.identity(3, 5))
    for e in enc.entries:
        ref = coords.entries[e.encoded_id]
        assert (e.noisy_row, e.noisy_col) == (ref.row, ref.col)


def test_noise_is_large_and_nonzero():
    s = PerturbationSecret.from_seed(1, 16, 16)
    mag = np.abs(s.noise)
    assert mag.min() >= 1 and mag.max() <= NOISE_MAGNITUDE
    assert (s.noise < 0).any() and (s.noise > 0).any()


def test_encode_shape_mismatch():
    with pytest.raises(ValidationError):
        encode(CoordinateMatrix.for_shape(3, 3), PerturbationSecret.from_seed(0, 3, 4))


def test_tampered_encoding_is_detected():
    coords = CoordinateMatrix.for_shape(4, 4)
    secret = PerturbationSecret.from_seed(0, 4, 4)
    enc = encode(coords, secret)
    e = enc.entries[5]
    bad = type(enc)(4, 4, enc.entries[:5] + (type(e)(5, e.noisy_row + 1, e.noisy_col),) + enc.entries[6:])
    with pytest.raises(PrivacyError):
        decode_matrix(bad, secret)


def test_row_correlation_32x32():
    secret = PerturbationSecret.from_seed(2024, 32, 32)
    enc = encode(CoordinateMatrix.for_shape(32, 32), secret)
    inv = secret.inverse.tolist()
    true_rows = [inv[e.encoded_id] // 32 for e in enc.entries]
    noisy = [e.noisy_row for e in enc.entries]
    by_position = [e.encoded_id // 32 for e in enc.entries]
    assert abs(brute_pearson(true_rows, noisy)) < 0.1
    assert abs(brute_pearson(true_rows, by_position)) < 0.1


def test_secret_json_round_trip():
    s = PerturbationSecret.from_seed(4, 5, 6)
    back = PerturbationSecret.from_dict(json.loads(json.dumps(s.to_dict())))
    assert back.key == s.key
    np.testing.assert_array_equal(back.noise, s.noise)
    np.testing.assert_array_equal(back.permutation, s.permutation)


def test_latin_scatter_4x4_k4():
    shard = shard_assignment(4, 4, 4)
    assert np.bincount(shard.ravel()).tolist() == [4, 4, 4, 4]
    pairs = list(adjacent_pairs(4, 4))
    assert len(pairs) == 24
    assert sum(shard[a] == shard[b] for a, b in pairs) == 0


def test_latin_scatter_singletons():
    shard = shard_assignment(4, 4, 16)
    assert sorted(shard.ravel().tolist()) == list(range(16))


def test_latin_scatter_2x2_checkerboard():
    shard = shard_assignment(2, 2, 2)
    assert shard[0, 0] == shard[1, 1] != shard[0, 1] == shard[1, 0]


@pytest.mark.parametrize("K", [0, 1])
def test_too_few_shards(K):
    with pytest.raises(PrivacyError):
        shard_assignment(4, 4, K)


def test_too_many_shards():
    with pytest.raises(ValidationError):
        shard_assignment(2, 2, 5)


def test_unknown_policy():
    with pytest.raises(ValidationError):
        shard_assignment(2, 2, 2, "striped")


@settings(max_examples=300, deadline=None)
@given(rows=st.integers(1, 14), cols=st.integers(1, 14), data=st.data())
def test_latin_scatter_balanced_and_adjacency_free(rows, cols, data):
    n = rows * cols
    if n < 2:
        return
    K = data.draw(st.integers(2, n))
    shard = shard_assignment(rows, cols, K)
    sizes = np.bincount(shard.ravel(), minlength=K)
    assert sizes.max() - sizes.min() <= 1
    assert all(shard[a] != shard[b] for a, b in adjacent_pairs(rows, cols))


@settings(max_examples=100, deadline=None)
@given(rows=st.integers(1, 12), cols=st.integers(1, 12), K=st.integers(2, 8))
def test_random_policy_balanced(rows, cols, K):
    if K > rows * cols:
        return
    sizes = np.bincount(shard_assignment(rows, cols, K, "random").ravel(), minlength=K)
    assert sizes.max() - sizes.min() <= 1


def test_audit_8x8_k4():
    slide = generate_slide(8, 512, 512, [], tile_size=64)
    _, vault, grid, coords, secret, parts = prepare(slide, 64, 4)
    pairs = list(adjacent_pairs(8, 8))
    assert len(pairs) == 112
    shard = {}
    inv = secret.inverse
    for p in parts:
        for eid in p.encoded_ids:
            shard[divmod(int(inv[eid]), 8)] = p.shard_index
    assert sum(shard[a] == shard[b] for a, b in pairs) == 0
    report = audit(parts, coords, secret, vault.values())
    assert report.adjacency_violations == 0
    assert report.sentinel_leaks == 0
    assert -1 <= report.coord_correlation <= 1


def test_audit_single_shard_counts_every_pair():
    slide = generate_slide(8, 256, 192, [], tile_size=64)
    _, _, grid, coords, secret, parts = prepare(slide, 64, 2)
    everything = EncodedPartition(
        1,
        tuple(sorted((e for p in parts for e in p.entries), key=lambda e: e.encoded_id)),
        {k: v for p in parts for k, v in p.payload.items()},
    )
    report = audit([everything], coords, secret)
    assert report.adjacency_violations == len(list(adjacent_pairs(3, 4))) == 17


def test_audit_requires_full_coverage():
    slide = generate_slide(8, 256, 256, [], tile_size=64)
    _, _, _, coords, secret, parts = prepare(slide, 64, 4)
    with pytest.raises(ValidationError):
        audit(parts[1:], coords, secret)


def test_partitions_cover_tiles_exactly_once():
    slide = generate_slide(3, 320, 256, [PlantedArtifact("blood", 0, 0)], tile_size=64)
    _, _, grid, _, secret, parts = prepare(slide, 64, 3)
    ids = [eid for p in parts for eid in p.encoded_ids]
    assert sorted(ids) == list(range(len(grid)))
    inv = secret.inverse
    for p in parts:
        for eid in p.encoded_ids:
            np.testing.assert_array_equal(p.payload[eid], grid.tile(int(inv[eid])).pixels)


def test_serialized_partitions_leak_nothing():
    slide = generate_slide(21, 512, 512, [], tile_size=128)
    _, vault, grid, _, secret, parts = prepare(slide, 128, 4)
    blobs = b"".join(p.serialized() for p in parts)
    for value in vault.values():
        assert value.encode() not in blobs
    assert secret.key not in blobs and secret.key.hex().encode() not in blobs
    inv = secret.inverse
    for p in parts:
        meta = json.loads(p.serialized()[: -len(p.payload_bytes())])
        assert set(meta) == {"shard_index", "entries", "payload_file"}
        for e in meta["entries"]:
            assert set(e) == {"encoded_id", "noisy_coord"}
            true = divmod(int(inv[e["encoded_id"]]), grid.cols)
            # nonzero noise on both axes: the true value never appears verbatim
            assert e["noisy_coord"][0] != true[0] and e["noisy_coord"][1] != true[1]
        back = EncodedPartition.from_serialized(meta, p.payload_bytes(), 128)
        assert back.encoded_ids == p.encoded_ids


def outputs_for(parts):
    return [DetectionOutput(eid, (eid % 2, 0, 0, 0, 1), p.shard_index) for p in parts for eid in p.encoded_ids]


def test_decode_places_every_verdict():
    slide = generate_slide(3, 256, 256, [], tile_size=64)
    _, _, _, _, secret, parts = prepare(slide, 64, 4)
    aligned = decode(outputs_for(parts)[::-1], secret, parts)
    inv = secret.inverse
    for eid in range(16):
        r, c = divmod(int(inv[eid]), 4)
        assert aligned[r, c].tolist() == [eid % 2, 0, 0, 0, 1]


def test_decode_names_missing_shard():
    slide = generate_slide(3, 256, 256, [], tile_size=64)
    _, _, _, _, secret, parts = prepare(slide, 64, 4)
    outs = [o for o in outputs_for(parts) if o.shard_index != 3]
    with pytest.raises(IncompleteAggregationError, match="shard\\(s\\) 3") as exc:
        decode(outs, secret, parts)
    assert exc.value.missing_shards == (3,)


def test_decode_rejects_duplicates():
    slide = generate_slide(3, 256, 256, [], tile_size=64)
    _, _, _, _, secret, parts = prepare(slide, 64, 4)
    outs = outputs_for(parts)
    with pytest.raises(IncompleteAggregationError, match="duplicate"):
        decode(outs + outs[:1], secret, parts)

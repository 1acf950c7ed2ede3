"""Coordinate encoding, shard partitioning and leakage audit.

The trusted server holds a :class:`PerturbationSecret`. Encoding replaces every
tile id with a keyed permutation of itself and adds large integer noise to its
grid coordinates; only the secret maps results back to their positions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import IncompleteAggregationError, PrivacyError, ValidationError
from .wsi import CoordinateMatrix, TileGrid, TileRef

NOISE_MAGNITUDE = 1 << 20
POLICIES = ("latin-scatter", "random")


def _rng_from(key: bytes, *salt) -> np.random.Generator:
    digest = hashlib.sha256(key + b"".join(str(s).encode() + b"\x00" for s in salt)).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype=np.uint32))


@dataclass(frozen=True, eq=False)
class PerturbationSecret:
    key: bytes
    noise: np.ndarray  # (rows, cols, 2) integer offsets
    permutation: np.ndarray  # permutation[tile_id] -> encoded_id

    def __post_init__(self):
        if len(self.key) != 32:
            raise ValidationError("secret key must be 32 bytes")
        n = self.noise.shape[0] * self.noise.shape[1]
        if self.noise.ndim != 3 or self.noise.shape[2] != 2:
            raise ValidationError("noise must have shape (rows, cols, 2)")
        if sorted(self.permutation.tolist()) != list(range(n)):
            raise ValidationError("permutation is not a bijection over tile ids")

    @property
    def shape(self) -> tuple[int, int]:
        return self.noise.shape[0], self.noise.shape[1]

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(len(self.permutation))
        return inv

    @classmethod
    def from_key(cls, key: bytes, rows: int, cols: int) -> PerturbationSecret:
        rng = _rng_from(key, "secret", rows, cols)
        permutation = rng.permutation(rows * cols)
        magnitude = rng.integers(1, NOISE_MAGNITUDE + 1, size=(rows, cols, 2), dtype=np.int64)
        sign = np.where(rng.integers(0, 2, size=(rows, cols, 2)) == 0, -1, 1)
        return cls(key, magnitude * sign, permutation)

    @classmethod
    def from_seed(cls, seed: int, rows: int, cols: int) -> PerturbationSecret:
        """Reproducible secret for tests and repeatable runs."""
        return cls.from_key(hashlib.sha256(f"tileflow-secret:{seed}".encode()).digest(), rows, cols)

    @classmethod
    def identity(cls, rows: int, cols: int) -> PerturbationSecret:
        return cls(bytes(32), np.zeros((rows, cols, 2), dtype=np.int64), np.arange(rows * cols))

    def to_dict(self) -> dict:
        return {"key_hex": self.key.hex(), "noise_matrix": self.noise.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> PerturbationSecret:
        key = bytes.fromhex(d["key_hex"])
        noise = np.asarray(d["noise_matrix"], dtype=np.int64)
        rows, cols = noise.shape[:2]
        derived = cls.from_key(key, rows, cols)
        return cls(key, noise, derived.permutation)


@dataclass(frozen=True)
class EncodedEntry:
    encoded_id: int
    noisy_row: int
    noisy_col: int


@dataclass(frozen=True)
class EncodedMatrix:
    rows: int
    cols: int
    entries: tuple[EncodedEntry, ...]  # sorted by encoded_id

    def entry(self, encoded_id: int) -> EncodedEntry:
        return self.entries[encoded_id]


@dataclass(frozen=True, eq=False)
class EncodedPartition:
    shard_index: int  # 1..K
    entries: tuple[EncodedEntry, ...]
    payload: dict = field(default_factory=dict)  # encoded_id -> tile pixel block

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def encoded_ids(self) -> list[int]:
        return [e.encoded_id for e in self.entries]

    def to_dict(self, payload_file: str) -> dict:
        return {
            "shard_index": self.shard_index,
            "entries": [{"encoded_id": e.encoded_id, "noisy_coord": [e.noisy_row, e.noisy_col]} for e in self.entries],
            "payload_file": payload_file,
        }

    def payload_bytes(self) -> bytes:
        return b"".join(self.payload[e.encoded_id].tobytes() for e in self.entries)

    def serialized(self) -> bytes:
        """Everything that leaves the trusted server for this shard."""
        meta = json.dumps(self.to_dict(f"shard_{self.shard_index}.bin"), sort_keys=True).encode()
        return meta + self.payload_bytes()

    @classmethod
    def from_serialized(cls, meta: dict, blob: bytes, tile_size: int) -> EncodedPartition:
        entries = tuple(
            EncodedEntry(int(e["encoded_id"]), int(e["noisy_coord"][0]), int(e["noisy_coord"][1])) for e in meta["entries"]
        )
        block = tile_size * tile_size * 3
        if len(blob) != block * len(entries):
            raise ValidationError(f"shard {meta['shard_index']}: payload has {len(blob)} bytes, expected {block * len(entries)}")
        payload = {
            e.encoded_id: np.frombuffer(blob[i * block : (i + 1) * block], dtype=np.uint8).reshape(tile_size, tile_size, 3)
            for i, e in enumerate(entries)
        }
        return cls(int(meta["shard_index"]), entries, payload)


@dataclass(frozen=True)
class PrivacyAudit:
    adjacency_violations: int
    diagonal_violations: int
    coord_correlation: float
    position_correlation: float
    sentinel_leaks: int

    def to_dict(self) -> dict:
        return {
            "adjacency_violations": self.adjacency_violations,
            "diagonal_violations": self.diagonal_violations,
            "coord_correlation": self.coord_correlation,
            "position_correlation": self.position_correlation,
            "sentinel_leaks": self.sentinel_leaks,
        }


def encode(coords: CoordinateMatrix, secret: PerturbationSecret) -> EncodedMatrix:
    if secret.shape != coords.shape:
        raise ValidationError(f"secret shape {secret.shape} does not match coordinate matrix {coords.shape}")
    out = [None] * len(coords.entries)
    for ref in coords.entries:
        eid = int(secret.permutation[ref.tile_id])
        dr, dc = secret.noise[ref.row, ref.col]
        out[eid] = EncodedEntry(eid, ref.row + int(dr), ref.col + int(dc))
    return EncodedMatrix(coords.rows, coords.cols, tuple(out))


def decode_matrix(encoded: EncodedMatrix, secret: PerturbationSecret) -> CoordinateMatrix:
    """Recover A_x from its encoded form; checks the noisy coordinates agree with the secret."""
    if secret.shape != (encoded.rows, encoded.cols):
        raise ValidationError("secret shape does not match encoded matrix")
    inv = secret.inverse
    refs = [None] * len(encoded.entries)
    for e in encoded.entries:
        tile_id = int(inv[e.encoded_id])
        row, col = divmod(tile_id, encoded.cols)
        dr, dc = secret.noise[row, col]
        if (e.noisy_row - int(dr), e.noisy_col - int(dc)) != (row, col):
            raise PrivacyError(f"encoded id {e.encoded_id} does not decode consistently")
        refs[tile_id] = TileRef(tile_id, row, col)
    return CoordinateMatrix(encoded.rows, encoded.cols, tuple(refs))


def shard_assignment(rows: int, cols: int, K: int, policy: str = "latin-scatter", key: bytes = bytes(32)) -> np.ndarray:
    """Shard index (0-based) for every grid cell, shape (rows, cols)."""
    n = rows * cols
    if K < 2:
        raise PrivacyError(f"K={K}: at least two shards are required, a single shard defeats the scatter")
    if K > n:
        raise ValidationError(f"K={K} exceeds the tile count {n}")
    if policy == "random":
        order = _rng_from(key, "random-policy", K).permutation(n)
        shard = np.empty(n, dtype=np.int64)
        shard[order] = np.arange(n) % K
        return shard.reshape(rows, cols)
    if policy != "latin-scatter":
        raise ValidationError(f"unknown partition policy {policy!r}")
    ii, jj = np.indices((rows, cols))
    shard = (ii + jj) % K
    return _rebalance(shard, K)


def _rebalance(shard: np.ndarray, K: int) -> np.ndarray:
    """Even out shard sizes without ever putting two 4-neighbours in one shard.

    Repeatedly moves a tile from the largest shard into the smallest one,
    choosing the first tile in row-major order none of whose neighbours
    already sits in the target.
    """
    shard = shard.copy()
    rows, cols = shard.shape
    while True:
        sizes = np.bincount(shard.ravel(), minlength=K)
        small = int(np.argmin(sizes))
        if sizes.max() - sizes[small] <= 1:
            return shard
        moved = False
        for big in np.argsort(-sizes, kind="stable"):
            if sizes[big] - sizes[small] <= 1:
                break
            for i, j in zip(*np.nonzero(shard == big)):
                nbrs = [(i + di, j + dj) for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1))]
                if all(not (0 <= a < rows and 0 <= b < cols) or shard[a, b] != small for a, b in nbrs):
                    shard[i, j] = small
                    moved = True
                    break
            if moved:
                break
        if not moved:
            raise PrivacyError(f"cannot balance {K} shards on a {rows}x{cols} grid without adjacency violations")


def partition(
    encoded: EncodedMatrix,
    grid: TileGrid,
    K: int,
    policy: str,
    secret: PerturbationSecret,
) -> list[EncodedPartition]:
    """Scatter tiles over K shards; runs on the trusted server."""
    if (grid.rows, grid.cols) != (encoded.rows, encoded.cols):
        raise ValidationError("tile grid and encoded matrix disagree on shape")
    shard = shard_assignment(grid.rows, grid.cols, K, policy, secret.key)
    inv = secret.inverse
    members = [[] for _ in range(K)]
    for t in grid.tiles:
        members[int(shard[t.row, t.col])].append(int(secret.permutation[t.tile_id]))
    parts = []
    for k, ids in enumerate(members):
        ids.sort()  # encoded-id order is already a keyed shuffle of grid order
        entries = tuple(encoded.entry(eid) for eid in ids)
        payload = {eid: grid.tile(int(inv[eid])).pixels for eid in ids}
        parts.append(EncodedPartition(k + 1, entries, payload))
    return parts


def decode(outputs, secret: PerturbationSecret, partitions=None) -> np.ndarray:
    """Map every detector output back to its true tile position.

    Returns an array of shape (rows, cols, n_bits). With ``partitions`` given,
    coverage errors name the shards whose outputs are missing.
    """
    rows, cols = secret.shape
    n = rows * cols
    shard_of = {}
    if partitions is not None:
        for p in partitions:
            for eid in p.encoded_ids:
                shard_of[eid] = p.shard_index
    seen = {}
    dups = []
    for out in outputs:
        eid = int(out.encoded_id)
        if not 0 <= eid < n:
            raise IncompleteAggregationError(f"encoded id {eid} is not part of this slide")
        if eid in seen:
            dups.append(eid)
        seen[eid] = out.verdicts
    if dups:
        raise IncompleteAggregationError(f"duplicate outputs for encoded ids {sorted(set(dups))}", duplicates=sorted(set(dups)))
    missing = [eid for eid in range(n) if eid not in seen]
    if missing:
        shards = sorted({shard_of[e] for e in missing if e in shard_of})
        where = f" from shard(s) {', '.join(map(str, shards))}" if shards else ""
        raise IncompleteAggregationError(
            f"{len(missing)} tile output(s) missing{where}", missing_shards=shards
        )
    width = len(next(iter(seen.values())))
    aligned = np.zeros((rows, cols, width), dtype=np.uint8)
    inv = secret.inverse
    for eid, verdicts in seen.items():
        row, col = divmod(int(inv[eid]), cols)
        aligned[row, col] = verdicts
    return aligned


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


def audit(partitions, coords: CoordinateMatrix, secret: PerturbationSecret, sentinels=()) -> PrivacyAudit:
    """Exhaustive leakage scan over a partition set.

    ``sentinels`` are byte strings (metadata values) that must never occur in
    any serialized shard.
    """
    rows, cols = coords.shape
    inv = secret.inverse
    shard = np.full((rows, cols), -1, dtype=np.int64)
    true_rows, noisy_rows, pos_rows = [], [], []
    for p in partitions:
        for e in p.entries:
            r, c = divmod(int(inv[e.encoded_id]), cols)
            shard[r, c] = p.shard_index
            true_rows.append(r)
            noisy_rows.append(e.noisy_row)
            pos_rows.append(e.encoded_id // cols)
    if (shard < 0).any():
        raise ValidationError("partitions do not cover every tile")
    adjacent = int(np.count_nonzero(shard[1:, :] == shard[:-1, :]) + np.count_nonzero(shard[:, 1:] == shard[:, :-1]))
    diagonal = int(np.count_nonzero(shard[1:, 1:] == shard[:-1, :-1]) + np.count_nonzero(shard[1:, :-1] == shard[:-1, 1:]))
    leaks = 0
    needles = [s.encode() if isinstance(s, str) else s for s in sentinels if s]
    for p in partitions:
        blob = p.serialized()
        leaks += sum(blob.count(n) for n in needles)
    return PrivacyAudit(
        adjacency_violations=adjacent,
        diagonal_violations=diagonal,
        coord_correlation=_pearson(true_rows, noisy_rows),
        position_correlation=_pearson(true_rows, pos_rows),
        sentinel_leaks=leaks,
    )

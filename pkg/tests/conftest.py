import numpy as np
import pytest

from tileflow.privacy import EncodedEntry, EncodedPartition, PerturbationSecret, encode, partition
from tileflow.wsi import ARTIFACT_CLASSES, PlantedArtifact, generate_slide, split_tiles, strip_metadata


def make_partitions(sizes, tile_px=4):
    """Shards of blank tiles with consecutive encoded ids."""
    parts, eid = [], 0
    for k, n in enumerate(sizes, 1):
        entries = tuple(EncodedEntry(eid + i, 0, 0) for i in range(n))
        payload = {e.encoded_id: np.zeros((tile_px, tile_px, 3), np.uint8) for e in entries}
        parts.append(EncodedPartition(k, entries, payload))
        eid += n
    return parts


def prepare(slide, tile_size, K, policy="latin-scatter", secret_seed=0):
    clean, vault = strip_metadata(slide)
    grid, coords = split_tiles(clean, tile_size)
    secret = PerturbationSecret.from_seed(secret_seed, grid.rows, grid.cols)
    parts = partition(encode(coords, secret), grid, K, policy, secret)
    return clean, vault, grid, coords, secret, parts


def corpus_slide(seed, rows=4, cols=4, tile_size=64):
    """Grid-aligned slide with every class planted at a distinct tile."""
    rng = np.random.default_rng(seed)
    cells = rng.choice(rows * cols, size=len(ARTIFACT_CLASSES), replace=False).tolist()
    planted = [PlantedArtifact(k, *divmod(c, cols)) for k, c in zip(ARTIFACT_CLASSES, cells)]
    return generate_slide(seed, cols * tile_size, rows * tile_size, planted, tile_size=tile_size)


@pytest.fixture
def small_slide():
    return corpus_slide(3)


def random_instance(rng, max_k=6, max_m=4):
    """Shard sizes, infrastructures and ET model drawn for planner tests."""
    from tileflow.scheduler import EtModel, Infrastructure

    K = int(rng.integers(1, max_k + 1))
    m = int(rng.integers(1, max_m + 1))
    sizes = rng.integers(1, 40, size=K).tolist()
    infras = [
        Infrastructure(
            f"site-{i}",
            speed=float(rng.choice([0.5, 1.0, 2.0, 3.0, 4.0])),
            unit_price=float(rng.choice([0.0, 0.5, 1.0, 2.5, 4.0])),
            bandwidth=float(rng.choice([1e6, 5e6, 2e7])),
        )
        for i in range(m)
    ]
    model = EtModel(per_tile_compute=float(rng.choice([0.1, 0.25, 0.5])), transfer_bytes=49152.0, src_time=2.0, snk_time=1.0)
    return sizes, infras, model


def brute_front(sizes, infras, model):
    """All assignments, O(n^2) dominance scan, smallest assignment per objective vector."""
    import itertools

    from tileflow.scheduler import evaluate

    ids = sorted(i.id for i in infras)
    pts = [evaluate(a, sizes, infras, model) for a in itertools.product(ids, repeat=len(sizes))]
    f1 = np.array([p.f1 for p in pts])
    f2 = np.array([p.makespan_us for p in pts])
    le = (f1[:, None] <= f1[None, :]) & (f2[:, None] <= f2[None, :])
    lt = (f1[:, None] < f1[None, :]) | (f2[:, None] < f2[None, :])
    dominated = (le & lt).any(axis=0)
    best = {}
    for p, dom in zip(pts, dominated):
        k = (p.f1, p.makespan_us)
        if not dom and (k not in best or p.assignment < best[k].assignment):
            best[k] = p
    return sorted(best.values(), key=lambda p: (p.f1, p.makespan_us))


def two_speed_optimum(n, d_fast, d_slow):
    """Best completion over every split of n tiles between two nodes (per-tile durations)."""
    return min(max(a * d_fast, (n - a) * d_slow) for a in range(n + 1))


ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, name, ok, detail)."""

    def record(number, name, ok, detail=""):
        ACCEPTANCE.append((number, name, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {name}: {detail}")

"""Bi-objective shard placement: monetary cost (f1) against makespan (f2).

Times are held as integer microseconds. A shard's execution time on an
infrastructure is its tile count times a per-tile duration that is rounded
to the microsecond once, so the simulator and these formulas agree exactly.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import BudgetExceededError, SchedulingError, ValidationError

US = 1_000_000
DEFAULT_BUDGET = 10**6
PREFERENCES = ("min-cost", "min-makespan", "knee")


@dataclass(frozen=True)
class Infrastructure:
    id: str
    speed: float  # tiles per second at unit per-tile compute
    unit_price: float  # cost per second
    bandwidth: float  # bytes per second
    availability: float = 1.0

    def __post_init__(self):
        if not self.speed > 0:
            raise ValidationError(f"{self.id}: speed must be > 0")
        if not self.unit_price >= 0:
            raise ValidationError(f"{self.id}: unit_price must be >= 0")
        if not self.bandwidth > 0:
            raise ValidationError(f"{self.id}: bandwidth must be > 0")
        if not 0 < self.availability <= 1:
            raise ValidationError(f"{self.id}: availability must lie in (0, 1]")


@dataclass(frozen=True)
class EtModel:
    per_tile_compute: float  # seconds per tile at speed 1
    transfer_bytes: float  # bytes shipped per tile
    src_time: float  # trusted-server split service, seconds
    snk_time: float  # trusted-server aggregation service, seconds

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValidationError(f"EtModel.{name} must be > 0")

    @property
    def src_us(self) -> int:
        return round(self.src_time * US)

    @property
    def snk_us(self) -> int:
        return round(self.snk_time * US)


@dataclass(frozen=True)
class PlanPoint:
    assignment: tuple[str, ...]  # infrastructure id per shard, shard 1 first
    f1: float
    f2: float
    makespan_us: int  # f2 in microseconds

    def key(self):
        return (self.f1, self.makespan_us, self.assignment)


@dataclass(frozen=True)
class ParetoFront:
    points: tuple[PlanPoint, ...]

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def objectives(self) -> list[tuple[float, float]]:
        return [(p.f1, p.f2) for p in self.points]


def _sizes(shards) -> list[int]:
    sizes = [s if isinstance(s, (int, np.integer)) else s.size for s in shards]
    if not sizes:
        raise ValidationError("at least one shard is required")
    for k, n in enumerate(sizes, 1):
        if n <= 0:
            raise ValidationError(f"shard {k} is empty; execution time must be > 0")
    return [int(n) for n in sizes]


def tile_time_us(infra: Infrastructure, model: EtModel) -> int:
    """Per-tile compute plus transfer time on ``infra``, in whole microseconds (at least 1)."""
    compute = round(model.per_tile_compute / infra.speed * US)
    transfer = round(model.transfer_bytes / infra.bandwidth * US)
    return max(1, compute + transfer)


def estimate_et_us(shard, infra: Infrastructure, model: EtModel) -> int:
    (n,) = _sizes([shard])
    return n * tile_time_us(infra, model)


def estimate_et(shard, infra: Infrastructure, model: EtModel) -> float:
    """Execution time of one shard on one infrastructure, seconds."""
    return estimate_et_us(shard, infra, model) / US


def _resolve(assignment, n_shards: int, infras) -> list[Infrastructure]:
    by_id = {i.id: i for i in infras}
    if len(by_id) != len(infras):
        raise ValidationError("infrastructure ids must be unique")
    if len(assignment) != n_shards:
        raise ValidationError(f"assignment maps {len(assignment)} shards, expected {n_shards}")
    out = []
    for k, infra_id in enumerate(assignment, 1):
        if infra_id is None:
            raise ValidationError(f"shard {k} is not mapped to any infrastructure")
        if infra_id not in by_id:
            raise ValidationError(f"shard {k} maps to unknown infrastructure {infra_id!r}")
        out.append(by_id[infra_id])
    return out


def eval_cost(assignment, shards, infras, model: EtModel) -> float:
    """f1: sum over shards of execution time times the unit price of its site."""
    sizes = _sizes(shards)
    total = 0.0
    for n, infra in zip(sizes, _resolve(assignment, len(sizes), infras)):
        total += (n * tile_time_us(infra, model)) * infra.unit_price
    return total / US


def makespan_inner_us(assignment, shards, infras, model: EtModel) -> int:
    """Slowest detection branch; shards sharing a site run one after another."""
    sizes = _sizes(shards)
    load = {}
    for n, infra in zip(sizes, _resolve(assignment, len(sizes), infras)):
        load[infra.id] = load.get(infra.id, 0) + n * tile_time_us(infra, model)
    return max(load.values())


def eval_makespan_us(assignment, shards, infras, model: EtModel) -> int:
    return model.src_us + makespan_inner_us(assignment, shards, infras, model) + model.snk_us


def eval_makespan(assignment, shards, infras, model: EtModel) -> float:
    """f2: split time + slowest detection branch + aggregation time, seconds."""
    return eval_makespan_us(assignment, shards, infras, model) / US


def evaluate(assignment, shards, infras, model: EtModel) -> PlanPoint:
    assignment = tuple(assignment)
    f2_us = eval_makespan_us(assignment, shards, infras, model)
    return PlanPoint(assignment, eval_cost(assignment, shards, infras, model), f2_us / US, f2_us)


def nondominated(points) -> ParetoFront:
    """Pareto filter keeping one point per objective vector.

    Among points with equal (f1, f2) the lexicographically smallest
    assignment is kept. The result is sorted by f1 ascending.
    """
    best_f2 = None
    kept = []
    for p in sorted(points, key=PlanPoint.key):
        if best_f2 is None or p.makespan_us < best_f2:
            kept.append(p)
            best_f2 = p.makespan_us
    return ParetoFront(tuple(kept))


def _cost_tables(sizes, infras, model):
    tt = np.array([tile_time_us(i, model) for i in infras], dtype=np.int64)
    et = np.asarray(sizes, dtype=np.int64)[:, None] * tt[None, :]  # (K, m) microseconds
    price = np.array([i.unit_price for i in infras], dtype=np.float64)
    return et, price


def _evaluate_many(genomes: np.ndarray, et: np.ndarray, price: np.ndarray, model: EtModel):
    """Vectorized f1 and f2 (microseconds) for integer genomes of shape (N, K)."""
    n, K = genomes.shape
    m = et.shape[1]
    f1 = np.zeros(n, dtype=np.float64)
    load = np.zeros((n, m), dtype=np.int64)
    rows = np.arange(n)
    for k in range(K):
        g = genomes[:, k]
        f1 = f1 + et[k, g] * price[g]
        np.add.at(load, (rows, g), et[k, g])
    return f1 / US, model.src_us + load.max(axis=1) + model.snk_us


def plan_exhaustive(shards, infras, model: EtModel, budget: int = DEFAULT_BUDGET) -> ParetoFront:
    """Exact Pareto front by enumerating every shard-to-site mapping."""
    sizes = _sizes(shards)
    infras = list(infras)
    if not infras:
        raise SchedulingError("no infrastructure available")
    K, m = len(sizes), len(infras)
    if m**K > budget:
        raise BudgetExceededError(
            f"{m}^{K} = {m**K} assignments exceed the enumeration budget {budget}; use plan_heuristic"
        )
    et, price = _cost_tables(sizes, infras, model)
    genomes = np.array(list(itertools.product(range(m), repeat=K)), dtype=np.int64).reshape(-1, K)
    f1, f2 = _evaluate_many(genomes, et, price, model)
    # rank of each site id in sorted order, so index order == lexicographic id order
    id_rank = np.argsort(np.argsort([i.id for i in infras], kind="stable"), kind="stable")
    ranked = id_rank[genomes]
    order = np.lexsort(tuple(ranked[:, k] for k in reversed(range(K))) + (f2, f1))
    f2_sorted = f2[order]
    prev_min = np.concatenate(([np.iinfo(np.int64).max], np.minimum.accumulate(f2_sorted)[:-1]))
    keep = order[f2_sorted < prev_min]
    ids = [i.id for i in infras]
    points = tuple(
        PlanPoint(tuple(ids[g] for g in genomes[i]), float(f1[i]), int(f2[i]) / US, int(f2[i])) for i in keep
    )
    return ParetoFront(points)


# --- evolutionary search ------------------------------------------------------


def _fronts(objs: np.ndarray) -> list[list[int]]:
    """Nondominated sorting by repeated peeling; best front first."""
    le = (objs[:, None, :] <= objs[None, :, :]).all(axis=2)
    lt = (objs[:, None, :] < objs[None, :, :]).any(axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    remaining = np.ones(len(objs), dtype=bool)
    fronts = []
    while remaining.any():
        dominated = dom[remaining].any(axis=0)
        front = np.nonzero(remaining & ~dominated)[0]
        fronts.append(front.tolist())
        remaining[front] = False
    return fronts


def _crowding(objs: np.ndarray) -> np.ndarray:
    n = len(objs)
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for m in range(objs.shape[1]):
        order = np.argsort(objs[:, m], kind="stable")
        lo, hi = objs[order[0], m], objs[order[-1], m]
        dist[order[0]] = dist[order[-1]] = np.inf
        if hi > lo:
            dist[order[1:-1]] += (objs[order[2:], m] - objs[order[:-2], m]) / (hi - lo)
    return dist


def plan_heuristic(
    shards,
    infras,
    model: EtModel,
    seed: int = 0,
    generations: int = 60,
    population: int = 40,
) -> ParetoFront:
    """NSGA-II style search over shard-to-site vectors.

    One-point crossover, per-gene mutation with rate 1/K, binary tournament on
    (front rank, crowding). Returns the nondominated set of every assignment
    evaluated during the run. The initial population contains each
    all-on-one-site assignment.
    """
    if population < 4 or population % 2:
        raise ValidationError("population must be an even number >= 4")
    if generations < 0:
        raise ValidationError("generations must be >= 0")
    sizes = _sizes(shards)
    infras = list(infras)
    if not infras:
        raise SchedulingError("no infrastructure available")
    K, m = len(sizes), len(infras)
    et, price = _cost_tables(sizes, infras, model)
    rng = np.random.default_rng(seed)
    archive: dict[tuple[int, ...], tuple[float, int]] = {}

    def score(pop: np.ndarray) -> np.ndarray:
        f1, f2 = _evaluate_many(pop, et, price, model)
        for g, a, b in zip(map(tuple, pop.tolist()), f1.tolist(), f2.tolist()):
            archive.setdefault(g, (a, b))
        return np.column_stack([f1, f2.astype(np.float64)])

    seeds = np.repeat(np.arange(min(m, population))[:, None], K, axis=1)
    pop = np.vstack([seeds, rng.integers(0, m, size=(population - len(seeds), K))])
    objs = score(pop)

    def rank_and_crowd(objs):
        rank = np.empty(len(objs), dtype=np.int64)
        crowd = np.empty(len(objs))
        fronts = _fronts(objs)
        for r, f in enumerate(fronts):
            rank[f] = r
            crowd[f] = _crowding(objs[f])
        return rank, crowd, fronts

    rank, crowd, _ = rank_and_crowd(objs)
    for _ in range(generations):
        a, b = rng.integers(0, population, size=(2, population))
        better = (rank[a] < rank[b]) | ((rank[a] == rank[b]) & (crowd[a] > crowd[b]))
        parents = pop[np.where(better, a, b)]
        children = parents.copy()
        for i in range(0, population, 2):
            if K > 1 and rng.random() < 0.9:
                cut = int(rng.integers(1, K))
                children[i, cut:], children[i + 1, cut:] = parents[i + 1, cut:], parents[i, cut:]
        flips = rng.random(children.shape) < 1.0 / K
        children[flips] = rng.integers(0, m, size=int(flips.sum()))
        union = np.vstack([pop, children])
        uobjs = np.vstack([objs, score(children)])
        urank, ucrowd, fronts = rank_and_crowd(uobjs)
        chosen = []
        for f in fronts:
            if len(chosen) + len(f) <= population:
                chosen.extend(f)
            else:
                rest = sorted(f, key=lambda i: (-ucrowd[i], i))
                chosen.extend(rest[: population - len(chosen)])
                break
        chosen = np.asarray(chosen)
        pop, objs, rank, crowd = union[chosen], uobjs[chosen], urank[chosen], ucrowd[chosen]

    ids = [i.id for i in infras]
    return nondominated(
        PlanPoint(tuple(ids[x] for x in g), f1, f2 / US, f2) for g, (f1, f2) in archive.items()
    )


def hypervolume(points, ref: tuple[float, float]) -> float:
    """Area dominated by ``points`` (minimization) and bounded by ``ref``."""
    pts = sorted((float(a), float(b)) for a, b in points if a < ref[0] and b < ref[1])
    area = 0.0
    prev_y = ref[1]
    for x, y in pts:
        if y < prev_y:
            area += (ref[0] - x) * (prev_y - y)
            prev_y = y
    return area


def select_plan(front: ParetoFront, preference: str = "knee") -> PlanPoint:
    """Pick one point from a front.

    ``knee`` takes the point farthest from the chord joining the two extreme
    points, measured after scaling both objectives to [0, 1].
    """
    pts = list(front.points)
    if not pts:
        raise SchedulingError("cannot select from an empty front")
    if preference == "min-cost":
        return min(pts, key=PlanPoint.key)
    if preference == "min-makespan":
        return min(pts, key=lambda p: (p.makespan_us, p.f1, p.assignment))
    if preference != "knee":
        raise ValidationError(f"unknown preference {preference!r}")
    return min(pts, key=lambda p: (-knee_distance(p, pts),) + p.key())


def knee_distance(p: PlanPoint, pts) -> float:
    f1s = [q.f1 for q in pts]
    f2s = [q.f2 for q in pts]
    span1 = (max(f1s) - min(f1s)) or 1.0
    span2 = (max(f2s) - min(f2s)) or 1.0
    a = min(pts, key=PlanPoint.key)
    b = min(pts, key=lambda q: (-q.f1, q.f2, q.assignment))
    ax, ay = (a.f1 - min(f1s)) / span1, (a.f2 - min(f2s)) / span2
    bx, by = (b.f1 - min(f1s)) / span1, (b.f2 - min(f2s)) / span2
    px, py = (p.f1 - min(f1s)) / span1, (p.f2 - min(f2s)) / span2
    length = np.hypot(bx - ax, by - ay)
    if length == 0:
        return 0.0
    return float(abs((bx - ax) * (ay - py) - (ax - px) * (by - ay)) / length)


# --- files ---------------------------------------------------------------------


def instance_dict(shards, infras, model: EtModel) -> dict:
    return {
        "shards": _sizes(shards),
        "infras": [asdict(i) for i in infras],
        "et_model": asdict(model),
    }


def instance_hash(instance: dict) -> str:
    return hashlib.sha256(json.dumps(instance, sort_keys=True).encode()).hexdigest()


def infras_from_json(data) -> list[Infrastructure]:
    items = data["infras"] if isinstance(data, dict) else data
    return [
        Infrastructure(
            id=str(d["id"]),
            speed=float(d["speed"]),
            unit_price=float(d["unit_price"]),
            bandwidth=float(d["bandwidth"]),
            availability=float(d.get("availability", 1.0)),
        )
        for d in items
    ]


def et_model_from_json(data: dict) -> EtModel:
    data = data.get("et_model", data)
    return EtModel(**{k: float(data[k]) for k in ("per_tile_compute", "transfer_bytes", "src_time", "snk_time")})


def plan_dict(front: ParetoFront, chosen: PlanPoint, preference: str, inst_hash: str) -> dict:
    return {
        "instance_hash": inst_hash,
        "points": [{"assignment": list(p.assignment), "f1": p.f1, "f2": p.f2} for p in front.points],
        "chosen": front.points.index(chosen),
        "preference": preference,
    }

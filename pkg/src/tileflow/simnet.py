"""Discrete-event simulation of shard execution with stragglers and crashes.

Virtual time is integer microseconds. Every node runs one tile at a time from
its own queue; shards mapped to the same node are queued back to back. With
``rebalance="steal"`` an idle node takes batches from the tail of another
node's queue whenever it would finish them strictly earlier than the owner.
"""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass, field

from .detectors import DetectorSet, detect
from .errors import SimulationStalledError, ValidationError
from .scheduler import US, EtModel, PlanPoint, tile_time_us

KIND_RANK = {"tile-done": 0, "shard-done": 1, "node-fail": 2, "steal": 3, "dispatch": 4, "all-done": 5}
REBALANCE = ("none", "steal")
INF = float("inf")


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    straggler_map: dict = field(default_factory=dict)  # infra id -> slowdown >= 1
    failure_times: dict = field(default_factory=dict)  # infra id -> seconds
    rebalance: str = "none"
    steal_granularity: int = 1

    def __post_init__(self):
        for node, s in self.straggler_map.items():
            if not s >= 1:
                raise ValidationError(f"slowdown for {node} must be >= 1, got {s}")
        for node, t in self.failure_times.items():
            if not t >= 0:
                raise ValidationError(f"failure time for {node} must be >= 0, got {t}")
        if self.rebalance not in REBALANCE:
            raise ValidationError(f"rebalance must be one of {REBALANCE}")
        if self.steal_granularity < 1:
            raise ValidationError("steal granularity must be >= 1")


@dataclass(frozen=True)
class TraceEvent:
    t_us: int
    kind: str
    node: str | None
    tile: int | None = None
    shard: int | None = None

    def sort_key(self):
        return (
            self.t_us,
            KIND_RANK[self.kind],
            self.node or "",
            -1 if self.tile is None else self.tile,
            -1 if self.shard is None else self.shard,
        )

    def to_dict(self) -> dict:
        d = {"t_us": self.t_us, "kind": self.kind, "node": self.node, "tile": self.tile}
        if self.shard is not None:
            d["shard"] = self.shard
        return d


@dataclass(frozen=True)
class ExecutionTrace:
    events: tuple[TraceEvent, ...]
    completion_us: int
    per_node_busy_us: dict

    @property
    def completion_time(self) -> float:
        return self.completion_us / US

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True, separators=(",", ":")) + "\n" for e in self.events)


@dataclass(frozen=True)
class DetectionOutput:
    encoded_id: int
    verdicts: tuple[int, ...]
    shard_index: int = 0

    def to_dict(self) -> dict:
        return {"encoded_id": self.encoded_id, "shard": self.shard_index, "verdicts": "".join(map(str, self.verdicts))}

    @classmethod
    def from_dict(cls, d: dict) -> DetectionOutput:
        return cls(int(d["encoded_id"]), tuple(int(c) for c in d["verdicts"]), int(d.get("shard", 0)))


class _Node:
    __slots__ = ("id", "dur", "queue", "current", "started", "busy_until", "failed", "busy")

    def __init__(self, node_id: str, dur: int):
        self.id = node_id
        self.dur = dur
        self.queue: deque = deque()
        self.current = None
        self.started = 0
        self.busy_until = 0
        self.failed = False
        self.busy = 0

    def idle(self) -> bool:
        return not self.failed and self.current is None

    def projected_finish(self, now: int) -> float:
        if self.failed:
            return INF
        start = self.busy_until if self.current is not None else now
        return start + len(self.queue) * self.dur


def simulate(
    plan: PlanPoint,
    partitions,
    infras,
    model: EtModel,
    world: WorldConfig | None = None,
    detector: DetectorSet | None = None,
) -> tuple[ExecutionTrace, list[DetectionOutput]]:
    """Run the detection phase of a plan and return its trace and outputs.

    Time starts at 0 when the shards are dispatched; split and aggregation
    services are not part of the simulated window.
    """
    world = world or WorldConfig()
    detector = detector or DetectorSet()
    parts = sorted(partitions, key=lambda p: p.shard_index)
    if len(plan.assignment) != len(parts):
        raise ValidationError(f"plan maps {len(plan.assignment)} shards but {len(parts)} partitions were given")
    by_id = {i.id: i for i in infras}
    for node in list(world.straggler_map) + list(world.failure_times):
        if node not in by_id:
            raise ValidationError(f"world config names unknown infrastructure {node!r}")
    for k, infra_id in enumerate(plan.assignment, 1):
        if infra_id not in by_id:
            raise ValidationError(f"shard {k} maps to unknown infrastructure {infra_id!r}")

    nodes: dict[str, _Node] = {}
    for infra_id in sorted(set(plan.assignment)):
        base = tile_time_us(by_id[infra_id], model)
        slow = world.straggler_map.get(infra_id, 1)
        nodes[infra_id] = _Node(infra_id, base if slow == 1 else max(1, round(base * slow)))
    payload = {}
    remaining = {}
    for p, infra_id in zip(parts, plan.assignment):
        if p.size == 0:
            raise ValidationError(f"shard {p.shard_index} is empty")
        remaining[p.shard_index] = p.size
        for e in p.entries:
            nodes[infra_id].queue.append((e.encoded_id, p.shard_index))
            payload[e.encoded_id] = p.payload[e.encoded_id]
    total = len(payload)

    events: list[TraceEvent] = []
    outputs: list[DetectionOutput] = []
    heap: list = []
    seq = 0

    def push(t, kind, node, tile=None):
        nonlocal seq
        heapq.heappush(heap, (t, KIND_RANK[kind], node, -1 if tile is None else tile[0], seq, kind, tile))
        seq += 1

    for node_id, t in world.failure_times.items():
        if node_id in nodes:
            push(round(t * US), "node-fail", node_id)

    def steal_into(thief: _Node, now: int) -> None:
        g = world.steal_granularity
        while True:
            victims = sorted(
                (n for n in nodes.values() if n is not thief and n.queue),
                key=lambda n: (-n.projected_finish(now), n.id),
            )
            for victim in victims:
                batch = min(g, len(victim.queue))
                finish = now + (len(thief.queue) + batch) * thief.dur
                if finish < victim.projected_finish(now):
                    taken = [victim.queue.pop() for _ in range(batch)][::-1]
                    thief.queue.extend(taken)
                    events.extend(TraceEvent(now, "steal", thief.id, tile[0]) for tile in taken)
                    break
            else:
                return

    def settle(now: int) -> None:
        for node in nodes.values():
            if not node.idle():
                continue
            if not node.queue and world.rebalance == "steal":
                steal_into(node, now)
            if node.queue:
                tile = node.queue.popleft()
                node.current, node.started, node.busy_until = tile, now, now + node.dur
                events.append(TraceEvent(now, "dispatch", node.id, tile[0]))
                push(node.busy_until, "tile-done", node.id, tile)

    done = 0
    last = 0
    if not heap or heap[0][0] > 0:
        settle(0)
    while heap:
        now = heap[0][0]
        while heap and heap[0][0] == now:
            _, _, node_id, _, _, kind, tile = heapq.heappop(heap)
            node = nodes[node_id]
            if kind == "tile-done":
                if node.failed or node.current != tile:
                    continue
                eid, shard = tile
                node.busy += node.dur
                node.current = None
                events.append(TraceEvent(now, "tile-done", node_id, eid))
                outputs.append(DetectionOutput(eid, detect(payload[eid], detector), shard))
                done += 1
                last = now
                remaining[shard] -= 1
                if remaining[shard] == 0:
                    events.append(TraceEvent(now, "shard-done", node_id, None, shard))
            elif kind == "node-fail" and not node.failed:
                node.failed = True
                if node.current is not None:
                    node.busy += now - node.started
                    node.queue.appendleft(node.current)
                    node.current = None
                events.append(TraceEvent(now, "node-fail", node_id))
        settle(now)

    if done != total:
        left = sorted(eid for n in nodes.values() for eid, _ in n.queue)
        raise SimulationStalledError(
            f"simulation stalled with {len(left)} unprocessed tile(s): {left[:20]}{' ...' if len(left) > 20 else ''}",
            unprocessed=left,
        )
    events.append(TraceEvent(last, "all-done", None))
    events.sort(key=TraceEvent.sort_key)
    busy = {n.id: n.busy for n in nodes.values()}
    return ExecutionTrace(tuple(events), last, busy), outputs


def replay(events) -> dict:
    """Recompute summary statistics from a trace's events alone."""
    events = list(events)
    if not events or events[-1].kind != "all-done":
        raise ValidationError("trace does not end with all-done")
    keys = [e.sort_key() for e in events]
    if keys != sorted(keys):
        raise ValidationError("trace events are not in canonical order")
    if sum(e.kind == "all-done" for e in events) != 1:
        raise ValidationError("trace has more than one all-done event")
    running: dict[str, tuple[int, int]] = {}
    busy: dict[str, int] = {}
    finished: set[int] = set()
    steals = 0
    for e in events:
        if e.kind not in KIND_RANK:
            raise ValidationError(f"unknown event kind {e.kind!r}")
        if e.node is not None:
            busy.setdefault(e.node, 0)
        if e.kind == "dispatch":
            if e.node in running:
                raise ValidationError(f"{e.node} dispatched tile {e.tile} while busy")
            running[e.node] = (e.tile, e.t_us)
        elif e.kind == "tile-done":
            tile, start = running.pop(e.node, (None, None))
            if tile != e.tile:
                raise ValidationError(f"tile-done for {e.tile} on {e.node} without a matching dispatch")
            if e.tile in finished:
                raise ValidationError(f"tile {e.tile} completed twice")
            finished.add(e.tile)
            busy[e.node] += e.t_us - start
        elif e.kind == "node-fail":
            if e.node in running:
                _, start = running.pop(e.node)
                busy[e.node] += e.t_us - start
        elif e.kind == "steal":
            steals += 1
    completion = events[-1].t_us
    if completion <= 0:
        raise ValidationError("trace completion time must be positive")
    return {
        "completion_us": completion,
        "utilization": {n: b / completion for n, b in sorted(busy.items())},
        "steals": steals,
        "tiles": len(finished),
        "throughput": len(finished) / (completion / US),
    }


def trace_from_jsonl(text: str) -> list[TraceEvent]:
    out = []
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            out.append(TraceEvent(int(d["t_us"]), str(d["kind"]), d["node"], d["tile"], d.get("shard")))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValidationError(f"trace line {line_no} is malformed: {exc}") from exc
    return out

"""Command-line driver for the split / plan / run / aggregate pipeline.

Output layout (``--output`` or ``$TILEFLOW_OUTPUT``)::

    trusted/   raw slide, vault, secret, tiles, ground truth  (never shipped)
    cloud/     shard partitions, plan, trace, detector outputs
    results/   mask, overlay, report
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import aggregation as agg
from . import privacy, scheduler, simnet, wsi
from .detectors import DetectorSet
from .errors import PrivacyError, TileflowError, ValidationError
from .wsi import ARTIFACT_CLASSES, PlantedArtifact

DEFAULT_OUTPUT = "tileflow-out"
STAGES = ("generate", "split", "plan", "run", "aggregate", "report")

DEFAULT_INFRAS = (
    scheduler.Infrastructure("campus-cluster", speed=1.0, unit_price=0.2, bandwidth=50e6, availability=0.99),
    scheduler.Infrastructure("cloud-standard", speed=2.0, unit_price=0.6, bandwidth=100e6, availability=0.995),
    scheduler.Infrastructure("cloud-gpu", speed=8.0, unit_price=3.0, bandwidth=200e6, availability=0.999),
)


@dataclass
class PipelineConfig:
    """Concrete stand-in for the user requirement set of a run."""

    output: Path = Path(DEFAULT_OUTPUT)
    seed: int = 0
    width: int = 512
    height: int = 512
    tile_size: int = 128
    artifacts: tuple | None = None  # None -> one planted region per class
    shards: int = 4
    policy: str = "latin-scatter"
    infras_file: Path | None = None
    et_model_file: Path | None = None
    preference: str = "knee"
    planner: str = "auto"
    budget: int = scheduler.DEFAULT_BUDGET
    generations: int = 60
    population: int = 40
    stragglers: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    rebalance: str = "none"
    steal_granularity: int = 1
    detectors_file: Path | None = None
    cell: int = 8

    @property
    def trusted(self) -> Path:
        return self.output / "trusted"

    @property
    def cloud(self) -> Path:
        return self.output / "cloud"

    @property
    def results(self) -> Path:
        return self.output / "results"

    def planted(self) -> tuple[PlantedArtifact, ...]:
        if self.artifacts is not None:
            return tuple(self.artifacts)
        rows, cols = wsi.grid_shape(self.width, self.height, self.tile_size)
        n = rows * cols
        picks = [(i * n) // len(ARTIFACT_CLASSES) for i in range(min(n, len(ARTIFACT_CLASSES)))]
        return tuple(PlantedArtifact(ARTIFACT_CLASSES[i], *divmod(cell, cols)) for i, cell in enumerate(picks))

    def validate(self) -> None:
        if self.tile_size <= 0:
            raise ValidationError("tile size must be positive")
        if self.width < self.tile_size or self.height < self.tile_size:
            raise ValidationError(f"slide {self.width}x{self.height} is smaller than one {self.tile_size}px tile")
        if self.shards < 2:
            raise PrivacyError(f"K={self.shards}: at least two shards are required to keep tiles scattered")
        rows, cols = wsi.grid_shape(self.width, self.height, self.tile_size)
        if self.shards > rows * cols:
            raise ValidationError(f"K={self.shards} exceeds the {rows * cols} tiles of the grid")
        if self.policy not in privacy.POLICIES:
            raise ValidationError(f"unknown policy {self.policy!r}")
        if self.preference not in scheduler.PREFERENCES:
            raise ValidationError(f"unknown preference {self.preference!r}")
        if self.planner not in ("auto", "exhaustive", "heuristic"):
            raise ValidationError(f"unknown planner {self.planner!r}")
        if self.population < 4 or self.population % 2:
            raise ValidationError("population must be an even number >= 4")
        if self.cell < 1:
            raise ValidationError("overlay cell size must be >= 1")
        wsi.validate_artifacts(self.width, self.height, self.tile_size, self.planted())
        self.world()

    def world(self) -> simnet.WorldConfig:
        return simnet.WorldConfig(
            seed=self.seed,
            straggler_map=dict(self.stragglers),
            failure_times=dict(self.failures),
            rebalance=self.rebalance,
            steal_granularity=self.steal_granularity,
        )


# --- file helpers ------------------------------------------------------------


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load(path: Path, stage: str):
    if not path.exists():
        raise ValidationError(f"missing {path}; run the '{stage}' stage first")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise ValidationError(f"missing {path}; run the '{stage}' stage first")
    return path


def _load_partitions(cfg: PipelineConfig, tile_size: int) -> list[privacy.EncodedPartition]:
    index = _load(cfg.cloud / "partitions" / "index.json", "split")
    parts = []
    for name in index["shards"]:
        meta = _load(cfg.cloud / "partitions" / name, "split")
        blob = _require(cfg.cloud / "partitions" / meta["payload_file"], "split").read_bytes()
        parts.append(privacy.EncodedPartition.from_serialized(meta, blob, tile_size))
    return parts


def _infras(cfg: PipelineConfig) -> list[scheduler.Infrastructure]:
    if cfg.infras_file is None:
        return list(DEFAULT_INFRAS)
    return scheduler.infras_from_json(json.loads(Path(cfg.infras_file).read_text()))


def _et_model(cfg: PipelineConfig, tile_size: int) -> scheduler.EtModel:
    if cfg.et_model_file is None:
        return scheduler.EtModel(per_tile_compute=0.5, transfer_bytes=tile_size * tile_size * 3, src_time=2.0, snk_time=1.0)
    return scheduler.et_model_from_json(json.loads(Path(cfg.et_model_file).read_text()))


def _detectors(cfg: PipelineConfig) -> DetectorSet:
    if cfg.detectors_file is None:
        return DetectorSet()
    return DetectorSet.from_dict(json.loads(Path(cfg.detectors_file).read_text()))


# --- stages --------------------------------------------------------------------


def cmd_generate(cfg: PipelineConfig) -> None:
    slide = wsi.generate_slide(cfg.seed, cfg.width, cfg.height, cfg.planted(), tile_size=cfg.tile_size)
    cfg.trusted.mkdir(parents=True, exist_ok=True)
    wsi.write_slide(cfg.trusted / "slide_raw.tflw", slide)
    _dump(
        cfg.trusted / "truth.json",
        {
            "tile_size": cfg.tile_size,
            "planted": [
                {"kind": a.kind, "row": a.row, "col": a.col, "n_rows": a.n_rows, "n_cols": a.n_cols} for a in slide.planted
            ],
        },
    )


def cmd_split(cfg: PipelineConfig) -> None:
    raw = wsi.read_slide(_require(cfg.trusted / "slide_raw.tflw", "generate"))
    replace(cfg, width=raw.width, height=raw.height, artifacts=()).validate()
    clean, vault = wsi.strip_metadata(raw)
    grid, coords = wsi.split_tiles(clean, cfg.tile_size)
    secret = privacy.PerturbationSecret.from_seed(cfg.seed, grid.rows, grid.cols)
    encoded = privacy.encode(coords, secret)
    parts = privacy.partition(encoded, grid, cfg.shards, cfg.policy, secret)

    _dump(cfg.trusted / "vault.json", vault.to_dict())
    _dump(cfg.trusted / "secret.json", secret.to_dict())
    wsi.write_slide(cfg.trusted / "slide.tflw", clean)
    (cfg.trusted / "tiles.bin").write_bytes(wsi.tiles_blob(grid))
    _dump(cfg.trusted / "manifest.json", wsi.tile_manifest(grid))
    _dump(
        cfg.trusted / "grid.json",
        {"rows": grid.rows, "cols": grid.cols, "tile_size": grid.tile_size, "width": grid.width, "height": grid.height},
    )

    pdir = cfg.cloud / "partitions"
    pdir.mkdir(parents=True, exist_ok=True)
    for stale in pdir.glob("shard_*"):
        stale.unlink()
    names = []
    for p in parts:
        name = f"shard_{p.shard_index}.json"
        _dump(pdir / name, p.to_dict(f"shard_{p.shard_index}.bin"))
        (pdir / f"shard_{p.shard_index}.bin").write_bytes(p.payload_bytes())
        names.append(name)
    _dump(pdir / "index.json", {"shards": names, "tile_size": grid.tile_size})


def cmd_plan(cfg: PipelineConfig) -> None:
    index = _load(cfg.cloud / "partitions" / "index.json", "split")
    sizes = [len(_load(cfg.cloud / "partitions" / n, "split")["entries"]) for n in index["shards"]]
    infras = _infras(cfg)
    model = _et_model(cfg, index["tile_size"])
    planner = cfg.planner
    if planner == "auto":
        planner = "exhaustive" if len(infras) ** len(sizes) <= cfg.budget else "heuristic"
    if planner == "exhaustive":
        front = scheduler.plan_exhaustive(sizes, infras, model, cfg.budget)
    else:
        front = scheduler.plan_heuristic(sizes, infras, model, cfg.seed, cfg.generations, cfg.population)
    chosen = scheduler.select_plan(front, cfg.preference)
    instance = scheduler.instance_dict(sizes, infras, model)
    _dump(cfg.cloud / "instance.json", instance)
    plan = scheduler.plan_dict(front, chosen, cfg.preference, scheduler.instance_hash(instance))
    plan["planner"] = planner
    _dump(cfg.cloud / "plan.json", plan)


def _chosen_point(cfg: PipelineConfig):
    plan = _load(cfg.cloud / "plan.json", "plan")
    instance = _load(cfg.cloud / "instance.json", "plan")
    if scheduler.instance_hash(instance) != plan["instance_hash"]:
        raise ValidationError("plan.json does not belong to instance.json; re-run 'plan'")
    infras = scheduler.infras_from_json(instance)
    model = scheduler.et_model_from_json(instance)
    point = scheduler.evaluate(plan["points"][plan["chosen"]]["assignment"], instance["shards"], infras, model)
    return point, infras, model, plan


def cmd_run(cfg: PipelineConfig) -> None:
    point, infras, model, _ = _chosen_point(cfg)
    index = _load(cfg.cloud / "partitions" / "index.json", "split")
    parts = _load_partitions(cfg, index["tile_size"])
    trace, outputs = simnet.simulate(point, parts, infras, model, cfg.world(), _detectors(cfg))
    (cfg.cloud / "trace.jsonl").write_text(trace.to_jsonl(), encoding="utf-8")
    _dump(cfg.cloud / "outputs.json", [o.to_dict() for o in sorted(outputs, key=lambda o: o.encoded_id)])
    stats = simnet.replay(trace.events)
    _dump(
        cfg.cloud / "summary.json",
        {"completion_us": stats["completion_us"], "utilization": stats["utilization"], "steals": stats["steals"]},
    )


def cmd_aggregate(cfg: PipelineConfig) -> None:
    grid = _load(cfg.trusted / "grid.json", "split")
    secret = privacy.PerturbationSecret.from_dict(_load(cfg.trusted / "secret.json", "split"))
    outputs = [simnet.DetectionOutput.from_dict(d) for d in _load(cfg.cloud / "outputs.json", "run")]
    parts = _load_partitions(cfg, grid["tile_size"])
    mask = agg.aggregate(outputs, secret, (grid["rows"], grid["cols"]), parts)
    _dump(cfg.results / "mask.json", mask.to_dict())
    (cfg.results / "overlay.tflw").write_bytes(agg.overlay_bytes(agg.render_mask(mask, cfg.cell)))


def cmd_report(cfg: PipelineConfig) -> dict:
    mask = agg.ArtifactMask.from_dict(_load(cfg.results / "mask.json", "aggregate"))
    grid = _load(cfg.trusted / "grid.json", "split")
    secret = privacy.PerturbationSecret.from_dict(_load(cfg.trusted / "secret.json", "split"))
    vault = wsi.MetadataVault.from_dict(_load(cfg.trusted / "vault.json", "split"))
    parts = _load_partitions(cfg, grid["tile_size"])
    coords = wsi.CoordinateMatrix.for_shape(grid["rows"], grid["cols"])
    audit = privacy.audit(parts, coords, secret, vault.values())

    metrics = None
    truth_path = cfg.trusted / "truth.json"
    if truth_path.exists():
        truth = json.loads(truth_path.read_text())
        planted = [PlantedArtifact(**a) for a in truth["planted"]]
        metrics = agg.evaluate(mask, planted)

    point, _, model, plan = _chosen_point(cfg)
    sim = _load(cfg.cloud / "summary.json", "run")
    simulation = dict(sim)
    simulation["completion_s"] = sim["completion_us"] / scheduler.US
    simulation["simulated_f2"] = (model.src_us + sim["completion_us"] + model.snk_us) / scheduler.US
    report = agg.summary_report(
        mask,
        metrics=metrics,
        plan={"f1": point.f1, "f2": point.f2, "assignment": list(point.assignment), "preference": plan["preference"]},
        simulation=simulation,
        audit=audit.to_dict(),
    )
    _dump(cfg.results / "report.json", report)
    return report


def scan_cloud(cfg: PipelineConfig) -> int:
    """Count vault values found in any file under the cloud directory."""
    vault = wsi.MetadataVault.from_dict(_load(cfg.trusted / "vault.json", "split"))
    needles = [v.encode() for v in vault.values() if v]
    hits = 0
    for path in sorted(cfg.cloud.rglob("*")):
        if path.is_file():
            data = path.read_bytes()
            hits += sum(data.count(n) for n in needles)
    return hits


COMMANDS = {
    "generate": cmd_generate,
    "split": cmd_split,
    "plan": cmd_plan,
    "run": cmd_run,
    "aggregate": cmd_aggregate,
    "report": cmd_report,
}


def cmd_pipeline(cfg: PipelineConfig) -> dict:
    cfg.validate()
    marker = cfg.output / "FAILED"
    try:
        for stage in STAGES[:-1]:
            COMMANDS[stage](cfg)
        leaks = scan_cloud(cfg)
        if leaks:
            raise PrivacyError(f"{leaks} metadata value(s) found under {cfg.cloud}")
        report = cmd_report(cfg)
    except TileflowError as exc:
        cfg.output.mkdir(parents=True, exist_ok=True)
        marker.write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise
    if marker.exists():
        marker.unlink()
    return report


# --- argument parsing ------------------------------------------------------------


def _kv(text: str) -> tuple[str, float]:
    node, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NODE=VALUE, got {text!r}")
    return node, float(value)


def _artifact(text: str) -> PlantedArtifact:
    # kind:row,col[,n_rows,n_cols]
    kind, sep, rest = text.partition(":")
    try:
        nums = [int(x) for x in rest.split(",")]
    except ValueError:
        nums = []
    if not sep or len(nums) not in (2, 4):
        raise argparse.ArgumentTypeError(f"expected KIND:ROW,COL[,NROWS,NCOLS], got {text!r}")
    return PlantedArtifact(kind, *nums)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output", type=Path, default=None, help="output directory (default: $TILEFLOW_OUTPUT or ./tileflow-out)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--tile-size", type=int, default=128)

    slide = argparse.ArgumentParser(add_help=False)
    slide.add_argument("--width", type=int, default=512)
    slide.add_argument("--height", type=int, default=512)
    slide.add_argument("--artifact", type=_artifact, action="append", dest="artifacts", help="KIND:ROW,COL[,NROWS,NCOLS]")
    slide.add_argument("--no-artifacts", action="store_true")

    split = argparse.ArgumentParser(add_help=False)
    split.add_argument("-K", "--shards", type=int, default=4)
    split.add_argument("--policy", choices=privacy.POLICIES, default="latin-scatter")

    plan = argparse.ArgumentParser(add_help=False)
    plan.add_argument("--infras", type=Path, dest="infras_file")
    plan.add_argument("--et-model", type=Path, dest="et_model_file")
    plan.add_argument("--preference", choices=scheduler.PREFERENCES, default="knee")
    plan.add_argument("--planner", choices=("auto", "exhaustive", "heuristic"), default="auto")
    plan.add_argument("--budget", type=int, default=scheduler.DEFAULT_BUDGET)
    plan.add_argument("--generations", type=int, default=60)
    plan.add_argument("--population", type=int, default=40)

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--straggler", type=_kv, action="append", default=[], help="NODE=SLOWDOWN")
    run.add_argument("--fail", type=_kv, action="append", default=[], help="NODE=SECONDS")
    run.add_argument("--rebalance", choices=simnet.REBALANCE, default="none")
    run.add_argument("--steal-granularity", type=int, default=1)
    run.add_argument("--detectors", type=Path, dest="detectors_file")

    out = argparse.ArgumentParser(add_help=False)
    out.add_argument("--cell", type=int, default=8, help="overlay pixels per tile")

    parser = argparse.ArgumentParser(prog="tileflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common, slide], help="synthesize a slide with planted artifacts")
    sub.add_parser("split", parents=[common, split], help="strip metadata, tile, encode and partition")
    sub.add_parser("plan", parents=[common, plan], help="compute the cost/makespan front and pick a plan")
    sub.add_parser("run", parents=[common, run], help="simulate distributed detection")
    sub.add_parser("aggregate", parents=[common, out], help="decode outputs into the artifact mask")
    sub.add_parser("report", parents=[common], help="write the summary report")
    sub.add_parser("pipeline", parents=[common, slide, split, plan, run, out], help="run every stage")
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    output = args.output or Path(os.environ.get("TILEFLOW_OUTPUT") or DEFAULT_OUTPUT)
    cfg = PipelineConfig(output=Path(output), seed=args.seed, tile_size=args.tile_size)
    for name in (
        "width", "height", "shards", "policy", "infras_file", "et_model_file", "preference", "planner",
        "budget", "generations", "population", "rebalance", "steal_granularity", "detectors_file", "cell",
    ):
        if hasattr(args, name):
            setattr(cfg, name, getattr(args, name))
    if getattr(args, "no_artifacts", False):
        cfg.artifacts = ()
    elif getattr(args, "artifacts", None):
        cfg.artifacts = tuple(args.artifacts)
    cfg.stragglers = dict(getattr(args, "straggler", []) or [])
    cfg.failures = dict(getattr(args, "fail", []) or [])
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        if args.command == "pipeline":
            report = cmd_pipeline(cfg)
            print(json.dumps({k: report[k] for k in ("tiles", "class_counts", "artifact_free_fraction")}, sort_keys=True))
        else:
            if args.command == "generate":
                cfg.validate()
            COMMANDS[args.command](cfg)
    except TileflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ValidationError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Configuration, the simulation loop, CSV output, and the command line.

A run is fully determined by its config: the master seed fans out into named
substreams (topology, fleet, data, partition, model init, one training
stream per vehicle), so two runs of the same config produce byte-identical
metric files, and different strategies under the same seed see identical
networks, fleets, and data.
"""
from __future__ import annotations

import argparse
import csv
import difflib
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .aggregation import (
    STRATEGIES,
    StepParams,
    VehicleRuntime,
    VehicleStepError,
    epoch_exchange,
)
from .data import (
    Dataset,
    Partition,
    TargetVector,
    gen_synthetic,
    load_dataset_csv,
    partition_balanced_noniid,
    partition_unbalanced_iid,
    target_vector,
)
from .learner import evaluate, init_model
from .metrics import EpochMetrics, MetricsLog, consensus_distance, pearson
from .mobility import comm_graph, init_fleet, step_fleet, vehicle_positions
from .road_network import (
    RoadGraph,
    gen_grid,
    gen_random,
    gen_spider,
    graph_from_json,
    graph_to_json,
)
from .seeding import derive_seed, substream
from .state_diversity import entropy, kl_divergence, zero_state

ENV_SEED = "DFLDDS_SEED"

CSV_COLUMNS = (
    "epoch",
    "avg_accuracy",
    "consensus_distance",
    "pearson_acc_entropy",
    "min_accuracy",
    "max_accuracy",
)


class ConfigError(ValueError):
    """A config file failed validation; the message names the field."""


class SimulationError(RuntimeError):
    """A run died mid-flight; carries epoch, vehicle, and the partial log."""

    def __init__(self, epoch: int, vehicle_id: int, partial_log: MetricsLog) -> None:
        super().__init__(f"simulation failed at epoch {epoch}, vehicle {vehicle_id}")
        self.epoch = epoch
        self.vehicle_id = vehicle_id
        self.partial_log = partial_log


# ── Configuration ────────────────────────────────────────────────────────────

_KEY_ALIASES = {
    "lr": "eta",
    "learning_rate": "eta",
    "k": "vehicles",
    "r": "comm_range",
    "rounds": "epochs",
    "e": "local_passes",
    "b": "batch_size",
}


def _reject_unknown(obj: dict, allowed: set[str], context: str) -> None:
    for key in obj:
        if key not in allowed:
            alias = _KEY_ALIASES.get(key.lower())
            close = difflib.get_close_matches(key, allowed, n=1)
            hint = alias or (close[0] if close else None)
            suffix = f" (did you mean '{hint}'?)" if hint else ""
            raise ConfigError(f"unknown {context} key '{key}'{suffix}")


@dataclass(frozen=True)
class TopologySpec:
    kind: str
    rows: int = 10
    cols: int = 10
    spacing: float = 100.0
    arms: int = 10
    circles: int = 10
    radius_inc: float = 100.0
    n_nodes: int = 100
    min_len: float = 100.0
    max_len: float = 200.0

    _FIELDS = {
        "grid": ("rows", "cols", "spacing"),
        "spider": ("arms", "circles", "radius_inc"),
        "random": ("n_nodes", "min_len", "max_len"),
    }

    @classmethod
    def from_dict(cls, obj: dict) -> "TopologySpec":
        kind = obj.get("kind")
        if kind not in cls._FIELDS:
            raise ConfigError(
                f"topology.kind must be one of {sorted(cls._FIELDS)}, got {kind!r}"
            )
        _reject_unknown(obj, {"kind", *cls._FIELDS[kind]}, "topology")
        return cls(**{k: v for k, v in obj.items() if k != "kind"}, kind=kind)

    def build(self, seed: int) -> RoadGraph:
        if self.kind == "grid":
            return gen_grid(self.rows, self.cols, self.spacing)
        if self.kind == "spider":
            return gen_spider(self.arms, self.circles, self.radius_inc)
        return gen_random(self.n_nodes, self.min_len, self.max_len, seed)


@dataclass(frozen=True)
class DataSpec:
    kind: str = "synthetic"
    classes: int = 10
    features: int = 32
    per_class: int = 600
    spread: float = 0.3
    scale: float = 1.0
    train_path: str = ""
    test_path: str = ""

    @classmethod
    def from_dict(cls, obj: dict) -> "DataSpec":
        kind = obj.get("kind", "synthetic")
        if kind == "synthetic":
            allowed = {"kind", "classes", "features", "per_class", "spread", "scale"}
        elif kind == "csv":
            allowed = {"kind", "train_path", "test_path"}
        else:
            raise ConfigError(f"data.kind must be 'synthetic' or 'csv', got {kind!r}")
        _reject_unknown(obj, allowed, "data")
        return cls(**{k: v for k, v in obj.items() if k != "kind"}, kind=kind)

    def build(self, seed: int) -> tuple[Dataset, Dataset]:
        if self.kind == "synthetic":
            return gen_synthetic(self.classes, self.features, self.per_class,
                                 self.spread, seed, scale=self.scale)
        train = load_dataset_csv(self.train_path)
        return train, load_dataset_csv(self.test_path, n_classes=train.n_classes)


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "balanced_noniid"
    shards_per_vehicle: int = 4
    size_levels: tuple[int, ...] = (125, 375, 1125)

    @classmethod
    def from_dict(cls, obj: dict) -> "PartitionSpec":
        kind = obj.get("kind", "balanced_noniid")
        if kind == "balanced_noniid":
            allowed = {"kind", "shards_per_vehicle"}
        elif kind == "unbalanced_iid":
            allowed = {"kind", "size_levels"}
        else:
            raise ConfigError(
                f"partition.kind must be 'balanced_noniid' or 'unbalanced_iid', got {kind!r}"
            )
        _reject_unknown(obj, allowed, "partition")
        obj = {k: tuple(v) if k == "size_levels" else v for k, v in obj.items()}
        return cls(**{k: v for k, v in obj.items() if k != "kind"}, kind=kind)

    def build(self, ds: Dataset, n_vehicles: int, seed: int) -> Partition:
        if self.kind == "balanced_noniid":
            return partition_balanced_noniid(ds, n_vehicles, self.shards_per_vehicle, seed)
        return partition_unbalanced_iid(ds, n_vehicles, list(self.size_levels), seed)


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "logistic"
    hidden: int | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelSpec":
        _reject_unknown(obj, {"arch", "hidden"}, "model")
        arch = obj.get("arch", "logistic")
        if arch not in ("logistic", "mlp"):
            raise ConfigError(f"model.arch must be 'logistic' or 'mlp', got {arch!r}")
        hidden = obj.get("hidden")
        if arch == "mlp" and (hidden is None or int(hidden) < 1):
            raise ConfigError("model.hidden must be a positive integer for the mlp arch")
        if arch == "logistic" and hidden is not None:
            raise ConfigError("model.hidden only applies to the mlp arch")
        return cls(arch=arch, hidden=int(hidden) if hidden is not None else None)


# Defaults mirror the reference hyperparameter table: eta=0.1, B=80, E=8,
# K=100 vehicles, 100 m communication range.
@dataclass(frozen=True)
class SimConfig:
    strategy: str
    topology: TopologySpec
    vehicles: int = 100
    comm_range: float = 100.0
    speed: float = 13.89
    dt: float = 30.0
    data: DataSpec = field(default_factory=DataSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    eta: float = 0.1
    local_passes: int = 8
    batch_size: int = 80
    epochs: int = 100
    targets: tuple[float, ...] = (0.90, 0.92, 0.95)
    seed: int = 0
    state_order: str = "aggregate_first"
    early_stop_target: float | None = None

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.vehicles < 1:
            raise ConfigError("vehicles (K) must be at least 1")
        if self.comm_range <= 0:
            raise ConfigError("comm_range (r) must be positive")
        if self.speed <= 0:
            raise ConfigError("speed must be positive")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.local_passes < 1:
            raise ConfigError("local_passes (E) must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size (B) must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        for t in self.targets:
            if not 0 < t <= 1:
                raise ConfigError("targets must lie in (0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.state_order not in ("aggregate_first", "increment_first"):
            raise ConfigError("state_order must be 'aggregate_first' or 'increment_first'")
        if self.early_stop_target is not None and not 0 < self.early_stop_target <= 1:
            raise ConfigError("early_stop_target must lie in (0, 1]")


_TOP_LEVEL_KEYS = {
    "strategy", "topology", "vehicles", "comm_range", "speed", "dt", "data",
    "partition", "model", "eta", "local_passes", "batch_size", "epochs",
    "targets", "seed", "state_order", "early_stop_target",
}


def config_from_dict(obj: dict) -> SimConfig:
    """Build a validated SimConfig; unknown keys are rejected, never ignored."""
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(obj, _TOP_LEVEL_KEYS, "config")
    if "strategy" not in obj:
        raise ConfigError("config must set 'strategy'")
    if "topology" not in obj:
        raise ConfigError("config must set 'topology'")
    kwargs = dict(obj)
    kwargs["topology"] = TopologySpec.from_dict(obj["topology"])
    if "data" in obj:
        kwargs["data"] = DataSpec.from_dict(obj["data"])
    if "partition" in obj:
        kwargs["partition"] = PartitionSpec.from_dict(obj["partition"])
    if "model" in obj:
        kwargs["model"] = ModelSpec.from_dict(obj["model"])
    if "targets" in obj:
        kwargs["targets"] = tuple(obj["targets"])
    try:
        cfg = SimConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str) -> SimConfig:
    """Parse and validate a JSON config; DFLDDS_SEED overrides the seed."""
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        try:
            obj["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env_seed!r}") from exc
    return config_from_dict(obj)


def config_digest(cfg: SimConfig) -> str:
    """Stable short hash identifying a config, recorded in run metadata."""
    def encode(value):
        if hasattr(value, "__dataclass_fields__"):
            return {k: encode(getattr(value, k)) for k in value.__dataclass_fields__}
        if isinstance(value, tuple):
            return list(value)
        return value

    text = json.dumps(encode(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ── Simulation loop ──────────────────────────────────────────────────────────

def build_environment(cfg: SimConfig):
    """Deterministically realize network, data, partition, and target profile.

    Strategy never enters any substream label, so every strategy under one
    seed sees the identical world.
    """
    graph = cfg.topology.build(derive_seed(cfg.seed, "topology"))
    train, test = cfg.data.build(derive_seed(cfg.seed, "data"))
    partition = cfg.partition.build(train, cfg.vehicles, derive_seed(cfg.seed, "partition"))
    return graph, train, test, partition, target_vector(partition)


def _init_runtimes(cfg: SimConfig, train: Dataset, partition: Partition) -> list[VehicleRuntime]:
    base = init_model(cfg.model.arch, train.n_features, train.n_classes,
                      derive_seed(cfg.seed, "model-init"), hidden=cfg.model.hidden)
    runtimes = []
    for k in range(cfg.vehicles):
        runtimes.append(VehicleRuntime(
            vehicle_id=k,
            model=base,
            state=zero_state(cfg.vehicles),
            data=train.subset(partition.indices[k]),
            rng=substream(cfg.seed, f"train-{k}"),
            sp_x=base.w.copy() if cfg.strategy == "sp" else None,
            sp_y=1.0,
        ))
    return runtimes


def run(cfg: SimConfig, n_threads: int = 1,
        trajectory_path: str | None = None) -> MetricsLog:
    """Simulate one strategy for the configured epoch budget.

    Per epoch: move the fleet, rebuild the communication graph, run the
    synchronized exchange, then score every vehicle on the shared test set.
    On failure the partial log rides along on the SimulationError.
    """
    graph, train, test, partition, target = build_environment(cfg)
    fleet = init_fleet(graph, cfg.vehicles, cfg.speed, derive_seed(cfg.seed, "fleet"))
    runtimes = _init_runtimes(cfg, train, partition)
    params = StepParams(eta=cfg.eta, local_passes=cfg.local_passes,
                        batch_size=cfg.batch_size, state_order=cfg.state_order)
    log = MetricsLog(metadata={
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "config_digest": config_digest(cfg),
    })
    trajectory = open(trajectory_path, "w", newline="") if trajectory_path else None
    try:
        if trajectory:
            trajectory.write("epoch,vehicle_id,x,y\n")
        for t in range(cfg.epochs):
            fleet = step_fleet(fleet, graph, cfg.dt)
            comm = comm_graph(fleet, graph, cfg.comm_range)
            try:
                runtimes = epoch_exchange(cfg.strategy, runtimes, comm, target,
                                          params, n_threads=n_threads)
            except VehicleStepError as exc:
                raise SimulationError(t, exc.vehicle_id, log) from exc
            reports = [evaluate(rt.model, test) for rt in runtimes]
            accuracies = np.array([r.accuracy for r in reports])
            entropies = np.array([entropy(rt.state) for rt in runtimes])
            divergences = np.array([kl_divergence(rt.state, target) for rt in runtimes])
            log.append(EpochMetrics(
                epoch=t,
                per_vehicle_accuracy=accuracies,
                avg_accuracy=float(accuracies.mean()),
                consensus_distance=consensus_distance([rt.model for rt in runtimes]),
                per_vehicle_entropy=entropies,
                per_vehicle_divergence=divergences,
                pearson_acc_entropy=(pearson(accuracies, entropies)
                                     if cfg.vehicles >= 2 else None),
            ))
            if trajectory:
                for k, (x, y) in enumerate(vehicle_positions(fleet, graph)):
                    trajectory.write(f"{t},{k},{x:.10g},{y:.10g}\n")
            if cfg.early_stop_target is not None and accuracies.mean() >= cfg.early_stop_target:
                break
    finally:
        if trajectory:
            trajectory.close()
    return log


# ── Output ───────────────────────────────────────────────────────────────────

def _fmt(value: float | None) -> str:
    return "NA" if value is None else f"{value:.10g}"


def write_metrics_csv(log: MetricsLog, path: str, per_vehicle: bool = False) -> None:
    """Write the per-epoch table; floats carry 10 significant digits.

    per_vehicle adds one accuracy and one entropy column per vehicle, letting
    downstream tooling recompute the aggregates exactly.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = list(CSV_COLUMNS)
        if per_vehicle and log.entries:
            n = len(log.entries[0].per_vehicle_accuracy)
            header += [f"acc_{k}" for k in range(n)] + [f"entropy_{k}" for k in range(n)]
        w.writerow(header)
        for e in log.entries:
            row = [
                str(e.epoch),
                _fmt(e.avg_accuracy),
                _fmt(e.consensus_distance),
                _fmt(e.pearson_acc_entropy),
                _fmt(float(e.per_vehicle_accuracy.min())),
                _fmt(float(e.per_vehicle_accuracy.max())),
            ]
            if per_vehicle:
                row += [_fmt(float(a)) for a in e.per_vehicle_accuracy]
                row += [_fmt(float(h)) for h in e.per_vehicle_entropy]
            w.writerow(row)


def read_metrics_csv(path: str) -> list[dict]:
    """Parse a metrics CSV back into row dicts with floats and None for NA."""
    with open(path, newline="") as fh:
        rows = []
        for raw in csv.DictReader(fh):
            row: dict = {"epoch": int(raw["epoch"])}
            for key, value in raw.items():
                if key == "epoch":
                    continue
                row[key] = None if value == "NA" else float(value)
            rows.append(row)
    return rows


# ── Command line ─────────────────────────────────────────────────────────────

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # bad usage exits 1, not argparse's default 2
        raise _UsageError(message)


def _cmd_gen_network(args) -> int:
    picked = [s for s in (args.grid, args.spider, args.random) if s]
    if len(picked) != 1:
        raise _UsageError("pick exactly one of --grid / --spider / --random")
    if args.grid:
        rows, _, cols = args.grid.partition("x")
        g = gen_grid(int(rows), int(cols), args.spacing)
    elif args.spider:
        arms, circles, radius_inc = args.spider.split(",")
        g = gen_spider(int(arms), int(circles), float(radius_inc))
    else:
        n_nodes, min_len, max_len = args.random.split(",")
        g = gen_random(int(n_nodes), float(min_len), float(max_len), args.seed)
    with open(args.output, "w") as fh:
        fh.write(graph_to_json(g))
    print(f"wrote {len(g.nodes)} nodes, {len(g.edges)} edges to {args.output}")
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    log = run(cfg, n_threads=args.threads, trajectory_path=args.trajectories)
    write_metrics_csv(log, args.output, per_vehicle=args.per_vehicle)
    final = log.entries[-1] if log.entries else None
    if final:
        print(f"{cfg.strategy}: {len(log.entries)} epochs, "
              f"final avg accuracy {final.avg_accuracy:.4f} -> {args.output}")
    return 0


def _cmd_analyze(args) -> int:
    targets = [float(t) for t in args.targets.split(",")] if args.targets else [0.90, 0.92, 0.95]
    header = ["file", "epochs", "final_acc", "best_acc", "mean_consensus"]
    header += [f"to>={t:g}" for t in targets]
    rows = [header]
    for path in args.files:
        data = read_metrics_csv(path)
        series = [r["avg_accuracy"] for r in data]
        cds = [r["consensus_distance"] for r in data]
        row = [
            path,
            str(len(data)),
            f"{series[-1]:.4f}" if series else "NA",
            f"{max(series):.4f}" if series else "NA",
            f"{np.mean(cds):.6g}" if cds else "NA",
        ]
        from .metrics import epochs_to_target
        for t in targets:
            hit = epochs_to_target(series, t)
            row.append("NA" if hit is None else str(hit))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    for r in rows:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dfldds",
                     description="Decentralized federated learning simulator "
                                 "for vehicular networks")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-network", parents=[], help="generate a road network JSON",
                       description="Generate a road network and write it as JSON.")
    g.add_argument("--grid", metavar="RxC", help="lattice, e.g. 10x10")
    g.add_argument("--spacing", type=float, default=100.0, help="lattice spacing in meters")
    g.add_argument("--spider", metavar="ARMS,CIRCLES,RADIUS", help="spider web, e.g. 10,10,100")
    g.add_argument("--random", metavar="N,MIN,MAX", help="perturbed lattice, e.g. 100,100,200")
    g.add_argument("--seed", type=int, default=0, help="seed for --random")
    g.add_argument("-o", "--output", required=True, help="output JSON path")
    g.set_defaults(func=_cmd_gen_network)

    r = sub.add_parser("run", help="run one simulation from a JSON config",
                       description="Run one configured simulation and write metrics CSV.")
    r.add_argument("-c", "--config", required=True, help="JSON config path")
    r.add_argument("-o", "--output", required=True, help="metrics CSV path")
    r.add_argument("--per-vehicle", action="store_true",
                   help="append per-vehicle accuracy and entropy columns")
    r.add_argument("--threads", type=int, default=1,
                   help="worker threads for the per-vehicle updates")
    r.add_argument("--trajectories", metavar="PATH",
                   help="also dump vehicle positions per epoch")
    r.set_defaults(func=_cmd_run)

    a = sub.add_parser("analyze", help="summarize one or more metrics CSVs",
                       description="Print epochs-to-target and summary statistics.")
    a.add_argument("files", nargs="+", help="metrics CSV files")
    a.add_argument("--targets", help="comma-separated accuracy targets, e.g. 0.9,0.92,0.95")
    a.set_defaults(func=_cmd_analyze)
    return parser


def cli(argv: list[str] | None = None) -> int:
    """Entry point returning a process exit code (0 ok, 1 usage, 2 runtime)."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))

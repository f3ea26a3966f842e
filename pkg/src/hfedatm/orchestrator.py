"""End-to-end hierarchical federation: clients -> stations -> server, round by round."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import merge
from .client import ClientUpdate, DpBudget, make_algorithm, privatize, train_local
from .data import ClientData, DomainDataset, default_ownership, generate_domains, materialize, \
    partition, split_sources_and_target
from .linalg import make_rng
from .model import ModelSpec, ModelWeights, init_weights, predict, reduced_lenet

logger = logging.getLogger(__name__)

MODES = ("avg", "hfedatm")

METRICS_COLUMNS = ("round", "mode", "seed", "target_acc", "mean_station_loss", "breadth_pre",
                   "breadth_post", "t_train_s", "t_align_s", "t_merge_s", "jitter_count")

# stream tags for make_rng([seed, tag, ...])
_RNG_INIT, _RNG_TRAIN, _RNG_DP, _RNG_SELECT, _RNG_DOMAINS, _RNG_SPLIT = range(6)


class RunAborted(RuntimeError):
    """Every active client of some station failed in a round."""


@dataclass(frozen=True)
class Topology:
    stations: int = 3
    clients_per_station: int = 3
    active_fraction: float = 1.0

    def __post_init__(self):
        if self.stations < 1 or self.clients_per_station < 1:
            raise ValueError("need at least one station and one client per station")
        if not 0.0 < self.active_fraction <= 1.0:
            raise ValueError("active_fraction must lie in (0, 1]")

    @property
    def num_clients(self) -> int:
        return self.stations * self.clients_per_station

    def clients_of(self, station: int) -> List[int]:
        return list(range(station * self.clients_per_station, (station + 1) * self.clients_per_station))

    def station_of(self, client: int) -> int:
        return client // self.clients_per_station


@dataclass(frozen=True)
class RunConfig:
    rounds: int = 20
    station_rounds: int = 3
    epochs: int = 4
    batch_size: int = 32
    lr: float = 0.05
    lr_schedule: str = "cosine"
    algorithm: str = "fedavg"
    prox_mu: float = 0.01
    lambda_ot: float = 0.05
    sinkhorn_iters: int = 25
    alpha: float = 0.75
    gamma: str = "active_clients"
    dp: Optional[DpBudget] = None
    mode: str = "hfedatm"
    seed: int = 0
    reference_station: int = 0
    workers: int = 1

    def __post_init__(self):
        for name in ("rounds", "station_rounds", "epochs", "batch_size", "sinkhorn_iters", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.lambda_ot > 0:
            raise ValueError("lambda_ot must be positive")

    def lr_at(self, rnd: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * rnd / self.rounds))


@dataclass
class RoundRecord:
    round: int
    mode: str
    seed: int
    target_acc: float
    mean_station_loss: float
    breadth_pre: float
    breadth_post: float
    t_train_s: float
    t_align_s: float
    t_merge_s: float
    jitter_count: int
    station_losses: List[float] = field(default_factory=list)
    station_checksum: str = ""

    @property
    def round_seconds(self) -> float:
        return self.t_train_s + self.t_align_s + self.t_merge_s

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRICS_COLUMNS}


@dataclass
class RunResult:
    records: List[RoundRecord]
    final: ModelWeights
    packages: List[merge.StationPackage] = field(default_factory=list)  # last round
    report: Optional[merge.MergeReport] = None  # last round


@dataclass(frozen=True)
class DataConfig:
    num_source_domains: int = 3
    num_classes: int = 4
    per_domain: int = 120
    image_size: int = 12
    channels: int = 3
    lam: float = 1.0


@dataclass
class Federation:
    """Client shards plus the held-out target domain. Only the orchestrator sees samples."""

    clients: List[ClientData]
    target: DomainDataset
    spec: ModelSpec
    partition_counts: np.ndarray


def build_federation(cfg: DataConfig, topology: Topology, seed: int) -> Federation:
    """Generate ``num_source_domains + 1`` domains, hold the last out and partition the rest."""
    shape = (cfg.channels, cfg.image_size, cfg.image_size)
    domains = generate_domains(make_rng([seed, _RNG_DOMAINS]), cfg.num_source_domains + 1,
                               cfg.num_classes, cfg.per_domain, shape)
    sources, target = split_sources_and_target(domains)
    owners = default_ownership(len(sources), topology.stations, topology.clients_per_station)
    part = partition(cfg.lam, len(sources), topology.num_clients, owners, [len(d) for d in sources])
    clients = materialize(part, sources, make_rng([seed, _RNG_SPLIT]))
    return Federation(clients, target, reduced_lenet(shape, cfg.num_classes), part.counts)


def evaluate(weights: ModelWeights, target: DomainDataset) -> float:
    """Fraction of argmax-correct predictions on the target samples."""
    if len(target.y) == 0:
        raise ValueError("target domain is empty")
    return float(np.mean(predict(weights, target.x) == target.y))


def _select_active(topology: Topology, station: int, seed: int, rnd: int, srnd: int) -> List[int]:
    members = topology.clients_of(station)
    if topology.active_fraction >= 1.0:
        return members
    count = max(1, int(round(topology.active_fraction * len(members))))
    rng = make_rng([seed, _RNG_SELECT, rnd, srnd, station])
    return sorted(int(c) for c in rng.choice(members, size=count, replace=False))


def _package_checksum(packages: Sequence[merge.StationPackage]) -> str:
    h = hashlib.sha256()
    for p in sorted(packages, key=lambda p: p.station_id):
        h.update(p.model.checksum().encode())
        for lid in sorted(p.grams):
            h.update(np.ascontiguousarray(p.grams[lid].g, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def run(config: RunConfig, topology: Topology, fed: Federation,
        init: Optional[ModelWeights] = None) -> RunResult:
    """Run ``config.rounds`` global rounds and return per-round records plus the final model."""
    if len(fed.clients) != topology.num_clients:
        raise ValueError(f"federation has {len(fed.clients)} clients, topology expects {topology.num_clients}")
    for c in fed.clients:
        if len(c) == 0:
            raise ValueError(f"client {c.client_id} received no samples")
    seed = config.seed
    global_w = init if init is not None else init_weights(fed.spec, make_rng([seed, _RNG_INIT]))
    algo = make_algorithm(config.algorithm, mu=config.prox_mu)
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    records: List[RoundRecord] = []
    packages: List[merge.StationPackage] = []
    report = None

    def train_one(args) -> ClientUpdate:
        start_w, cid, station, rnd, srnd, lr, last = args
        rng = make_rng([seed, _RNG_TRAIN, rnd, srnd, station, cid])
        upd = train_local(start_w, fed.clients[cid], algo, config.epochs, config.batch_size, lr, rng,
                          capture=last, station_id=station)
        if last and not upd.diverged:
            upd.grams = privatize(upd.grams, config.dp, make_rng([seed, _RNG_DP, rnd, station, cid]))
        return upd

    try:
        for rnd in range(config.rounds):
            lr = config.lr_at(rnd)
            t0 = time.perf_counter()
            packages = []
            station_losses = []
            for station in range(topology.stations):
                station_w = global_w
                for srnd in range(config.station_rounds):
                    last = srnd == config.station_rounds - 1
                    jobs = [(station_w, cid, station, rnd, srnd, lr, last)
                            for cid in _select_active(topology, station, seed, rnd, srnd)]
                    updates = list(pool.map(train_one, jobs)) if pool else [train_one(j) for j in jobs]
                    ok = sorted((u for u in updates if not u.diverged), key=lambda u: u.client_id)
                    failed = [u.client_id for u in updates if u.diverged]
                    if failed:
                        logger.warning("round %d station %d: clients %s diverged", rnd, station, failed)
                    if not ok:
                        raise RunAborted(f"round {rnd}, station {station}: every active client diverged")
                    if last:
                        packages.append(merge.build_station_package(station, ok, config.alpha))
                        station_losses.append(float(np.mean([u.loss for u in ok])))
                    else:
                        station_w = merge.station_aggregate(ok)
            t_train = time.perf_counter() - t0
            checksum = _package_checksum(packages)

            if config.mode == "avg":
                merged, report = merge.merge_average(packages, config.gamma)
            else:
                merged, report = merge.merge_hfedatm(packages, config.lambda_ot, config.sinkhorn_iters,
                                                     config.gamma, config.reference_station)
            acc = evaluate(merged, fed.target)
            records.append(RoundRecord(
                rnd, config.mode, seed, acc, float(np.mean(station_losses)), report.breadth_pre,
                report.breadth_post, t_train, report.align_seconds, report.merge_seconds,
                report.jitter_count, station_losses, checksum))
            logger.info("round %d [%s] acc=%.4f loss=%.4f", rnd, config.mode, acc, records[-1].mean_station_loss)
            global_w = merged
    finally:
        if pool:
            pool.shutdown()
    return RunResult(records, global_w, packages, report)


@dataclass(frozen=True)
class Overhead:
    seconds_avg: float
    seconds_hfedatm: float
    overhead: float


def per_round_seconds(records: Sequence[RoundRecord], warmup: int = 1) -> float:
    """Median of train + align + merge seconds, skipping warm-up rounds."""
    times = [r.round_seconds for r in records[warmup:]] or [r.round_seconds for r in records]
    return float(statistics.median(times))


def measure_overhead(config: RunConfig, topology: Topology, fed: Federation) -> Overhead:
    """Relative per-round time increase of ``hfedatm`` over ``avg`` for otherwise identical runs."""
    if config.rounds < 4:
        raise ValueError("need at least 4 rounds (one warm-up plus three measured)")
    times = {}
    for mode in MODES:
        cfg = RunConfig(**{**asdict_shallow(config), "mode": mode})
        times[mode] = per_round_seconds(run(cfg, topology, fed).records)
    return Overhead(times["avg"], times["hfedatm"], (times["hfedatm"] - times["avg"]) / times["avg"])


def asdict_shallow(config: RunConfig) -> dict:
    return {f: getattr(config, f) for f in config.__dataclass_fields__}


def write_metrics_csv(records: Sequence[RoundRecord], path, append: bool = False,
                      timings: bool = False) -> None:
    """Write the fixed metrics columns.

    Wall-clock columns are left empty unless ``timings`` is set, which keeps the
    file byte-identical across reruns; see :func:`write_timings_csv`.
    """
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        if not append:
            writer.writeheader()
        for r in records:
            row = r.row()
            for k in ("target_acc", "mean_station_loss", "breadth_pre", "breadth_post"):
                row[k] = repr(float(row[k]))
            for k in ("t_train_s", "t_align_s", "t_merge_s"):
                row[k] = "%.6f" % row[k] if timings else ""
            writer.writerow(row)


TIMING_COLUMNS = ("round", "mode", "seed", "t_train_s", "t_align_s", "t_merge_s", "t_round_s")


def write_timings_csv(records: Sequence[RoundRecord], path, append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(TIMING_COLUMNS)
        for r in records:
            writer.writerow([r.round, r.mode, r.seed, "%.6f" % r.t_train_s, "%.6f" % r.t_align_s,
                             "%.6f" % r.t_merge_s, "%.6f" % r.round_seconds])

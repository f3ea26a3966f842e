"""Synthetic multi-domain images and the lambda-controlled heterogeneous partitioner."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from . import container
from .linalg import make_rng

GAIN_LEVELS = (0.6, 0.8, 1.0, 1.2, 1.4)


@dataclass(frozen=True)
class DomainDataset:
    domain_id: int
    x: np.ndarray  # (n, c, h, w)
    y: np.ndarray  # (n,) int64
    rotation: int  # degrees
    gain: Tuple[float, ...]
    noise: float

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class ClientData:
    client_id: int
    x: np.ndarray
    y: np.ndarray
    domains: np.ndarray  # source domain of every sample

    def __len__(self) -> int:
        return len(self.y)


def _class_prototypes(rng: np.random.Generator, num_classes: int, shape: Tuple[int, int, int]):
    """Per class: centred ring radius, ring colour, and one off-centre blob (centre, colour)."""
    c, h, w = shape
    radii = np.linspace(0.0, 0.35 * min(h, w), num_classes)[rng.permutation(num_classes)]
    protos = []
    for k in range(num_classes):
        ring_color = rng.uniform(0.2, 1.0, size=c)
        blob_center = rng.uniform(1.5, [h - 2.5, w - 2.5])
        blob_color = rng.uniform(0.2, 1.0, size=c)
        protos.append((radii[k], ring_color, blob_center, blob_color))
    return protos


def _render(proto, shape, rng: np.random.Generator) -> np.ndarray:
    c, h, w = shape
    radius, ring_color, blob_center, blob_color = proto
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0 + rng.normal(0.0, 0.5, size=2)
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    ring = np.exp(-((r - radius * rng.uniform(0.9, 1.1)) ** 2) / 2.0)
    by, bx = blob_center + rng.normal(0.0, 0.7, size=2)
    blob = 0.6 * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / 3.0)
    amp = rng.uniform(0.8, 1.2)
    return amp * (ring_color[:, None, None] * ring[None] + blob_color[:, None, None] * blob[None])


def domain_style(domain_id: int, channels: int) -> Tuple[int, Tuple[float, ...], float]:
    """(rotation degrees, per-channel gain, pixel noise std) for a domain index."""
    rotation = 90 * (domain_id % 4)
    gain = tuple(GAIN_LEVELS[(2 * ch + domain_id) % len(GAIN_LEVELS)] for ch in range(channels))
    noise = 0.1 + 0.05 * (domain_id % 3)
    return rotation, gain, noise


def generate_domains(rng: np.random.Generator, num_domains: int, num_classes: int, per_domain: int,
                     image_shape: Sequence[int] = (3, 12, 12)) -> List[DomainDataset]:
    """Class-conditional ring-and-blob images; each domain rotates, re-tints and re-noises them.

    All domains share the class prototypes (ring radius and colour carry the
    label, the off-centre blob is a rotation-sensitive cue), so labels mean the
    same thing everywhere while appearance shifts from domain to domain.
    """
    if num_domains < 2:
        raise ValueError("need at least two domains (sources plus a target)")
    if per_domain < num_classes:
        raise ValueError(f"per_domain={per_domain} is smaller than the class count {num_classes}")
    shape = tuple(int(s) for s in image_shape)
    if shape[1] != shape[2]:
        raise ValueError("images must be square so rotations keep their shape")
    protos = _class_prototypes(rng, num_classes, shape)
    base = int(rng.integers(0, 2 ** 62))

    out = []
    for d in range(num_domains):
        drng = make_rng([base, d])
        rotation, gain, noise = domain_style(d, shape[0])
        labels = drng.permutation(np.arange(per_domain) % num_classes).astype(np.int64)
        x = np.empty((per_domain,) + shape)
        for j, label in enumerate(labels):
            img = _render(protos[label], shape, drng)
            img = np.rot90(img, k=rotation // 90, axes=(1, 2))
            img = img * np.asarray(gain)[:, None, None]
            x[j] = img + drng.normal(0.0, noise, size=shape)
        out.append(DomainDataset(d, x, labels, rotation, gain, noise))
    return out


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class PartitionSpec:
    lam: float
    ownership: Tuple[FrozenSet[int], ...]  # domains owned by each client
    domain_sizes: Tuple[int, ...]
    counts: np.ndarray  # (D, C) integers, rows sum to domain_sizes

    @property
    def num_domains(self) -> int:
        return len(self.domain_sizes)

    @property
    def num_clients(self) -> int:
        return len(self.ownership)

    def domains_per_client(self) -> np.ndarray:
        return (self.counts > 0).sum(axis=0)


def default_ownership(num_domains: int, stations: int, clients_per_station: int) -> List[FrozenSet[int]]:
    """Deal domains round-robin to stations, then round-robin to each station's clients.

    Client ``e * clients_per_station + i`` is client ``i`` of station ``e``.
    Stations without a dealt domain (more stations than domains) wrap around.
    """
    station_domains = [[d for d in range(num_domains) if d % stations == e] or [e % num_domains]
                       for e in range(stations)]
    owners: List[FrozenSet[int]] = []
    for e in range(stations):
        doms = station_domains[e]
        for i in range(clients_per_station):
            if len(doms) <= clients_per_station:
                owners.append(frozenset({doms[i % len(doms)]}))
            else:
                owners.append(frozenset(doms[j] for j in range(i, len(doms), clients_per_station)))
    return owners


def _largest_remainder(values: np.ndarray, total: int) -> np.ndarray:
    floors = np.floor(values + 1e-9).astype(np.int64)
    floors = np.maximum(floors, 0)
    rem = values - floors
    deficit = total - int(floors.sum())
    if deficit < 0 or deficit > len(values):
        raise ArithmeticError("rounding deficit out of range")
    # largest remainder first, ties to the lowest client index
    order = sorted(range(len(values)), key=lambda i: (-rem[i], i))
    for i in order[:deficit]:
        floors[i] += 1
    return floors


def partition(lam: float, num_domains: int, num_clients: int,
              ownership: Sequence[Sequence[int]], domain_sizes: Sequence[int]) -> PartitionSpec:
    """Per-(domain, client) sample counts.

    The real-valued share of client ``c`` in domain ``d`` is
    ``lam * n_d / C + (1 - lam) * [d owned by c] * n_d / (#owners of d)``;
    shares are rounded per domain by largest remainder so each domain is fully
    assigned.
    """
    if not (0.0 <= lam <= 1.0) or math.isnan(lam):
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if len(ownership) != num_clients:
        raise ValueError("ownership needs one entry per client")
    if len(domain_sizes) != num_domains:
        raise ValueError("domain_sizes needs one entry per domain")
    owners = tuple(frozenset(int(d) for d in own) for own in ownership)
    for own in owners:
        bad = [d for d in own if not 0 <= d < num_domains]
        if bad:
            raise ValueError(f"ownership refers to unknown domains {bad}")
    counts = np.zeros((num_domains, num_clients), dtype=np.int64)
    for d in range(num_domains):
        holders = [c for c in range(num_clients) if d in owners[c]]
        if not holders:
            raise ValueError(f"domain {d} is not owned by any client")
        n_d = int(domain_sizes[d])
        share = np.full(num_clients, lam * n_d / num_clients)
        share[holders] += (1.0 - lam) * n_d / len(holders)
        counts[d] = _largest_remainder(share, n_d)
    return PartitionSpec(float(lam), owners, tuple(int(n) for n in domain_sizes), counts)


def materialize(spec: PartitionSpec, domains: Sequence[DomainDataset],
                rng: np.random.Generator) -> List[ClientData]:
    """Draw each client's samples without replacement, disjoint within every domain."""
    if len(domains) != spec.num_domains:
        raise ValueError(f"partition covers {spec.num_domains} domains, got {len(domains)}")
    pieces: Dict[int, List[Tuple[np.ndarray, np.ndarray, np.ndarray]]] = {c: [] for c in range(spec.num_clients)}
    for d, dom in enumerate(domains):
        need = int(spec.counts[d].sum())
        if need > len(dom):
            raise ValueError(f"domain {d} has {len(dom)} samples, partition needs {need}")
        order = rng.permutation(len(dom))
        start = 0
        for c in range(spec.num_clients):
            idx = order[start:start + spec.counts[d, c]]
            start += spec.counts[d, c]
            if len(idx):
                pieces[c].append((dom.x[idx], dom.y[idx], np.full(len(idx), d, dtype=np.int64)))
    out = []
    for c in range(spec.num_clients):
        if pieces[c]:
            xs, ys, ds = zip(*pieces[c])
            out.append(ClientData(c, np.concatenate(xs), np.concatenate(ys), np.concatenate(ds)))
        else:
            shape = domains[0].x.shape[1:]
            out.append(ClientData(c, np.zeros((0,) + shape), np.zeros(0, dtype=np.int64),
                                  np.zeros(0, dtype=np.int64)))
    return out


def save_client_data(data: ClientData, path) -> None:
    container.write(path, container.DATASET_MAGIC, {"kind": "client-data", "client_id": data.client_id},
                    [("x", data.x), ("y", data.y), ("domains", data.domains)])


def load_client_data(path) -> ClientData:
    manifest, arrays = container.read(path, container.DATASET_MAGIC)
    return ClientData(int(manifest["client_id"]), arrays["x"], arrays["y"], arrays["domains"])


def split_sources_and_target(domains: Sequence[DomainDataset],
                             target_id: Optional[int] = None) -> Tuple[List[DomainDataset], DomainDataset]:
    """Hold one domain out (the last by default) as the unseen target."""
    tid = len(domains) - 1 if target_id is None else target_id
    return [d for d in domains if d.domain_id != tid], domains[tid]

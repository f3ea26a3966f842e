"""Station- and server-side aggregation.

Station side: sample-weighted FedAvg of client models, unweighted mean of the
client Grams, diagonal shrinkage. Server side: either plain gamma-weighted
averaging of station models, or filter alignment + weighted conv mean +
Gram-weighted closed-form merge of every linear weight matrix.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import fot
from .client import ClientUpdate, GramStat
from .linalg import solve_spd, symmetry_residual
from .model import ArchitectureMismatchError, Conv, Linear, ModelSpec, ModelWeights, \
    require_same_architecture

DEFAULT_ALPHA = 0.75


@dataclass
class StationPackage:
    """What a station sends upward: its model, shrunk Grams per linear layer and its active-client count."""

    station_id: int
    model: ModelWeights
    grams: Dict[int, GramStat]
    active_clients: int


@dataclass
class LayerMerge:
    layer_id: int
    method: str
    jitter: float = 0.0


@dataclass
class MergeReport:
    mode: str
    layers: List[LayerMerge] = field(default_factory=list)
    breadth_pre: float = 0.0
    breadth_post: float = 0.0
    align_seconds: float = 0.0
    merge_seconds: float = 0.0
    alignments: Dict[int, List[fot.LayerAlignment]] = field(default_factory=dict)

    @property
    def jitter_count(self) -> int:
        return sum(1 for l in self.layers if l.jitter > 0)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "layers": [{"layer": l.layer_id, "method": l.method, "jitter": l.jitter} for l in self.layers],
            "breadth_pre": self.breadth_pre,
            "breadth_post": self.breadth_post,
            "align_seconds": self.align_seconds,
            "merge_seconds": self.merge_seconds,
            "jitter_count": self.jitter_count,
            "alignments": {
                str(st): [{"layer": a.layer_id, "perm": a.mapping.perm.tolist(), "pre_cost": a.pre_cost,
                           "post_cost": a.post_cost, "sinkhorn_residual": a.sinkhorn_residual,
                           "iterations": a.iterations, "resized_from": a.resized_from} for a in rows]
                for st, rows in self.alignments.items()
            },
        }


# ---------------------------------------------------------------------------
# generic averaging


def weighted_average(models: Sequence[ModelWeights], weights: Sequence[float]) -> ModelWeights:
    """Parameter-wise weighted mean, summed in the given order."""
    if not models:
        raise ValueError("nothing to average")
    for m in models[1:]:
        require_same_architecture(models[0], m)
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(models) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("averaging weights must be non-negative with a positive sum")
    return ModelWeights(models[0].spec, {name: _mean_about_first([m.params[name] for m in models], w)
                                         for name in models[0].names()})


def _mean_about_first(arrays: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Weighted mean written as ``a_0 + sum_i (w_i / W) (a_i - a_0)``.

    Same value as the usual form, but a single input, identical inputs or
    weight on one input alone come back bit-exact.
    """
    first = np.asarray(arrays[0], dtype=np.float64)
    acc = first.copy()
    share = weights / weights.sum()
    for a, s in zip(arrays[1:], share[1:]):
        acc = acc + s * (a - first)
    return acc


def station_aggregate(updates: Sequence[ClientUpdate]) -> ModelWeights:
    """Sample-count weighted FedAvg over client updates, reduced in client-id order."""
    if not updates:
        raise ValueError("station has no client updates")
    ordered = sorted(updates, key=lambda u: u.client_id)
    return weighted_average([u.weights for u in ordered], [u.num_samples for u in ordered])


def station_gram(grams: Sequence[np.ndarray]) -> np.ndarray:
    """Unweighted mean of the clients' Grams for one layer."""
    if not grams:
        raise ValueError("no grams to average")
    shape = grams[0].shape
    acc = np.zeros(shape)
    for g in grams:
        if g.shape != shape:
            raise ValueError(f"gram dimension mismatch {g.shape} vs {shape}")
        acc = acc + g
    return acc / len(grams)


def shrink(g: np.ndarray, alpha: float) -> np.ndarray:
    """``alpha * G + (1 - alpha) * diag(G)``: off-diagonals scaled, diagonal kept."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    out = alpha * g
    np.fill_diagonal(out, np.diag(g))
    return out


def build_station_package(station_id: int, updates: Sequence[ClientUpdate],
                          alpha: float = DEFAULT_ALPHA) -> StationPackage:
    ordered = sorted(updates, key=lambda u: u.client_id)
    model = station_aggregate(ordered)
    grams: Dict[int, GramStat] = {}
    for lid in model.spec.linear_layers():
        per_client = [g for u in ordered for g in u.grams if g.layer_id == lid]
        if not per_client:
            continue
        mean = station_gram([g.g for g in per_client])
        ref = per_client[0]
        grams[lid] = GramStat(lid, shrink(mean, alpha), sum(g.batch_size for g in per_client),
                              clipped=ref.clipped, clip_bound=ref.clip_bound, dp=ref.dp,
                              shrunk=True, alpha=alpha)
    return StationPackage(station_id, model, grams, len(ordered))


# ---------------------------------------------------------------------------
# server-side merging


def conv_merge(banks: Sequence[np.ndarray], gammas: Sequence[float]) -> np.ndarray:
    """Per-filter weighted arithmetic mean of aligned banks."""
    if not banks:
        raise ValueError("no banks to merge")
    g = np.asarray(gammas, dtype=np.float64)
    if len(g) != len(banks):
        raise ValueError("one gamma per bank required")
    if g.sum() <= 0:
        raise ValueError("total merge weight must be positive")
    if np.any(g < 0):
        raise ValueError("merge weights must be non-negative")
    shape = banks[0].shape
    for b in banks:
        if b.shape != shape:
            raise ValueError(f"bank shape {b.shape} differs from {shape}")
    return _mean_about_first(banks, g)


@dataclass(frozen=True)
class RegMeanResult:
    weight: np.ndarray
    jitter: float
    method: str


def regmean_solve(grams: Sequence[np.ndarray], weights: Sequence[np.ndarray],
                  anchor: Optional[np.ndarray] = None) -> RegMeanResult:
    """Minimiser of ``sum_e ||X_e W - X_e W_e||_F^2`` given only ``G_e = X_e^T X_e``.

    Solves ``(sum G_e) W = sum G_e W_e``, written around ``anchor`` (the plain
    mean of the ``W_e`` by default) as
    ``(sum G_e) (W - anchor) = sum G_e (W_e - anchor)``. For an invertible Gram
    sum both forms have the same solution. When the sum is singular (inputs
    that were zero on every captured batch) the ridge jitter then resolves the
    free directions to ``anchor`` instead of to zero.
    """
    if not grams or len(grams) != len(weights):
        raise ValueError("need one Gram per weight matrix")
    d = grams[0].shape[0]
    for g, w in zip(grams, weights):
        if g.shape != (d, d) or w.shape[0] != d or w.shape != weights[0].shape:
            raise ValueError(f"inconsistent shapes: gram {g.shape}, weight {w.shape}")
        if symmetry_residual(g) > 1e-9 * max(1.0, float(np.abs(g).max())):
            raise ValueError("gram is not symmetric")
    if anchor is None:
        anchor = _mean_about_first(weights, np.ones(len(weights)))
    elif anchor.shape != weights[0].shape:
        raise ValueError(f"anchor shape {anchor.shape} differs from {weights[0].shape}")
    lhs = np.zeros((d, d))
    rhs = np.zeros(weights[0].shape)
    for g, w in zip(grams, weights):
        lhs = lhs + g
        rhs = rhs + g @ (w - anchor)
    res = solve_spd(lhs, rhs)
    return RegMeanResult(anchor + res.x, res.jitter, res.method)


def regmean_objective(w: np.ndarray, grams: Sequence[np.ndarray], weights: Sequence[np.ndarray]) -> float:
    """``sum_e tr((W - W_e)^T G_e (W - W_e))``."""
    total = 0.0
    for g, we in zip(grams, weights):
        diff = w - we
        total += float(np.sum(diff * (g @ diff)))
    return total


def assemble_global(spec: ModelSpec, conv: Dict[int, np.ndarray], linear: Dict[int, np.ndarray],
                    biases: Dict[int, np.ndarray]) -> ModelWeights:
    """Build a model from per-layer merge results; every parametric layer must appear exactly once."""
    want_conv = set(spec.conv_layers())
    want_lin = set(spec.linear_layers())
    if set(conv) != want_conv or set(linear) != want_lin or set(biases) != want_lin:
        raise ArchitectureMismatchError(
            f"layer coverage mismatch: conv {sorted(conv)} vs {sorted(want_conv)}, "
            f"linear {sorted(linear)}/{sorted(biases)} vs {sorted(want_lin)}")
    params = {f"{i}.weight": conv[i] for i in want_conv}
    for i in want_lin:
        params[f"{i}.weight"] = linear[i]
        params[f"{i}.bias"] = biases[i]
    return ModelWeights(spec, params)


def station_gammas(packages: Sequence[StationPackage], policy: str = "active_clients") -> List[float]:
    if policy == "active_clients":
        return [float(p.active_clients) for p in packages]
    if policy == "uniform":
        return [1.0] * len(packages)
    raise ValueError(f"unknown gamma policy {policy!r}")


def _mean_breadth(models: Sequence[ModelWeights]) -> float:
    layers = models[0].spec.conv_layers()
    return float(np.mean([fot.breadth_proxy([m.params[f"{l}.weight"] for m in models]) for l in layers]))


def merge_average(packages: Sequence[StationPackage], gamma: str = "active_clients",
                  diagnostics: bool = True) -> tuple:
    """Plain gamma-weighted averaging of the station models (the ``avg`` baseline)."""
    pkgs = sorted(packages, key=lambda p: p.station_id)
    start = time.perf_counter()
    merged = weighted_average([p.model for p in pkgs], station_gammas(pkgs, gamma))
    report = MergeReport("avg", merge_seconds=time.perf_counter() - start)
    report.layers = [LayerMerge(i, "weighted-mean") for i in merged.spec.conv_layers() + merged.spec.linear_layers()]
    if diagnostics and len(pkgs) > 1:
        report.breadth_pre = report.breadth_post = _mean_breadth([p.model for p in pkgs])
    return merged, report


def merge_hfedatm(packages: Sequence[StationPackage], reg: float = fot.DEFAULT_REG,
                  iters: int = fot.DEFAULT_ITERS, gamma: str = "active_clients", reference: int = 0,
                  diagnostics: bool = True) -> tuple:
    """Align every station to the reference station, then merge conv and linear layers.

    ``reference`` indexes the packages sorted by station id (0 = lowest id).
    Returns ``(merged weights, MergeReport)``.
    """
    pkgs = sorted(packages, key=lambda p: p.station_id)
    ref = pkgs[reference]
    report = MergeReport("hfedatm")

    start = time.perf_counter()
    aligned: List[ModelWeights] = []
    grams: List[Dict[int, np.ndarray]] = []
    for p in pkgs:
        if p is ref:
            aligned.append(p.model)
            grams.append({l: g.g for l, g in p.grams.items()})
            continue
        al = fot.align_station(ref.model, p.model, reg, iters)
        aligned.append(al.weights)
        grams.append({l: fot.permute_gram(g.g, al.linear_input_perms[l]) for l, g in p.grams.items()})
        report.alignments[p.station_id] = al.layers
    report.align_seconds = time.perf_counter() - start

    start = time.perf_counter()
    spec = ref.model.spec
    gammas = station_gammas(pkgs, gamma)
    conv = {l: conv_merge([m.params[f"{l}.weight"] for m in aligned], gammas) for l in spec.conv_layers()}
    linear, biases = {}, {}
    for l in spec.linear_layers():
        ws = [m.params[f"{l}.weight"] for m in aligned]
        gs = [g.get(l) for g in grams]
        if any(g is None for g in gs):
            raise ValueError(f"station package without a Gram for linear layer {l}")
        res = regmean_solve(gs, ws, anchor=conv_merge(ws, gammas))
        linear[l] = res.weight
        biases[l] = conv_merge([m.params[f"{l}.bias"] for m in aligned], gammas)
        report.layers.append(LayerMerge(l, "regmean", res.jitter))
    report.layers = [LayerMerge(l, "aligned-weighted-mean") for l in spec.conv_layers()] + report.layers
    merged = assemble_global(spec, conv, linear, biases)
    report.merge_seconds = time.perf_counter() - start

    if diagnostics and len(pkgs) > 1:
        raw = [p.model if p.model.spec == spec else _resized(p.model, spec) for p in pkgs]
        report.breadth_pre = _mean_breadth(raw)
        report.breadth_post = _mean_breadth(aligned)
    return merged, report


def _resized(model: ModelWeights, spec: ModelSpec) -> ModelWeights:
    params = dict(model.params)
    for l in spec.conv_layers():
        size = spec.layers[l].kernel
        params[f"{l}.weight"] = fot.resize_bank(model.params[f"{l}.weight"], size)
    return ModelWeights(spec, params)

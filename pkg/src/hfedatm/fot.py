"""Filter-wise optimal-transport alignment of convolutional filter banks.

For every conv layer the target model's filters are flattened, L2-normalised
and matched to the reference model's filters through an entropic OT plan
(log-domain Sinkhorn), which is then rounded to a hard permutation. The
permutation is applied to the layer's filters and, so that the network still
computes the same function, to the input channels of the layer that consumes
them (next conv, or block-wise to the rows of the linear layer after flatten).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .linalg import bilinear_resize
from .model import Conv, Flatten, Linear, ModelWeights, require_same_architecture

logger = logging.getLogger(__name__)

DEFAULT_REG = 0.05
DEFAULT_ITERS = 25


class SinkhornError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NormalizedBank:
    vectors: np.ndarray  # (k, c_in * n * n), unit rows
    degenerate: np.ndarray  # bool (k,), True where the filter was all zeros


@dataclass(frozen=True)
class TransportPlan:
    plan: np.ndarray  # rows and columns each sum to 1
    reg: float
    iterations: int
    residual: float


@dataclass(frozen=True)
class PermutationMap:
    """``perm[a]`` is the target filter placed at reference index ``a``."""

    perm: np.ndarray
    hardness_gap: float = 0.0  # 1 - mean plan mass on the chosen entries

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self.perm))
        return inv

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(len(self.perm))))


@dataclass
class LayerAlignment:
    layer_id: int
    mapping: PermutationMap
    sinkhorn_residual: float
    iterations: int
    pre_cost: float  # index-wise (identity) matching cost
    post_cost: float  # cost of the applied permutation
    resized_from: Optional[int] = None


@dataclass
class StationAlignment:
    weights: ModelWeights
    layers: List[LayerAlignment] = field(default_factory=list)
    # row re-indexing applied to each linear layer's input (layer id -> index array)
    linear_input_perms: Dict[int, np.ndarray] = field(default_factory=dict)


def normalize_filters(bank: np.ndarray) -> NormalizedBank:
    bank = np.asarray(bank, dtype=np.float64)
    if bank.ndim != 4 or bank.shape[0] == 0:
        raise ValueError(f"expected a non-empty (k, c_in, n, n) bank, got {bank.shape}")
    flat = bank.reshape(bank.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    degenerate = norms == 0.0
    out = np.zeros_like(flat)
    ok = ~degenerate
    out[ok] = flat[ok] / norms[ok, None]
    if degenerate.any():
        logger.warning("%d all-zero filters replaced by e1 during normalisation", int(degenerate.sum()))
        out[degenerate, 0] = 1.0
    return NormalizedBank(out, degenerate)


def cost_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances ``D[i, j] = ||a[i] - b[j]||^2`` between row vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"banks must have equal filter counts and lengths, got {a.shape} vs {b.shape}")
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def sinkhorn(cost: np.ndarray, reg: float = DEFAULT_REG, max_iter: int = DEFAULT_ITERS,
             tol: float = 1e-9, newton: bool = False) -> TransportPlan:
    """Entropic OT between uniform marginals, iterated in the log domain.

    Works with probability marginals ``1/k`` internally and returns the plan
    scaled by ``k`` so that rows and columns sum to one. Stops once the largest
    marginal violation is at most ``tol`` or after ``max_iter`` sweeps.

    At small ``reg`` the scaling sweeps converge very slowly when the plan is
    close to a permutation. With ``newton`` the sweeps are followed, if still
    above ``tol``, by Newton steps on the dual potentials, which reach the
    same fixed point quadratically.
    """
    if not reg > 0:
        raise ValueError("regulariser must be positive")
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"square cost matrix required, got {cost.shape}")
    k = cost.shape[0]
    log_kernel = -cost / reg
    log_marg = -np.log(k)
    f = np.zeros(k)
    g = np.zeros(k)
    residual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = log_marg - logsumexp(log_kernel + g[None, :], axis=1)
        g = log_marg - logsumexp(log_kernel + f[:, None], axis=0)
        residual = _marginal_residual(np.exp(log_kernel + f[:, None] + g[None, :]) * k)
        if residual <= tol:
            break
    if newton and residual > tol:
        f, g, steps = _newton_refine(log_kernel, f, g, tol)
        it += steps
    plan = np.exp(log_kernel + f[:, None] + g[None, :]) * k
    if not np.all(np.isfinite(plan)):
        raise SinkhornError(f"non-finite transport plan (reg={reg} too small for this cost range?)")
    return TransportPlan(plan, float(reg), it, _marginal_residual(plan))


def _marginal_residual(plan: np.ndarray) -> float:
    return float(max(np.abs(plan.sum(1) - 1).max(), np.abs(plan.sum(0) - 1).max()))


def _newton_refine(log_kernel: np.ndarray, f: np.ndarray, g: np.ndarray, tol: float,
                   max_steps: int = 60) -> Tuple[np.ndarray, np.ndarray, int]:
    """Damped Newton iterations on the marginal equations ``P 1 = 1/k``, ``P^T 1 = 1/k``."""
    k = len(f)

    def parts(f, g):
        p = np.exp(log_kernel + f[:, None] + g[None, :])
        r = np.concatenate([p.sum(1), p.sum(0)]) - 1.0 / k
        return p, r

    p, r = parts(f, g)
    steps = 0
    for steps in range(1, max_steps + 1):
        if np.abs(r).max() * k <= tol:
            return f, g, steps - 1
        jac = np.block([[np.diag(p.sum(1)), p], [p.T, np.diag(p.sum(0))]])
        # the potentials are only defined up to f + t, g - t, so the system is rank deficient
        delta = np.linalg.lstsq(jac, -r, rcond=None)[0]
        t, base = 1.0, np.linalg.norm(r)
        while True:
            nf, ng = f + t * delta[:k], g + t * delta[k:]
            np_, nr = parts(nf, ng)
            if np.all(np.isfinite(nr)) and np.linalg.norm(nr) < base or t < 1e-6:
                break
            t *= 0.5
        f, g, p, r = nf, ng, np_, nr
    return f, g, steps


def round_to_permutation(plan: TransportPlan) -> PermutationMap:
    """Exact linear assignment maximising the plan mass (ties resolve to the lowest indices)."""
    rows, cols = linear_sum_assignment(-plan.plan)
    perm = cols[np.argsort(rows)].astype(np.int64)
    k = len(perm)
    gap = 1.0 - float(plan.plan[np.arange(k), perm].sum()) / k
    return PermutationMap(perm, gap)


def assignment_cost(cost: np.ndarray, perm: np.ndarray) -> float:
    return float(cost[np.arange(len(perm)), perm].sum())


def optimal_assignment_cost(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def resize_bank(bank: np.ndarray, size: int) -> np.ndarray:
    k, c, n, _ = bank.shape
    if n == size:
        return bank.copy()
    out = np.empty((k, c, size, size))
    for a in range(k):
        for ch in range(c):
            out[a, ch] = bilinear_resize(bank[a, ch], size)
    return out


def _consumer(weights: ModelWeights, conv_id: int) -> Tuple[Optional[int], int]:
    """(layer id of the next parametric layer, spatial positions per channel at a flatten boundary)."""
    spec = weights.spec
    shapes = spec.shapes()
    positions = 1
    for idx in range(conv_id + 1, len(spec.layers)):
        layer = spec.layers[idx]
        if isinstance(layer, Flatten):
            c, h, w = shapes[idx]
            positions = h * w
        elif isinstance(layer, (Conv, Linear)):
            return idx, positions
    return None, positions


def _block_index(perm: np.ndarray, positions: int) -> np.ndarray:
    return (perm[:, None] * positions + np.arange(positions)[None, :]).ravel()


def align_station(reference: ModelWeights, target: ModelWeights, reg: float = DEFAULT_REG,
                  max_iter: int = DEFAULT_ITERS, tol: float = 1e-9) -> StationAlignment:
    """Permute ``target``'s conv filters (and their consumers) into ``reference``'s order.

    Conv kernels of a different spatial size are first resized to the reference
    size. Linear layers are only re-indexed along their input axis.
    A rounded permutation that would cost more than keeping the current order
    is discarded in favour of the identity.
    """
    require_same_architecture(reference, target, structural=True)
    params = {k: v.copy() for k, v in target.params.items()}
    spec = target.spec
    result_layers: List[LayerAlignment] = []
    linear_perms: Dict[int, np.ndarray] = {}

    for lid in reference.spec.conv_layers():
        name = f"{lid}.weight"
        ref_bank = reference.params[name]
        bank = params[name]
        resized_from = None
        if bank.shape[-1] != ref_bank.shape[-1]:
            resized_from = bank.shape[-1]
            bank = resize_bank(bank, ref_bank.shape[-1])
            spec = spec.with_kernel(lid, ref_bank.shape[-1])
        cost = cost_matrix(normalize_filters(ref_bank).vectors, normalize_filters(bank).vectors)
        plan = sinkhorn(cost, reg, max_iter, tol)
        mapping = round_to_permutation(plan)
        k = len(mapping.perm)
        pre = assignment_cost(cost, np.arange(k))
        post = assignment_cost(cost, mapping.perm)
        if post > pre:
            mapping = PermutationMap(np.arange(k), mapping.hardness_gap)
            post = pre
        params[name] = bank[mapping.perm]

        consumer, positions = _consumer(target, lid)
        if consumer is not None and not mapping.is_identity():
            cname = f"{consumer}.weight"
            if isinstance(spec.layers[consumer], Conv):
                params[cname] = params[cname][:, mapping.perm]
            else:
                idx = _block_index(mapping.perm, positions)
                params[cname] = params[cname][idx]
                prev = linear_perms.get(consumer, np.arange(params[cname].shape[0]))
                linear_perms[consumer] = prev[idx]
        result_layers.append(LayerAlignment(lid, mapping, plan.residual, plan.iterations, pre, post, resized_from))

    for lid in spec.linear_layers():
        linear_perms.setdefault(lid, np.arange(spec.layers[lid].d_in))
    return StationAlignment(ModelWeights(spec, params), result_layers, linear_perms)


def permute_gram(g: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Re-index a Gram consistently with a row re-indexing of its linear layer."""
    return g[np.ix_(index, index)]


def breadth_proxy(banks: Sequence[np.ndarray]) -> float:
    """Max over station pairs of the index-wise mean squared distance between normalised filters."""
    if len(banks) < 2:
        raise ValueError("breadth needs at least two banks")
    size = banks[0].shape[-1]
    vecs = [normalize_filters(resize_bank(b, size)).vectors for b in banks]
    worst = 0.0
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            worst = max(worst, float(((vecs[i] - vecs[j]) ** 2).sum(1).mean()))
    return worst

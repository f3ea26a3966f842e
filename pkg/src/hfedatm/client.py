"""Client-side local training and Gram statistics."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import container
from .data import ClientData
from .linalg import gaussian_sample, spectral_norm
from .model import DivergenceError, ModelWeights, forward, sgd_step, weights_from_container, \
    weights_manifest, weights_to_arrays


@dataclass(frozen=True)
class GramStat:
    layer_id: int
    g: np.ndarray
    batch_size: int
    clipped: bool = False
    clip_bound: Optional[float] = None
    dp: Optional[Tuple[float, float]] = None  # (epsilon, delta)
    shrunk: bool = False
    alpha: Optional[float] = None

    @property
    def dim(self) -> int:
        return self.g.shape[0]

    def flags(self) -> dict:
        return {
            "clipped": self.clipped,
            "clip_bound": self.clip_bound,
            "dp": list(self.dp) if self.dp is not None else None,
            "shrunk": self.shrunk,
            "alpha": self.alpha,
        }


@dataclass(frozen=True)
class DpBudget:
    epsilon: float = math.inf
    delta: float = 1e-5
    clip: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive (inf for no privacy)")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.clip > 0:
            raise ValueError("clip bound must be positive")

    @property
    def private(self) -> bool:
        return math.isfinite(self.epsilon)

    def sigma(self) -> float:
        """Gaussian-mechanism noise scale ``C * sqrt(2 ln(1.25 / delta)) / epsilon``."""
        if not self.private:
            return 0.0
        return self.clip * math.sqrt(2.0 * math.log(1.25 / self.delta)) / self.epsilon


@dataclass
class ClientUpdate:
    station_id: int
    client_id: int
    weights: ModelWeights
    grams: List[GramStat]
    num_samples: int
    seconds: float = 0.0
    loss: float = float("nan")
    diverged: bool = False


# ---------------------------------------------------------------------------
# local algorithms


class LocalAlgorithm:
    """One local optimisation rule. Subclass and register to plug in another method."""

    name = "base"

    def step(self, weights: ModelWeights, xb: np.ndarray, yb: np.ndarray, lr: float,
             anchor: ModelWeights) -> Tuple[ModelWeights, float]:
        raise NotImplementedError


class FedAvgLocal(LocalAlgorithm):
    name = "fedavg"

    def step(self, weights, xb, yb, lr, anchor):
        return sgd_step(weights, xb, yb, lr)


@dataclass
class FedProxLocal(LocalAlgorithm):
    mu: float = 0.01
    name = "fedprox"

    def step(self, weights, xb, yb, lr, anchor):
        return sgd_step(weights, xb, yb, lr, prox=(self.mu, anchor))


LOCAL_ALGORITHMS: Dict[str, Callable[..., LocalAlgorithm]] = {
    "fedavg": FedAvgLocal,
    "fedprox": FedProxLocal,
}


def make_algorithm(name: str, **kwargs) -> LocalAlgorithm:
    try:
        factory = LOCAL_ALGORITHMS[name]
    except KeyError:
        raise ValueError(f"unknown local algorithm {name!r}; known: {sorted(LOCAL_ALGORITHMS)}") from None
    return factory(**kwargs) if name != "fedavg" else factory()


# ---------------------------------------------------------------------------
# Gram statistics


def gram_from_activations(layer_id: int, x: np.ndarray) -> GramStat:
    """``X^T X`` for activations ``x`` with one row per sample."""
    x = np.asarray(x, dtype=np.float64)
    g = x.T @ x
    return GramStat(layer_id, 0.5 * (g + g.T), batch_size=x.shape[0])


def capture_grams(weights: ModelWeights, batch: np.ndarray) -> List[GramStat]:
    _, taps = forward(weights, batch, taps=weights.spec.linear_layers())
    return [gram_from_activations(t.layer_id, t.x) for t in taps]


def clip_gram(g: GramStat, bound: float) -> GramStat:
    """Rescale so the spectral norm is at most ``bound`` (eigenvectors unchanged)."""
    if not bound > 0:
        raise ValueError("clip bound must be positive")
    norm = spectral_norm(g.g)
    mat = g.g * (bound / norm) if norm > bound else g.g.copy()
    return replace(g, g=0.5 * (mat + mat.T), clipped=True, clip_bound=float(bound))


class PrivacyPreconditionError(ValueError):
    """Gram was not clipped at (or below) the budget's bound before noising."""


def dp_noise_gram(g: GramStat, budget: DpBudget, rng: np.random.Generator) -> GramStat:
    """Add mirrored upper-triangular Gaussian noise; ``epsilon = inf`` leaves ``g`` untouched."""
    if not budget.private:
        return replace(g, dp=(math.inf, budget.delta))
    if not g.clipped or g.clip_bound is None or g.clip_bound > budget.clip * (1 + 1e-12):
        raise PrivacyPreconditionError("Gram must be clipped at the budget bound before noising")
    noise = np.triu(gaussian_sample(rng, g.dim, g.dim, budget.sigma()))
    noise = noise + np.triu(noise, 1).T
    return replace(g, g=g.g + noise, dp=(budget.epsilon, budget.delta))


def privatize(grams: List[GramStat], budget: Optional[DpBudget], rng: np.random.Generator) -> List[GramStat]:
    """Client-side upload preparation: clip when a budget is set, then noise when it is private."""
    if budget is None:
        return grams
    return [dp_noise_gram(clip_gram(g, budget.clip), budget, rng) for g in grams]


# ---------------------------------------------------------------------------
# training


def train_local(weights_in: ModelWeights, data: ClientData, algo: LocalAlgorithm, epochs: int,
                batch_size: int, lr: float, rng: np.random.Generator, capture: bool = True,
                station_id: int = 0) -> ClientUpdate:
    """Run ``epochs`` shuffled passes of minibatch SGD starting from ``weights_in``.

    With ``capture`` the trained model is run once more on the first
    ``min(batch_size, n)`` samples of the final epoch's order and the inputs of
    every linear layer are turned into Gram matrices.
    A non-finite loss stops training and returns an update with ``diverged``.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(data) == 0:
        raise ValueError(f"client {data.client_id} has no data")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    start = time.perf_counter()
    w = weights_in
    n = len(data)
    order = np.arange(n)
    losses = []
    try:
        for _ in range(epochs):
            order = rng.permutation(n)
            for s in range(0, n, batch_size):
                idx = order[s:s + batch_size]
                w, loss = algo.step(w, data.x[idx], data.y[idx], lr, weights_in)
                losses.append(loss)
    except DivergenceError:
        return ClientUpdate(station_id, data.client_id, w, [], n, time.perf_counter() - start,
                            float("nan"), diverged=True)
    grams = capture_grams(w, data.x[order[:min(batch_size, n)]]) if capture else []
    return ClientUpdate(station_id, data.client_id, w, grams, n, time.perf_counter() - start,
                        float(np.mean(losses)))


# ---------------------------------------------------------------------------
# files


def _gram_records(grams: List[GramStat]):
    records = [dict(layer_id=g.layer_id, dim=g.dim, batch_size=g.batch_size, **g.flags()) for g in grams]
    return records, [(f"gram.{g.layer_id}", g.g) for g in grams]


def _grams_from(records, arrays) -> List[GramStat]:
    out = []
    for r in records:
        dp = tuple(r["dp"]) if r.get("dp") is not None else None
        out.append(GramStat(int(r["layer_id"]), arrays[f"gram.{r['layer_id']}"], int(r["batch_size"]),
                            bool(r["clipped"]), r["clip_bound"], dp, bool(r["shrunk"]), r["alpha"]))
    return out


def save_grams(grams: List[GramStat], path) -> None:
    records, arrays = _gram_records(grams)
    container.write(path, container.GRAM_MAGIC, {"kind": "grams", "records": records}, arrays)


def load_grams(path) -> List[GramStat]:
    manifest, arrays = container.read(path, container.GRAM_MAGIC)
    try:
        return _grams_from(manifest["records"], arrays)
    except (KeyError, TypeError, ValueError) as exc:
        raise container.ContainerFormatError(f"corrupt gram record: {exc}") from exc


def save_update(update: ClientUpdate, path) -> None:
    records, garrays = _gram_records(update.grams)
    manifest = dict(weights_manifest(update.weights), kind="client-update", station_id=update.station_id,
                    client_id=update.client_id, num_samples=update.num_samples, records=records)
    container.write(path, container.UPDATE_MAGIC, manifest, weights_to_arrays(update.weights) + garrays)


def load_update(path) -> ClientUpdate:
    manifest, arrays = container.read(path, container.UPDATE_MAGIC)
    weights = weights_from_container(manifest, arrays)
    return ClientUpdate(int(manifest["station_id"]), int(manifest["client_id"]), weights,
                        _grams_from(manifest["records"], arrays), int(manifest["num_samples"]))


# ---------------------------------------------------------------------------
# Gram ambiguity


def random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the sign fix)."""
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)[None, :]


def ambiguity_residual(x: np.ndarray, q: np.ndarray) -> float:
    """``||G(X) - G(QX)||_F`` with ``Q`` mixing the sample rows of ``X``.

    Any orthogonal ``Q`` gives the same Gram, so the Gram alone cannot tell
    ``X`` apart from ``QX``.
    """
    x = np.asarray(x, dtype=np.float64)
    if q.shape != (x.shape[0], x.shape[0]):
        raise ValueError(f"Q must be {x.shape[0]}x{x.shape[0]} to act on the sample axis")
    qx = q @ x
    return float(np.linalg.norm(x.T @ x - qx.T @ qx))


def ambiguity_trials(trials: int, seed: int, max_samples: int = 32, max_dim: int = 16) -> List[float]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        m = int(rng.integers(2, max_samples + 1))
        d = int(rng.integers(1, max_dim + 1))
        x = rng.normal(size=(m, d))
        out.append(ambiguity_residual(x, random_orthogonal(rng, m)))
    return out

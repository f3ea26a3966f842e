"""Micro CNN with hand-written forward and backward passes.

Layers: ``conv`` (no bias, stride 1, "same" zero padding, odd kernel), ``relu``,
``avgpool`` (non-overlapping, floor), ``flatten`` and ``linear``. A linear layer
stores ``W`` with shape ``(d_in, d_out)`` and computes ``x @ W + b`` for a batch
``x`` of shape ``(m, d_in)``, i.e. ``W^T`` acts on a single input column.

Flatten uses C order over ``(channels, height, width)``, so input feature
``c * (h * w) + p`` of the first linear layer belongs to channel ``c``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container

# ---------------------------------------------------------------------------
# architecture description


@dataclass(frozen=True)
class Conv:
    out_channels: int
    in_channels: int
    kernel: int
    kind: str = field(default="conv", init=False)


@dataclass(frozen=True)
class AvgPool:
    size: int = 2
    kind: str = field(default="avgpool", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


@dataclass(frozen=True)
class Linear:
    d_in: int
    d_out: int
    kind: str = field(default="linear", init=False)


Layer = Union[Conv, AvgPool, ReLU, Flatten, Linear]
_LAYER_TYPES = {"conv": Conv, "avgpool": AvgPool, "relu": ReLU, "flatten": Flatten, "linear": Linear}


class ArchitectureMismatchError(ValueError):
    """Two models (or a model and a file) do not share an architecture."""


@dataclass(frozen=True)
class ModelSpec:
    layers: Tuple[Layer, ...]
    input_shape: Tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.shapes()  # validates composition
        if not self.conv_layers() or not self.linear_layers():
            raise ValueError("spec needs at least one conv and one linear layer")

    def shapes(self) -> List[Tuple[int, ...]]:
        """Per-sample activation shape entering each layer, plus the final output shape."""
        shape: Tuple[int, ...] = self.input_shape
        out = [shape]
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ValueError(f"layer {idx}: conv expects {layer.in_channels} channels, got {shape}")
                if layer.kernel < 1 or layer.kernel % 2 == 0:
                    raise ValueError(f"layer {idx}: kernel size must be odd, got {layer.kernel}")
                shape = (layer.out_channels, shape[1], shape[2])
            elif isinstance(layer, AvgPool):
                if len(shape) != 3 or shape[1] < layer.size or shape[2] < layer.size:
                    raise ValueError(f"layer {idx}: cannot pool shape {shape}")
                shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
            elif isinstance(layer, ReLU):
                pass
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Linear):
                if len(shape) != 1 or shape[0] != layer.d_in:
                    raise ValueError(f"layer {idx}: linear expects ({layer.d_in},), got {shape}")
                shape = (layer.d_out,)
            else:
                raise TypeError(f"unknown layer {layer!r}")
            out.append(shape)
        if out[-1] != (self.num_classes,):
            raise ValueError(f"network output {out[-1]} does not match {self.num_classes} classes")
        return out

    def conv_layers(self) -> List[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Conv)]

    def linear_layers(self) -> List[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Linear)]

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                out.append((f"{i}.weight", (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)))
            elif isinstance(layer, Linear):
                out.append((f"{i}.weight", (layer.d_in, layer.d_out)))
                out.append((f"{i}.bias", (layer.d_out,)))
        return out

    def manifest(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {k: v for k, v in layer.__dict__.items() if k != "kind"}
            d["kind"] = layer.kind
            layers.append(d)
        return {"layers": layers, "input_shape": list(self.input_shape), "num_classes": self.num_classes}

    @classmethod
    def from_manifest(cls, manifest: dict) -> "ModelSpec":
        layers = []
        for d in manifest["layers"]:
            d = dict(d)
            kind = d.pop("kind")
            layers.append(_LAYER_TYPES[kind](**d))
        return cls(tuple(layers), tuple(manifest["input_shape"]), int(manifest["num_classes"]))

    def fingerprint(self, structural: bool = False) -> str:
        """SHA-256 of the canonical manifest.

        With ``structural=True`` conv kernel sizes are left out, so models that
        differ only in spatial filter size compare equal (they can be aligned by
        resizing).
        """
        man = self.manifest()
        if structural:
            for d in man["layers"]:
                d.pop("kernel", None)
        text = json.dumps(man, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def with_kernel(self, layer_id: int, kernel: int) -> "ModelSpec":
        layers = list(self.layers)
        old = layers[layer_id]
        if not isinstance(old, Conv):
            raise ValueError(f"layer {layer_id} is not a conv layer")
        layers[layer_id] = Conv(old.out_channels, old.in_channels, kernel)
        return ModelSpec(tuple(layers), self.input_shape, self.num_classes)


def reduced_lenet(input_shape: Sequence[int] = (3, 12, 12), num_classes: int = 4,
                  conv1: int = 8, conv2: int = 16, hidden: int = 32, kernel: int = 3) -> ModelSpec:
    """conv -> relu -> pool -> conv -> relu -> pool -> flatten -> linear -> relu -> linear."""
    c, h, w = input_shape
    flat = conv2 * (h // 2 // 2) * (w // 2 // 2)
    return ModelSpec(
        (
            Conv(conv1, c, kernel), ReLU(), AvgPool(2),
            Conv(conv2, conv1, kernel), ReLU(), AvgPool(2),
            Flatten(), Linear(flat, hidden), ReLU(), Linear(hidden, num_classes),
        ),
        tuple(input_shape),
        num_classes,
    )


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ModelWeights:
    """Parameters of one model replica, keyed ``"<layer>.weight"`` / ``"<layer>.bias"``.

    Treated as an immutable value: operations return new instances.
    """

    spec: ModelSpec
    params: Dict[str, np.ndarray]

    def __post_init__(self):
        expected = dict(self.spec.param_shapes())
        if set(expected) != set(self.params):
            raise ArchitectureMismatchError(
                f"parameter names {sorted(self.params)} do not match spec {sorted(expected)}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise ArchitectureMismatchError(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def fingerprint(self) -> str:
        return self.spec.fingerprint()

    def names(self) -> List[str]:
        return [n for n, _ in self.spec.param_shapes()]

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.spec, {k: v.copy() for k, v in self.params.items()})

    def replace(self, **updates: np.ndarray) -> "ModelWeights":
        params = dict(self.params)
        params.update(updates)
        return ModelWeights(self.spec, params)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.names()])

    def distance(self, other: "ModelWeights") -> float:
        require_same_architecture(self, other)
        return float(np.linalg.norm(self.flat() - other.flat()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for n in self.names():
            h.update(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def allclose(self, other: "ModelWeights", atol: float) -> bool:
        return self.fingerprint == other.fingerprint and all(
            np.allclose(self.params[n], other.params[n], rtol=0.0, atol=atol) for n in self.names())


def require_same_architecture(a: ModelWeights, b: ModelWeights, structural: bool = False) -> None:
    if a.spec.fingerprint(structural) != b.spec.fingerprint(structural):
        raise ArchitectureMismatchError(
            f"fingerprint mismatch: {a.spec.fingerprint(structural)} vs {b.spec.fingerprint(structural)}")


def init_weights(spec: ModelSpec, rng: np.random.Generator) -> ModelWeights:
    """He-normal weights, zero biases."""
    params = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return ModelWeights(spec, params)


def zeros_like(spec: ModelSpec) -> ModelWeights:
    return ModelWeights(spec, {n: np.zeros(s) for n, s in spec.param_shapes()})


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ActivationTap:
    layer_id: int
    x: np.ndarray  # (m, d_in): one row per sample


def _conv_cols(x: np.ndarray, kernel: int) -> np.ndarray:
    pad = (kernel - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))  # (B, C, H, W, n, n)
    b, c, h, w = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * kernel * kernel)


def _conv_forward(x: np.ndarray, w: np.ndarray):
    b, _, h, wd = x.shape
    k, _, n, _ = w.shape
    cols = _conv_cols(x, n)
    out = cols @ w.reshape(k, -1).T
    return out.reshape(b, h, wd, k).transpose(0, 3, 1, 2), cols


def _conv_backward(dout: np.ndarray, cols: np.ndarray, x_shape, w: np.ndarray):
    b, c, h, wd = x_shape
    k, _, n, _ = w.shape
    pad = (n - 1) // 2
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, k)
    dw = (dflat.T @ cols).reshape(w.shape)
    dcols = (dflat @ w.reshape(k, -1)).reshape(b, h, wd, c, n, n)
    dxp = np.zeros((b, c, h + 2 * pad, wd + 2 * pad))
    for i in range(n):
        for j in range(n):
            dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, pad:pad + h, pad:pad + wd], dw


def _pool_forward(x: np.ndarray, s: int) -> np.ndarray:
    b, c, h, w = x.shape
    h2, w2 = h // s, w // s
    return x[:, :, :h2 * s, :w2 * s].reshape(b, c, h2, s, w2, s).mean(axis=(3, 5))


def _pool_backward(dout: np.ndarray, x_shape, s: int) -> np.ndarray:
    b, c, h, w = x_shape
    h2, w2 = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape)
    up = np.repeat(np.repeat(dout, s, axis=2), s, axis=3) / (s * s)
    dx[:, :, :h2 * s, :w2 * s] = up
    return dx


def _run(weights: ModelWeights, batch: np.ndarray, keep: bool):
    spec = weights.spec
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(f"batch shape {x.shape} does not match input shape {spec.input_shape}")
    cache = []
    for idx, layer in enumerate(spec.layers):
        inp = x
        if isinstance(layer, Conv):
            x, aux = _conv_forward(x, weights.params[f"{idx}.weight"])
        elif isinstance(layer, ReLU):
            x, aux = np.maximum(x, 0.0), None
        elif isinstance(layer, AvgPool):
            x, aux = _pool_forward(x, layer.size), None
        elif isinstance(layer, Flatten):
            x, aux = x.reshape(x.shape[0], -1), None
        else:
            x, aux = x @ weights.params[f"{idx}.weight"] + weights.params[f"{idx}.bias"], None
        if keep:
            cache.append((inp, aux))
        else:
            cache.append((inp, None) if isinstance(layer, Linear) else None)
    return x, cache


def forward(weights: ModelWeights, batch: np.ndarray,
            taps: Optional[Iterable[int]] = None) -> Tuple[np.ndarray, List[ActivationTap]]:
    """Logits for ``batch`` of shape ``(m, c, h, w)``; optionally capture linear-layer inputs."""
    logits, cache = _run(weights, batch, keep=False)
    taps_out = []
    for layer_id in sorted(set(taps or ())):
        if not isinstance(weights.spec.layers[layer_id], Linear):
            raise ValueError(f"layer {layer_id} is not a linear layer")
        taps_out.append(ActivationTap(layer_id, cache[layer_id][0].copy()))
    return logits, taps_out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


def _check_labels(spec: ModelSpec, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise ValueError(f"label out of range [0, {spec.num_classes})")
    return labels


Prox = Tuple[float, ModelWeights]


def loss_and_grads(weights: ModelWeights, batch: np.ndarray, labels: np.ndarray,
                   prox: Optional[Prox] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean cross-entropy (plus ``mu/2 * ||w - anchor||^2`` when ``prox`` is given) and its gradient."""
    spec = weights.spec
    labels = _check_labels(spec, labels)
    logits, cache = _run(weights, batch, keep=True)
    m = logits.shape[0]
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(m), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(m), labels] -= 1.0
    grad /= m

    grads: Dict[str, np.ndarray] = {}
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[idx]
        inp, aux = cache[idx]
        if isinstance(layer, Linear):
            w = weights.params[f"{idx}.weight"]
            grads[f"{idx}.weight"] = inp.T @ grad
            grads[f"{idx}.bias"] = grad.sum(axis=0)
            grad = grad @ w.T
        elif isinstance(layer, Conv):
            grad, dw = _conv_backward(grad, aux, inp.shape, weights.params[f"{idx}.weight"])
            grads[f"{idx}.weight"] = dw
        elif isinstance(layer, ReLU):
            grad = grad * (inp > 0)
        elif isinstance(layer, AvgPool):
            grad = _pool_backward(grad, inp.shape, layer.size)
        elif isinstance(layer, Flatten):
            grad = grad.reshape(inp.shape)

    if prox is not None:
        mu, anchor = prox
        require_same_architecture(weights, anchor)
        penalty = 0.0
        for name in weights.names():
            diff = weights.params[name] - anchor.params[name]
            penalty += float(np.sum(diff * diff))
            grads[name] = grads[name] + mu * diff
        loss += 0.5 * mu * penalty
    return loss, grads


class DivergenceError(FloatingPointError):
    """Loss became non-finite during training."""


def sgd_step(weights: ModelWeights, batch: np.ndarray, labels: np.ndarray, lr: float,
             prox: Optional[Prox] = None) -> Tuple[ModelWeights, float]:
    """One plain SGD step. Returns the updated weights and the pre-step loss."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    loss, grads = loss_and_grads(weights, batch, labels, prox)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    if lr == 0:
        return weights, loss
    return ModelWeights(weights.spec, {n: weights.params[n] - lr * grads[n] for n in weights.names()}), loss


def predict(weights: ModelWeights, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = [forward(weights, batch[i:i + chunk])[0].argmax(axis=1) for i in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


# ---------------------------------------------------------------------------
# checkpoints


def weights_to_arrays(weights: ModelWeights) -> List[Tuple[str, np.ndarray]]:
    return [(n, weights.params[n]) for n in weights.names()]


def weights_manifest(weights: ModelWeights) -> dict:
    return {"spec": weights.spec.manifest(), "fingerprint": weights.fingerprint}


def weights_from_container(manifest: dict, arrays: Dict[str, np.ndarray]) -> ModelWeights:
    try:
        spec = ModelSpec.from_manifest(manifest["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise container.ContainerFormatError(f"invalid spec manifest: {exc}") from exc
    if spec.fingerprint() != manifest.get("fingerprint"):
        raise ArchitectureMismatchError("stored fingerprint does not match stored spec")
    return ModelWeights(spec, {n: arrays[n] for n, _ in spec.param_shapes()})


def save_checkpoint(weights: ModelWeights, path) -> None:
    container.write(path, container.CHECKPOINT_MAGIC,
                    dict(weights_manifest(weights), kind="checkpoint"), weights_to_arrays(weights))


def load_checkpoint(path, expected: Optional[ModelSpec] = None) -> ModelWeights:
    manifest, arrays = container.read(path, container.CHECKPOINT_MAGIC)
    weights = weights_from_container(manifest, arrays)
    if expected is not None and expected.fingerprint() != weights.fingerprint:
        raise ArchitectureMismatchError(
            f"checkpoint fingerprint {weights.fingerprint} != expected {expected.fingerprint()}")
    return weights

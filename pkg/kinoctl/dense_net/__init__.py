"""Dense Network Engine

Fully connected rectifier network in double precision with exact reverse-mode
gradients, batched input Jacobians, an adaptive-moment trainer step and a
byte-stable JSON weight format. FKD and IKD models share this substrate.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from kinoctl.exceptions import DatasetError, DimensionError

WEIGHTS_VERSION = 1


@dataclass(frozen=True, eq=False)
class NetParams:
    """Layer list of (weights out x in, biases out); rectifier on hidden layers, identity output."""

    layers: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    seed: Optional[int] = None

    def __post_init__(self):
        layers = tuple((np.asarray(w, dtype=float), np.asarray(b, dtype=float)) for w, b in self.layers)
        if not layers:
            raise DimensionError("a network needs at least one layer")
        for i, (w, b) in enumerate(layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i}: weights {w.shape} and biases {b.shape} do not match")
            if i and w.shape[1] != layers[i - 1][0].shape[0]:
                raise DimensionError(f"layer {i} input {w.shape[1]} != layer {i - 1} output {layers[i - 1][0].shape[0]}")
        object.__setattr__(self, "layers", layers)

    @property
    def layer_sizes(self) -> List[int]:
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    @property
    def input_size(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_size(self) -> int:
        return self.layers[-1][0].shape[0]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in self.layers)


@dataclass(frozen=True, eq=False)
class ForwardCache:
    """Activation record of one forward call: layer inputs and pre-activations."""

    inputs: Tuple[np.ndarray, ...]
    pre: Tuple[np.ndarray, ...]
    batched: bool


@dataclass(frozen=True, eq=False)
class GradBundle:
    """Per-layer weight and bias gradients plus the gradient w.r.t. the network input."""

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    input: np.ndarray

    def __add__(self, other: "GradBundle") -> "GradBundle":
        mine = [g.shape for g in self.weights + self.biases]
        theirs = [g.shape for g in other.weights + other.biases]
        if mine != theirs or self.input.shape != other.input.shape:
            raise ValueError(f"cannot add gradients of different shapes: input {self.input.shape} "
                             f"vs {other.input.shape}, layers {mine} vs {theirs}")
        return GradBundle(
            tuple(a + b for a, b in zip(self.weights, other.weights)),
            tuple(a + b for a, b in zip(self.biases, other.biases)),
            self.input + other.input,
        )

    def scaled(self, factor: float) -> "GradBundle":
        return GradBundle(
            tuple(factor * g for g in self.weights),
            tuple(factor * g for g in self.biases),
            factor * self.input,
        )

    def flat(self) -> np.ndarray:
        """Parameter gradients concatenated layer by layer (weights row-major, then biases)."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])


@dataclass(frozen=True, eq=False)
class AdamState:
    m: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    v: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_num: float = 1e-8

    @classmethod
    def zeros_like(cls, params: NetParams, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps_num: float = 1e-8) -> "AdamState":
        zeros = tuple((np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers)
        return cls(zeros, zeros, 0, lr, beta1, beta2, eps_num)

    def with_lr(self, lr: float) -> "AdamState":
        return AdamState(self.m, self.v, self.step, lr, self.beta1, self.beta2, self.eps_num)


def net_init(seed: int, layer_sizes: Sequence[int]) -> NetParams:
    """
    He-initialized network: weights ~ N(0, 2 / fan_in), zero biases.

    Args:
        seed: Seed for the weight draws
        layer_sizes: Input size, hidden sizes..., output size

    Returns:
        Freshly initialized parameters
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise DimensionError(f"need >= 2 positive layer sizes, got {sizes}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return NetParams(tuple(layers), seed)


def zero_params(layer_sizes: Sequence[int]) -> NetParams:
    """All-zero network of the given shape."""
    sizes = [int(s) for s in layer_sizes]
    return NetParams(tuple((np.zeros((o, i)), np.zeros(o)) for i, o in zip(sizes[:-1], sizes[1:])))


def net_forward(params: NetParams, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """
    Evaluate the network on one input (n_in,) or a batch (B, n_in).

    Returns:
        (output, cache) where the cache keeps every layer input and pre-activation

    Raises:
        DimensionError: input width differs from the first layer
    """
    a = np.asarray(x, dtype=float)
    batched = a.ndim == 2
    if a.ndim not in (1, 2) or a.shape[-1] != params.input_size:
        raise DimensionError(f"input shape {a.shape} does not match network input {params.input_size}")
    if not batched:
        a = a[None, :]
    inputs, pre = [], []
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        inputs.append(a)
        z = a @ w.T + b
        pre.append(z)
        a = z if i == last else np.maximum(z, 0.0)
    cache = ForwardCache(tuple(inputs), tuple(pre), batched)
    return (a if batched else a[0]), cache


def net_backward(params: NetParams, cache: ForwardCache, output_grad: np.ndarray) -> GradBundle:
    """
    Exact gradients of <output_grad, output> w.r.t. every parameter and the input.

    For a batched cache the parameter gradients are summed over the batch and
    the input gradient keeps the batch axis.

    Raises:
        DimensionError: ``output_grad`` does not match the cached forward call
    """
    g = np.asarray(output_grad, dtype=float)
    n_batch = cache.inputs[0].shape[0]
    if not cache.batched:
        g = g[None, :]
    if g.shape != (n_batch, params.output_size) or len(cache.pre) != len(params.layers):
        raise DimensionError(f"output_grad shape {np.shape(output_grad)} does not match cached forward call")
    grad_w: List[np.ndarray] = [None] * len(params.layers)
    grad_b: List[np.ndarray] = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        grad_w[i] = g.T @ cache.inputs[i]
        grad_b[i] = g.sum(axis=0)
        g = g @ w
        if i > 0:
            g = g * (cache.pre[i - 1] > 0.0)
    return GradBundle(tuple(grad_w), tuple(grad_b), g if cache.batched else g[0])


def net_input_jacobian(params: NetParams, cache: ForwardCache) -> np.ndarray:
    """
    Jacobian d output / d input (n_out x n_in) of a single-input forward call.

    Runs one reverse pass per output unit, batched as a matrix product.
    """
    if cache.batched:
        raise DimensionError("net_input_jacobian needs a single-input cache")
    g = np.eye(params.output_size)
    for i in range(len(params.layers) - 1, -1, -1):
        g = g @ params.layers[i][0]
        if i > 0:
            g = g * (cache.pre[i - 1][0] > 0.0)
    return g


def adam_step(params: NetParams, grads: GradBundle, state: AdamState) -> Tuple[NetParams, AdamState]:
    """
    One bias-corrected adaptive-moment update.

    Returns:
        (updated params, updated optimizer state); inputs are not modified
    """
    if len(grads.weights) != len(params.layers):
        raise DimensionError("gradient bundle does not match network depth")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    layers, m_new, v_new = [], [], []
    for (w, b), (mw, mb), (vw, vb), gw, gb in zip(params.layers, state.m, state.v, grads.weights, grads.biases):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise DimensionError(f"gradient shapes {gw.shape}/{gb.shape} do not match {w.shape}/{b.shape}")
        mw2 = b1 * mw + (1.0 - b1) * gw
        mb2 = b1 * mb + (1.0 - b1) * gb
        vw2 = b2 * vw + (1.0 - b2) * gw * gw
        vb2 = b2 * vb + (1.0 - b2) * gb * gb
        w2 = w - state.lr * (mw2 / corr1) / (np.sqrt(vw2 / corr2) + state.eps_num)
        b2_ = b - state.lr * (mb2 / corr1) / (np.sqrt(vb2 / corr2) + state.eps_num)
        layers.append((w2, b2_))
        m_new.append((mw2, mb2))
        v_new.append((vw2, vb2))
    new_state = AdamState(tuple(m_new), tuple(v_new), t, state.lr, b1, b2, state.eps_num)
    return NetParams(tuple(layers), params.seed), new_state


# ------------------------------------------------------------------ weight files

def params_to_dict(params: NetParams) -> Dict[str, Any]:
    return {
        "layer_sizes": params.layer_sizes,
        "seed": params.seed,
        "layers": [{"w": w.ravel().tolist(), "b": b.tolist()} for w, b in params.layers],
        "version": WEIGHTS_VERSION,
    }


def params_from_dict(data: Dict[str, Any]) -> NetParams:
    if data.get("version") != WEIGHTS_VERSION:
        raise DatasetError(f"unsupported weight file version {data.get('version')}")
    sizes = data["layer_sizes"]
    layers = []
    for (fan_in, fan_out), layer in zip(zip(sizes[:-1], sizes[1:]), data["layers"]):
        w = np.asarray(layer["w"], dtype=float).reshape(fan_out, fan_in)
        layers.append((w, np.asarray(layer["b"], dtype=float)))
    return NetParams(tuple(layers), data.get("seed"))


def dumps_json(data: Dict[str, Any]) -> str:
    """Stable JSON text; floats use shortest round-trip repr so save-load-save is byte-identical."""
    return json.dumps(data, sort_keys=True, separators=(",", ":")) + "\n"


def save_params(params: NetParams, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(params_to_dict(params)))


def load_params(path: Union[str, Path]) -> NetParams:
    return params_from_dict(json.loads(Path(path).read_text()))

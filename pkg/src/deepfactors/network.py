"""Feed-forward network producing deep characteristic scores per firm.

Firms are columns; every column goes through the same affine stack, so
the parameter count is independent of the number of firms and the score
formula is identical for every firm.  Hidden layers use a bounded
activation (tanh by default, inputs are rank-normalized to [-1, 1]); the
final layer is linear so downstream sorting, which only consumes order,
never saturates.

The backward pass is exact manual backpropagation; ``tests`` verify it
against central finite differences.  Dropout uses the inverted
convention (scale by 1/p_keep at train time), so evaluation applies no
mask at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ForwardCache",
    "NetworkParams",
    "backward",
    "default_layer_sizes",
    "forward",
    "init_params",
    "load_params",
    "save_params",
]

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda s: 1.0 - np.tanh(s) ** 2),
    "relu": (lambda s: np.maximum(s, 0.0), lambda s: (s > 0.0).astype(float)),
    "identity": (lambda s: s, lambda s: np.ones_like(s)),
}

PARAMS_FORMAT_VERSION = 1


def default_layer_sizes(n_layers: int, n_outputs: int | None = None) -> list[int]:
    """Layer widths halving from 128: layer l has 2**(8-l) units.

    When ``n_outputs`` is given the final width is replaced by it, so the
    network emits exactly that many deep characteristics.
    """
    if not 1 <= n_layers <= 7:
        raise ValueError(f"n_layers must be in 1..7, got {n_layers}")
    sizes = [2 ** (8 - l) for l in range(1, n_layers + 1)]
    if n_outputs is not None:
        if n_outputs < 1:
            raise ValueError(f"n_outputs must be positive, got {n_outputs}")
        sizes[-1] = n_outputs
    return sizes


@dataclass
class NetworkParams:
    """Per-layer affine weights/biases shared across firms."""

    weights: list[np.ndarray]  # A[l]: (K_l, K_{l-1})
    biases: list[np.ndarray]  # b[l]: (K_l,)
    activation: str = "tanh"
    seed: int | None = None

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be nonempty lists of equal length")
        for l, (a, b) in enumerate(zip(self.weights, self.biases), start=1):
            if a.ndim != 2 or b.ndim != 1 or a.shape[0] != b.size:
                raise ValueError(f"layer {l}: weight {a.shape} and bias {b.shape} do not conform")
            if l > 1 and a.shape[1] != self.weights[l - 2].shape[0]:
                raise ValueError(f"layer {l}: input dim {a.shape[1]} does not chain")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [a.shape[0] for a in self.weights]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_parameters(self) -> int:
        return sum(a.size + b.size for a, b in zip(self.weights, self.biases))

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            weights=[a.copy() for a in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
            seed=self.seed,
        )


def init_params(
    n_inputs: int,
    layer_sizes: list[int],
    seed: int,
    activation: str = "tanh",
) -> NetworkParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, per-seed deterministic."""
    if n_inputs < 1 or any(k < 1 for k in layer_sizes):
        raise ValueError(f"layer sizes must be positive, got input {n_inputs}, sizes {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    fan_in = n_inputs
    for k in layer_sizes:
        bound = np.sqrt(6.0 / (fan_in + k))
        weights.append(rng.uniform(-bound, bound, size=(k, fan_in)))
        biases.append(np.zeros(k))
        fan_in = k
    return NetworkParams(weights=weights, biases=biases, activation=activation, seed=seed)


@dataclass
class ForwardCache:
    """Everything the backward pass needs from one forward call."""

    inputs: list[np.ndarray] = field(default_factory=list)  # post-dropout layer inputs
    preacts: list[np.ndarray] = field(default_factory=list)  # A @ input + b
    masks: list[np.ndarray | None] = field(default_factory=list)
    p_keep: float = 1.0
    layer_sizes: list[int] = field(default_factory=list)


def forward(
    z0,
    params: NetworkParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    p_keep: float = 0.9,
) -> tuple[np.ndarray, ForwardCache]:
    """Map a (K0, M) input block to (P, M) deep characteristics.

    Columns are independent firms.  ``mode='train'`` draws a Bernoulli
    keep-mask for every layer input and scales by 1/p_keep; eval mode is
    deterministic and mask-free.
    """
    z = np.asarray(z0, dtype=float)
    if z.ndim != 2:
        raise ValueError(f"input must be (K0, M), got shape {z.shape}")
    if z.shape[0] != params.n_inputs:
        raise ValueError(f"input has {z.shape[0]} rows, network expects {params.n_inputs}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and not 0.0 < p_keep <= 1.0:
        raise ValueError(f"p_keep must be in (0, 1], got {p_keep}")
    if mode == "train" and p_keep < 1.0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")

    act, _ = _ACTIVATIONS[params.activation]
    cache = ForwardCache(p_keep=p_keep if mode == "train" else 1.0, layer_sizes=params.layer_sizes)
    n_layers = params.n_layers
    for l, (a, b) in enumerate(zip(params.weights, params.biases), start=1):
        if mode == "train" and p_keep < 1.0:
            mask = (rng.random(z.shape) < p_keep).astype(float)
            z = z * mask / p_keep
        else:
            mask = None
        s = a @ z + b[:, None]
        cache.inputs.append(z)
        cache.preacts.append(s)
        cache.masks.append(mask)
        z = act(s) if l < n_layers else s  # final layer linear
    return z, cache


def backward(
    cache: ForwardCache,
    params: NetworkParams,
    grad_y,
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Exact gradients (dA[l], db[l], dZ0) for upstream gradient ``grad_y``."""
    g = np.asarray(grad_y, dtype=float)
    if cache.layer_sizes != params.layer_sizes or len(cache.inputs) != params.n_layers:
        raise ValueError("cache does not match these network parameters")
    if g.shape != cache.preacts[-1].shape:
        raise ValueError(f"grad_y shape {g.shape} does not match output shape {cache.preacts[-1].shape}")

    _, dact = _ACTIVATIONS[params.activation]
    grad_w = [np.empty(0)] * params.n_layers
    grad_b = [np.empty(0)] * params.n_layers
    dz = g
    for l in range(params.n_layers, 0, -1):
        i = l - 1
        ds = dz if l == params.n_layers else dz * dact(cache.preacts[i])
        grad_w[i] = ds @ cache.inputs[i].T
        grad_b[i] = ds.sum(axis=1)
        dz = params.weights[i].T @ ds
        if cache.masks[i] is not None:
            dz = dz * cache.masks[i] / cache.p_keep
    return grad_w, grad_b, dz


def save_params(params: NetworkParams, path) -> None:
    """Write parameters to a versioned, exactly round-tripping text file."""
    lines = [
        f"deepfactors-net v{PARAMS_FORMAT_VERSION}",
        f"activation {params.activation}",
        f"seed {'none' if params.seed is None else params.seed}",
        "sizes " + " ".join(str(k) for k in params.layer_sizes),
    ]
    for l, (a, b) in enumerate(zip(params.weights, params.biases), start=1):
        lines.append(f"A{l} {a.shape[0]} {a.shape[1]}")
        lines.extend(" ".join(repr(float(x)) for x in row) for row in a)
        lines.append(f"b{l} {b.size}")
        lines.append(" ".join(repr(float(x)) for x in b))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path) -> NetworkParams:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("deepfactors-net v"):
        raise ValueError(f"{path}: not a network parameter file")
    version = int(lines[0].split("v")[-1])
    if version != PARAMS_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    activation = lines[1].split()[1]
    seed_tok = lines[2].split()[1]
    seed = None if seed_tok == "none" else int(seed_tok)
    sizes = [int(t) for t in lines[3].split()[1:]]
    weights, biases = [], []
    pos = 4
    for l in range(1, len(sizes)):
        rows, cols = (int(t) for t in lines[pos].split()[1:])
        pos += 1
        a = np.array([[float(t) for t in lines[pos + r].split()] for r in range(rows)])
        pos += rows
        n = int(lines[pos].split()[1])
        pos += 1
        b = np.array([float(t) for t in lines[pos].split()])
        pos += 1
        if a.shape != (rows, cols) or b.size != n:
            raise ValueError(f"{path}: layer {l} block is malformed")
        weights.append(a)
        biases.append(b)
    return NetworkParams(weights=weights, biases=biases, activation=activation, seed=seed)

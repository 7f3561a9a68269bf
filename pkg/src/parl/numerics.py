"""Dense float64 MLP arithmetic: forward passes, hand-derived backward passes
with gradients for both parameters and inputs, an Adam optimizer, and a small
binary checkpoint format.

Everything here is deliberately tiny and deterministic. Networks in this
project are MLP compositions only, so a hand-derived per-layer backward pass
replaces a general autodiff graph.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

Array = np.ndarray

ACTIVATIONS = ("relu", "tanh", "gelu")

CHECKPOINT_MAGIC = b"PRLC"
CHECKPOINT_VERSION = 1

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Shape of an input does not compose with the network."""


class NumericError(FloatingPointError):
    """A non-finite value showed up where finite math was required."""


@dataclass
class MlpParams:
    """Weights and biases of a fully-connected net, float64 only.

    ``layer_weights[i]`` has shape (fan_in, fan_out); consecutive layers must
    compose. Hidden layers use ``activation``; the output layer is linear.
    """

    layer_weights: list[Array]
    layer_biases: list[Array]
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.layer_weights) != len(self.layer_biases):
            raise DimensionError("weights and biases must pair up")
        for i, (w, b) in enumerate(zip(self.layer_weights, self.layer_biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i > 0 and self.layer_weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {i - 1}->{i} dimensions do not compose")

    @property
    def input_dim(self) -> int:
        return self.layer_weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layer_weights[-1].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_weights)

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.layer_weights],
            [b.copy() for b in self.layer_biases],
            self.activation,
        )

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            [np.zeros_like(w) for w in self.layer_weights],
            [np.zeros_like(b) for b in self.layer_biases],
            self.activation,
        )

    def flat(self) -> Array:
        parts = []
        for w, b in zip(self.layer_weights, self.layer_biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)


def mlp_init(layer_sizes: list[int], rng: np.random.Generator,
             activation: str = "relu") -> MlpParams:
    """Glorot-uniform initialization: weights in +-sqrt(6/(fan_in+fan_out))."""
    if len(layer_sizes) < 2:
        raise DimensionError("need at least input and output sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation)


def _activate(z: Array, kind: str) -> Array:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    # exact gelu: z * Phi(z)
    return 0.5 * z * (1.0 + erf(z * _INV_SQRT2))


def _activate_grad(z: Array, kind: str) -> Array:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    phi = 0.5 * (1.0 + erf(z * _INV_SQRT2))
    return phi + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _as_batch(x: Array, want_dim: int, what: str) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != want_dim:
        raise DimensionError(f"{what} has shape {x.shape}, expected (*, {want_dim})")
    return x, squeezed


def _forward_cached(params: MlpParams, x: Array) -> tuple[Array, list[Array], list[Array]]:
    """Forward pass keeping per-layer inputs and pre-activations for backward."""
    inputs = [x]
    preacts = []
    h = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.layer_weights, params.layer_biases)):
        z = h @ w + b
        preacts.append(z)
        h = z if i == last else _activate(z, params.activation)
        if i != last:
            inputs.append(h)
    return h, inputs, preacts


def mlp_forward(params: MlpParams, x: Array) -> Array:
    """Evaluate the net on a single vector or a (batch, input_dim) matrix."""
    xb, squeezed = _as_batch(x, params.input_dim, "input")
    out, _, _ = _forward_cached(params, xb)
    return out[0] if squeezed else out


def mlp_forward_with_cache(params: MlpParams, x: Array):
    """Batch forward that keeps the per-layer activations so a following
    backward pass can skip recomputing them."""
    xb, _ = _as_batch(x, params.input_dim, "input")
    out, inputs, preacts = _forward_cached(params, xb)
    return out, (inputs, preacts)


def mlp_backward_from_cache(params: MlpParams, cache,
                            output_grad: Array) -> tuple[MlpParams, Array]:
    """Backward pass reusing a cache from :func:`mlp_forward_with_cache`."""
    inputs, preacts = cache
    gb, _ = _as_batch(output_grad, params.output_dim, "output_grad")
    w_grads: list[Array | None] = [None] * params.n_layers
    b_grads: list[Array | None] = [None] * params.n_layers
    delta = gb
    for i in range(params.n_layers - 1, -1, -1):
        w_grads[i] = inputs[i].T @ delta
        b_grads[i] = delta.sum(axis=0)
        delta = delta @ params.layer_weights[i].T
        if i > 0:
            delta = delta * _activate_grad(preacts[i - 1], params.activation)
    grads = MlpParams(w_grads, b_grads, params.activation)  # type: ignore[arg-type]
    return grads, delta


def mlp_backward(params: MlpParams, x: Array,
                 output_grad: Array) -> tuple[MlpParams, Array]:
    """Backward pass for the net evaluated at ``x``.

    ``output_grad`` is dL/d(output). Returns (parameter gradients as an
    MlpParams-shaped container, dL/d(input)). Gradients sum over the batch,
    so a mean-reduced loss should pre-scale ``output_grad`` by 1/batch.
    """
    xb, squeezed = _as_batch(x, params.input_dim, "input")
    gb, gsqueezed = _as_batch(output_grad, params.output_dim, "output_grad")
    if squeezed != gsqueezed or xb.shape[0] != gb.shape[0]:
        raise DimensionError("input and output_grad batch sizes differ")
    _, inputs, preacts = _forward_cached(params, xb)
    grads, delta = mlp_backward_from_cache(params, (inputs, preacts), gb)
    return grads, (delta[0] if squeezed else delta)


@dataclass
class AdamState:
    """Adam moments mirroring one MlpParams, plus the shared step counter."""

    first_moment: MlpParams
    second_moment: MlpParams
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: MlpParams, learning_rate: float = 3e-4,
              beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    return AdamState(params.zeros_like(), params.zeros_like(), 0,
                     learning_rate, beta1, beta2, epsilon)


def adam_step(state: AdamState, params: MlpParams,
              grads: MlpParams) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update. Mutates ``params`` and ``state`` in
    place (single-owner contract) and returns them for convenience."""
    for i, (gw, gb) in enumerate(zip(grads.layer_weights, grads.layer_biases)):
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NumericError(f"non-finite gradient in layer {i}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for target, moment1, moment2, g in (
        (params.layer_weights, state.first_moment.layer_weights,
         state.second_moment.layer_weights, grads.layer_weights),
        (params.layer_biases, state.first_moment.layer_biases,
         state.second_moment.layer_biases, grads.layer_biases),
    ):
        for p, m, v, gr in zip(target, moment1, moment2, g):
            m *= b1
            m += (1.0 - b1) * gr
            v *= b2
            v += (1.0 - b2) * gr * gr
            p -= state.learning_rate * (m / corr1) / \
                (np.sqrt(v / corr2) + state.epsilon)
    return params, state


# -- checkpoint container ----------------------------------------------------

def _write_records(fh, records: list[tuple[str, Array]]) -> None:
    fh.write(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        fh.write(struct.pack("<H", len(name_b)))
        fh.write(name_b)
        fh.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<I", d))
        fh.write(arr.tobytes(order="C"))


def _read_records(fh) -> list[tuple[str, Array]]:
    (n,) = struct.unpack("<I", fh.read(4))
    records = []
    for _ in range(n):
        (name_len,) = struct.unpack("<H", fh.read(2))
        name = fh.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
        records.append((name, data.astype(np.float64)))
    return records


def save_checkpoint(path, records: list[tuple[str, Array]]) -> None:
    """Write named float64 arrays to a single binary file."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        _write_records(fh, records)


def load_checkpoint(path) -> list[tuple[str, Array]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return _read_records(fh)


def mlp_records(prefix: str, params: MlpParams) -> list[tuple[str, Array]]:
    """Flatten an MlpParams into checkpoint records."""
    recs: list[tuple[str, Array]] = []
    for i, (w, b) in enumerate(zip(params.layer_weights, params.layer_biases)):
        recs.append((f"{prefix}/w{i}", w))
        recs.append((f"{prefix}/b{i}", b))
    return recs


def mlp_from_records(prefix: str, records: list[tuple[str, Array]],
                     activation: str = "relu") -> MlpParams:
    by_name = dict(records)
    weights, biases = [], []
    i = 0
    while f"{prefix}/w{i}" in by_name:
        weights.append(np.array(by_name[f"{prefix}/w{i}"]))
        biases.append(np.array(by_name[f"{prefix}/b{i}"]))
        i += 1
    if not weights:
        raise ValueError(f"no layers found under {prefix!r}")
    return MlpParams(weights, biases, activation)

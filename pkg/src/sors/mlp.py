"""Small feed-forward networks with hand-written backprop and an Adam optimiser.

Weights are stored ``(out, in)``; inputs may be a single vector or a batch of
row vectors. Everything is float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

ACTIVATIONS = ("identity", "tanh", "relu")
_MLP_MAGIC = b"MLP1"


@dataclass
class MlpParams:
    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ContractViolation("need matching, non-empty weight/bias/activation lists")
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ContractViolation(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ContractViolation(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ContractViolation(f"layer {k} input {w.shape[1]} != previous output {self.weights[k - 1].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list:
        """Parameter arrays in layer order (w0, b0, w1, b1, ...); these alias the params."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.activations))

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases],
                         list(self.activations))

    def load_arrays(self, arrays) -> None:
        for dst, src in zip(self.arrays(), arrays):
            dst[...] = src


def init_mlp(sizes, activations, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights and zero biases for layer widths ``sizes``."""
    if len(sizes) < 2 or len(activations) != len(sizes) - 1:
        raise ContractViolation("need len(sizes) - 1 activations")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, list(activations))


def _activate(act, z):
    if act == "tanh":
        return np.tanh(z)
    if act == "relu":
        return np.maximum(z, 0.0)
    return z


def _as_batch(params, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.in_dim:
        raise ContractViolation(f"input of shape {x.shape} does not match input width {params.in_dim}")
    return xb, single


def forward(params: MlpParams, x) -> np.ndarray:
    h, single = _as_batch(params, x)
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = _activate(act, h @ w.T + b)
    return h[0] if single else h


def forward_cache(params: MlpParams, x):
    """Forward pass that also returns the per-layer activations needed by :func:`backward`."""
    h, single = _as_batch(params, x)
    outs = [h]
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = _activate(act, h @ w.T + b)
        outs.append(h)
    return (h[0] if single else h), (outs, single)


def backward(params: MlpParams, cache, upstream):
    """Reverse pass: gradients of ``sum(upstream * output)`` w.r.t. params and input."""
    outs, single = cache
    g = np.asarray(upstream, dtype=np.float64)
    g = g[None, :] if single else g
    if g.shape != outs[-1].shape:
        raise ContractViolation(f"upstream gradient shape {g.shape} != output shape {outs[-1].shape}")
    n = len(params.weights)
    gw, gb = [None] * n, [None] * n
    for k in range(n - 1, -1, -1):
        act, y = params.activations[k], outs[k + 1]
        if act == "tanh":
            g = g * (1.0 - y * y)
        elif act == "relu":
            g = g * (y > 0.0)
        gw[k] = g.T @ outs[k]
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k]
    grads = MlpParams(gw, gb, list(params.activations))
    return grads, (g[0] if single else g)


def grad(params: MlpParams, x, upstream):
    """Parameter gradients and input gradient of the forward map contracted with ``upstream``."""
    _, cache = forward_cache(params, x)
    return backward(params, cache, upstream)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    arrays = params.arrays() if isinstance(params, MlpParams) else list(params)
    return AdamState([np.zeros_like(p) for p in arrays], [np.zeros_like(p) for p in arrays],
                     0, lr, beta1, beta2, epsilon)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    p_arrays = params.arrays() if isinstance(params, MlpParams) else list(params)
    g_arrays = grads.arrays() if isinstance(grads, MlpParams) else list(grads)
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(state.m):
        raise ContractViolation("parameter, gradient and optimiser state lists differ in length")
    for p, g in zip(p_arrays, g_arrays):
        if p.shape != g.shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_step")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


def mlp_to_bytes(params: MlpParams) -> bytes:
    """Header (layer count, dims, activation codes), then each layer's weights and biases
    as row-major little-endian float64."""
    parts = [_MLP_MAGIC, struct.pack("<I", len(params.weights))]
    for w, act in zip(params.weights, params.activations):
        parts.append(struct.pack("<IIB", w.shape[1], w.shape[0], ACTIVATIONS.index(act)))
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def mlp_from_bytes(blob: bytes, offset: int = 0):
    """Inverse of :func:`mlp_to_bytes`. Returns ``(params, next_offset)``."""
    if blob[offset:offset + 4] != _MLP_MAGIC:
        raise ContractViolation("not an MLP snapshot")
    offset += 4
    (n_layers,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    dims, acts = [], []
    for _ in range(n_layers):
        fan_in, fan_out, code = struct.unpack_from("<IIB", blob, offset)
        offset += 9
        dims.append((fan_out, fan_in))
        acts.append(ACTIVATIONS[code])
    weights, biases = [], []
    for fan_out, fan_in in dims:
        w = np.frombuffer(blob, dtype="<f8", count=fan_out * fan_in, offset=offset).reshape(fan_out, fan_in)
        offset += 8 * fan_out * fan_in
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlpParams(weights, biases, acts), offset

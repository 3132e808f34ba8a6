"""Small dense-network substrate: MLPs with hand-written reverse mode, Adam, clipping.

Everything runs in float64. Inputs may be a single vector ``(in,)`` or a batch
``(n, in)``; weights are stored as ``(out, in)`` so a layer computes
``x @ W.T + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "identity", "sigmoid")


class ShapeError(ValueError):
    pass


class OptimizerError(RuntimeError):
    pass


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(kind, a):
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "identity":
        return a
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {kind!r}")


def _activate_grad(kind, a, y, g):
    if kind == "relu":
        return g * (a > 0)
    if kind == "identity":
        return g
    if kind == "sigmoid":
        return g * y * (1.0 - y)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Mlp:
    """Parameters of a fully connected network.

    ``activations[i]`` is applied after layer ``i``. The same class doubles as
    the container for parameter gradients.
    """

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}")
        for kind in self.activations:
            if kind not in ACTIVATIONS:
                raise ValueError(f"unknown activation {kind!r}")

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def named_arrays(self, prefix=""):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}layer{i}.weight"] = w
            out[f"{prefix}layer{i}.bias"] = b
        return out

    def zeros_like(self):
        return Mlp(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            list(self.activations),
        )

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.activations))


def init_mlp(rng, sizes, hidden="relu", output="identity"):
    """Glorot-uniform weights, zero biases. ``sizes`` = [in, h1, ..., out]."""
    weights, biases, acts = [], [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
        acts.append(output if i == len(sizes) - 2 else hidden)
    return Mlp(weights, biases, acts)


@dataclass
class Tape:
    squeeze: bool
    inputs: list = field(default_factory=list)  # input to each layer
    pre: list = field(default_factory=list)  # pre-activations
    post: list = field(default_factory=list)


def mlp_forward(params: Mlp, x):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match input dimension {params.in_dim}")
    tape = Tape(squeeze)
    for w, b, kind in zip(params.weights, params.biases, params.activations):
        tape.inputs.append(h)
        a = h @ w.T + b
        h = _activate(kind, a)
        tape.pre.append(a)
        tape.post.append(h)
    return (h[0] if squeeze else h), tape


def mlp_backward(params: Mlp, tape: Tape, upstream, param_grads=True):
    """Gradients of ``sum(upstream * output)`` w.r.t. parameters and input.

    For a batch the parameter gradients are summed over rows. With
    ``param_grads=False`` only the input gradient is computed.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if g.shape != tape.post[-1].shape:
        raise ShapeError(f"upstream shape {np.shape(upstream)} does not match output {tape.post[-1].shape}")
    grads = params.zeros_like() if param_grads else None
    for i in reversed(range(len(params.weights))):
        g = _activate_grad(params.activations[i], tape.pre[i], tape.post[i], g)
        if param_grads:
            grads.weights[i] = g.T @ tape.inputs[i]
            grads.biases[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return grads, (g[0] if tape.squeeze else g)


def clip_by_norm(g, max_norm):
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = float(np.linalg.norm(g))
    if norm <= max_norm:
        return g
    return g * (max_norm / norm)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: dict):
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
    """Adam with decoupled weight decay. Updates ``params`` and ``state`` in place."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient in parameter group {name!r}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# -- checkpoints ------------------------------------------------------------


def save_arrays(arrays: dict, path, header=None):
    """Write named arrays as JSON: ordered (name, rows, cols, row-major values).

    Vectors are stored with ``cols = 1``; ``shape`` keeps the original shape.
    """
    tensors = []
    for name, a in arrays.items():
        a = np.asarray(a, dtype=np.float64)
        rows = a.shape[0] if a.ndim else 1
        cols = int(a.size // rows) if rows else 0
        tensors.append(
            {"name": name, "rows": rows, "cols": cols, "shape": list(a.shape), "values": a.ravel().tolist()}
        )
    hdr = dict(header or {})
    hdr["layer_order"] = list(arrays)
    Path(path).write_text(json.dumps({"header": hdr, "tensors": tensors}))


def load_arrays(path):
    blob = json.loads(Path(path).read_text())
    out = {}
    for t in blob["tensors"]:
        a = np.array(t["values"], dtype=np.float64)
        if a.size != t["rows"] * t["cols"]:
            raise ShapeError(f"tensor {t['name']}: {a.size} values for {t['rows']}x{t['cols']}")
        out[t["name"]] = a.reshape(t["shape"])
    return out, blob["header"]

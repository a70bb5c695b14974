"""Small MLP function approximator with reverse-mode gradients and SGD/Adam.

Parameters live in numpy float64 containers and are treated as immutable
values: every optimizer step returns a new MlpParams. Gradients are evaluated
with torch autograd over double-precision leaf tensors; torch is pinned to a
single thread so training trajectories are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch

torch.set_num_threads(1)
torch.set_default_dtype(torch.float64)

_ACTIVATIONS = ("tanh", "relu")


class NumericError(RuntimeError):
    """Loss or gradient became non-finite."""


@dataclass(frozen=True)
class MlpParams:
    """Feed-forward network parameters: weights[k] is (fan_out, fan_in)."""

    sizes: tuple
    weights: tuple
    biases: tuple
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=float) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=float) for b in self.biases))
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[k + 1], self.sizes[k]) or b.shape != (self.sizes[k + 1],):
                raise ValueError("layer dimensions inconsistent with sizes")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, values) -> "MlpParams":
        values = np.asarray(values, dtype=float)
        ws, bs, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(values[k : k + w.size].reshape(w.shape))
            k += w.size
            bs.append(values[k : k + b.size].reshape(b.shape))
            k += b.size
        if k != values.size:
            raise ValueError("flat vector size mismatch")
        return MlpParams(self.sizes, tuple(ws), tuple(bs), self.activation)


def init_mlp(sizes, activation: str = "tanh", rng=None) -> MlpParams:
    """Glorot-uniform initialization: weights ~ U(+-sqrt(6/(fan_in+fan_out)))."""
    rng = np.random.default_rng(rng)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpParams(tuple(sizes), tuple(ws), tuple(bs), activation)


def forward(params: MlpParams, x) -> np.ndarray:
    """Deterministic feed-forward evaluation; accepts a vector or a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != params.in_dim:
        raise ValueError(f"expected input dim {params.in_dim}, got {h.shape[-1]}")
    act = np.tanh if params.activation == "tanh" else lambda v: np.maximum(v, 0.0)
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if k != last:
            h = act(h)
    return h[0] if single else h


# ---------------------------------------------------------------------------
# Torch bridge
# ---------------------------------------------------------------------------


class TorchMlp:
    """Leaf-tensor view of an MlpParams, recorded on torch's autodiff tape."""

    def __init__(self, params: MlpParams, requires_grad: bool = True):
        self.sizes = params.sizes
        self.activation = params.activation
        self.weights = [torch.tensor(w, requires_grad=requires_grad) for w in params.weights]
        self.biases = [torch.tensor(b, requires_grad=requires_grad) for b in params.biases]

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        act = torch.tanh if self.activation == "tanh" else torch.relu
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if k != last:
                h = act(h)
        return h

    def leaves(self):
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def to_params(self) -> MlpParams:
        return MlpParams(
            self.sizes,
            tuple(w.detach().numpy().copy() for w in self.weights),
            tuple(b.detach().numpy().copy() for b in self.biases),
            self.activation,
        )

    def grads(self):
        ws = tuple(
            w.grad.numpy().copy() if w.grad is not None else np.zeros(tuple(w.shape))
            for w in self.weights
        )
        bs = tuple(
            b.grad.numpy().copy() if b.grad is not None else np.zeros(tuple(b.shape))
            for b in self.biases
        )
        return MlpParams(self.sizes, ws, bs, self.activation)


def grad(loss_fn, params: MlpParams, batch):
    """Reverse-mode gradient of `loss_fn(torch_mlp, batch)` w.r.t. params.

    Returns (loss value, gradient container shaped like params).
    """
    tm = TorchMlp(params)
    loss = loss_fn(tm, batch)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss.detach())!r}")
    loss.backward()
    g = tm.grads()
    if not np.all(np.isfinite(g.flat())):
        raise NumericError("non-finite gradient")
    return float(loss.detach()), g


def grad_multi(loss_fn, named_params: dict, batch):
    """Like `grad`, but for a dict of named MlpParams trained jointly.

    `loss_fn(named_torch_mlps, batch)` -> scalar tensor. Returns
    (loss value, dict of gradient containers). Entries whose value is a
    TorchMlp built with requires_grad=False act as frozen parameters.
    """
    tms = {
        k: (p if isinstance(p, TorchMlp) else TorchMlp(p)) for k, p in named_params.items()
    }
    loss = loss_fn(tms, batch)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss.detach())!r}")
    loss.backward()
    grads = {k: tm.grads() for k, tm in tms.items() if tm.weights[0].requires_grad}
    for g in grads.values():
        if not np.all(np.isfinite(g.flat())):
            raise NumericError("non-finite gradient")
    return float(loss.detach()), grads


def sgd_step(params: MlpParams, gradient: MlpParams, lr: float) -> MlpParams:
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    return params.with_flat(params.flat() - lr * gradient.flat())


@dataclass
class AdamState:
    """Adam with the usual defaults (b1=0.9, b2=0.999, eps=1e-8)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, params: MlpParams, gradient: MlpParams) -> MlpParams:
        g = gradient.flat()
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mh = self.m / (1 - self.beta1**self.t)
        vh = self.v / (1 - self.beta2**self.t)
        return params.with_flat(params.flat() - self.lr * mh / (np.sqrt(vh) + self.eps))


# ---------------------------------------------------------------------------
# Finite-difference oracle (kept independent of the autodiff path)
# ---------------------------------------------------------------------------


def finite_difference_grad(scalar_fn, params: MlpParams, indices, h: float = 1e-5):
    """Central finite differences of `scalar_fn(params)` at `indices` of the flat vector."""
    base = params.flat()
    out = np.zeros(len(indices))
    for k, idx in enumerate(indices):
        up, down = base.copy(), base.copy()
        up[idx] += h
        down[idx] -= h
        out[k] = (scalar_fn(params.with_flat(up)) - scalar_fn(params.with_flat(down))) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).copy()


def _content_hash(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def params_to_doc(params: MlpParams) -> dict:
    return {
        "sizes": list(params.sizes),
        "activation": params.activation,
        "layers": [
            {"weight": _encode(w), "bias": _encode(b)}
            for w, b in zip(params.weights, params.biases)
        ],
        "hash": _content_hash(list(params.weights) + list(params.biases)),
    }


def params_from_doc(doc: dict) -> MlpParams:
    sizes = tuple(doc["sizes"])
    ws = tuple(
        _decode(layer["weight"], (sizes[k + 1], sizes[k])) for k, layer in enumerate(doc["layers"])
    )
    bs = tuple(_decode(layer["bias"], (sizes[k + 1],)) for k, layer in enumerate(doc["layers"]))
    params = MlpParams(sizes, ws, bs, doc["activation"])
    expect = doc.get("hash")
    if expect is not None and expect != _content_hash(list(ws) + list(bs)):
        raise ValueError("checkpoint content hash mismatch")
    return params


def save_checkpoint(path, named_params: dict, meta: dict | None = None):
    """Write a checkpoint holding one or more named parameter sets; bit-exact round-trip."""
    doc = {
        "schema_version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {name: params_to_doc(p) for name, p in named_params.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('schema_version')!r}")
    return {name: params_from_doc(d) for name, d in doc["params"].items()}, doc.get("meta", {})

"""GCN backbone, MLP head, time embedding, losses and the Adam optimizer."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .numerics import NonFiniteError, Rng


def uniform_init(rng: Rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return (2.0 * rng.uniform(shape) - 1.0) * bound


@dataclass
class GcnParams:
    weights: list
    biases: list
    residual: bool = True

    @property
    def layers(self) -> int:
        return len(self.weights)

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def channels(self) -> int:
        return self.weights[0].shape[1]

    def tensors(self) -> list:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def named(self, prefix: str) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
        return out


def make_gcn(in_width: int, channels: int, out_width: int, layers: int, rng: Rng,
             residual: bool = True, zero_last: bool = False) -> GcnParams:
    if layers < 1:
        raise ValueError("a GCN needs at least one layer")
    widths = [in_width] + [channels] * (layers - 1) + [out_width]
    weights, biases = [], []
    for i in range(layers):
        fi, fo = widths[i], widths[i + 1]
        w = uniform_init(rng, fi, (fi, fo))
        # zero bias: a random one adds the same offset to every node at every layer
        b = np.zeros((1, fo))
        if zero_last and i == layers - 1:
            w[:] = 0.0
            b[:] = 0.0
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(b, requires_grad=True))
    return GcnParams(weights, biases, residual)


def gcn_forward(g, X, params: GcnParams) -> Tensor:
    """Stack of A_hat a W + b layers with a = relu(h) between layers.

    Hidden layers whose input and output widths agree get a skip connection
    (pre-activation form h + A_hat relu(h) W + b, so branches are signed).
    """
    h = ad.as_tensor(X)
    if h.shape[1] != params.in_width:
        raise ValueError(f"GCN expects width {params.in_width}, got {h.shape[1]}")
    last = params.layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h if i == 0 else ad.relu(h)
        z = ad.graph_aggregate(g, a @ w) + b
        if i == last:
            return z
        h = h + z if (params.residual and i > 0 and w.shape[0] == w.shape[1]) else z
    return h


@dataclass
class MlpParams:
    weights: list
    biases: list

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    def tensors(self) -> list:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def named(self, prefix: str) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
        return out


def make_mlp(widths, rng: Rng) -> MlpParams:
    weights, biases = [], []
    for fi, fo in zip(widths[:-1], widths[1:]):
        weights.append(Tensor(uniform_init(rng, fi, (fi, fo)), requires_grad=True))
        biases.append(Tensor(uniform_init(rng, fi, (1, fo)), requires_grad=True))
    return MlpParams(weights, biases)


def mlp_forward(X, params: MlpParams) -> Tensor:
    h = ad.as_tensor(X)
    if h.shape[1] != params.in_width:
        raise ValueError(f"MLP expects width {params.in_width}, got {h.shape[1]}")
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < len(params.weights) - 1:
            h = ad.relu(h)
    return h


def time_embedding(t: float, dims: int) -> np.ndarray:
    """Sinusoidal embedding, interleaved as [sin, cos, sin, cos, ...]."""
    if dims % 2:
        raise ValueError("time embedding width must be even")
    i = np.arange(dims // 2)
    freq = 1.0 / 10000.0 ** (2.0 * i / dims)
    out = np.empty(dims)
    out[0::2] = np.sin(t * freq)
    out[1::2] = np.cos(t * freq)
    return out


# --- losses ------------------------------------------------------------------

def cross_entropy_logits(logits, target) -> Tensor:
    """Mean over rows of -sum_i p_i log softmax(logits)_i."""
    logits = ad.as_tensor(logits)
    if not np.all(np.isfinite(logits.value)):
        raise NonFiniteError("non-finite logits")
    target = ad.value_of(target)
    return ad.scale(ad.sum(ad.mul(ad.log_softmax(logits), target)), -1.0 / logits.shape[0])


def cross_entropy_probs(probs, target, eps: float = 1e-12) -> Tensor:
    """Mean over rows of -sum_i p_i log q_i for a predicted distribution q."""
    probs = ad.as_tensor(probs)
    target = ad.value_of(target)
    return ad.scale(ad.sum(ad.mul(ad.log(ad.clamp_min(probs, eps)), target)), -1.0 / probs.shape[0])


def mse(a, b) -> Tensor:
    return ad.mean(ad.square(ad.sub(a, b)))


# --- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    wd: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-3
    amsgrad: bool = True
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    v_max: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState) -> AdamState:
    """One AMSGrad step with L2 weight decay folded into the gradient.

    Parameters are updated in place.
    """
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
        state.v_max = [np.zeros_like(p.value) for p in params]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v, vmax in zip(params, grads, state.m, state.v, state.v_max):
        if state.wd:
            g = g + state.wd * p.value
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.amsgrad:
            np.maximum(vmax, v, out=vmax)
            denom = np.sqrt(vmax / c2) + state.eps
        else:
            denom = np.sqrt(v / c2) + state.eps
        p.value -= state.lr * (m / c1) / denom
    return state


# --- checkpoints -----------------------------------------------------------------
# Container: uint32 count, then per array: uint32 name length, utf-8 name,
# uint32 ndim, uint64 dims, float64 payload (little-endian throughout).

def save_checkpoint(path, arrays: dict, manifest: dict) -> None:
    path = Path(path)
    chunks = [struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        a = np.ascontiguousarray(ad.value_of(a), dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        chunks.append(a.tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    man = path.with_suffix(".json")
    man.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple:
    path = Path(path)
    raw = path.read_bytes()
    (count,) = struct.unpack_from("<I", raw, 0)
    pos = 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    manifest = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    return arrays, manifest

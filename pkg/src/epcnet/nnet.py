"""Minimal trainable MLP engine in float64 numpy.

Architecture family: a chain of hidden layers computing
ReLU(BN(W x + b)) followed by one output layer computing
Sigmoid(W x + b) with no normalization. Exact reverse-mode gradients
are provided for every trainable parameter, including the paths
through the batch statistics.

Batch-norm conventions (pinned for reproducibility): eps = 1e-5,
population variance over the batch, running statistics updated as
running <- 0.99 * running + 0.01 * batch.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import TrainingDivergenceError

HIDDEN_KIND = "hidden-bn-relu"
OUTPUT_KIND = "output-sigmoid"

BN_EPS = 1e-5
BN_MOMENTUM = 0.99

MODEL_MAGIC = b"EPCNETMD"
MODEL_VERSION = 1

# Sigmoid outputs are clipped into the open interval; saturated units
# would otherwise round to exactly 0.0 or 1.0 in float64.
_SIG_CLIP = np.finfo(np.float64).eps


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    kind: str

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be >= 1")
        if self.kind not in (HIDDEN_KIND, OUTPUT_KIND):
            raise ValueError(f"unknown layer kind {self.kind!r}")


def make_specs(node_counts: Sequence[int]) -> Tuple[LayerSpec, ...]:
    """Specs for the node-count chain [l0, l1, ..., lL]; last layer is
    the sigmoid output, all previous ones are BN+ReLU hidden layers."""
    if len(node_counts) < 2:
        raise ValueError("need at least input and output node counts")
    specs = []
    for i in range(1, len(node_counts)):
        kind = OUTPUT_KIND if i == len(node_counts) - 1 else HIDDEN_KIND
        specs.append(LayerSpec(node_counts[i - 1], node_counts[i], kind))
    return tuple(specs)


def _validate_chain(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ValueError("empty layer chain")
    for a, b in zip(specs, specs[1:]):
        if a.out_dim != b.in_dim:
            raise ValueError(f"layer chain mismatch: {a.out_dim} -> {b.in_dim}")
    if specs[-1].kind != OUTPUT_KIND:
        raise ValueError("last layer must be the sigmoid output")
    if any(s.kind != HIDDEN_KIND for s in specs[:-1]):
        raise ValueError("only the last layer may be the sigmoid output")


@dataclass
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray
    bn_scale: Optional[np.ndarray] = None
    bn_shift: Optional[np.ndarray] = None
    bn_running_mean: Optional[np.ndarray] = None
    bn_running_var: Optional[np.ndarray] = None

    def copy(self) -> "LayerParams":
        return LayerParams(
            self.weight.copy(),
            self.bias.copy(),
            None if self.bn_scale is None else self.bn_scale.copy(),
            None if self.bn_shift is None else self.bn_shift.copy(),
            None if self.bn_running_mean is None else self.bn_running_mean.copy(),
            None if self.bn_running_var is None else self.bn_running_var.copy(),
        )


@dataclass
class NetworkParams:
    specs: Tuple[LayerSpec, ...]
    layers: List[LayerParams]

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.specs, [l.copy() for l in self.layers])

    def trainable_arrays(self) -> List[np.ndarray]:
        """Flat view of every trainable array, in a fixed order."""
        out = []
        for spec, layer in zip(self.specs, self.layers):
            out.append(layer.weight)
            out.append(layer.bias)
            if spec.kind == HIDDEN_KIND:
                out.append(layer.bn_scale)
                out.append(layer.bn_shift)
        return out


@dataclass
class LayerGrads:
    weight: np.ndarray
    bias: np.ndarray
    bn_scale: Optional[np.ndarray] = None
    bn_shift: Optional[np.ndarray] = None


def grad_arrays(grads: Sequence[LayerGrads]) -> List[np.ndarray]:
    out = []
    for g in grads:
        out.append(g.weight)
        out.append(g.bias)
        if g.bn_scale is not None:
            out.append(g.bn_scale)
            out.append(g.bn_shift)
    return out


@dataclass
class ForwardCache:
    """Intermediates of one train-mode forward pass, consumed by backward."""

    mode: str
    inputs: List[np.ndarray] = field(default_factory=list)
    xhats: List[Optional[np.ndarray]] = field(default_factory=list)
    inv_stds: List[Optional[np.ndarray]] = field(default_factory=list)
    post: List[np.ndarray] = field(default_factory=list)


def init_network(specs: Sequence[LayerSpec], rng: np.random.Generator) -> NetworkParams:
    """Xavier-uniform weights, zero biases, identity batch-norm."""
    specs = tuple(specs)
    _validate_chain(specs)
    layers = []
    for spec in specs:
        bound = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        weight = rng.uniform(-bound, bound, (spec.out_dim, spec.in_dim))
        bias = np.zeros(spec.out_dim)
        if spec.kind == HIDDEN_KIND:
            layers.append(
                LayerParams(
                    weight, bias,
                    bn_scale=np.ones(spec.out_dim),
                    bn_shift=np.zeros(spec.out_dim),
                    bn_running_mean=np.zeros(spec.out_dim),
                    bn_running_var=np.ones(spec.out_dim),
                )
            )
        else:
            layers.append(LayerParams(weight, bias))
    return NetworkParams(specs, layers)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(params: NetworkParams, inputs: np.ndarray, mode: str = "inference"):
    """Run the network on a batch of row vectors.

    Returns the (B, out_dim) activations in inference mode, or
    (activations, ForwardCache) in train mode. Train mode uses batch
    statistics in every BN layer (and updates the running statistics in
    place); inference mode uses the stored running statistics.
    """
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(
            f"inputs must be (batch, {params.in_dim}), got {x.shape}"
        )
    train = mode == "train"
    if train and x.shape[0] < 2:
        raise ValueError("train mode requires batch size >= 2 (BN variance)")
    cache = ForwardCache(mode) if train else None

    for spec, layer in zip(params.specs, params.layers):
        z = x @ layer.weight.T
        z += layer.bias
        if spec.kind == HIDDEN_KIND:
            if train:
                b = z.shape[0]
                mean = z.mean(axis=0)
                z -= mean  # z becomes the centered pre-activation
                var = np.einsum("bf,bf->f", z, z) / b
                layer.bn_running_mean *= BN_MOMENTUM
                layer.bn_running_mean += (1.0 - BN_MOMENTUM) * mean
                layer.bn_running_var *= BN_MOMENTUM
                layer.bn_running_var += (1.0 - BN_MOMENTUM) * var
            else:
                var = layer.bn_running_var
                z -= layer.bn_running_mean
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            z *= inv_std  # z is now xhat
            act = z * layer.bn_scale
            act += layer.bn_shift
            np.maximum(act, 0.0, out=act)
            if train:
                cache.inputs.append(x)
                cache.xhats.append(z)
                cache.inv_stds.append(inv_std)
                cache.post.append(act)
        else:
            act = np.clip(_sigmoid(z), _SIG_CLIP, 1.0 - _SIG_CLIP)
            if train:
                cache.inputs.append(x)
                cache.xhats.append(None)
                cache.inv_stds.append(None)
                cache.post.append(act)
        x = act
    return (x, cache) if train else x


def backward(
    params: NetworkParams, cache: ForwardCache, output_grads: np.ndarray
) -> List[LayerGrads]:
    """Exact gradients of a batched scalar loss w.r.t. every trainable
    parameter, given d(loss)/d(output)."""
    if cache.mode != "train":
        raise ValueError("backward requires a train-mode cache")
    if len(cache.inputs) != len(params.layers):
        raise ValueError("cache does not match the network depth")
    d_out = np.asarray(output_grads, dtype=np.float64)
    if d_out.shape != cache.post[-1].shape:
        raise ValueError(
            f"output grads shape {d_out.shape} != {cache.post[-1].shape}"
        )

    grads: List[Optional[LayerGrads]] = [None] * len(params.layers)
    upstream = d_out
    for li in range(len(params.layers) - 1, -1, -1):
        spec, layer = params.specs[li], params.layers[li]
        x = cache.inputs[li]
        if spec.kind == OUTPUT_KIND:
            out = cache.post[li]
            dz = upstream * out
            dz *= 1.0 - out
            grads[li] = LayerGrads(dz.T @ x, dz.sum(axis=0))
        else:
            act = cache.post[li]
            xhat = cache.xhats[li]
            inv_std = cache.inv_stds[li]
            b = x.shape[0]
            # upstream here is owned by this pass (a previous dz @ W);
            # reuse the buffer in place through dy -> dxhat -> dz.
            dy = upstream
            dy *= act > 0.0
            dshift = dy.sum(axis=0)
            dscale = np.einsum("bf,bf->f", dy, xhat)
            dy *= layer.bn_scale  # now d(xhat)
            t_sum = dy.sum(axis=0)
            t_dot = np.einsum("bf,bf->f", dy, xhat)
            # Gradient through batch mean and population variance:
            # dz = inv/b * (b*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)).
            dz = dy
            dz *= b
            dz -= t_sum
            dz -= xhat * t_dot
            dz *= inv_std / b
            grads[li] = LayerGrads(dz.T @ x, dz.sum(axis=0), dscale, dshift)
        if li > 0:
            upstream = dz @ layer.weight
    return grads  # type: ignore[return-value]


@dataclass
class AdamState:
    m: List[LayerGrads]
    v: List[LayerGrads]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: NetworkParams, lr: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        def zeros_like_layer(spec, layer):
            if spec.kind == HIDDEN_KIND:
                return LayerGrads(
                    np.zeros_like(layer.weight), np.zeros_like(layer.bias),
                    np.zeros_like(layer.bn_scale), np.zeros_like(layer.bn_shift),
                )
            return LayerGrads(np.zeros_like(layer.weight), np.zeros_like(layer.bias))

        m = [zeros_like_layer(s, l) for s, l in zip(params.specs, params.layers)]
        v = [zeros_like_layer(s, l) for s, l in zip(params.specs, params.layers)]
        return cls(m=m, v=v, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(
    params: NetworkParams, grads: Sequence[LayerGrads], state: AdamState
) -> Tuple[NetworkParams, AdamState]:
    """One bias-corrected ADAM update; mutates params and state in place."""
    g_arrays = grad_arrays(grads)
    for g in g_arrays:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient in ADAM step")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    targets = params.trainable_arrays()
    m_arrays = grad_arrays(state.m)
    v_arrays = grad_arrays(state.v)
    for p, g, m, v in zip(targets, g_arrays, m_arrays, v_arrays):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def save_model(path, params: NetworkParams, meta: Optional[dict] = None) -> None:
    """Write a model file.

    Byte layout (little-endian):
      [0:8)    magic b"EPCNETMD"
      [8:12)   format version, uint32
      [12:16)  JSON header length H, uint32
      [16:16+H) UTF-8 JSON header (sorted keys) holding layer specs and
               caller metadata
      then, per layer in order: weight, bias and (hidden layers only)
      bn_scale, bn_shift, bn_running_mean, bn_running_var, all float64.
    """
    header = {
        "format_version": MODEL_VERSION,
        "specs": [
            {"in_dim": s.in_dim, "out_dim": s.out_dim, "kind": s.kind}
            for s in params.specs
        ],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(blob)))
        fh.write(blob)
        for spec, layer in zip(params.specs, params.layers):
            fh.write(layer.weight.astype("<f8", copy=False).tobytes())
            fh.write(layer.bias.astype("<f8", copy=False).tobytes())
            if spec.kind == HIDDEN_KIND:
                fh.write(layer.bn_scale.astype("<f8", copy=False).tobytes())
                fh.write(layer.bn_shift.astype("<f8", copy=False).tobytes())
                fh.write(layer.bn_running_mean.astype("<f8", copy=False).tobytes())
                fh.write(layer.bn_running_var.astype("<f8", copy=False).tobytes())


def load_model(path) -> Tuple[NetworkParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    specs = tuple(
        LayerSpec(s["in_dim"], s["out_dim"], s["kind"]) for s in header["specs"]
    )
    _validate_chain(specs)
    body = memoryview(raw)[16 + hlen :]
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(body[offset : offset + n * 8], dtype="<f8").reshape(shape)
        offset += n * 8
        return arr.copy()

    layers = []
    for spec in specs:
        weight = take((spec.out_dim, spec.in_dim))
        bias = take((spec.out_dim,))
        if spec.kind == HIDDEN_KIND:
            layers.append(
                LayerParams(
                    weight, bias,
                    take((spec.out_dim,)), take((spec.out_dim,)),
                    take((spec.out_dim,)), take((spec.out_dim,)),
                )
            )
        else:
            layers.append(LayerParams(weight, bias))
    if offset != len(body):
        raise ValueError(f"{path}: trailing bytes in model file")
    return NetworkParams(specs, layers), header["meta"]

"""Dense MLP substrate: forward pass, reverse-mode gradients, Adam, and a
binary container format.

Every learned model in the package (policy denoiser, MIL encoder and bag
classifier, guidance classifier) is a :class:`DenseNet`. Inputs may be a
single vector of shape ``(in,)`` or a batch of shape ``(n, in)``.

Container layout (all integers little-endian)::

    b"PPGN"                      magic, 4 bytes
    u32 version                  currently 1
    u32 layer_count
    per layer:
        u32 in_dim, u32 out_dim, u8 activation tag
        f64[out_dim * in_dim]    weights, row-major (out x in)
        f64[out_dim]             biases
    u32 meta_len, meta_len bytes UTF-8 JSON   (metadata; may be "{}")
    u32 array_count
    per array:
        u16 name_len, name bytes UTF-8
        u8 ndim, u32[ndim] shape
        f64[prod(shape)]         row-major data

Activation tags: 0 identity, 1 relu, 2 tanh, 3 sigmoid.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MAGIC = b"PPGN"
FORMAT_VERSION = 1

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")
_TAG = {name: i for i, name in enumerate(ACTIVATIONS)}


class ShapeError(ValueError):
    pass


class TapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, index: int, message: str | None = None):
        self.index = index
        super().__init__(message or f"non-finite gradient in parameter group {index}")


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "identity":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(pre)
    if name == "relu":
        return (pre > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - post * post
    if name == "sigmoid":
        return post * (1.0 - post)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    layers: list[Layer]
    rng_seed: int | None = None
    # bumped on every parameter update so stale tapes can be detected
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("DenseNet needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise ShapeError(
                    f"layer {i} outputs {a.out_dim} but layer {i + 1} expects {b.in_dim}"
                )
        for layer in self.layers:
            if layer.activation not in _TAG:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.out_dim,):
                raise ShapeError("bias shape does not match weight rows")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live parameter arrays."""
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            rng_seed=self.rng_seed,
        )

    def __call__(self, x):
        return forward(self, x)[0]


def init_dense(
    sizes: Sequence[int],
    activations: Sequence[str],
    seed: int,
) -> DenseNet:
    """Glorot-uniform weights, zero biases.

    ``sizes`` lists the widths including input and output, so a net with
    ``len(sizes) - 1`` layers; ``activations`` gives one tag per layer.
    """
    if len(activations) != len(sizes) - 1:
        raise ShapeError("need one activation per layer")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return DenseNet(layers, rng_seed=seed)


@dataclass
class Tape:
    net_id: int
    version: int
    squeeze: bool
    inputs: list[np.ndarray]  # input of each layer, (n, in)
    pre: list[np.ndarray]
    post: list[np.ndarray]


def forward(net: DenseNet, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"expected input dim {net.in_dim}, got shape {x.shape}")
    inputs, pre, post = [], [], []
    h = x
    for layer in net.layers:
        inputs.append(h)
        a = h @ layer.weight.T + layer.bias
        h = _activate(layer.activation, a)
        pre.append(a)
        post.append(h)
    tape = Tape(id(net), net.version, squeeze, inputs, pre, post)
    return (h[0] if squeeze else h), tape


def backward(
    net: DenseNet,
    tape: Tape,
    output_grad,
    preactivation: bool = False,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of ``sum(output * output_grad)``.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned with
    :meth:`DenseNet.parameters`. With ``preactivation=True`` the supplied
    gradient is taken to be with respect to the last layer's pre-activation,
    which is how the sigmoid/softmax cross-entropy losses avoid dividing by
    a saturated derivative.
    """
    if tape.net_id != id(net) or tape.version != net.version:
        raise TapeError("tape was produced by a different or since-updated network")
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != tape.post[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {tape.post[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if not (preactivation and i == len(net.layers) - 1):
            g = g * _activation_grad(layer.activation, tape.pre[i], tape.post[i])
        grads[2 * i] = g.T @ tape.inputs[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.weight
    return grads, (g[0] if tape.squeeze else g)


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """In-place bias-corrected Adam step over parallel lists of arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter, gradient and optimizer-state counts differ")
    for i, (p, g, m) in enumerate(zip(params, grads, state.m)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch in parameter group {i}: {p.shape}, {g.shape}, {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(i)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_step(net: DenseNet, grads: Sequence[np.ndarray], state: OptimizerState):
    """Adam step on a DenseNet. A non-finite gradient raises
    :class:`NonFiniteGradientError` whose ``index`` is the layer index."""
    try:
        adam_update(net.parameters(), grads, state)
    except NonFiniteGradientError as exc:
        layer = exc.index // 2
        raise NonFiniteGradientError(layer, f"non-finite gradient in layer {layer}") from None
    net.version += 1
    return net, state


def finite_diff(fn: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# ---------------------------------------------------------------- container


def dumps(
    layers: Sequence[Layer],
    meta: dict | None = None,
    arrays: dict[str, np.ndarray] | None = None,
) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(layers)))
    for layer in layers:
        buf.write(struct.pack("<IIB", layer.in_dim, layer.out_dim, _TAG[layer.activation]))
        buf.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    arrays = arrays or {}
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[list[Layer], dict, dict[str, np.ndarray]]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ValueError("truncated PPGN container")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise ValueError("not a PPGN container (bad magic)")
    version, n_layers = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported PPGN version {version}")
    layers = []
    for _ in range(n_layers):
        d_in, d_out, tag = struct.unpack("<IIB", take(9))
        w = np.frombuffer(take(8 * d_in * d_out), dtype="<f8").reshape(d_out, d_in).astype(np.float64)
        b = np.frombuffer(take(8 * d_out), dtype="<f8").astype(np.float64)
        layers.append(Layer(w, b, ACTIVATIONS[tag]))
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (n_arrays,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        arrays[name] = arr
    if pos != len(view):
        raise ValueError("trailing bytes after PPGN container")
    return layers, meta, arrays


def save_net(net: DenseNet, path, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(net.layers, meta))


def load_net(path) -> tuple[DenseNet, dict]:
    with open(path, "rb") as fh:
        layers, meta, _ = loads(fh.read())
    return DenseNet(layers), meta

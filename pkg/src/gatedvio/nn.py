"""Layers (linear, 1-d conv, LSTM cell, MLP), initialization, Adam, checkpoints.

All layer forwards take batch-first tensors ([batch, ...]) and record the
computation graph.  LSTM gate order is fixed as (i, f, g, o) along the
stacked 4H axis; checkpoint files carry that convention in their manifest.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .tensor import DomainError, ShapeError, Tensor, record_op

GATE_ORDER = "ifgo"

CHECKPOINT_MAGIC = b"GVCKPT01"


class LinearLayer:
    """y = x @ W.T + b with W of shape [out, in]."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(np.zeros((out_features, in_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def parameters(self, prefix: str = ""):
        out = [(prefix + "weight", self.weight)]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(
            f"linear: input shape {x.shape} does not match [batch, {layer.in_features}]"
        )
    w, b = layer.weight, layer.bias
    data = x.data @ w.data.T
    if b is not None:
        data = data + b.data

    def backward(g, x=x, w=w, b=b):
        if x._needs_grad():
            x._add_grad(g @ w.data)
        if w._needs_grad():
            w._add_grad(g.T @ x.data)
        if b is not None and b._needs_grad():
            b._add_grad(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return record_op(data, parents, backward, "linear")


class Conv1dLayer:
    """Cross-correlation 1-d convolution (no kernel flip), kernels [out_ch, in_ch, k]."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.kernels = Tensor(np.zeros((out_channels, in_channels, kernel_size)),
                              requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def out_length(self, length: int) -> int:
        return (length + 2 * self.padding - self.kernel_size) // self.stride + 1

    def parameters(self, prefix: str = ""):
        return [(prefix + "kernels", self.kernels), (prefix + "bias", self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d_forward(self, x)


def conv1d_forward(layer: Conv1dLayer, x: Tensor) -> Tensor:
    if x.data.ndim != 3 or x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"conv1d: input shape {x.shape} does not match [batch, {layer.in_channels}, len]"
        )
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    length = x.shape[2]
    if length + 2 * p < k:
        raise ShapeError(f"conv1d: input length {length} + 2*{p} padding is shorter than kernel {k}")
    out_len = layer.out_length(length)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p))) if p else x.data

    kern, bias = layer.kernels, layer.bias
    out = np.zeros((x.shape[0], layer.out_channels, out_len))
    for kk in range(k):
        seg = xp[:, :, kk : kk + s * out_len : s]
        out += np.einsum("oc,bcl->bol", kern.data[:, :, kk], seg)
    out += bias.data[None, :, None]

    def backward(g, x=x, kern=kern, bias=bias, xp_shape=xp.shape, k=k, s=s, p=p, out_len=out_len):
        need_x = x._needs_grad()
        need_k = kern._needs_grad()
        gxp = np.zeros(xp_shape) if need_x else None
        xpad = np.pad(x.data, ((0, 0), (0, 0), (p, p))) if p else x.data
        for kk in range(k):
            sl = np.s_[:, :, kk : kk + s * out_len : s]
            if need_k:
                gk = np.einsum("bol,bcl->oc", g, xpad[sl])
                if kern.grad is None:
                    kern.grad = np.zeros_like(kern.data)
                kern.grad[:, :, kk] += gk
            if need_x:
                gxp[sl] += np.einsum("oc,bol->bcl", kern.data[:, :, kk], g)
        if need_x:
            x._add_grad(gxp[:, :, p : gxp.shape[2] - p] if p else gxp)
        if bias._needs_grad():
            bias._add_grad(g.sum(axis=(0, 2)))

    return record_op(out, (x, kern, bias), backward, "conv1d")


class LstmCell:
    """Single LSTM cell; weights stacked along gates in (i, f, g, o) order.

    input weights  [4H, in], recurrent weights [4H, H], bias [4H].
    """

    def __init__(self, input_size: int, hidden_size: int):
        self.input_size = input_size
        self.hidden_size = hidden_size
        h = hidden_size
        self.w_input = Tensor(np.zeros((4 * h, input_size)), requires_grad=True)
        self.w_hidden = Tensor(np.zeros((4 * h, h)), requires_grad=True)
        self.bias = Tensor(np.zeros(4 * h), requires_grad=True)

    def parameters(self, prefix: str = ""):
        return [(prefix + "w_input", self.w_input),
                (prefix + "w_hidden", self.w_hidden),
                (prefix + "bias", self.bias)]


def _affine(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    data = x.data @ w.data.T
    if b is not None:
        data = data + b.data

    def backward(g, x=x, w=w, b=b):
        if x._needs_grad():
            x._add_grad(g @ w.data)
        if w._needs_grad():
            w._add_grad(g.T @ x.data)
        if b is not None and b._needs_grad():
            b._add_grad(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return record_op(data, parents, backward, "affine")


def lstm_step(cell: LstmCell, x: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One LSTM update; returns (h, c)."""
    hs = cell.hidden_size
    if x.data.ndim != 2 or x.shape[1] != cell.input_size:
        raise ShapeError(f"lstm: input shape {x.shape} does not match [batch, {cell.input_size}]")
    if h_prev.shape != (x.shape[0], hs) or c_prev.shape != (x.shape[0], hs):
        raise ShapeError(
            f"lstm: state shapes {h_prev.shape}/{c_prev.shape} do not match [batch, {hs}]"
        )
    pre = _affine(x, cell.w_input, cell.bias) + _affine(h_prev, cell.w_hidden, None)
    i = pre.slice(1, 0, hs).sigmoid()
    f = pre.slice(1, hs, 2 * hs).sigmoid()
    g = pre.slice(1, 2 * hs, 3 * hs).tanh()
    o = pre.slice(1, 3 * hs, 4 * hs).sigmoid()
    c = f * c_prev + i * g
    h = o * c.tanh()
    return h, c


class Mlp:
    """Linear stack with ReLU between layers (none after the last)."""

    def __init__(self, dims):
        if len(dims) < 2:
            raise ValueError("mlp needs at least input and output dims")
        self.dims = tuple(dims)
        self.layers = [LinearLayer(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def parameters(self, prefix: str = ""):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.parameters(f"{prefix}l{i}."))
        return out

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


# -- initialization ----------------------------------------------------------


def init_params(layer, rng: np.random.Generator):
    """Initialize a layer in place.

    Linear / conv weights: Xavier-uniform.  LSTM input weights:
    Xavier-uniform per gate; recurrent weights uniform +-1/sqrt(H).
    Biases zero except the LSTM forget-gate block, set to 1.
    """
    if isinstance(layer, LinearLayer):
        bound = np.sqrt(6.0 / (layer.in_features + layer.out_features))
        layer.weight.data[...] = rng.uniform(-bound, bound, layer.weight.shape)
        if layer.bias is not None:
            layer.bias.data[...] = 0.0
    elif isinstance(layer, Conv1dLayer):
        fan_in = layer.in_channels * layer.kernel_size
        fan_out = layer.out_channels * layer.kernel_size
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layer.kernels.data[...] = rng.uniform(-bound, bound, layer.kernels.shape)
        layer.bias.data[...] = 0.0
    elif isinstance(layer, LstmCell):
        h = layer.hidden_size
        bound = np.sqrt(6.0 / (layer.input_size + h))
        layer.w_input.data[...] = rng.uniform(-bound, bound, layer.w_input.shape)
        layer.w_hidden.data[...] = rng.uniform(-1.0 / np.sqrt(h), 1.0 / np.sqrt(h),
                                               layer.w_hidden.shape)
        layer.bias.data[...] = 0.0
        layer.bias.data[h : 2 * h] = 1.0  # forget gate
    elif isinstance(layer, Mlp):
        for sub in layer.layers:
            init_params(sub, rng)
    else:
        raise TypeError(f"no initializer for {type(layer).__name__}")
    return layer


# -- optimizer ---------------------------------------------------------------


class Adam:
    """Adam with bias correction over a fixed list of (name, tensor) parameters."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.u = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if np.any(np.isnan(g)):
                raise DomainError(f"adam: NaN gradient for parameter {name!r}")
            m = self.m[name]
            u = self.u[name]
            m *= b1
            m += (1.0 - b1) * g
            u *= b2
            u += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** self.t)
            u_hat = u / (1.0 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(u_hat) + self.eps)


def adam_step(opt: Adam):
    opt.step()


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- checkpoint i/o ----------------------------------------------------------
#
# Byte layout: 8-byte magic "GVCKPT01", uint32 little-endian header length,
# UTF-8 JSON header, then each parameter's float64 little-endian bytes
# concatenated in header order.  Header: {"version": 1, "gate_order": "ifgo",
# "params": [{"name", "shape", "sha256"}...], "extra": {...}}.


def save_checkpoint(path, named_params, extra: dict | None = None):
    entries = []
    blobs = []
    for name, p in named_params:
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({
            "name": name,
            "shape": list(p.data.shape),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs.append(raw)
    header = {
        "version": 1,
        "gate_order": GATE_ORDER,
        "params": entries,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Returns ({name: array}, extra_dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        if header.get("gate_order") != GATE_ORDER:
            raise ValueError(f"unexpected gate order {header.get('gate_order')!r}")
        arrays = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"truncated checkpoint: parameter {entry['name']!r}")
            if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
                raise ValueError(f"checksum mismatch for parameter {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return arrays, header.get("extra", {})

"""Small 3D convolutional encoder with hand-written backpropagation.

Five stride-2 convolutions (kernel 3, padding 1) halve the grid each time
while the channel count doubles from 4, then two 100-unit fully connected
layers feed a linear head with 11 outputs per primitive::

    [dims logits (3), quaternion raw (4), translation logits (3), existence logit (1)]

Everything runs in float64 on numpy.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geom import QUAT_NORM_EPS, Assembly
from .loss import ParamGradients
from .stochastic import logit, sigmoid

HEAD_SIZE = 11
CKPT_MAGIC = b"CAE1"
INIT_DIMS = 0.05
INIT_PROB = 0.9


def conv_out_size(n: int) -> int:
    return (n + 2 - 3) // 2 + 1


class EncoderNet:
    """Weights plus shape metadata; ``params`` preserves declaration order."""

    def __init__(self, n_prims: int, in_res: int = 32, n_conv: int = 5,
                 base_channels: int = 4, fc_units: int = 100, n_fc: int = 2):
        self.n_prims = n_prims
        self.in_res = in_res
        self.n_conv = n_conv
        self.base_channels = base_channels
        self.fc_units = fc_units
        self.n_fc = n_fc
        self.channels = [1] + [base_channels * 2 ** i for i in range(n_conv)]
        sizes = [in_res]
        for _ in range(n_conv):
            sizes.append(conv_out_size(sizes[-1]))
        self.spatial = sizes
        self.params: dict[str, np.ndarray] = {}
        for i in range(n_conv):
            self.params[f"conv{i + 1}.w"] = np.zeros((self.channels[i + 1], self.channels[i], 3, 3, 3))
            self.params[f"conv{i + 1}.b"] = np.zeros(self.channels[i + 1])
        width = self.channels[-1] * sizes[-1] ** 3
        for j in range(n_fc):
            self.params[f"fc{j + 1}.w"] = np.zeros((fc_units, width))
            self.params[f"fc{j + 1}.b"] = np.zeros(fc_units)
            width = fc_units
        self.params["head.w"] = np.zeros((n_prims * HEAD_SIZE, width))
        self.params["head.b"] = np.zeros(n_prims * HEAD_SIZE)

    @property
    def head_size(self) -> int:
        return self.n_prims * HEAD_SIZE

    def copy(self) -> EncoderNet:
        other = EncoderNet(self.n_prims, self.in_res, self.n_conv, self.base_channels,
                           self.fc_units, self.n_fc)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


# -- layers -----------------------------------------------------------------

def _conv_forward(x, w, b):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))[:, :, ::2, ::2, ::2]
    out = np.einsum("bcdhwijk,ocijk->bodhw", win, w, optimize=True)
    return out + b[None, :, None, None, None], win


def _conv_backward(dout, win, w, in_shape):
    dw = np.einsum("bcdhwijk,bodhw->ocijk", win, dout, optimize=True)
    db = dout.sum(axis=(0, 2, 3, 4))
    dwin = np.einsum("bodhw,ocijk->bcdhwijk", dout, w, optimize=True)
    bsz, c, d, h, wd = in_shape
    dxp = np.zeros((bsz, c, d + 2, h + 2, wd + 2))
    do, ho, wo = dout.shape[2:]
    for i in range(3):
        for j in range(3):
            for k in range(3):
                dxp[:, :, i:i + 2 * do - 1:2, j:j + 2 * ho - 1:2, k:k + 2 * wo - 1:2] += dwin[..., i, j, k]
    return dxp[:, :, 1:-1, 1:-1, 1:-1], dw, db


def forward(net: EncoderNet, grid):
    """Raw head outputs ``(B, M*11)`` and the activation cache for backprop.

    ``grid`` is one occupancy grid ``(R, R, R)`` or a batch ``(B, R, R, R)``.
    """
    x = np.asarray(grid, dtype=float)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != (net.in_res,) * 3:
        raise ValueError(f"expected {net.in_res}^3 input, got {x.shape[1:]}")
    x = x[:, None]
    cache = {"conv": [], "fc": [], "batch": x.shape[0]}
    for i in range(net.n_conv):
        pre, win = _conv_forward(x, net.params[f"conv{i + 1}.w"], net.params[f"conv{i + 1}.b"])
        cache["conv"].append((win, x.shape, pre > 0))
        x = np.maximum(pre, 0.0)
    cache["flat_shape"] = x.shape
    h = x.reshape(x.shape[0], -1)
    for j in range(net.n_fc):
        pre = h @ net.params[f"fc{j + 1}.w"].T + net.params[f"fc{j + 1}.b"]
        cache["fc"].append((h, pre > 0))
        h = np.maximum(pre, 0.0)
    cache["head_in"] = h
    return h @ net.params["head.w"].T + net.params["head.b"], cache


def backward(net: EncoderNet, cache, d_heads):
    """Parameter gradients (same keys as ``net.params``) and the input gradient."""
    d_heads = np.atleast_2d(np.asarray(d_heads, dtype=float))
    grads = {}
    h = cache["head_in"]
    grads["head.w"] = d_heads.T @ h
    grads["head.b"] = d_heads.sum(0)
    dh = d_heads @ net.params["head.w"]
    for j in reversed(range(net.n_fc)):
        h_in, active = cache["fc"][j]
        dpre = dh * active
        grads[f"fc{j + 1}.w"] = dpre.T @ h_in
        grads[f"fc{j + 1}.b"] = dpre.sum(0)
        dh = dpre @ net.params[f"fc{j + 1}.w"]
    dx = dh.reshape(cache["flat_shape"])
    for i in reversed(range(net.n_conv)):
        win, in_shape, active = cache["conv"][i]
        dx, dw, db = _conv_backward(dx * active, win, net.params[f"conv{i + 1}.w"], in_shape)
        grads[f"conv{i + 1}.w"] = dw
        grads[f"conv{i + 1}.b"] = db
    ordered = {k: grads[k] for k in net.params}
    return ordered, dx[:, 0]


# -- head decoding ----------------------------------------------------------

def decode_heads(raw) -> tuple[Assembly, np.ndarray]:
    """Map one raw head vector to an :class:`Assembly` and existence logits."""
    r = np.asarray(raw, dtype=float).reshape(-1, HEAD_SIZE)
    quat = r[:, 3:7]
    if np.any(np.linalg.norm(quat, axis=1) < QUAT_NORM_EPS):
        raise ValueError("zero-norm quaternion in head output")
    logits = r[:, 10].copy()
    asm = Assembly(0.5 * sigmoid(r[:, 0:3]), quat.copy(), 0.5 * np.tanh(r[:, 7:10]), sigmoid(logits))
    return asm, logits


def decode_backward(raw, grads: ParamGradients, logit_grad=None) -> np.ndarray:
    """Chain decoded-parameter gradients back to the raw head vector."""
    r = np.asarray(raw, dtype=float).reshape(-1, HEAD_SIZE)
    out = np.zeros_like(r)
    s = sigmoid(r[:, 0:3])
    out[:, 0:3] = grads.d_dims * 0.5 * s * (1 - s)
    out[:, 3:7] = grads.d_quat
    t = np.tanh(r[:, 7:10])
    out[:, 7:10] = grads.d_trans * 0.5 * (1 - t * t)
    if logit_grad is not None:
        out[:, 10] = logit_grad
    return out.ravel()


# -- initialization ---------------------------------------------------------

def init_weights(net: EncoderNet, seed, head_scale: float = 0.01, trans_spread: float = 0.3) -> EncoderNet:
    """He-normal trunk; head biased toward small cubes with existence 0.9.

    Head weights are drawn small so the biases dominate at initialization;
    translation biases are spread uniformly over ``[-trans_spread, trans_spread]``.
    """
    rng = np.random.default_rng(seed)
    for name, w in net.params.items():
        if name.endswith(".b"):
            net.params[name] = np.zeros_like(w)
            continue
        fan_in = int(np.prod(w.shape[1:]))
        std = np.sqrt(2.0 / fan_in)
        if name == "head.w":
            std *= head_scale
        net.params[name] = rng.normal(0.0, std, size=w.shape)
    b = np.zeros((net.n_prims, HEAD_SIZE))
    b[:, 0:3] = logit(2.0 * INIT_DIMS)
    b[:, 3] = 1.0
    b[:, 7:10] = np.arctanh(2.0 * rng.uniform(-trans_spread, trans_spread, size=(net.n_prims, 3)))
    b[:, 10] = logit(INIT_PROB)
    net.params["head.b"] = b.ravel()
    return net


# -- checkpoint -------------------------------------------------------------

def save_checkpoint(net: EncoderNet, path) -> None:
    """``CAE1``, M, input resolution, per-array dims, then little-endian f64 weights."""
    parts = [CKPT_MAGIC, struct.pack("<3I", net.n_prims, net.in_res, len(net.params))]
    for w in net.params.values():
        parts.append(struct.pack(f"<I{w.ndim}I", w.ndim, *w.shape))
    for w in net.params.values():
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> EncoderNet:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a CAE1 checkpoint")
    m, in_res, n_arrays = struct.unpack_from("<3I", data, 4)
    off = 16
    shapes = []
    for _ in range(n_arrays):
        (nd,) = struct.unpack_from("<I", data, off)
        shapes.append(tuple(struct.unpack_from(f"<{nd}I", data, off + 4)))
        off += 4 + 4 * nd
    conv_w = [s for s in shapes if len(s) == 5]
    fc_w = [s for s in shapes if len(s) == 2]
    net = EncoderNet(m, in_res, len(conv_w), conv_w[0][0] if conv_w else 4,
                     fc_w[0][0] if len(fc_w) > 1 else 100, len(fc_w) - 1)
    if [tuple(w.shape) for w in net.params.values()] != shapes:
        raise ValueError(f"{path}: layer shapes do not describe a supported encoder")
    for name, shape in zip(net.params, shapes):
        count = int(np.prod(shape))
        net.params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(float)
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{path}: checkpoint size mismatch")
    return net

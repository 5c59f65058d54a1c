"""
Layer descriptors shared by victims and generators.

A network is a list of plain dicts (JSON-serializable, so they double as the
architecture descriptor stored in checkpoints) plus a flat name -> Tensor
parameter map.  ``init_params`` fills the map, ``run`` evaluates it.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


def conv(cin: int, cout: int, k: int = 3, stride: int = 1, pad: int | None = None) -> dict:
    return {"type": "conv", "in": cin, "out": cout, "k": k, "stride": stride, "pad": k // 2 if pad is None else pad}


def dense(din: int, dout: int) -> dict:
    return {"type": "dense", "in": din, "out": dout}


def res(ch: int, k: int = 3) -> dict:
    return {"type": "res", "ch": ch, "k": k}


RELU = {"type": "relu"}
TANH = {"type": "tanh"}
FLATTEN = {"type": "flatten"}
UPSAMPLE = {"type": "upsample"}


def layer_param_count(layer: dict) -> int:
    kind = layer["type"]
    if kind == "conv":
        return layer["out"] * layer["in"] * layer["k"] ** 2 + layer["out"]
    if kind == "dense":
        return layer["in"] * layer["out"] + layer["out"]
    if kind == "res":
        return 2 * (layer["ch"] * layer["ch"] * layer["k"] ** 2 + layer["ch"])
    return 0


def param_count(layers: list[dict]) -> int:
    """Closed-form parameter count of a layer list."""
    return int(np.sum([layer_param_count(layer) for layer in layers], dtype=np.int64))


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def init_params(layers: list[dict], rng: np.random.Generator, prefix: str = "") -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for i, layer in enumerate(layers):
        kind, name = layer["type"], f"{prefix}{i}"
        if kind == "conv":
            fan = layer["in"] * layer["k"] ** 2
            params[f"{name}.w"] = _he(rng, (layer["out"], layer["in"], layer["k"], layer["k"]), fan)
            params[f"{name}.b"] = Tensor(np.zeros(layer["out"]), requires_grad=True)
        elif kind == "dense":
            params[f"{name}.w"] = _he(rng, (layer["in"], layer["out"]), layer["in"])
            params[f"{name}.b"] = Tensor(np.zeros(layer["out"]), requires_grad=True)
        elif kind == "res":
            ch, k = layer["ch"], layer["k"]
            # second conv starts small so each block begins near the identity
            params[f"{name}.w1"] = _he(rng, (ch, ch, k, k), ch * k * k)
            params[f"{name}.b1"] = Tensor(np.zeros(ch), requires_grad=True)
            params[f"{name}.w2"] = _he(rng, (ch, ch, k, k), ch * k * k, gain=0.1)
            params[f"{name}.b2"] = Tensor(np.zeros(ch), requires_grad=True)
    return params


def run(layers: list[dict], params: dict[str, Tensor], x: Tensor, prefix: str = "") -> Tensor:
    for i, layer in enumerate(layers):
        kind, name = layer["type"], f"{prefix}{i}"
        if kind == "conv":
            x = T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=layer["stride"], padding=layer["pad"])
        elif kind == "dense":
            x = T.add(T.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])
        elif kind == "res":
            pad = layer["k"] // 2
            h = T.relu(T.conv2d(x, params[f"{name}.w1"], params[f"{name}.b1"], padding=pad))
            h = T.conv2d(h, params[f"{name}.w2"], params[f"{name}.b2"], padding=pad)
            x = T.add(x, h)
        elif kind == "relu":
            x = T.relu(x)
        elif kind == "tanh":
            x = T.tanh(x)
        elif kind == "flatten":
            x = T.reshape(x, (x.shape[0], -1))
        elif kind == "upsample":
            x = T.upsample2x_nearest(x)
        else:
            raise ValueError(f"unknown layer type {kind!r}")
    return x


def output_shape(layers: list[dict], in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape (without batch axis) produced by ``layers`` on ``in_shape``."""
    shape = tuple(in_shape)
    for layer in layers:
        kind = layer["type"]
        if kind == "conv":
            if shape[0] != layer["in"]:
                raise T.ShapeError(f"conv expects {layer['in']} channels, got {shape[0]}")
            h = T.conv_output_size(shape[1], layer["k"], layer["stride"], layer["pad"])
            w = T.conv_output_size(shape[2], layer["k"], layer["stride"], layer["pad"])
            shape = (layer["out"], h, w)
        elif kind == "dense":
            if shape != (layer["in"],):
                raise T.ShapeError(f"dense expects ({layer['in']},), got {shape}")
            shape = (layer["out"],)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "upsample":
            shape = (shape[0], shape[1] * 2, shape[2] * 2)
        elif kind == "res" and shape[0] != layer["ch"]:
            raise T.ShapeError(f"residual block expects {layer['ch']} channels, got {shape[0]}")
    return shape


def checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()

"""Feed-forward convnet descriptor extractor (inference only).

Activations are kept HxWxC. Convolution is cross-correlation; conv kernels
are stored (out, k, k, in) so a flattened window lines up with a flattened
kernel row. The fully connected layer flattens its input row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeMismatch
from .geom_align import AlignedFace
from .store import Record, Role, read_records, write_records

DESCRIPTOR_DIM = 320
INPUT_SHAPE = (100, 100, 3)


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class FullyConnected:
    out_dim: int


def parse_layer(text: str):
    """Parse one layer line, e.g. ``conv 32 3 1 1``, ``maxpool 2 2``, ``relu``, ``fc 320``."""
    parts = text.split()
    if not parts:
        raise ValueError("empty layer description")
    kind, args = parts[0].lower(), parts[1:]
    try:
        nums = [int(a) for a in args]
    except ValueError:
        raise ValueError(f"non-integer argument in layer {text!r}") from None
    if kind == "conv" and len(nums) in (2, 3, 4):
        return Conv(*nums)
    if kind in ("maxpool", "pool") and len(nums) == 2:
        return MaxPool(*nums)
    if kind == "relu" and not nums:
        return ReLU()
    if kind in ("fc", "fully_connected") and len(nums) == 1:
        return FullyConnected(*nums)
    raise ValueError(f"cannot parse layer {text!r}")


def format_layer(layer) -> str:
    if isinstance(layer, Conv):
        return f"conv {layer.out_channels} {layer.kernel} {layer.stride} {layer.pad}"
    if isinstance(layer, MaxPool):
        return f"maxpool {layer.kernel} {layer.stride}"
    if isinstance(layer, ReLU):
        return "relu"
    return f"fc {layer.out_dim}"


def _conv_block(c1, c2):
    return ["conv %d 3 1 1" % c1, "relu", "conv %d 3 1 1" % c2, "relu", "maxpool 2 2"]


# 10 conv / 5 pool / 1 fc, 100x100x3 -> 320. Channel widths follow the usual
# paired-3x3 face descriptor layout; per-layer values live in config so they
# can be replaced.
REFERENCE_LAYERS = (
    _conv_block(32, 64)
    + _conv_block(64, 128)
    + _conv_block(96, 192)
    + _conv_block(128, 256)
    + _conv_block(160, 320)
    + ["fc 320"]
)


@dataclass(frozen=True)
class NetSpec:
    layers: tuple

    @classmethod
    def from_lines(cls, lines) -> "NetSpec":
        return cls(tuple(parse_layer(s) for s in lines))

    def lines(self) -> list:
        return [format_layer(layer) for layer in self.layers]

    def counts(self) -> dict:
        return {
            "conv": sum(isinstance(x, Conv) for x in self.layers),
            "pool": sum(isinstance(x, MaxPool) for x in self.layers),
            "fc": sum(isinstance(x, FullyConnected) for x in self.layers),
            "relu": sum(isinstance(x, ReLU) for x in self.layers),
        }


def reference_spec() -> NetSpec:
    return NetSpec.from_lines(REFERENCE_LAYERS)


def _layer_name(i, layer) -> str:
    return f"layer {i} ({format_layer(layer)})"


def validate_spec(spec: NetSpec, input_shape=INPUT_SHAPE) -> list:
    """Shape after every layer; ShapeMismatch names the first bad layer.

    ``input_shape`` is (H, W, C) or a 1-tuple for a flat vector input.
    """
    shape = tuple(int(s) for s in input_shape)
    trace = []
    for i, layer in enumerate(spec.layers):
        name = _layer_name(i, layer)
        if isinstance(layer, FullyConnected):
            if layer.out_dim <= 0:
                raise ShapeMismatch(f"{name}: out_dim must be positive", layer=i)
            shape = (layer.out_dim,)
        elif isinstance(layer, ReLU):
            pass
        else:
            if len(shape) != 3:
                raise ShapeMismatch(f"{name}: needs an HxWxC input, got {shape}", layer=i)
            h, w, c = shape
            if isinstance(layer, Conv):
                if layer.out_channels <= 0 or layer.kernel <= 0 or layer.stride <= 0 or layer.pad < 0:
                    raise ShapeMismatch(f"{name}: invalid hyperparameters", layer=i)
                oh = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                ow = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
                oc = layer.out_channels
            else:
                if layer.kernel <= 0 or layer.stride <= 0:
                    raise ShapeMismatch(f"{name}: invalid hyperparameters", layer=i)
                oh = (h - layer.kernel) // layer.stride + 1
                ow = (w - layer.kernel) // layer.stride + 1
                oc = c
            if h + 2 * getattr(layer, "pad", 0) < layer.kernel or oh <= 0 or ow <= 0:
                raise ShapeMismatch(f"{name}: kernel {layer.kernel} does not fit input {shape}", layer=i)
            shape = (oh, ow, oc)
        trace.append(shape)
    return trace


def weight_shapes(spec: NetSpec, input_shape=INPUT_SHAPE) -> list:
    """(weight_shape, bias_shape) for every parametric layer, in order."""
    shapes = []
    prev = tuple(input_shape)
    for layer, out in zip(spec.layers, validate_spec(spec, input_shape)):
        if isinstance(layer, Conv):
            shapes.append(((layer.out_channels, layer.kernel, layer.kernel, prev[2]), (layer.out_channels,)))
        elif isinstance(layer, FullyConnected):
            shapes.append(((layer.out_dim, int(np.prod(prev))), (layer.out_dim,)))
        prev = out
    return shapes


@dataclass
class Network:
    spec: NetSpec
    params: list  # [(weight, bias), ...] per parametric layer
    input_shape: tuple = INPUT_SHAPE

    def __post_init__(self):
        expected = weight_shapes(self.spec, self.input_shape)
        if len(expected) != len(self.params):
            raise ShapeMismatch(f"net spec has {len(expected)} parametric layers, weights have {len(self.params)}")
        fixed = []
        p_iter = iter(range(len(self.params)))
        for i, layer in enumerate(self.spec.layers):
            if not isinstance(layer, (Conv, FullyConnected)):
                continue
            j = next(p_iter)
            (ws, bs), (w, b) = expected[j], self.params[j]
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64).ravel()
            if w.size != int(np.prod(ws)) or b.shape != bs:
                raise ShapeMismatch(
                    f"{_layer_name(i, layer)}: weights {w.shape}/{b.shape} do not match {ws}/{bs}", layer=i
                )
            w = w.reshape(ws)
            w.setflags(write=False)
            b.setflags(write=False)
            fixed.append((w, b))
        self.params = fixed

    @classmethod
    def zeros(cls, spec, input_shape=INPUT_SHAPE):
        return cls(spec, [(np.zeros(w), np.zeros(b)) for w, b in weight_shapes(spec, input_shape)], input_shape)

    @classmethod
    def random(cls, spec, rng, input_shape=INPUT_SHAPE, bias=True):
        """He-style random init; used for tests and synthetic runs."""
        params = []
        for ws, bs in weight_shapes(spec, input_shape):
            fan_in = int(np.prod(ws[1:]))
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=ws)
            b = rng.normal(0.0, 0.01, size=bs) if bias else np.zeros(bs)
            params.append((w, b))
        return cls(spec, params, input_shape)

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != tuple(self.input_shape):
            raise ShapeMismatch(f"input shape {x.shape} != {tuple(self.input_shape)}")
        params = iter(self.params)
        for layer in self.spec.layers:
            if isinstance(layer, Conv):
                w, b = next(params)
                x = conv2d(x, w, b, layer.stride, layer.pad)
            elif isinstance(layer, MaxPool):
                x = maxpool2d(x, layer.kernel, layer.stride)
            elif isinstance(layer, ReLU):
                x = np.maximum(x, 0.0)
            else:
                w, b = next(params)
                x = w @ x.ravel() + b
        return x


def conv2d(x, w, b, stride=1, pad=0) -> np.ndarray:
    """x: HxWxC, w: (O, k, k, C) -> H'xW'xO."""
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    k = w.shape[1]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(0, 1))[::stride, ::stride]
    # win: (H', W', C, k, k)
    oh, ow = win.shape[:2]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(oh * ow, -1)
    return (cols @ w.reshape(w.shape[0], -1).T + b).reshape(oh, ow, w.shape[0])


def maxpool2d(x, kernel, stride) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(0, 1))[::stride, ::stride]
    return win.max(axis=(3, 4))


@dataclass(frozen=True)
class Descriptor:
    values: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("descriptor has non-finite entries")


def forward(net: Network, face) -> Descriptor:
    if isinstance(face, AlignedFace):
        return Descriptor(net.forward(face.pixels), face.source_id)
    return Descriptor(net.forward(face))


def save_weights(net_or_params, path) -> None:
    """Two records per parametric layer: weight (rows = outputs) then bias (1 x outputs)."""
    params = net_or_params.params if isinstance(net_or_params, Network) else net_or_params
    records = []
    for w, b in params:
        w = np.asarray(w)
        records.append(Record(Role.WEIGHTS, w.reshape(w.shape[0], -1)))
        records.append(Record(Role.WEIGHTS, np.asarray(b).reshape(1, -1)))
    write_records(path, records)


def load_weights(path, spec: NetSpec | None = None, input_shape=INPUT_SHAPE):
    """Returns raw (weight, bias) pairs, or a Network when ``spec`` is given."""
    records = read_records(path, Role.WEIGHTS)
    if len(records) % 2:
        raise FormatError("weights file must hold an even number of records (weight, bias pairs)")
    params = [(records[i].data, records[i + 1].data.ravel()) for i in range(0, len(records), 2)]
    if spec is None:
        return params
    try:
        return Network(spec, params, input_shape)
    except ShapeMismatch as exc:
        raise FormatError(f"weights do not match net spec: {exc}") from exc

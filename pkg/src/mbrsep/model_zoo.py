"""Layer-graph descriptions of MBR-FCN, FCN, U-Net and DNN, and their execution.

A :class:`ModelSpec` is an ordered list of :class:`LayerSpec` nodes; each node
names the nodes it reads from, so branches (one per frequency band) and merges
(frequency or channel concatenation) are explicit.  The same description
drives shape inference, parameter counting, initialisation, the forward pass
and the backward pass.

Parameter counting convention: a (transposed) convolution contributes
``out * in * kt * kf + out`` and a dense layer ``in * out + out``; a batch
normalisation with affine parameters contributes 4 per channel (gamma, beta
and the two moving statistics).  Under this convention the builders reproduce
the published totals exactly:

========  ==========  =====================================
model     total       breakdown
========  ==========  =====================================
DNN       4,206,600   4 x (1025*1025 + 1025)
FCN       3,789,506   3,789,406 conv + 4*25 batch norm
U-Net     4,532,631   4,532,531 conv + 4*25 batch norm
MBR-FCN   747,733     747,313 conv + 4*(25+55+25) batch norm
========  ==========  =====================================

The totals only come out this way with batch normalisation after every
filter set of MBR-FCN layers 1-3 and after layer 1 alone in FCN/U-Net, which
is how the builders place it.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dsp_pipeline import N_BINS, BandSpec, default_bands
from .tensor_engine import (BatchNormState, ConvParams, EngineError, batchnorm_backward, batchnorm_forward,
                            check_finite, conv2d_backward, conv2d_forward_cached, conv2d_transpose_backward,
                            conv2d_transpose_forward_cached, dense_backward, dense_forward, output_size, relu,
                            relu_backward, transpose_output_size)

PATCH_FRAMES = 29

# (filters, (kernel_time, kernel_freq)) per band a..e
MBR_FCN_SETS = {
    1: [(7, (15, 11)), (7, (13, 18)), (5, (11, 33)), (3, (9, 51)), (3, (7, 101))],
    2: [(15, (15, 7)), (15, (13, 11)), (13, (11, 19)), (6, (9, 25)), (6, (7, 51))],
    3: [(5, (15, 131))] * 5,
}
FCN_LAYERS = [(25, (11, 42)), (55, (11, 22)), (25, (15, 131))]
HEAD = (1, (PATCH_FRAMES, N_BINS))

MODEL_NAMES = {"mbr-fcn": "MBR-FCN", "fcn": "FCN", "unet": "U-Net", "dnn": "DNN"}

KINDS = ("input", "slice", "conv", "conv_t", "batchnorm", "relu", "concat_freq", "concat_channel", "dense")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    conv: Optional[ConvParams] = None
    band: Optional[BandSpec] = None
    units: Optional[tuple[int, int]] = None  # dense (in, out)
    channels: int = 0  # batch norm
    bn_affine: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        needs = {"conv": "conv", "conv_t": "conv", "slice": "band", "dense": "units"}
        if self.kind in needs and getattr(self, needs[self.kind]) is None:
            raise ValueError(f"layer {self.name}: kind {self.kind} needs `{needs[self.kind]}`")
        if self.kind == "batchnorm" and self.channels < 1:
            raise ValueError(f"layer {self.name}: batch norm needs a channel count")
        n_in = len(self.inputs)
        if self.kind == "input" and n_in:
            raise ValueError("input layer takes no inputs")
        if self.kind.startswith("concat") and n_in < 2:
            raise ValueError(f"layer {self.name}: concatenation needs >= 2 inputs")
        if self.kind not in ("input", "concat_freq", "concat_channel") and n_in != 1:
            raise ValueError(f"layer {self.name}: {self.kind} takes exactly one input")

    def to_json(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "inputs": list(self.inputs)}
        if self.conv is not None:
            d["conv"] = self.conv.__dict__.copy()
        if self.band is not None:
            d["band"] = self.band.__dict__.copy()
        if self.units is not None:
            d["units"] = list(self.units)
        if self.kind == "batchnorm":
            d["channels"] = self.channels
            d["bn_affine"] = self.bn_affine
        return d


@dataclass
class ModelSpec:
    name: str
    frames: int
    bins: int
    layers: list[LayerSpec]
    depth: int = 2
    bands: list[BandSpec] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for layer in self.layers:
            if layer.name in seen:
                raise ValueError(f"duplicate layer name {layer.name}")
            missing = [i for i in layer.inputs if i not in seen]
            if missing:
                raise ValueError(f"layer {layer.name} reads {missing} before they are defined")
            seen.add(layer.name)
        if not self.layers or self.layers[0].kind != "input":
            raise ValueError("first layer must be the input")
        shapes = self.shapes()
        out = shapes[self.output]
        if out != (1, self.frames, self.bins):
            raise ValueError(f"{self.name}: output shape {out} != input shape {(1, self.frames, self.bins)}")

    @property
    def output(self) -> str:
        return self.layers[-1].name

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.bins,) if self.name == "DNN" else (self.frames, self.bins)

    @property
    def band_count(self) -> int:
        return len(self.bands)

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def shapes(self) -> dict[str, tuple[int, int, int]]:
        """(channels, time, freq) of every node's output."""
        out: dict[str, tuple[int, int, int]] = {}
        for layer in self.layers:
            ins = [out[i] for i in layer.inputs]
            try:
                out[layer.name] = _infer_shape(layer, ins, (1, self.frames, self.bins))
            except EngineError as exc:
                raise ValueError(f"{self.name}/{layer.name}: {exc}") from exc
        return out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            c = layer.conv
            if layer.kind == "conv":
                shapes[f"{layer.name}/W"] = (c.out_channels, c.in_channels) + c.kernel
            elif layer.kind == "conv_t":
                shapes[f"{layer.name}/W"] = (c.in_channels, c.out_channels) + c.kernel
            elif layer.kind == "dense":
                shapes[f"{layer.name}/W"] = (layer.units[1], layer.units[0])
            if layer.kind in ("conv", "conv_t") and c.use_bias:
                shapes[f"{layer.name}/b"] = (c.out_channels,)
            if layer.kind == "dense":
                shapes[f"{layer.name}/b"] = (layer.units[1],)
        return shapes

    def to_json(self) -> dict:
        return {"name": self.name, "frames": self.frames, "bins": self.bins, "depth": self.depth,
                "bands": [b.__dict__.copy() for b in self.bands],
                "layers": [layer.to_json() for layer in self.layers]}

    def digest(self) -> bytes:
        """32-byte SHA-256 of the canonical JSON description."""
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).digest()


def _infer_shape(layer: LayerSpec, ins, input_shape):
    if layer.kind == "input":
        return input_shape
    if layer.kind == "slice":
        c, t, f = ins[0]
        if layer.band.bin_to > f:
            raise EngineError(f"band [{layer.band.bin_from}, {layer.band.bin_to}) exceeds width {f}")
        return (c, t, layer.band.width)
    if layer.kind in ("conv", "conv_t"):
        c, t, f = ins[0]
        p = layer.conv
        if c != p.in_channels:
            raise EngineError(f"channel axis: got {c}, expects {p.in_channels}")
        size = output_size if layer.kind == "conv" else transpose_output_size
        return (p.out_channels, size(t, p.kernel_time, p.stride_time, p.padding),
                size(f, p.kernel_freq, p.stride_freq, p.padding))
    if layer.kind == "batchnorm":
        if ins[0][0] != layer.channels:
            raise EngineError(f"channel axis: got {ins[0][0]}, batch norm has {layer.channels}")
        return ins[0]
    if layer.kind == "relu":
        return ins[0]
    if layer.kind == "dense":
        c, t, f = ins[0]
        if f != layer.units[0]:
            raise EngineError(f"frequency axis: got {f}, dense expects {layer.units[0]}")
        return (c, t, layer.units[1])
    if layer.kind == "concat_freq":
        if len({(c, t) for c, t, _ in ins}) != 1:
            raise EngineError(f"frequency concatenation needs equal channels/time, got {ins}")
        return (ins[0][0], ins[0][1], sum(f for _, _, f in ins))
    if layer.kind == "concat_channel":
        if len({(t, f) for _, t, f in ins}) != 1:
            raise EngineError(f"channel concatenation needs equal time/freq, got {ins}")
        return (sum(c for c, _, _ in ins), ins[0][1], ins[0][2])
    raise EngineError(f"unknown kind {layer.kind}")


# ---------------------------------------------------------------------------
# builders


class _Graph:
    def __init__(self):
        self.layers = [LayerSpec("input", "input")]

    def add(self, name, kind, src, **kw) -> str:
        inputs = tuple(src) if isinstance(src, (list, tuple)) else (src,)
        self.layers.append(LayerSpec(name, kind, inputs, **kw))
        return name

    def conv(self, name, src, filters, kernel, in_ch, stride=(1, 1), transpose=False) -> str:
        params = ConvParams(filters, in_ch, kernel[0], kernel[1], stride[0], stride[1], "same")
        return self.add(name, "conv_t" if transpose else "conv", src, conv=params)

    def bn(self, name, src, channels) -> str:
        return self.add(name, "batchnorm", src, channels=channels)


def build_mbr_fcn(bands: Optional[Sequence[BandSpec]] = None, frames: int = PATCH_FRAMES, bins: int = N_BINS,
                  sets: Optional[dict] = None, head: Optional[tuple] = None) -> ModelSpec:
    """Multi-band multi-resolution FCN.

    Each band branch runs slice -> conv1 -> BN -> ReLU -> conv2 -> BN -> ReLU
    -> conv_t3 -> BN -> ReLU; the branch outputs are concatenated along
    frequency and a transposed convolution maps them to one output channel,
    followed by ReLU.  A band's frequency stride is applied on its first
    convolution only.
    """
    bands = list(bands) if bands is not None else default_bands()
    sets = sets or MBR_FCN_SETS
    head = head or (1, (frames, bins))
    for layer_no in (1, 2, 3):
        if len(sets[layer_no]) != len(bands):
            raise ValueError(f"layer {layer_no} has {len(sets[layer_no])} filter sets for {len(bands)} bands")
    width = sum(b.strided_width for b in bands)
    if width != bins:
        raise ValueError(f"band widths after striding sum to {width}, but the concatenation must be {bins} wide")
    g = _Graph()
    outs = []
    for i, band in enumerate(bands):
        n = band.name
        x = g.add(f"{n}/slice", "slice", "input", band=band)
        in_ch = 1
        for layer_no in (1, 2, 3):
            filters, kernel = sets[layer_no][i]
            stride = (1, band.stride_freq) if layer_no == 1 else (1, 1)
            kind = "convt" if layer_no == 3 else "conv"
            x = g.conv(f"{n}/{kind}{layer_no}", x, filters, kernel, in_ch, stride, transpose=layer_no == 3)
            x = g.bn(f"{n}/bn{layer_no}", x, filters)
            x = g.add(f"{n}/relu{layer_no}", "relu", x)
            in_ch = filters
        outs.append(x)
    x = g.add("concat", "concat_freq", outs)
    x = g.conv("convt4", x, head[0], head[1], sets[3][0][0], transpose=True)
    g.add("relu4", "relu", x)
    return ModelSpec("MBR-FCN", frames, bins, g.layers, depth=2, bands=bands)


def _fcn_like(name: str, skip: bool, frames: int, bins: int, layers, head, bn_layers) -> ModelSpec:
    g = _Graph()
    x = "input"
    in_ch = 1
    layer1 = None
    for i, (filters, kernel) in enumerate(layers, start=1):
        x = g.conv(f"{'convt' if i == 3 else 'conv'}{i}", x, filters, kernel, in_ch, transpose=i == 3)
        if i in bn_layers:
            x = g.bn(f"bn{i}", x, filters)
        x = g.add(f"relu{i}", "relu", x)
        in_ch = filters
        if i == 1:
            layer1 = x
    if skip:
        x = g.add("skip", "concat_channel", [layer1, x])
        in_ch += layers[0][0]
    x = g.conv("convt4", x, head[0], head[1], in_ch, transpose=True)
    g.add("relu4", "relu", x)
    return ModelSpec(name, frames, bins, g.layers, depth=2)


def build_fcn(frames: int = PATCH_FRAMES, bins: int = N_BINS, layers=None, head=None,
              bn_layers=(1,)) -> ModelSpec:
    """conv1 -> BN -> ReLU -> conv2 -> ReLU -> conv_t3 -> ReLU -> conv_t4 -> ReLU."""
    return _fcn_like("FCN", False, frames, bins, layers or FCN_LAYERS, head or (1, (frames, bins)), bn_layers)


def build_unet(frames: int = PATCH_FRAMES, bins: int = N_BINS, layers=None, head=None,
               bn_layers=(1,)) -> ModelSpec:
    """FCN with layer 1's output concatenated (channels) onto layer 3's before the head."""
    return _fcn_like("U-Net", True, frames, bins, layers or FCN_LAYERS, head or (1, (frames, bins)), bn_layers)


def build_dnn(bins: int = N_BINS, n_layers: int = 4, frames: int = PATCH_FRAMES) -> ModelSpec:
    """``n_layers`` dense ``bins -> bins`` layers with ReLU, applied to each frame.

    Four weight matrices (three hidden layers plus the output layer) is the
    only depth consistent with the published parameter total.
    """
    g = _Graph()
    x = "input"
    for i in range(1, n_layers + 1):
        x = g.add(f"dense{i}", "dense", x, units=(bins, bins))
        x = g.add(f"relu{i}", "relu", x)
    return ModelSpec("DNN", frames, bins, g.layers, depth=n_layers)


def build(name: str) -> ModelSpec:
    key = name.lower().replace("_", "-")
    builders = {"mbr-fcn": build_mbr_fcn, "mbrfcn": build_mbr_fcn, "fcn": build_fcn,
                "unet": build_unet, "u-net": build_unet, "dnn": build_dnn}
    if key not in builders:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    return builders[key]()


def small_bands() -> list[BandSpec]:
    """Five overlapped bands on a 41-bin spectrogram; concatenated width 41."""
    return [BandSpec("a", 0, 8), BandSpec("b", 5, 15), BandSpec("c", 12, 23),
            BandSpec("d", 21, 27), BandSpec("e", 23, 41, stride_freq=3)]


def build_small(name: str, frames: int = 9, bins: int = 41) -> ModelSpec:
    """Same topology as the full models with tiny kernels, for finite-difference checks."""
    key = name.lower()
    if key == "mbr-fcn":
        sets = {1: [(3, (5, 3)), (3, (4, 4)), (2, (3, 5)), (2, (3, 6)), (2, (2, 7))],
                2: [(4, (5, 3)), (3, (4, 4)), (3, (3, 5)), (2, (3, 5)), (2, (2, 5))],
                3: [(2, (5, 7))] * 5}
        return build_mbr_fcn(small_bands(), frames, bins, sets, (1, (frames, bins)))
    layers = [(4, (3, 6)), (5, (3, 4)), (4, (5, 7))]
    if key == "fcn":
        return build_fcn(frames, bins, layers)
    if key == "unet":
        return build_unet(frames, bins, layers)
    if key == "dnn":
        return build_dnn(bins, frames=frames)
    raise ValueError(name)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParamReport:
    per_layer: dict[str, int]
    total: int
    trainable: int
    statistics: int


def count_params(spec: ModelSpec) -> ParamReport:
    per_layer = {}
    trainable = statistics = 0
    for layer in spec.layers:
        if layer.kind in ("conv", "conv_t"):
            n = layer.conv.n_params
            trainable += n
        elif layer.kind == "dense":
            i, o = layer.units
            n = i * o + o
            trainable += n
        elif layer.kind == "batchnorm":
            state = BatchNormState(layer.channels, affine=layer.bn_affine)
            n = state.n_params
            trainable += state.n_trainable
            statistics += n - state.n_trainable
        else:
            continue
        per_layer[layer.name] = n
    return ParamReport(per_layer, trainable + statistics, trainable, statistics)


@dataclass
class WeightSet:
    """Trainable tensors keyed ``<layer>/W`` and ``<layer>/b``, plus batch-norm states."""

    params: dict[str, np.ndarray]
    bn: dict[str, BatchNormState]
    seed: int = 0

    def trainables(self) -> dict[str, np.ndarray]:
        """All trainable arrays by name; batch-norm gamma/beta are the live state arrays."""
        out = dict(self.params)
        for name, state in self.bn.items():
            if state.affine:
                out[f"{name}/gamma"] = state.gamma
                out[f"{name}/beta"] = state.beta
        return out

    def astype(self, dtype=None) -> "WeightSet":
        """Deep copy, optionally casting the trainable tensors."""
        def cast(a):
            return None if a is None else a.astype(dtype or a.dtype)

        bn = {k: BatchNormState(s.channels, s.affine, s.momentum, s.epsilon, cast(s.gamma), cast(s.beta),
                                s.moving_mean.copy(), s.moving_var.copy()) for k, s in self.bn.items()}
        return WeightSet({k: cast(v) for k, v in self.params.items()}, bn, self.seed)

    def copy(self) -> "WeightSet":
        return self.astype()


def fan_in(spec: ModelSpec, layer: LayerSpec) -> int:
    if layer.kind == "dense":
        return layer.units[0]
    c = layer.conv
    return c.in_channels * c.kernel_time * c.kernel_freq


def init_weights(spec: ModelSpec, seed: int = 0, dtype=np.float32, bn_momentum: float = 0.99,
                 bn_epsilon: float = 1e-3) -> WeightSet:
    """He-uniform weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases, unit BN scale."""
    rng = np.random.default_rng(seed)
    shapes = spec.param_shapes()
    params = {}
    bn = {}
    for layer in spec.layers:
        if layer.kind in ("conv", "conv_t", "dense"):
            limit = np.sqrt(6.0 / fan_in(spec, layer))
            key = f"{layer.name}/W"
            params[key] = rng.uniform(-limit, limit, size=shapes[key]).astype(dtype)
            if f"{layer.name}/b" in shapes:
                params[f"{layer.name}/b"] = np.zeros(shapes[f"{layer.name}/b"], dtype=dtype)
        elif layer.kind == "batchnorm":
            bn[layer.name] = BatchNormState(layer.channels, layer.bn_affine, bn_momentum, bn_epsilon,
                                            np.ones(layer.channels, dtype) if layer.bn_affine else None,
                                            np.zeros(layer.channels, dtype) if layer.bn_affine else None)
    return WeightSet(params, bn, seed)


def zero_weights(spec: ModelSpec, dtype=np.float32) -> WeightSet:
    ws = init_weights(spec, 0, dtype)
    for v in ws.params.values():
        v[...] = 0
    return ws


# ---------------------------------------------------------------------------
# execution


@dataclass
class Trace:
    """Activations and per-layer caches of one forward pass."""

    acts: dict[str, np.ndarray]
    caches: dict[str, object]
    mode: str


def forward(spec: ModelSpec, weights: WeightSet, x: np.ndarray, mode: str = "train"):
    """Run the graph on ``x`` of shape (batch, 1, frames, bins).

    Returns ``(output, trace)``; pass the trace to :func:`backward`.  In
    ``"train"`` mode batch-norm layers use batch statistics and update their
    moving averages.
    """
    if x.ndim != 4 or x.shape[1:] != (1, spec.frames, spec.bins):
        raise EngineError(f"{spec.name}/input: expected (batch, 1, {spec.frames}, {spec.bins}), got {x.shape}")
    acts: dict[str, np.ndarray] = {}
    caches: dict[str, object] = {}
    p = weights.params
    for layer in spec.layers:
        name = layer.name
        ins = [acts[i] for i in layer.inputs]
        try:
            if layer.kind == "input":
                out = x
            elif layer.kind == "slice":
                out = ins[0][..., layer.band.bin_from:layer.band.bin_to]
            elif layer.kind == "conv":
                out, caches[name] = conv2d_forward_cached(ins[0], p[f"{name}/W"], p.get(f"{name}/b"), layer.conv)
            elif layer.kind == "conv_t":
                out, caches[name] = conv2d_transpose_forward_cached(ins[0], p[f"{name}/W"], p.get(f"{name}/b"),
                                                                    layer.conv)
            elif layer.kind == "batchnorm":
                out, caches[name] = batchnorm_forward(ins[0], weights.bn[name], mode)
            elif layer.kind == "relu":
                out = relu(ins[0])
            elif layer.kind == "dense":
                out = dense_forward(ins[0], p[f"{name}/W"], p.get(f"{name}/b"))
            elif layer.kind == "concat_freq":
                out = np.concatenate(ins, axis=3)
            elif layer.kind == "concat_channel":
                out = np.concatenate(ins, axis=1)
        except EngineError as exc:
            raise EngineError(f"{spec.name}/{name}: {exc}") from exc
        acts[name] = out
    y = check_finite(acts[spec.output], f"{spec.name} forward")
    return y, Trace(acts, caches, mode)


def _needs_grad(spec: ModelSpec, input_grad: bool) -> set[str]:
    """Nodes whose output gradient must be propagated further back."""
    depends = {}
    for layer in spec.layers:
        own = layer.kind in ("conv", "conv_t", "dense", "batchnorm")
        depends[layer.name] = own or (layer.kind == "input" and input_grad) or any(
            depends[i] for i in layer.inputs)
    return {k for k, v in depends.items() if v}


def backward(spec: ModelSpec, weights: WeightSet, trace: Trace, grad_out: np.ndarray,
             input_grad: bool = False) -> dict[str, np.ndarray]:
    """Gradients of every trainable tensor (and ``"input"`` if requested).

    Gradients flowing into a node from several consumers are summed in
    reverse graph order, which is fixed, so the result is deterministic.
    """
    live = _needs_grad(spec, input_grad)
    acts = trace.acts
    grads: dict[str, np.ndarray] = {}
    g_act: dict[str, np.ndarray] = {spec.output: grad_out}
    p = weights.params

    def push(name, g):
        if name not in live:
            return
        if name in g_act:
            g_act[name] = g_act[name] + g
        else:
            g_act[name] = g

    for layer in reversed(spec.layers):
        name = layer.name
        g = g_act.pop(name, None)
        if g is None:
            continue
        if layer.kind == "input":
            grads["input"] = g
            continue
        src = layer.inputs
        need_in = any(s in live for s in src)
        if layer.kind == "slice":
            full = np.zeros_like(acts[src[0]])
            full[..., layer.band.bin_from:layer.band.bin_to] = g
            push(src[0], full)
        elif layer.kind in ("conv", "conv_t"):
            fn = conv2d_backward if layer.kind == "conv" else conv2d_transpose_backward
            gx, gw, gb = fn(g, acts[src[0]], p[f"{name}/W"], layer.conv, trace.caches[name], need_input=need_in)
            grads[f"{name}/W"] = gw
            if gb is not None:
                grads[f"{name}/b"] = gb
            if need_in:
                push(src[0], gx)
        elif layer.kind == "batchnorm":
            gx, gg, gbeta = batchnorm_backward(g, trace.caches[name], weights.bn[name])
            if gg is not None:
                grads[f"{name}/gamma"] = gg
                grads[f"{name}/beta"] = gbeta
            push(src[0], gx)
        elif layer.kind == "relu":
            push(src[0], relu_backward(g, acts[src[0]]))
        elif layer.kind == "dense":
            gx, gw, gb = dense_backward(g, acts[src[0]], p[f"{name}/W"])
            grads[f"{name}/W"] = gw
            grads[f"{name}/b"] = gb
            push(src[0], gx)
        elif layer.kind in ("concat_freq", "concat_channel"):
            axis = 3 if layer.kind == "concat_freq" else 1
            edges = np.cumsum([acts[s].shape[axis] for s in src])[:-1]
            for s, part in zip(src, np.split(g, edges, axis=axis)):
                push(s, part)
    return grads


def predict(spec: ModelSpec, weights: WeightSet, patches: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Inference-mode forward over (n, frames, bins) patches, in batches."""
    dtype = next(iter(weights.params.values())).dtype
    out = np.empty_like(patches, dtype=dtype)
    for i in range(0, len(patches), batch_size):
        xb = patches[i:i + batch_size, None].astype(dtype)
        out[i:i + batch_size] = forward(spec, weights, xb, "infer")[0][:, 0]
    return out


# ---------------------------------------------------------------------------
# reporting


def describe(spec: ModelSpec) -> list[dict]:
    """One row per layer: kind, filters, kernel, stride, shapes and parameter count."""
    shapes = spec.shapes()
    counts = count_params(spec).per_layer
    rows = []
    for layer in spec.layers:
        c = layer.conv
        rows.append({
            "layer": layer.name,
            "kind": layer.kind,
            "filters": c.out_channels if c else (layer.units[1] if layer.units else None),
            "kernel": c.kernel if c else None,
            "stride": c.stride if c else None,
            "in": tuple(shapes[i] for i in layer.inputs),
            "out": shapes[layer.name],
            "params": counts.get(layer.name, 0),
        })
    return rows


def format_summary(spec: ModelSpec) -> str:
    lines = [f"model {spec.name}  input {spec.input_shape}  (frames={spec.frames}, bins={spec.bins})", ""]
    header = f"{'layer':<12} {'kind':<15} {'filters':>7} {'kernel':>11} {'stride':>7} {'out shape':>16} {'params':>10}"
    lines += [header, "-" * len(header)]
    for r in describe(spec):
        kernel = f"({r['kernel'][0]},{r['kernel'][1]})" if r["kernel"] else ""
        stride = f"{r['stride'][0]},{r['stride'][1]}" if r["stride"] else ""
        filters = "" if r["filters"] is None else str(r["filters"])
        out = "x".join(str(v) for v in r["out"])
        lines.append(f"{r['layer']:<12} {r['kind']:<15} {filters:>7} {kernel:>11} {stride:>7} {out:>16} "
                     f"{r['params']:>10,}")
    rep = count_params(spec)
    lines += ["", f"trainable {rep.trainable:,}  statistics {rep.statistics:,}", f"total {rep.total:,}"]
    if spec.bands:
        lines += ["", "band  from    to  from_hz  to_hz  stride"]
        for b in spec.bands:
            lo, hi = b.hz()
            lines.append(f"{b.name:<4} {b.bin_from:>5} {b.bin_to:>5} {round(lo):>8} {round(hi):>6}  stride {b.stride_freq}")
        lines.append(f"concatenated width {sum(b.strided_width for b in spec.bands)}")
    return "\n".join(lines)

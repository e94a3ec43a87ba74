"""Residual video networks built from per-frame 2-D layers.

A network is a flat list of :class:`LayerSpec`. Residual blocks nest their
branch and optional projection layers. Every block branch starts with an
``stsm`` layer when shifting is enabled. The head does global spatial
averaging, then temporal averaging, then a linear classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import functional as F
from .errors import ConfigError, FormatError, ShapeError
from .shift import (
    ShiftSpec,
    apply_stsm,
    build_shift_spec,
    format_pattern,
    parse_fraction,
    parse_pattern,
    parse_spec_text,
)
from .tensor import as_tensor, check_dims, load_tensor, save_tensor

CONV_KERNELS = (1, 3, 7)
STRIDES = (1, 2)
LEARNABLE = ("conv2d", "batchnorm", "linear")


@dataclass
class LayerSpec:
    kind: str
    name: str
    attrs: dict = field(default_factory=dict)
    inner: list["LayerSpec"] = field(default_factory=list)
    projection: list["LayerSpec"] = field(default_factory=list)


def conv_layer(name, out_ch, k, stride=1, pad=None, bias=True):
    if k not in CONV_KERNELS:
        raise ConfigError(f"{name}: kernel size {k} not in {CONV_KERNELS}")
    if stride not in STRIDES:
        raise ConfigError(f"{name}: stride {stride} not in {STRIDES}")
    pad = k // 2 if pad is None else pad
    return LayerSpec("conv2d", name, dict(out_ch=out_ch, k=k, stride=stride, pad=pad, bias=bias))


def bn_layer(name, eps=1e-5, momentum=0.1):
    return LayerSpec("batchnorm", name, dict(eps=eps, momentum=momentum))


def relu_layer(name):
    return LayerSpec("relu", name)


def maxpool_layer(name, k, stride, pad=0):
    if stride not in STRIDES:
        raise ConfigError(f"{name}: stride {stride} not in {STRIDES}")
    return LayerSpec("maxpool2d", name, dict(k=k, stride=stride, pad=pad))


def stsm_layer(name, spec: ShiftSpec):
    return LayerSpec("stsm", name, dict(spec=spec))


def linear_layer(name, out_features):
    return LayerSpec("linear", name, dict(out_features=out_features))


def residual_layer(name, inner, projection=()):
    return LayerSpec("residual", name, inner=list(inner), projection=list(projection))


def iter_leaves(layers):
    for layer in layers:
        if layer.kind == "residual":
            yield from iter_leaves(layer.inner)
            yield from iter_leaves(layer.projection)
        else:
            yield layer


# ---------------------------------------------------------------- shapes


def layer_out_dims(layer: LayerSpec, dims):
    """Output dims of ``layer`` for input ``dims``; raises ShapeError on mismatch."""
    kind, a = layer.kind, layer.attrs
    if kind == "linear":
        return (dims[0], a["out_features"])
    N, C, T, H, W = dims
    if kind == "conv2d":
        Ho = F.conv_out_size(H, a["k"], a["stride"], a["pad"])
        Wo = F.conv_out_size(W, a["k"], a["stride"], a["pad"])
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"{layer.name}: spatial size {H}x{W} too small")
        return (N, a["out_ch"], T, Ho, Wo)
    if kind == "maxpool2d":
        Ho = F.conv_out_size(H, a["k"], a["stride"], a["pad"])
        Wo = F.conv_out_size(W, a["k"], a["stride"], a["pad"])
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"{layer.name}: spatial size {H}x{W} too small")
        return (N, C, T, Ho, Wo)
    if kind in ("batchnorm", "relu"):
        return dims
    if kind == "stsm":
        if a["spec"].channels != C:
            raise ShapeError(f"{layer.name}: shift spec for C={a['spec'].channels}, input C={C}")
        return dims
    if kind == "avgpool_hw":
        return (N, C, T, 1, 1)
    if kind == "avgpool_t":
        return (N, C, 1, H, W)
    if kind == "residual":
        inner = walk_dims(layer.inner, dims)
        skip = walk_dims(layer.projection, dims)
        if inner != skip:
            raise ShapeError(f"{layer.name}: branch {inner} cannot add to skip {skip}")
        return inner
    raise ConfigError(f"unknown layer kind {kind!r}")


def walk_dims(layers, dims):
    for layer in layers:
        dims = layer_out_dims(layer, dims)
    return tuple(dims)


def param_shapes(layer: LayerSpec, in_channels: int) -> dict:
    kind, a = layer.kind, layer.attrs
    if kind == "conv2d":
        shapes = {"weight": (a["out_ch"], in_channels, a["k"], a["k"])}
        if a["bias"]:
            shapes["bias"] = (a["out_ch"],)
        return shapes
    if kind == "batchnorm":
        return {"weight": (in_channels,), "bias": (in_channels,)}
    if kind == "linear":
        return {"weight": (a["out_features"], in_channels), "bias": (a["out_features"],)}
    return {}


# ---------------------------------------------------------------- params


@dataclass
class ParamStore:
    """Learnable tensors keyed by layer name, plus batchnorm running statistics
    and SGD momentum buffers. Shift layers never get an entry."""

    shapes: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)

    def count(self, layer: str | None = None) -> int:
        names = [layer] if layer is not None else list(self.shapes)
        return sum(math.prod(s) for n in names for s in self.shapes.get(n, {}).values())

    def items(self):
        for layer, group in self.tensors.items():
            for pname, value in group.items():
                yield layer, pname, value

    def copy(self) -> "ParamStore":
        def dup(d):
            return {k: {p: v.copy() for p, v in g.items()} for k, g in d.items()}

        return ParamStore(dict(self.shapes), dup(self.tensors), dup(self.buffers), dup(self.velocity))


def _register(layers, channels, store: ParamStore, rng):
    for layer in layers:
        if layer.kind == "residual":
            out_ch = _register(layer.inner, channels, store, rng)
            _register(layer.projection, channels, store, rng)
            channels = out_ch
            continue
        shapes = param_shapes(layer, channels)
        if shapes:
            if layer.name in store.shapes:
                raise ConfigError(f"duplicate layer name {layer.name!r}")
            store.shapes[layer.name] = shapes
            if rng is not None:
                store.tensors[layer.name] = _init_params(layer, shapes, rng)
                if layer.kind == "batchnorm":
                    store.buffers[layer.name] = {
                        "running_mean": np.zeros(channels),
                        "running_var": np.ones(channels),
                    }
        if layer.kind == "conv2d":
            channels = layer.attrs["out_ch"]
        elif layer.kind == "linear":
            channels = layer.attrs["out_features"]
    return channels


def _init_params(layer, shapes, rng):
    if layer.kind == "batchnorm":
        return {"weight": np.ones(shapes["weight"]), "bias": np.zeros(shapes["bias"])}
    wshape = shapes["weight"]
    fan_in = math.prod(wshape[1:])
    bound = math.sqrt(6.0 / fan_in)
    out = {"weight": rng.uniform(-bound, bound, size=wshape)}
    if "bias" in shapes:
        out["bias"] = np.zeros(shapes["bias"])
    return out


# ---------------------------------------------------------------- networks


@dataclass(frozen=True)
class NetworkConfig:
    stages: tuple = (2, 2)
    base_channels: int = 16
    num_classes: int = 4
    in_channels: int = 1
    block: str = "basic"
    stem_kernel: int = 3
    stem_stride: int = 2
    pool_kernel: int = 2
    pool_stride: int = 2
    pool_pad: int = 0
    expansion: int = 4

    def validate(self):
        if self.block not in ("basic", "bottleneck"):
            raise ConfigError(f"block must be basic or bottleneck, got {self.block!r}")
        if any(int(n) < 0 for n in self.stages):
            raise ConfigError("blocks per stage must be >= 0")
        for name in ("base_channels", "num_classes", "in_channels", "expansion"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.stem_kernel not in CONV_KERNELS:
            raise ConfigError(f"stem_kernel must be one of {CONV_KERNELS}")
        if self.stem_stride not in STRIDES or self.pool_stride not in STRIDES:
            raise ConfigError(f"strides must be one of {STRIDES}")
        if self.pool_kernel < 1 or self.pool_pad < 0:
            raise ConfigError("bad pool geometry")


PRESETS = {
    "stem-only": NetworkConfig(stages=(), base_channels=16),
    "micro": NetworkConfig(stages=(1,), base_channels=8, stem_stride=1),
    "tiny": NetworkConfig(stages=(2, 2), base_channels=16),
    "small": NetworkConfig(stages=(1, 1, 1), base_channels=16),
    "resnet18": NetworkConfig(
        stages=(2, 2, 2, 2), base_channels=64, num_classes=400, in_channels=3,
        stem_kernel=7, stem_stride=2, pool_kernel=3, pool_stride=2, pool_pad=1,
    ),
    "resnet50": NetworkConfig(
        stages=(3, 4, 6, 3), base_channels=64, num_classes=400, in_channels=3, block="bottleneck",
        stem_kernel=7, stem_stride=2, pool_kernel=3, pool_stride=2, pool_pad=1,
    ),
}


def preset(name: str, **overrides) -> NetworkConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown network preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


@dataclass
class LayerGraph:
    config: NetworkConfig
    shift: tuple | None
    layers: list
    params: ParamStore

    def leaves(self):
        return list(iter_leaves(self.layers))


def _coerce_shift(shift):
    if shift is None:
        return None
    if isinstance(shift, str):
        return parse_spec_text(shift)
    pattern, fraction = shift
    if isinstance(pattern, str):
        pattern = parse_pattern(pattern)
    return tuple(pattern), parse_fraction(fraction)


def _block(prefix, in_ch, mid, out_ch, stride, kind, shift):
    inner = []
    if shift is not None:
        inner.append(stsm_layer(f"{prefix}.stsm", build_shift_spec(in_ch, *shift)))
    if kind == "basic":
        inner += [
            conv_layer(f"{prefix}.conv1", mid, 3, stride, bias=False),
            bn_layer(f"{prefix}.bn1"),
            relu_layer(f"{prefix}.relu1"),
            conv_layer(f"{prefix}.conv2", out_ch, 3, 1, bias=False),
            bn_layer(f"{prefix}.bn2"),
        ]
    else:
        inner += [
            conv_layer(f"{prefix}.conv1", mid, 1, 1, bias=False),
            bn_layer(f"{prefix}.bn1"),
            relu_layer(f"{prefix}.relu1"),
            conv_layer(f"{prefix}.conv2", mid, 3, stride, bias=False),
            bn_layer(f"{prefix}.bn2"),
            relu_layer(f"{prefix}.relu2"),
            conv_layer(f"{prefix}.conv3", out_ch, 1, 1, bias=False),
            bn_layer(f"{prefix}.bn3"),
        ]
    projection = []
    if stride != 1 or in_ch != out_ch:
        projection = [
            conv_layer(f"{prefix}.proj", out_ch, 1, stride, bias=False),
            bn_layer(f"{prefix}.proj_bn"),
        ]
    return residual_layer(prefix, inner, projection)


def build_layers(cfg: NetworkConfig, shift=None) -> list:
    cfg.validate()
    shift = _coerce_shift(shift)
    c = cfg.base_channels
    layers = [
        conv_layer("stem.conv", c, cfg.stem_kernel, cfg.stem_stride, bias=False),
        bn_layer("stem.bn"),
        relu_layer("stem.relu"),
        maxpool_layer("stem.pool", cfg.pool_kernel, cfg.pool_stride, cfg.pool_pad),
    ]
    for s, blocks in enumerate(cfg.stages):
        mid = cfg.base_channels * 2**s
        out_ch = mid * (cfg.expansion if cfg.block == "bottleneck" else 1)
        for b in range(int(blocks)):
            stride = 2 if (s > 0 and b == 0) else 1
            prefix = f"layer{s + 1}.{b}"
            layers.append(_block(prefix, c, mid, out_ch, stride, cfg.block, shift))
            layers.append(relu_layer(f"{prefix}.out"))
            c = out_ch
    layers += [
        LayerSpec("avgpool_hw", "head.spatial_pool"),
        LayerSpec("avgpool_t", "head.consensus"),
        linear_layer("head.fc", cfg.num_classes),
    ]
    return layers


def build_network(cfg: NetworkConfig, shift=None, seed: int = 0, materialize: bool = True) -> LayerGraph:
    """Assemble the network. ``shift=None`` omits shift layers entirely;
    otherwise every residual branch starts with one (``f=0`` makes them identity)."""
    layers = build_layers(cfg, shift)
    store = ParamStore()
    rng = np.random.default_rng(seed) if materialize else None
    _register(layers, cfg.in_channels, store, rng)
    return LayerGraph(cfg, _coerce_shift(shift), layers, store)


# ---------------------------------------------------------------- forward


def _push(tape, op, inputs, value, layer=None, **saved):
    if tape is None:
        return None
    return tape.push(op, inputs, value, layer, saved)


def run_layer(layer, x, key, store, train=False, tape=None, update_stats=None):
    """Evaluate one layer; returns ``(out, tape_key)``."""
    kind, a = layer.kind, layer.attrs
    if update_stats is None:
        update_stats = train
    if kind == "conv2d":
        p = store.tensors[layer.name]
        out, cache = F.conv2d(x, p["weight"], p.get("bias"), a["stride"], a["pad"])
        return out, _push(tape, "conv2d", (key,), out, layer.name, cache=cache)
    if kind == "batchnorm":
        p = store.tensors[layer.name]
        buf = store.buffers[layer.name]
        if x.shape[1] != p["weight"].shape[0]:
            raise ShapeError(f"{layer.name}: expected C={p['weight'].shape[0]}, got {x.shape[1]}")
        if train:
            out, cache = F.batchnorm_train(x, p["weight"], p["bias"], a["eps"])
            if update_stats:
                m = a["momentum"]
                count = x.size // x.shape[1]
                unbiased = cache[4] * count / max(count - 1, 1)
                buf["running_mean"] = (1 - m) * buf["running_mean"] + m * cache[3]
                buf["running_var"] = (1 - m) * buf["running_var"] + m * unbiased
            return out, _push(tape, "batchnorm_train", (key,), out, layer.name, cache=cache)
        out, cache = F.batchnorm_eval(
            x, p["weight"], p["bias"], buf["running_mean"], buf["running_var"], a["eps"]
        )
        return out, _push(tape, "batchnorm_eval", (key,), out, layer.name, cache=cache)
    if kind == "relu":
        out, mask = F.relu(x)
        return out, _push(tape, "relu", (key,), out, layer.name, mask=mask)
    if kind == "maxpool2d":
        out, cache = F.maxpool2d(x, a["k"], a["stride"], a["pad"])
        return out, _push(tape, "maxpool2d", (key,), out, layer.name, cache=cache)
    if kind == "stsm":
        out = apply_stsm(x, a["spec"])
        return out, _push(tape, "stsm", (key,), out, layer.name, spec=a["spec"])
    if kind == "avgpool_hw":
        out = F.spatial_mean(x)
        return out, _push(tape, "spatial_mean", (key,), out, layer.name, xshape=x.shape)
    if kind == "avgpool_t":
        out = F.temporal_mean(x)
        return out, _push(tape, "temporal_mean", (key,), out, layer.name, xshape=x.shape)
    if kind == "linear":
        p = store.tensors[layer.name]
        out, cache = F.linear(x, p["weight"], p["bias"])
        return out, _push(tape, "linear", (key,), out, layer.name, cache=cache)
    if kind == "residual":
        return forward_block(x, layer, store, train, tape, key, update_stats)
    raise ConfigError(f"unknown layer kind {kind!r}")


def run_layers(layers, x, key, store, train=False, tape=None, update_stats=None):
    for layer in layers:
        x, key = run_layer(layer, x, key, store, train, tape, update_stats)
    return x, key


def forward_block(x, block, store, train=False, tape=None, key=None, update_stats=None):
    """``branch(x) + skip(x)``; skip is the identity unless the block has a projection."""
    branch, bkey = run_layers(block.inner, x, key, store, train, tape, update_stats)
    skip, skey = run_layers(block.projection, x, key, store, train, tape, update_stats)
    if branch.shape != skip.shape:
        raise ShapeError(f"{block.name}: branch {branch.shape} cannot add to skip {skip.shape}")
    out = branch + skip
    return out, _push(tape, "add", (bkey, skey), out, block.name)


def forward_network(graph: LayerGraph, x, train=False, tape=None, update_stats=None):
    """Logits of shape (N, num_classes). With ``tape``, every primitive is recorded."""
    x = as_tensor(x)
    if x.shape[1] != graph.config.in_channels:
        raise ShapeError(f"network expects C={graph.config.in_channels}, input has C={x.shape[1]}")
    key = tape.input(x) if tape is not None else None
    logits, _ = run_layers(graph.layers, x, key, graph.params, train, tape, update_stats)
    return logits


def predict(graph: LayerGraph, x) -> np.ndarray:
    return forward_network(graph, x).argmax(axis=1)


# ---------------------------------------------------------------- costs


@dataclass(frozen=True)
class CostRow:
    name: str
    kind: str
    out_dims: tuple
    macs: int
    params: int


@dataclass
class CostReport:
    rows: list
    input_dims: tuple

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    def text(self, include_stsm: bool = True) -> str:
        lines = [f"input {'x'.join(map(str, self.input_dims))}"]
        lines.append(f"{'layer':<28}{'kind':<12}{'output':<24}{'mult-adds':>16}{'params':>12}")
        for r in self.rows:
            if r.kind == "stsm" and not include_stsm:
                continue
            dims = "x".join(map(str, r.out_dims))
            lines.append(f"{r.name:<28}{r.kind:<12}{dims:<24}{r.macs:>16}{r.params:>12}")
        lines.append(f"{'total':<64}{self.total_macs:>16}{self.total_params:>12}")
        return "\n".join(lines) + "\n"


def _cost_rows(layers, dims, store, rows):
    for layer in layers:
        if layer.kind == "residual":
            out = _cost_rows(layer.inner, dims, store, rows)
            skip = _cost_rows(layer.projection, dims, store, rows)
            if out != skip:
                raise ShapeError(f"{layer.name}: branch {out} cannot add to skip {skip}")
            dims = out
            continue
        out = layer_out_dims(layer, dims)
        macs = 0
        if layer.kind == "conv2d":
            N, O, T, Ho, Wo = out
            k = layer.attrs["k"]
            macs = Ho * Wo * O * dims[1] * k * k * T * N
        elif layer.kind == "linear":
            macs = math.prod(dims[1:]) * out[1] * dims[0]
        rows.append(CostRow(layer.name, layer.kind, out, macs, store.count(layer.name)))
        dims = out
    return dims


def cost_report(graph: LayerGraph, input_dims) -> CostReport:
    """Convolution and linear multiply-adds plus parameter counts, per leaf layer."""
    dims = check_dims(input_dims)
    if dims[1] != graph.config.in_channels:
        raise ShapeError(f"network expects C={graph.config.in_channels}, got input dims {dims}")
    rows = []
    _cost_rows(graph.layers, dims, graph.params, rows)
    return CostReport(rows, dims)


# ---------------------------------------------------------------- checkpoints


def _config_line(graph: LayerGraph) -> str:
    c = graph.config
    fields = [
        f"stages={','.join(map(str, c.stages))}",
        f"base_channels={c.base_channels}",
        f"num_classes={c.num_classes}",
        f"in_channels={c.in_channels}",
        f"block={c.block}",
        f"stem_kernel={c.stem_kernel}",
        f"stem_stride={c.stem_stride}",
        f"pool_kernel={c.pool_kernel}",
        f"pool_stride={c.pool_stride}",
        f"pool_pad={c.pool_pad}",
        f"expansion={c.expansion}",
    ]
    if graph.shift is not None:
        fields.append(f"pattern={format_pattern(graph.shift[0])}")
        fields.append(f"fraction={graph.shift[1]}")
    return "network " + " ".join(fields)


def _layer_line(layer: LayerSpec) -> str:
    attrs = []
    for k, v in layer.attrs.items():
        if k == "spec":
            v = v.text().replace(" ", ",")
        attrs.append(f"{k}={v}")
    return " ".join(["layer", layer.name, layer.kind] + attrs)


def save_checkpoint(graph: LayerGraph, directory) -> None:
    """One tensor file per parameter/buffer plus ``manifest.txt``.

    Tensors of rank < 5 are stored with leading unit dims; the manifest keeps
    the true shape."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# stsm checkpoint v1", _config_line(graph)]
    for layer in graph.leaves():
        lines.append(_layer_line(layer))
    for section, table in (("param", graph.params.tensors), ("buffer", graph.params.buffers)):
        for lname, group in table.items():
            for pname, value in group.items():
                fname = f"{lname}.{pname}.t5"
                save_tensor(directory / fname, value.reshape((1,) * (5 - value.ndim) + value.shape))
                shape = ",".join(map(str, value.shape))
                lines.append(f"{section} {lname} {pname} {fname} shape={shape}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory) -> LayerGraph:
    directory = Path(directory)
    try:
        lines = (directory / "manifest.txt").read_text().splitlines()
    except FileNotFoundError:
        raise FormatError(f"{directory}: no manifest.txt") from None
    net = [ln for ln in lines if ln.startswith("network ")]
    if len(net) != 1:
        raise FormatError(f"{directory}: manifest needs exactly one network line")
    kv = dict(tok.split("=", 1) for tok in net[0].split()[1:])
    try:
        stages = tuple(int(s) for s in kv.pop("stages").split(",") if s)
        shift = None
        if "pattern" in kv:
            shift = (parse_pattern(kv.pop("pattern")), Fraction(kv.pop("fraction")))
        block = kv.pop("block")
        cfg = NetworkConfig(stages=stages, block=block, **{k: int(v) for k, v in kv.items()})
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{directory}: bad network line: {exc}") from None
    graph = build_network(cfg, shift, materialize=False)
    for ln in lines:
        parts = ln.split()
        if not parts or parts[0] not in ("param", "buffer"):
            continue
        section, lname, pname, fname, shape = parts
        shape = tuple(int(s) for s in shape.split("=", 1)[1].split(","))
        value = load_tensor(directory / fname).reshape(shape)
        table = graph.params.tensors if section == "param" else graph.params.buffers
        table.setdefault(lname, {})[pname] = value
    for lname, shapes in graph.params.shapes.items():
        for pname, shape in shapes.items():
            got = graph.params.tensors.get(lname, {}).get(pname)
            if got is None or got.shape != tuple(shape):
                raise FormatError(f"{directory}: missing or misshapen {lname}.{pname}")
    return graph

"""DCNet and 3D UNet builders.

A :class:`Network` is a flat, ordered list of layer descriptors (the
manifest) plus a parameter store keyed by stable names. ``net_forward``
interprets the manifest, so a network rebuilt from its manifest and
parameters reproduces the same outputs bit for bit.

DCNet layout (levels 0..S, extent 32 / 2**level)::

    stem 3x3x3 conv -> [MRGE block -> transition down] * S
    -> concat patch position (3 ch) + 1x1x1 fuse at 1x1x1
    -> [transition up + skip adapter (BN/ReLU/1x1x1) + MRGE block] * S -> BN/ReLU -> 1x1x1 -> softmax
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import OpAttrs, ShapeError, Tape, Tensor, op_forward

N_CLASSES = 4
DEFAULT_DILATIONS = (1, 2, 4, 8, 1)


@dataclass
class DenseNodeConfig:
    bottleneck: int
    growth: int
    dilation: int = 1

    def __post_init__(self):
        if self.bottleneck < 1 or self.growth < 1:
            raise ValueError("dense node channels must be >= 1")
        if self.dilation not in (1, 2, 4, 8):
            raise ValueError(f"dilation must be one of 1, 2, 4, 8, got {self.dilation}")


@dataclass
class MRGEBlockConfig:
    width: int
    bottleneck: int
    dilations: tuple = DEFAULT_DILATIONS

    @property
    def depth(self) -> int:
        return len(self.dilations)

    def nodes(self) -> list[DenseNodeConfig]:
        return [DenseNodeConfig(self.bottleneck, self.width, d) for d in self.dilations]


@dataclass
class DCNetConfig:
    in_channels: int = 1
    stages: int = 5
    widths: tuple = (8, 8, 8, 8, 8, 8)  # one per level 0..stages
    bottlenecks: tuple = (8, 8, 8, 8, 8, 8)
    dilations: tuple = DEFAULT_DILATIONS
    patch: int = 32
    positional_encoding: bool = True
    n_classes: int = N_CLASSES
    # dense connections to cut, as "block:pathway:src>dst" (ablation studies only)
    ablate: tuple = ()

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.bottlenecks = tuple(self.bottlenecks)
        self.dilations = tuple(self.dilations)
        self.ablate = tuple(self.ablate)
        if self.in_channels not in (1, 2):
            raise ValueError("in_channels must be 1 or 2")
        if self.patch < 1 or self.patch & (self.patch - 1):
            raise ValueError(f"patch edge {self.patch} is not a power of two")
        if 2**self.stages != self.patch:
            raise ValueError(f"2**stages ({2**self.stages}) must equal the patch edge ({self.patch})")
        if len(self.widths) != self.stages + 1 or len(self.bottlenecks) != self.stages + 1:
            raise ValueError("widths and bottlenecks need one entry per level (stages + 1)")
        if min(self.widths) < 1 or min(self.bottlenecks) < 1:
            raise ValueError("channel widths must be positive")
        if self.n_classes != N_CLASSES:
            raise ValueError("DCNet predicts exactly 4 classes")
        for d in self.dilations:
            DenseNodeConfig(1, 1, d)


# full-scale widths: 11.8M trainable parameters (C=2); too slow for CPU training
FULL_SCALE_DCNET = dict(
    stages=5,
    widths=(12, 24, 48, 64, 84, 84),
    bottlenecks=(24, 48, 64, 84, 100, 100),
)


@dataclass
class UNetConfig:
    in_channels: int = 1
    stages: int = 3
    base_channels: int = 32
    kernel: int = 3
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.stages < 1 or self.base_channels < 1:
            raise ValueError("UNet needs >= 1 stage and positive channel count")
        if self.n_classes != N_CLASSES:
            raise ValueError("UNet predicts exactly 4 classes")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.stages + 1)]


@dataclass
class Network:
    kind: str
    config: dict
    manifest: list = field(default_factory=list)
    params: dict = field(default_factory=dict)  # name -> Tensor
    buffers: dict = field(default_factory=dict)  # name -> np.ndarray (batch-norm stats)
    in_channels: int = 1
    patch: int = 32

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def census(self) -> dict:
        counts: dict[str, int] = {}
        for layer in self.manifest:
            counts[layer["op"]] = counts.get(layer["op"], 0) + 1
        counts["conv_layers"] = counts.get("conv3d", 0) + counts.get("conv3d_transpose", 0)
        return counts

    def state(self) -> dict:
        """Copy of all parameter and buffer arrays."""
        out = {k: t.data.copy() for k, t in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict):
        for k, t in self.params.items():
            t.data[...] = state[k]
        for k, v in self.buffers.items():
            v[...] = state[k]


class _Builder:
    """Emits manifest entries and initializes parameters in emission order."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.layers: list[dict] = []
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._n = 0

    def _value(self, name):
        self._n += 1
        return f"{name}#{self._n}"

    def _param(self, name, arr):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = Tensor(arr.astype(np.float32), param=True, name=name)
        return name

    def _uniform(self, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return self.rng.uniform(-bound, bound, size=shape)

    def conv(self, name, x, cin, cout, k=1, dilation=1, padding=None):
        if padding is None:
            padding = dilation * (k - 1) // 2
        w = self._param(f"{name}.weight", self._uniform((cout, cin, k, k, k), cin * k**3))
        b = self._param(f"{name}.bias", np.zeros(cout))
        out = self._value(name)
        self.layers.append(dict(name=name, op="conv3d", inputs=[x], params=[w, b], output=out,
                                attrs=dict(kernel=[k, k, k], dilation=dilation, padding=padding)))
        return out

    def upconv(self, name, x, cin, cout, stride=2):
        w = self._param(f"{name}.weight", self._uniform((cin, cout, stride, stride, stride), cin))
        b = self._param(f"{name}.bias", np.zeros(cout))
        out = self._value(name)
        self.layers.append(dict(name=name, op="conv3d_transpose", inputs=[x], params=[w, b], output=out,
                                attrs=dict(kernel=[stride] * 3, stride=stride)))
        return out

    def bn(self, name, x, c):
        g = self._param(f"{name}.gamma", np.ones(c))
        b = self._param(f"{name}.beta", np.zeros(c))
        self.buffers[f"{name}.running_mean"] = np.zeros(c, np.float32)
        self.buffers[f"{name}.running_var"] = np.ones(c, np.float32)
        out = self._value(name)
        self.layers.append(dict(name=name, op="batchnorm3d", inputs=[x], params=[g, b], output=out,
                                attrs=dict(eps=1e-5, momentum=0.9),
                                buffers=[f"{name}.running_mean", f"{name}.running_var"]))
        return out

    def simple(self, name, op, inputs, **attrs):
        out = self._value(name)
        self.layers.append(dict(name=name, op=op, inputs=list(inputs), params=[], output=out, attrs=attrs))
        return out

    def dense_node(self, name, x, cin, node: DenseNodeConfig):
        h = self.bn(f"{name}.bn1", x, cin)
        h = self.simple(f"{name}.relu1", "relu", [h])
        h = self.conv(f"{name}.conv1", h, cin, node.bottleneck, k=1)
        h = self.bn(f"{name}.bn2", h, node.bottleneck)
        h = self.simple(f"{name}.relu2", "relu", [h])
        return self.conv(f"{name}.conv3", h, node.bottleneck, node.growth, k=3, dilation=node.dilation)

    def mrge_block(self, name, x, cfg: MRGEBlockConfig, ablate=()):
        """Two pathways of dense nodes joined by merge-and-run means.

        Node i of a pathway sees the block input plus the sum of all earlier
        node outputs of that pathway; after each node the mean of both
        pathway inputs is added to both outputs.
        """
        outs = {"a": [], "b": []}
        ins = {"a": x, "b": x}
        nodes = cfg.nodes()
        for i, node in enumerate(nodes):
            h = {p: self.dense_node(f"{name}.{p}{i}", ins[p], cfg.width, node) for p in ("a", "b")}
            merged = self.simple(f"{name}.merge{i}", "add", [ins["a"], ins["b"]], coeffs=[0.5, 0.5])
            for p in ("a", "b"):
                outs[p].append(self.simple(f"{name}.{p}{i}.run", "add", [h[p], merged]))
            for p in ("a", "b"):
                terms = [x] + [o for j, o in enumerate(outs[p]) if f"{name}:{p}:{j}>{i + 1}" not in ablate]
                ins[p] = terms[0] if len(terms) == 1 else self.simple(f"{name}.{p}.dense{i + 1}", "add", terms)
        return self.simple(f"{name}.out", "add", [ins["a"], ins["b"]], coeffs=[0.5, 0.5])


def _finish(builder: _Builder, kind, config, in_channels, patch) -> Network:
    return Network(kind=kind, config=config, manifest=builder.layers, params=builder.params,
                   buffers=builder.buffers, in_channels=in_channels, patch=patch)


def build_dcnet(config: DCNetConfig, seed: int = 0) -> Network:
    cfg = config
    bld = _Builder(np.random.default_rng(seed))
    w, bn = cfg.widths, cfg.bottlenecks
    h = bld.conv("stem", "input", cfg.in_channels, w[0], k=3)
    skips = []
    for lvl in range(cfg.stages):
        block = MRGEBlockConfig(w[lvl], bn[lvl], cfg.dilations)
        h = bld.mrge_block(f"enc{lvl}", h, block, cfg.ablate)
        skips.append(h)
        h = bld.dense_node(f"down{lvl}.node", h, w[lvl], DenseNodeConfig(bn[lvl], w[lvl + 1], 1))
        h = bld.simple(f"down{lvl}.pool", "maxpool3d", [h], kernel=[2, 2, 2], stride=2)
    deepest = h
    bld.layers[-1]["tag"] = "deepest"
    if cfg.positional_encoding:
        h = bld.simple("posenc.concat", "concat_channels", [h, "position"])
        h = bld.conv("posenc.fuse", h, w[-1] + 3, w[-1], k=1)
    else:
        h = bld.conv("posenc.fuse", h, w[-1], w[-1], k=1)
    for lvl in reversed(range(cfg.stages)):
        h = bld.dense_node(f"up{lvl}.node", h, w[lvl + 1], DenseNodeConfig(bn[lvl + 1], w[lvl + 1], 1))
        h = bld.upconv(f"up{lvl}.tconv", h, w[lvl + 1], w[lvl])
        s = bld.bn(f"skip{lvl}.bn", skips[lvl], w[lvl])
        s = bld.simple(f"skip{lvl}.relu", "relu", [s])
        s = bld.conv(f"skip{lvl}", s, w[lvl], w[lvl], k=1)
        h = bld.simple(f"up{lvl}.merge", "add", [h, s])
        block = MRGEBlockConfig(w[lvl], bn[lvl], cfg.dilations)
        h = bld.mrge_block(f"dec{lvl}", h, block, cfg.ablate)
    h = bld.bn("head.bn", h, w[0])
    h = bld.simple("head.relu", "relu", [h])
    logits = bld.conv("head.conv", h, w[0], cfg.n_classes, k=1)
    bld.simple("head.softmax", "softmax_channels", [logits])
    del deepest
    return _finish(bld, "dcnet", asdict(cfg), cfg.in_channels, cfg.patch)


def build_unet(config: UNetConfig, seed: int = 0) -> Network:
    cfg = config
    bld = _Builder(np.random.default_rng(seed))
    ch = cfg.channels
    k = cfg.kernel

    def double_conv(name, x, cin, cout):
        x = bld.conv(f"{name}.conv1", x, cin, cout, k=k)
        x = bld.bn(f"{name}.bn1", x, cout)
        x = bld.simple(f"{name}.relu1", "relu", [x])
        x = bld.conv(f"{name}.conv2", x, cout, cout, k=k)
        x = bld.bn(f"{name}.bn2", x, cout)
        return bld.simple(f"{name}.relu2", "relu", [x])

    h, cin, skips = "input", cfg.in_channels, []
    for i in range(cfg.stages):
        h = double_conv(f"enc{i}", h, cin, ch[i])
        skips.append(h)
        h = bld.simple(f"enc{i}.pool", "maxpool3d", [h], kernel=[2, 2, 2], stride=2)
        cin = ch[i]
    h = double_conv("bottleneck", h, cin, ch[cfg.stages])
    bld.layers[-1]["tag"] = "deepest"
    for i in reversed(range(cfg.stages)):
        h = bld.upconv(f"dec{i}.tconv", h, ch[i + 1], ch[i])
        h = bld.simple(f"dec{i}.concat", "concat_channels", [skips[i], h])
        h = double_conv(f"dec{i}", h, 2 * ch[i], ch[i])
    logits = bld.conv("head.conv", h, ch[0], cfg.n_classes, k=1)
    bld.simple("head.softmax", "softmax_channels", [logits])
    return _finish(bld, "unet", asdict(cfg), cfg.in_channels, 32)


def build_network(kind: str, config: dict, seed: int = 0) -> Network:
    if kind == "dcnet":
        return build_dcnet(DCNetConfig(**config), seed)
    if kind == "unet":
        return build_unet(UNetConfig(**config), seed)
    raise ValueError(f"unknown network kind {kind!r}")


def count_params(net: Network) -> int:
    return int(sum(t.data.size for t in net.params.values()))


def _last_use(manifest):
    last = {}
    for i, layer in enumerate(manifest):
        for v in layer["inputs"]:
            last[v] = i
    return last


def run_manifest(net: Network, inputs: dict, training: bool, tape: Tape | None = None,
                 keep: Sequence[str] = ()) -> dict:
    """Interpret the manifest. Returns the final two values ("logits",
    "probs") plus any layer outputs whose layer name or tag is in ``keep``."""
    values = dict(inputs)
    last = _last_use(net.manifest)
    kept = {}
    n = len(net.manifest)
    for i, layer in enumerate(net.manifest):
        attrs = dict(layer.get("attrs", {}))
        if "kernel" in attrs:
            attrs["kernel"] = tuple(attrs["kernel"])
        if "coeffs" in attrs:
            attrs["coeffs"] = tuple(attrs["coeffs"])
        if layer["op"] == "batchnorm3d":
            rm, rv = (net.buffers[b] for b in layer["buffers"])
            attrs.update(training=training, running_mean=rm, running_var=rv)
        args = [values[v] for v in layer["inputs"]] + [net.params[p] for p in layer["params"]]
        out = op_forward(layer["op"], args, OpAttrs(**attrs), tape)
        values[layer["output"]] = out
        if layer["name"] in keep or layer.get("tag") in keep:
            kept[layer.get("tag") or layer["name"]] = out
        for v in layer["inputs"]:
            if last.get(v) == i and v not in ("input", "position"):
                values.pop(v, None)
        if i == n - 2:
            kept["logits"] = out
        if i == n - 1:
            kept["probs"] = out
    return kept


def net_forward(net: Network, batch, mode: str = "infer", tape: Tape | None = None,
                keep: Sequence[str] = ()) -> tuple[Tensor, Tensor] | dict:
    """Forward a :class:`~adiposeg.patching.PatchBatch` (or any object with
    ``patches`` [N, C, 32, 32, 32] and ``positions`` [N, 3]).

    ``mode="train"`` uses batch statistics and updates the running
    statistics; ``"infer"`` uses the running statistics only.
    Returns ``(logits, probs)``, or the dict of kept values when ``keep``
    is given.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    patches = np.asarray(batch.patches)
    if patches.ndim != 5:
        raise ShapeError(f"patches must be [N, C, Z, Y, X], got {patches.shape}")
    if patches.shape[1] != net.in_channels:
        raise ShapeError(
            f"network expects {net.in_channels} input channel(s), batch has {patches.shape[1]}; "
            "use adapt_input_channels / adapt_volume_channels"
        )
    dtype = np.float64 if patches.dtype == np.float64 else np.float32
    if dtype == np.float64:
        for t in net.params.values():
            t.data = t.data.astype(np.float64, copy=False)
    x = Tensor(patches.astype(dtype, copy=False))
    pos = np.asarray(batch.positions, dtype=dtype).reshape(len(patches), 3, 1, 1, 1)
    inputs = {"input": x, "position": Tensor(pos)}
    if tape is not None:
        tape.watch(net.param_list())
    out = run_manifest(net, inputs, training=(mode == "train"), tape=tape, keep=keep)
    if keep:
        return out
    return out["logits"], out["probs"]


def adapt_input_channels(net: Network, in_channels: int, seed: int = 0) -> Network:
    """Copy of ``net`` accepting ``in_channels`` inputs.

    First-layer kernels of channels the old network already had are copied;
    kernels for new channels are freshly initialized; everything else is
    copied unchanged.
    """
    if in_channels == net.in_channels:
        return copy.deepcopy(net)
    cfg = dict(net.config)
    cfg["in_channels"] = in_channels
    new = build_network(net.kind, cfg, seed)
    first = new.manifest[0]["params"][0]
    for name, t in new.params.items():
        old = net.params[name].data
        if name == first:
            keep = min(old.shape[1], in_channels)
            t.data[:, :keep] = old[:, :keep]
        else:
            t.data[...] = old
    for name, v in new.buffers.items():
        v[...] = net.buffers[name]
    return new

"""Layer graphs for the auto-encoder pretext network and the downstream classifier.

The encoder counts "levels": every conv, relu and residual-add on the
encoder+bottleneck path is one level, recorded in the graph's
``level_manifest``. With the default four-block configuration the manifest
is exactly 29 entries long, which is the prefix the downstream classifier
inherits via :func:`transfer_prefix`.
"""

from __future__ import annotations

import struct
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConvSpec,
    DenseParams,
    KernelBank,
    concat_channels,
    concat_channels_backward,
    conv2d_backward,
    conv2d_forward,
    conv2d_transpose_backward,
    conv2d_transpose_forward,
    dense_backward,
    dense_forward,
    global_max_pool,
    global_max_pool_backward,
    relu,
    relu_backward,
    residual_add,
    residual_add_backward,
    softmax,
    softmax_backward,
)

__all__ = [
    "LayerSpec",
    "ModelGraph",
    "CaeConfig",
    "Activations",
    "CheckpointError",
    "Checkpoint",
    "build_cae",
    "build_classifier",
    "forward",
    "backward",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint",
    "transfer_prefix",
]

INPUT_NAME = "input"

LAYER_KINDS = frozenset(
    ["conv", "transpose_conv", "relu", "residual_add", "concat", "global_max_pool", "dense", "softmax"]
)
_PARAMETERIZED = frozenset(["conv", "transpose_conv", "dense"])
_TWO_INPUT = frozenset(["residual_add", "concat"])


@dataclass
class LayerSpec:
    """One node of a model graph, in topological order."""

    index: int
    name: str
    kind: str
    inputs: list[str]
    params: KernelBank | DenseParams | None = None
    conv: ConvSpec | None = None

    def copy(self) -> "LayerSpec":
        return LayerSpec(
            index=self.index,
            name=self.name,
            kind=self.kind,
            inputs=list(self.inputs),
            params=self.params.copy() if self.params is not None else None,
            conv=self.conv,
        )


@dataclass
class ModelGraph:
    """Ordered layer list plus the level manifest and expected input dims (c, h, w)."""

    layers: list[LayerSpec]
    level_manifest: list[str]
    input_dims: tuple[int, int, int]
    _by_name: dict[str, LayerSpec] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._by_name = {}
        seen: set[str] = {INPUT_NAME}
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"unknown layer kind {layer.kind!r} in layer {layer.name!r}")
            if layer.name in self._by_name or layer.name == INPUT_NAME:
                raise ValueError(f"duplicate layer name {layer.name!r}")
            if layer.index != i:
                raise ValueError(f"layer {layer.name!r} has index {layer.index}, expected {i}")
            n_in = 2 if layer.kind in _TWO_INPUT else 1
            if len(layer.inputs) != n_in:
                raise ValueError(
                    f"layer {layer.name!r} of kind {layer.kind} needs {n_in} inputs, "
                    f"got {layer.inputs}"
                )
            for src in layer.inputs:
                if src not in seen:
                    raise ValueError(
                        f"layer {layer.name!r} references {src!r} which is not an earlier layer"
                    )
            if (layer.params is not None) != (layer.kind in _PARAMETERIZED):
                raise ValueError(
                    f"layer {layer.name!r} of kind {layer.kind} has "
                    f"{'unexpected' if layer.params is not None else 'missing'} parameters"
                )
            self._by_name[layer.name] = layer
            seen.add(layer.name)
        names = [l.name for l in self.layers]
        it = iter(names)
        if not all(entry in it for entry in self.level_manifest):
            raise ValueError("level_manifest is not a subsequence of layer names")

    def layer(self, name: str) -> LayerSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise ValueError(f"no layer named {name!r}") from None

    def parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield (name, array) pairs: '<layer>.weight' then '<layer>.bias', in layer order."""
        for layer in self.layers:
            if layer.params is not None:
                yield f"{layer.name}.weight", layer.params.weights
                yield f"{layer.name}.bias", layer.params.bias

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            layers=[l.copy() for l in self.layers],
            level_manifest=list(self.level_manifest),
            input_dims=self.input_dims,
        )


@dataclass(frozen=True)
class CaeConfig:
    """Architecture knobs for the auto-encoder; defaults give the 29-level network."""

    input: tuple[int, int, int] = (3, 128, 128)
    stem_channels: int = 32
    block_channels: tuple[int, ...] = (32, 64, 128, 256)
    bottleneck_channels: int = 256
    bottleneck_convs: int = 4
    kernel: int = 3
    down_stride: int = 2
    seed: int = 0
    dtype: type = np.float32

    def __post_init__(self) -> None:
        c, h, w = self.input
        if c < 1 or h < 1 or w < 1:
            raise ValueError(f"invalid input dims {self.input}")
        if not self.block_channels:
            raise ValueError("need at least one encoder block")
        if self.bottleneck_channels != self.block_channels[-1]:
            raise ValueError(
                "bottleneck_channels must equal the last block width so the "
                "residual shortcut dims match"
            )
        if self.bottleneck_convs < 1:
            raise ValueError("bottleneck needs at least one conv")
        if self.kernel % 2 != 1 or self.kernel < 1:
            raise ValueError("kernel size must be odd")
        factor = self.down_stride ** len(self.block_channels)
        if h % factor or w % factor:
            raise ValueError(
                f"input {h}x{w} is not divisible by the total downsampling factor {factor}"
            )

    @property
    def manifest_length(self) -> int:
        # stem: 2*(conv+relu); per block: 2*(conv+relu); bottleneck:
        # convs + relus after all but the last conv + residual_add + relu
        return 4 + 4 * len(self.block_channels) + (2 * self.bottleneck_convs + 1)


def _kaiming_kernel(
    rng: np.random.Generator, oc: int, ic: int, k: int, dtype: type
) -> KernelBank:
    bound = np.sqrt(6.0 / (ic * k * k))
    w = rng.uniform(-bound, bound, size=(oc, ic, k, k)).astype(dtype)
    return KernelBank(w, np.zeros(oc, dtype=dtype))


def _kaiming_dense(rng: np.random.Generator, din: int, dout: int, dtype: type) -> DenseParams:
    bound = np.sqrt(6.0 / din)
    w = rng.uniform(-bound, bound, size=(din, dout)).astype(dtype)
    return DenseParams(w, np.zeros(dout, dtype=dtype))


def build_cae(cfg: CaeConfig = CaeConfig()) -> ModelGraph:
    """Assemble the tailored auto-encoder.

    Topology: two-conv stem, len(block_channels) stride-2 encoder blocks,
    a residual bottleneck of stride-1 convs, then mirrored decoder blocks
    whose upsampled features are concatenated with the matching encoder
    output before a fusing conv, and a final conv back to the input
    channel count. The level manifest covers the encoder+bottleneck prefix.
    """
    rng = np.random.default_rng(cfg.seed)
    k, dt = cfg.kernel, cfg.dtype
    pad = k // 2
    s1 = ConvSpec(stride=1, padding=pad)
    s_down = ConvSpec(stride=cfg.down_stride, padding=pad)
    s_up = ConvSpec(stride=cfg.down_stride, padding=pad, output_padding=cfg.down_stride - 1)
    c_in = cfg.input[0]

    layers: list[LayerSpec] = []

    def add(name: str, kind: str, inputs: list[str], params=None, conv=None) -> str:
        layers.append(LayerSpec(len(layers), name, kind, inputs, params, conv))
        return name

    prev = add("stem.conv1", "conv", [INPUT_NAME], _kaiming_kernel(rng, cfg.stem_channels, c_in, k, dt), s1)
    prev = add("stem.relu1", "relu", [prev])
    prev = add("stem.conv2", "conv", [prev], _kaiming_kernel(rng, cfg.stem_channels, cfg.stem_channels, k, dt), s1)
    stem_out = add("stem.relu2", "relu", [prev])

    skips: list[str] = [stem_out]  # one entry per spatial resolution, finest first
    prev, width = stem_out, cfg.stem_channels
    for i, ch in enumerate(cfg.block_channels, start=1):
        prev = add(f"enc{i}.down", "conv", [prev], _kaiming_kernel(rng, ch, width, k, dt), s_down)
        prev = add(f"enc{i}.relu1", "relu", [prev])
        prev = add(f"enc{i}.conv", "conv", [prev], _kaiming_kernel(rng, ch, ch, k, dt), s1)
        prev = add(f"enc{i}.relu2", "relu", [prev])
        skips.append(prev)
        width = ch

    bottleneck_in = prev
    for j in range(1, cfg.bottleneck_convs + 1):
        prev = add(f"bottleneck.conv{j}", "conv", [prev], _kaiming_kernel(rng, width, width, k, dt), s1)
        if j < cfg.bottleneck_convs:
            prev = add(f"bottleneck.relu{j}", "relu", [prev])
    prev = add("bottleneck.residual", "residual_add", [prev, bottleneck_in])
    bottleneck_out = add(f"bottleneck.relu{cfg.bottleneck_convs}", "relu", [prev])

    manifest = [l.name for l in layers]

    prev = bottleneck_out
    n_blocks = len(cfg.block_channels)
    for i in range(1, n_blocks + 1):
        skip = skips[n_blocks - i]
        skip_width = cfg.block_channels[n_blocks - i - 1] if i < n_blocks else cfg.stem_channels
        prev = add(f"dec{i}.up", "transpose_conv", [prev], _kaiming_kernel(rng, skip_width, width, k, dt), s_up)
        prev = add(f"dec{i}.relu1", "relu", [prev])
        prev = add(f"dec{i}.concat", "concat", [prev, skip])
        prev = add(f"dec{i}.conv", "conv", [prev], _kaiming_kernel(rng, skip_width, 2 * skip_width, k, dt), s1)
        prev = add(f"dec{i}.relu2", "relu", [prev])
        width = skip_width

    add("recon", "conv", [prev], _kaiming_kernel(rng, c_in, width, k, dt), s1)

    return ModelGraph(layers=layers, level_manifest=manifest, input_dims=cfg.input)


def build_classifier(
    cae: ModelGraph, n_classes: int = 4, hidden: int = 200, seed: int = 0
) -> ModelGraph:
    """Drop the decoder, keep the encoder+bottleneck, and attach the grading head.

    Head: global max pool -> dense(features, hidden) -> relu ->
    dense(hidden, n_classes) -> softmax. Encoder parameters are copied from
    `cae` as built; use :func:`transfer_prefix` to load pretrained weights.
    """
    boundary = len(cae.level_manifest)
    layers = [cae.layers[i].copy() for i in range(boundary)]
    feature_layer = layers[-1].name
    # width at the pool = out channels of the last bottleneck conv
    feat = next(
        l.params.out_channels for l in reversed(layers) if isinstance(l.params, KernelBank)
    )
    rng = np.random.default_rng(seed)
    dt = layers[0].params.weights.dtype.type

    def add(name: str, kind: str, inputs: list[str], params=None) -> str:
        layers.append(LayerSpec(len(layers), name, kind, inputs, params))
        return name

    prev = add("gmp", "global_max_pool", [feature_layer])
    prev = add("head.fc1", "dense", [prev], _kaiming_dense(rng, feat, hidden, dt))
    prev = add("head.relu1", "relu", [prev])
    prev = add("head.fc2", "dense", [prev], _kaiming_dense(rng, hidden, n_classes, dt))
    add("softmax", "softmax", [prev])

    return ModelGraph(
        layers=layers,
        level_manifest=list(cae.level_manifest),
        input_dims=cae.input_dims,
    )


class Activations(Mapping):
    """Per-layer outputs keyed by layer name; the graph input rides along."""

    def __init__(self, outputs: dict[str, np.ndarray], x: np.ndarray):
        self._outputs = outputs
        self.input = x

    def __getitem__(self, name: str) -> np.ndarray:
        return self._outputs[name]

    def __iter__(self):
        return iter(self._outputs)

    def __len__(self) -> int:
        return len(self._outputs)

    def fetch(self, name: str) -> np.ndarray:
        return self.input if name == INPUT_NAME else self._outputs[name]


def forward(g: ModelGraph, x: np.ndarray, mode: str = "infer") -> Activations:
    """Run the graph, returning every layer's output keyed by name.

    `mode` is accepted for API symmetry ("train" or "infer"); no layer in
    this graph family behaves differently between the two.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x.ndim != 4 or tuple(x.shape[1:]) != g.input_dims:
        raise ValueError(
            f"input shape {x.shape} does not match graph input dims "
            f"(n, {', '.join(map(str, g.input_dims))})"
        )
    acts: dict[str, np.ndarray] = {}

    def got(name: str) -> np.ndarray:
        return x if name == INPUT_NAME else acts[name]

    for layer in g.layers:
        a = got(layer.inputs[0])
        try:
            if layer.kind == "conv":
                out = conv2d_forward(a, layer.params, layer.conv)
            elif layer.kind == "transpose_conv":
                out = conv2d_transpose_forward(a, layer.params, layer.conv)
            elif layer.kind == "relu":
                out = relu(a)
            elif layer.kind == "residual_add":
                out = residual_add(a, got(layer.inputs[1]))
            elif layer.kind == "concat":
                out = concat_channels(a, got(layer.inputs[1]))
            elif layer.kind == "global_max_pool":
                out = global_max_pool(a)
            elif layer.kind == "dense":
                out = dense_forward(a, layer.params)
            else:  # softmax
                out = softmax(a)
        except ValueError as err:
            raise ValueError(f"layer {layer.name!r}: {err}") from err
        acts[layer.name] = out
    return Activations(acts, x)


def backward(
    g: ModelGraph,
    acts: Activations,
    loss_grad: np.ndarray,
    start: str | None = None,
) -> dict[str, KernelBank | DenseParams]:
    """Backpropagate `loss_grad` (gradient w.r.t. `start`'s output) through the graph.

    Returns a gradient for every parameterized layer, keyed by layer name;
    layers that do not influence `start` get zero gradients. Fan-out
    gradients (skip and residual edges) are summed.
    """
    start_idx = g.layer(start).index if start is not None else len(g.layers) - 1
    out_grads: dict[str, np.ndarray] = {g.layers[start_idx].name: loss_grad}
    param_grads: dict[str, KernelBank | DenseParams] = {}

    def send(name: str, grad: np.ndarray) -> None:
        if name == INPUT_NAME:
            return
        if name in out_grads:
            out_grads[name] = out_grads[name] + grad
        else:
            out_grads[name] = grad

    for layer in reversed(g.layers[: start_idx + 1]):
        go = out_grads.pop(layer.name, None)
        if go is None:
            continue
        try:
            a = acts.fetch(layer.inputs[0])
        except KeyError:
            raise ValueError(f"missing activation for layer {layer.name!r}") from None
        if layer.kind == "conv":
            gx, gk = conv2d_backward(a, layer.params, layer.conv, go)
            param_grads[layer.name] = gk
            send(layer.inputs[0], gx)
        elif layer.kind == "transpose_conv":
            gx, gk = conv2d_transpose_backward(a, layer.params, layer.conv, go)
            param_grads[layer.name] = gk
            send(layer.inputs[0], gx)
        elif layer.kind == "relu":
            send(layer.inputs[0], relu_backward(a, go))
        elif layer.kind == "residual_add":
            ga, gb = residual_add_backward(go)
            send(layer.inputs[0], ga)
            send(layer.inputs[1], gb)
        elif layer.kind == "concat":
            ga, gb = concat_channels_backward(a.shape[1], go)
            send(layer.inputs[0], ga)
            send(layer.inputs[1], gb)
        elif layer.kind == "global_max_pool":
            send(layer.inputs[0], global_max_pool_backward(a, go))
        elif layer.kind == "dense":
            gx, gp = dense_backward(a, layer.params, go)
            param_grads[layer.name] = gp
            send(layer.inputs[0], gx)
        else:  # softmax
            send(layer.inputs[0], softmax_backward(acts[layer.name], go))

    for layer in g.layers:
        if layer.params is not None and layer.name not in param_grads:
            if isinstance(layer.params, KernelBank):
                param_grads[layer.name] = KernelBank(
                    np.zeros_like(layer.params.weights), np.zeros_like(layer.params.bias)
                )
            else:
                param_grads[layer.name] = DenseParams(
                    np.zeros_like(layer.params.weights), np.zeros_like(layer.params.bias)
                )
    return param_grads


def flatten_grads(param_grads: dict[str, KernelBank | DenseParams]) -> dict[str, np.ndarray]:
    """Per-tensor view of backward()'s per-layer gradients, keyed like parameters()."""
    flat: dict[str, np.ndarray] = {}
    for name, p in param_grads.items():
        flat[f"{name}.weight"] = p.weights
        flat[f"{name}.bias"] = p.bias
    return flat


# --- Checkpoint serialization -------------------------------------------------
#
# Binary layout (little-endian): magic "CAEW", u32 version, u32 entry count,
# then per entry: u16 name length, UTF-8 name, u8 rank, u32 per dim, raw
# float32 data. Bit-exact roundtrip.

_MAGIC = b"CAEW"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or incompatible."""


@dataclass
class Checkpoint:
    """Parsed parameter archive: (name, float32 array) entries in file order."""

    version: int
    entries: list[tuple[str, np.ndarray]]


def save_checkpoint(g: ModelGraph, path) -> None:
    """Write all graph parameters as float32, bit-exactly reloadable."""
    chunks = [_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, sum(1 for _ in g.parameters()))]
    for name, arr in g.parameters():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def read_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file without needing a graph."""
    with open(path, "rb") as f:
        blob = f.read()

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: expected {what} at byte {off}")
        piece = blob[off : off + n]
        off += n
        return piece

    off = 0
    if take(4, "magic") != _MAGIC:
        raise CheckpointError(f"bad magic bytes in {path}: not a checkpoint file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    entries: list[tuple[str, np.ndarray]] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = take(4 * size, f"data of {name!r}")
        entries.append((name, np.frombuffer(raw, dtype="<f4").reshape(dims).copy()))
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after last entry")
    return Checkpoint(version=version, entries=entries)


def load_checkpoint(g: ModelGraph, path) -> None:
    """Restore parameters into `g` in place; names and dims must match exactly."""
    ckpt = read_checkpoint(path)
    loaded = dict(ckpt.entries)
    if len(loaded) != len(ckpt.entries):
        raise CheckpointError("duplicate parameter names in checkpoint")
    own = dict(g.parameters())
    for name in loaded:
        if name not in own:
            raise ValueError(f"checkpoint parameter {name!r} has no match in the graph")
    for name, arr in own.items():
        if name not in loaded:
            raise ValueError(f"graph parameter {name!r} missing from checkpoint")
        if loaded[name].shape != arr.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint {loaded[name].shape}, "
                f"graph {arr.shape}"
            )
    for name, arr in own.items():
        arr[...] = loaded[name].astype(arr.dtype, copy=False)


def transfer_prefix(src: ModelGraph, dst: ModelGraph, n_levels: int = 29) -> int:
    """Copy parameters of the first `n_levels` manifest levels from src to dst.

    Returns the number of parameterized levels copied; all other dst
    parameters are left untouched.
    """
    if n_levels < 0:
        raise ValueError("n_levels must be non-negative")
    if n_levels > len(src.level_manifest) or n_levels > len(dst.level_manifest):
        raise ValueError(
            f"n_levels={n_levels} exceeds manifest length "
            f"(src {len(src.level_manifest)}, dst {len(dst.level_manifest)})"
        )
    copied = 0
    for i in range(n_levels):
        s_name, d_name = src.level_manifest[i], dst.level_manifest[i]
        if s_name != d_name:
            raise ValueError(
                f"manifest level {i} differs between graphs: {s_name!r} vs {d_name!r}"
            )
        s_layer, d_layer = src.layer(s_name), dst.layer(d_name)
        if (s_layer.params is None) != (d_layer.params is None):
            raise ValueError(f"level {s_name!r} parameterized in only one graph")
        if s_layer.params is None:
            continue
        if s_layer.params.weights.shape != d_layer.params.weights.shape:
            raise ValueError(
                f"shape mismatch at level {s_name!r}: "
                f"{s_layer.params.weights.shape} vs {d_layer.params.weights.shape}"
            )
        d_layer.params.weights[...] = s_layer.params.weights
        d_layer.params.bias[...] = s_layer.params.bias
        copied += 1
    return copied

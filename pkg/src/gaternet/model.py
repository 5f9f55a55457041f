"""Gated backbone CNN plus the gater network that drives it.

A ModelSpec describes two stacks: a backbone (conv/pool/fc layers, some
conv layers flagged as gated) and a gater (conv/pool layers feeding global
average pooling). The gater's pooled features go through a bottleneck head
(FC -> batchnorm -> relu -> FC) whose output width is the total number of
gated backbone filters; those scores are binarized (see semhash) and each
gated conv's post-activation channels are multiplied by their gate.

The bottleneck keeps the head at (h + c) * b weights instead of the h * c
a single FC layer would need.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from gaternet.tensor import Array, Tensor
from gaternet.layers import (
    BatchNormParams,
    Conv2dParams,
    avg_pool2d,
    batchnorm,
    conv2d,
    fully_connected,
    global_avg_pool,
    relu,
)
from gaternet.semhash import GateBundle, gate_dropout, semhash_forward

LAYER_KINDS = ("conv", "pool", "fc")


@dataclass(frozen=True)
class LayerSpec:
    """One backbone or gater layer.

    conv layers are conv -> (batchnorm) -> relu, with a bias only when
    batchnorm is off. pool is non-overlapping average pooling. fc layers
    flatten on entry if needed; every fc except the backbone's last gets a
    relu.
    """

    kind: str
    filters: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    gated: bool = False
    batchnorm: bool = True
    window: int = 2
    width: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}, expected {LAYER_KINDS}")
        if self.kind == "conv":
            if self.filters < 1:
                raise ValueError(f"conv layer needs filters >= 1, got {self.filters}")
            if self.kernel < 1 or self.stride < 1 or self.padding < 0:
                raise ValueError(
                    f"bad conv geometry: kernel={self.kernel}, stride={self.stride}, "
                    f"padding={self.padding}"
                )
        elif self.kind == "pool":
            if self.window < 1:
                raise ValueError(f"pool window must be >= 1, got {self.window}")
            if self.gated:
                raise ValueError("only conv layers can be gated")
        elif self.kind == "fc":
            if self.width < 1:
                raise ValueError(f"fc layer needs width >= 1, got {self.width}")
            if self.gated:
                raise ValueError("only conv layers can be gated")


@dataclass(frozen=True)
class ModelSpec:
    """Complete architecture description; hashable source of truth."""

    input_shape: tuple[int, int, int]
    num_classes: int
    backbone: tuple[LayerSpec, ...]
    gater: tuple[LayerSpec, ...]
    bottleneck: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "backbone", tuple(self.backbone))
        object.__setattr__(self, "gater", tuple(self.gater))
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be 3 positive dims, got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.bottleneck < 1:
            raise ValueError(f"bottleneck must be >= 1, got {self.bottleneck}")
        if not self.backbone:
            raise ValueError("backbone must have at least one layer")
        if any(l.gated for l in self.gater):
            raise ValueError("gater layers cannot be gated")
        if any(l.kind == "fc" for l in self.gater):
            raise ValueError("gater stack is conv/pool only")

    @property
    def gated_filter_total(self) -> int:
        """c: how many backbone filters receive a gate."""
        return sum(l.filters for l in self.backbone if l.kind == "conv" and l.gated)

    @property
    def feature_size(self) -> int:
        """h: gater feature width after global average pooling."""
        convs = [l for l in self.gater if l.kind == "conv"]
        return convs[-1].filters if convs else 0


@dataclass(frozen=True)
class GateIndexMap:
    """Bijection between flat gate indices and (backbone layer, filter)."""

    layer_ids: Array
    filter_ids: Array
    slices: dict[int, tuple[int, int]]

    @property
    def total(self) -> int:
        return len(self.layer_ids)

    def pair_of(self, gate_index: int) -> tuple[int, int]:
        return int(self.layer_ids[gate_index]), int(self.filter_ids[gate_index])

    def index_of(self, layer_id: int, filter_id: int) -> int:
        lo, hi = self.slices[layer_id]
        if not 0 <= filter_id < hi - lo:
            raise ValueError(
                f"filter {filter_id} out of range for layer {layer_id} "
                f"({hi - lo} gated filters)"
            )
        return lo + filter_id


def build_gate_map(spec: ModelSpec) -> GateIndexMap:
    layer_ids: list[int] = []
    filter_ids: list[int] = []
    slices: dict[int, tuple[int, int]] = {}
    for i, layer in enumerate(spec.backbone):
        if layer.kind == "conv" and layer.gated:
            lo = len(layer_ids)
            layer_ids.extend([i] * layer.filters)
            filter_ids.extend(range(layer.filters))
            slices[i] = (lo, lo + layer.filters)
    return GateIndexMap(
        layer_ids=np.asarray(layer_ids, dtype=np.int64),
        filter_ids=np.asarray(filter_ids, dtype=np.int64),
        slices=slices,
    )


def trace_shapes(layers: tuple[LayerSpec, ...], input_shape, num_classes=None):
    """Walk a stack, validating geometry; returns (entry shapes, final shape).

    Entry shapes are (C, H, W) tuples, or ("flat", width) once flattened.
    Raises ValueError naming the offending layer on mismatch.
    """
    shape = tuple(input_shape)
    entries = []
    for i, layer in enumerate(layers):
        entries.append(shape)
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ValueError(f"layer {i}: conv after flatten is not supported")
            c, h, w = shape
            oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if oh < 1 or ow < 1:
                raise ValueError(
                    f"layer {i}: conv kernel {layer.kernel} does not fit {h}x{w}"
                )
            shape = (layer.filters, oh, ow)
        elif layer.kind == "pool":
            if len(shape) != 3:
                raise ValueError(f"layer {i}: pool after flatten is not supported")
            c, h, w = shape
            if h % layer.window or w % layer.window:
                raise ValueError(
                    f"layer {i}: pool window {layer.window} does not divide {h}x{w}"
                )
            shape = (c, h // layer.window, w // layer.window)
        else:
            width = int(np.prod(shape)) if len(shape) == 3 else shape[1]
            shape = ("flat", layer.width)
            entries[-1] = ("flat_in", width)
    if num_classes is not None:
        if not layers or layers[-1].kind != "fc" or layers[-1].width != num_classes:
            raise ValueError(
                f"backbone must end in an fc layer of width {num_classes}"
            )
    return entries, shape


def validate_spec(spec: ModelSpec) -> None:
    trace_shapes(spec.backbone, spec.input_shape, spec.num_classes)
    if spec.gated_filter_total > 0:
        if spec.feature_size < 1:
            raise ValueError("gated layers need a gater with at least one conv")
        trace_shapes(spec.gater, spec.input_shape)
    elif spec.gater:
        trace_shapes(spec.gater, spec.input_shape)


def spec_to_dict(spec: ModelSpec) -> dict:
    """JSON-ready form; round-trips through spec_from_dict losslessly."""
    return {
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "backbone": [asdict(l) for l in spec.backbone],
        "gater": [asdict(l) for l in spec.gater],
        "bottleneck": spec.bottleneck,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        input_shape=tuple(d["input_shape"]),
        num_classes=int(d["num_classes"]),
        backbone=tuple(LayerSpec(**l) for l in d["backbone"]),
        gater=tuple(LayerSpec(**l) for l in d["gater"]),
        bottleneck=int(d["bottleneck"]),
    )


@dataclass
class GaterHeadParams:
    """Bottleneck head: scores = W2 @ relu(batchnorm(W1 @ f + b1)) + b2."""

    W1: Tensor
    b1: Tensor
    bn: BatchNormParams
    W2: Tensor
    b2: Tensor

    @property
    def weight_count(self) -> int:
        """Weights only (biases and batchnorm excluded): (h + c) * b."""
        return self.W1.data.size + self.W2.data.size

    @property
    def single_layer_weight_count(self) -> int:
        """What a direct h -> c layer would cost, for comparison: h * c."""
        return self.W1.shape[0] * self.W2.shape[1]


@dataclass(frozen=True)
class ParamCountReport:
    backbone: int
    gater: int
    head: int
    probe: int
    total: int
    head_weight_count: int
    head_single_layer_weight_count: int


def init_params(
    spec: ModelSpec,
    rng: np.random.Generator,
    dtype=np.float32,
    include_probe: bool = False,
) -> tuple[dict[str, Tensor], dict[str, Array]]:
    """Allocate every trainable tensor and batchnorm buffer.

    Draw order is fixed (backbone, gater, head, probe) so a seed pins the
    full initialization. Conv and hidden fc weights use He scaling; the
    classifier and head use 1/sqrt(fan_in); the head's output bias starts
    at +1 so training begins with most gates on.
    """
    params: dict[str, Tensor] = {}
    buffers: dict[str, Array] = {}

    def normal(shape, std):
        return Tensor(
            rng.standard_normal(shape, dtype=dtype) * dtype(std), requires_grad=True
        )

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def add_bn(prefix: str, channels: int):
        params[f"{prefix}.gamma"] = Tensor(
            np.ones(channels, dtype=dtype), requires_grad=True
        )
        params[f"{prefix}.beta"] = zeros(channels)
        buffers[f"{prefix}.running_mean"] = np.zeros(channels, dtype=dtype)
        buffers[f"{prefix}.running_var"] = np.ones(channels, dtype=dtype)

    def add_stack(prefix: str, layers, input_shape, final_is_classifier: bool):
        entries, _ = trace_shapes(layers, input_shape)
        for i, layer in enumerate(layers):
            if layer.kind == "conv":
                c_in = entries[i][0]
                fan_in = c_in * layer.kernel * layer.kernel
                params[f"{prefix}.{i}.filters"] = normal(
                    (layer.filters, c_in, layer.kernel, layer.kernel),
                    np.sqrt(2.0 / fan_in),
                )
                if layer.batchnorm:
                    add_bn(f"{prefix}.{i}.bn", layer.filters)
                else:
                    params[f"{prefix}.{i}.bias"] = zeros(layer.filters)
            elif layer.kind == "fc":
                fan_in = entries[i][1]
                last = final_is_classifier and i == len(layers) - 1
                std = (1.0 if last else np.sqrt(2.0)) / np.sqrt(fan_in)
                params[f"{prefix}.{i}.W"] = normal((fan_in, layer.width), std)
                params[f"{prefix}.{i}.b"] = zeros(layer.width)

    add_stack("backbone", spec.backbone, spec.input_shape, True)
    if spec.gater:
        add_stack("gater", spec.gater, spec.input_shape, False)

    h, c, b = spec.feature_size, spec.gated_filter_total, spec.bottleneck
    if c > 0:
        params["head.W1"] = normal((h, b), 1.0 / np.sqrt(h))
        params["head.b1"] = zeros(b)
        add_bn("head.bn", b)
        params["head.W2"] = normal((b, c), 1.0 / np.sqrt(b))
        params["head.b2"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
    if include_probe:
        if h < 1:
            raise ValueError("probe needs a gater with at least one conv")
        params["probe.W"] = normal((h, spec.num_classes), 1.0 / np.sqrt(h))
        params["probe.b"] = zeros(spec.num_classes)
    return params, buffers


def gated_conv_forward(
    x: Tensor,
    p: Conv2dParams,
    bn: BatchNormParams | None,
    gates: Tensor,
    training: bool,
) -> Tensor:
    """conv -> (batchnorm) -> relu, then per-channel gate multiply.

    gates is [N, out_channels]; binary gates switch channels fully on or
    off, soft gates (the training-time alpha branch) scale them. An all-on
    gate row reproduces the ungated layer bit for bit because multiplying
    by 1.0 is exact.
    """
    n, ch = gates.shape
    if ch != p.out_channels:
        raise ValueError(
            f"gate width {ch} does not match conv out_channels {p.out_channels}"
        )
    if x.shape[0] != n:
        raise ValueError(f"gate batch {n} does not match input batch {x.shape[0]}")
    y = conv2d(x, p)
    if bn is not None:
        y = batchnorm(y, bn, training)
    y = relu(y)
    return y * gates.reshape(n, ch, 1, 1)


def selective_conv_reference(
    x: Tensor | Array,
    p: Conv2dParams,
    bn: BatchNormParams | None,
    gates: Array,
    training: bool = False,
) -> Array:
    """Skip-path oracle: compute a channel only where its gate is 1.

    Pure numpy, no graph, no side effects (running stats are read, never
    written). Channels gated off contribute an all-zero map without being
    computed. Accumulation order matches conv2d, so enabled entries are
    bit-identical to the masked path; the tests compare the two routes
    exactly.

    With training=True, batch statistics need every sample of an enabled
    channel, so per-sample skipping only applies to the final write; eval
    mode (running statistics) genuinely restricts all work to the enabled
    (sample, channel) pairs.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    gates = np.asarray(gates)
    if not np.all((gates == 0) | (gates == 1)):
        raise ValueError("selective path needs binary gates, got non-binary values")
    n, c_in, hh, ww = xd.shape
    c_out, _, kh, kw = p.filters.shape
    if gates.shape != (n, c_out):
        raise ValueError(
            f"gates shape {gates.shape} does not match (batch, out_channels) "
            f"({n}, {c_out})"
        )
    s, pad = p.stride, p.padding
    oh = (hh + 2 * pad - kh) // s + 1
    ow = (ww + 2 * pad - kw) // s + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    wdat = p.filters.data
    on = gates == 1
    out = np.zeros((n, c_out, oh, ow), dtype=xd.dtype)

    def conv_channel(rows: Array, c: int) -> Array:
        acc = np.zeros((len(rows), oh, ow), dtype=xd.dtype)
        for ic in range(c_in):
            for ki in range(kh):
                for kj in range(kw):
                    acc += wdat[c, ic, ki, kj] * xp[
                        rows, ic, ki : ki + s * oh : s, kj : kj + s * ow : s
                    ]
        if p.bias is not None:
            acc = acc + p.bias.data[c]
        return acc

    all_rows = np.arange(n)
    if training:
        if bn is None:
            for c in range(c_out):
                rows = all_rows[on[:, c]]
                if rows.size == 0:
                    continue
                out[rows, c] = np.maximum(conv_channel(rows, c), 0)
            return out
        # Batch statistics see the whole batch, so compute enabled channels
        # over all samples, with the same reduction geometry as batchnorm.
        full = np.zeros((n, c_out, oh, ow), dtype=xd.dtype)
        needed = [c for c in range(c_out) if on[:, c].any()]
        for c in needed:
            full[:, c] = conv_channel(all_rows, c)
        mu = full.mean(axis=(0, 2, 3), keepdims=True)
        diff = full - mu
        var = (diff * diff).mean(axis=(0, 2, 3), keepdims=True)
        xhat = diff / np.sqrt(var + bn.eps)
        y = bn.gamma.data.reshape(1, c_out, 1, 1) * xhat + bn.beta.data.reshape(
            1, c_out, 1, 1
        )
        r = np.maximum(y, 0)
        for c in needed:
            rows = all_rows[on[:, c]]
            out[rows, c] = r[rows, c]
        return out

    for c in range(c_out):
        rows = all_rows[on[:, c]]
        if rows.size == 0:
            continue
        maps = conv_channel(rows, c)
        if bn is not None:
            denom = np.sqrt(bn.running_var[c] + bn.eps)
            xhat = (maps - bn.running_mean[c]) / denom
            maps = bn.gamma.data[c] * xhat + bn.beta.data[c]
        out[rows, c] = np.maximum(maps, 0)
    return out


class GaterNet:
    """The gated backbone and its gater, bound to one parameter set.

    params maps dotted names to trainable Tensors; buffers holds batchnorm
    running statistics. Both are flat dicts so checkpoints, optimizers and
    phase-wise parameter selection all work by name prefix. Forward passes
    are pure (apart from batchnorm's running-stat updates in training
    mode); evaluation during training should use the same instance only
    from the training thread, or a loaded snapshot elsewhere.
    """

    def __init__(
        self,
        spec: ModelSpec,
        seed: int = 0,
        dtype=np.float32,
        include_probe: bool = False,
    ):
        validate_spec(spec)
        self.spec = spec
        self.dtype = np.dtype(dtype).type
        self.gate_map = build_gate_map(spec)
        rng = np.random.default_rng(seed)
        self.params, self.buffers = init_params(spec, rng, self.dtype, include_probe)
        self._bb_entries, _ = trace_shapes(spec.backbone, spec.input_shape)
        self._build_views(include_probe)

    def _build_views(self, include_probe: bool) -> None:
        def conv_view(prefix: str, i: int, layer: LayerSpec):
            conv = Conv2dParams(
                filters=self.params[f"{prefix}.{i}.filters"],
                bias=self.params.get(f"{prefix}.{i}.bias"),
                stride=layer.stride,
                padding=layer.padding,
            )
            bn = None
            if layer.batchnorm:
                bn = BatchNormParams(
                    gamma=self.params[f"{prefix}.{i}.bn.gamma"],
                    beta=self.params[f"{prefix}.{i}.bn.beta"],
                    running_mean=self.buffers[f"{prefix}.{i}.bn.running_mean"],
                    running_var=self.buffers[f"{prefix}.{i}.bn.running_var"],
                )
            return conv, bn

        self._backbone_views: list[tuple] = []
        for i, layer in enumerate(self.spec.backbone):
            if layer.kind == "conv":
                self._backbone_views.append(("conv", layer, *conv_view("backbone", i, layer), i))
            elif layer.kind == "pool":
                self._backbone_views.append(("pool", layer, None, None, i))
            else:
                self._backbone_views.append(
                    ("fc", layer, self.params[f"backbone.{i}.W"],
                     self.params[f"backbone.{i}.b"], i)
                )
        self._gater_views: list[tuple] = []
        for i, layer in enumerate(self.spec.gater):
            if layer.kind == "conv":
                self._gater_views.append(("conv", layer, *conv_view("gater", i, layer), i))
            else:
                self._gater_views.append(("pool", layer, None, None, i))

        self.head: GaterHeadParams | None = None
        if self.spec.gated_filter_total > 0:
            self.head = GaterHeadParams(
                W1=self.params["head.W1"],
                b1=self.params["head.b1"],
                bn=BatchNormParams(
                    gamma=self.params["head.bn.gamma"],
                    beta=self.params["head.bn.beta"],
                    running_mean=self.buffers["head.bn.running_mean"],
                    running_var=self.buffers["head.bn.running_var"],
                ),
                W2=self.params["head.W2"],
                b2=self.params["head.b2"],
            )
        self.probe = None
        if include_probe:
            self.probe = (self.params["probe.W"], self.params["probe.b"])

    # -- forward passes -------------------------------------------------------

    def gater_features(self, x: Tensor, training: bool) -> Tensor:
        """Gater conv stack then global average pooling: [N, h]."""
        if not self.spec.gater:
            raise ValueError("this spec has no gater stack")
        h = x
        for kind, layer, a, b, _ in self._gater_views:
            if kind == "conv":
                h = conv2d(h, a)
                if b is not None:
                    h = batchnorm(h, b, training)
                h = relu(h)
            else:
                h = avg_pool2d(h, layer.window)
        return global_avg_pool(h)

    def gater_head(self, f: Tensor, training: bool) -> Tensor:
        """Bottleneck head mapping pooled features [N, h] to scores [N, c]."""
        if self.head is None:
            raise ValueError("this spec has no gated filters, so no head")
        z = fully_connected(f, self.head.W1, self.head.b1)
        z = relu(batchnorm(z, self.head.bn, training))
        return fully_connected(z, self.head.W2, self.head.b2)

    def _run_backbone(self, x: Tensor, training: bool, selected: Tensor | None) -> Tensor:
        h = x
        n = x.shape[0]
        for kind, layer, a, b, i in self._backbone_views:
            if kind == "conv":
                if layer.gated and selected is not None:
                    lo, hi = self.gate_map.slices[i]
                    h = gated_conv_forward(h, a, b, selected[:, lo:hi], training)
                else:
                    h = conv2d(h, a)
                    if b is not None:
                        h = batchnorm(h, b, training)
                    h = relu(h)
            elif kind == "pool":
                h = avg_pool2d(h, layer.window)
            else:
                if h.ndim == 4:
                    h = h.reshape(n, self._bb_entries[i][1])
                h = fully_connected(h, a, b)
                if i < len(self.spec.backbone) - 1:
                    h = relu(h)
        return h

    def forward_backbone(self, x: Tensor, training: bool) -> Tensor:
        """Plain ungated backbone pass (every gate effectively 1)."""
        return self._run_backbone(x, training, None)

    def forward_probe(self, x: Tensor, training: bool) -> Tensor:
        """Gater features through the temporary pretraining classifier."""
        if self.probe is None:
            raise ValueError("model was built without a probe head")
        return fully_connected(self.gater_features(x, training), *self.probe)

    def forward(
        self,
        x: Tensor,
        training: bool,
        rng: np.random.Generator | None = None,
        dropout_rate: float = 0.0,
        force_branch: str | None = None,
    ) -> tuple[Tensor, GateBundle]:
        """Full gated pass; returns logits and the gate bundle.

        A spec with no gated layers degrades to the plain backbone (the
        bundle is empty with width 0). dropout_rate only applies in
        training mode, after branch selection, so binary gates stay binary.
        """
        mode = "train" if training else "eval"
        n = x.shape[0]
        if self.spec.gated_filter_total == 0:
            empty = Tensor(np.zeros((n, 0), dtype=x.dtype))
            bundle = semhash_forward(empty, mode, rng)
            return self._run_backbone(x, training, None), bundle
        f = self.gater_features(x, training)
        g_pre = self.gater_head(f, training)
        bundle = semhash_forward(g_pre, mode, rng, force_branch)
        selected = bundle.selected
        if training and dropout_rate > 0.0:
            selected = gate_dropout(selected, dropout_rate, rng)
        logits = self._run_backbone(x, training, selected)
        return logits, bundle

    # -- bookkeeping ----------------------------------------------------------

    def trainable(self, prefixes: tuple[str, ...] | None = None) -> dict[str, Tensor]:
        if prefixes is None:
            return dict(self.params)
        return {
            k: v for k, v in self.params.items()
            if any(k.startswith(p + ".") or k == p for p in prefixes)
        }

    def param_count(self) -> ParamCountReport:
        def count(prefix: str) -> int:
            return sum(
                t.data.size for k, t in self.params.items()
                if k.startswith(prefix + ".")
            )

        backbone, gater, head, probe = (
            count("backbone"), count("gater"), count("head"), count("probe")
        )
        if self.head is not None:
            head_w = self.head.weight_count
            head_single = self.head.single_layer_weight_count
        else:
            head_w = head_single = 0
        return ParamCountReport(
            backbone=backbone,
            gater=gater,
            head=head,
            probe=probe,
            total=backbone + gater + head,
            head_weight_count=head_w,
            head_single_layer_weight_count=head_single,
        )

"""The parameterized propagation network: stem, transition and one neuron per
internal concept.

Each neuron consumes the concatenation of the transition features ``h0`` and
the hidden features of every ancestor neuron, so a neuron at depth ``d`` has
``m0 + m * (d - 1)`` input channels. Its block is a 1x1 bottleneck to ``4m``
channels, a 3x3 conv down to ``m`` hidden channels, and a 1x1 head with one
logit map per child concept.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .hierarchy import ConceptHierarchy
from .tensor import ShapeError, Tensor, add, conv2d, dense_conv1x1, relu, take_samples

STRIDE = 8

AGGREGATIONS = ("concat", "sum")
PROPAGATIONS = ("dense", "parent_only")
HEAD_LOSSES = ("bce", "softmax")
STRUCTURES = ("dynamic", "fixed")


@dataclass
class ModelConfig:
    m: int = 48
    m0: int = 256
    bottleneck: int = 4
    aspp_rates: Tuple[int, int, int] = (1, 2, 3)
    in_channels: int = 3
    stem_channels: Tuple[int, ...] = (32, 64, 128, 128, 128)
    aggregation: str = "concat"
    propagation: str = "dense"
    head_loss: str = "bce"
    structure: str = "dynamic"
    loss_reduction: str = "mean"
    dtype: str = "float32"

    def __post_init__(self):
        self.aspp_rates = tuple(self.aspp_rates)
        self.stem_channels = tuple(self.stem_channels)
        if self.m <= 0 or self.m0 <= 0 or self.bottleneck <= 0:
            raise ValueError("m, m0 and bottleneck must be positive")
        if len(self.aspp_rates) != 3 or min(self.aspp_rates) <= 0:
            raise ValueError("aspp_rates needs three positive dilations")
        if len(self.stem_channels) != 5:
            raise ValueError("stem_channels lists five stage widths")
        for key, allowed in (("aggregation", AGGREGATIONS), ("propagation", PROPAGATIONS),
                             ("head_loss", HEAD_LOSSES), ("structure", STRUCTURES),
                             ("loss_reduction", ("mean", "sum")),
                             ("dtype", ("float32", "float64"))):
            if getattr(self, key) not in allowed:
                raise ValueError(f"{key} must be one of {allowed}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def input_channels(d: int, config: ModelConfig) -> int:
    """Width of a depth-``d`` neuron's bottleneck input."""
    if d < 1:
        raise ValueError(f"depth must be >= 1, got {d}")
    if config.propagation == "parent_only":
        return config.m0 if d == 1 else config.m
    if config.aggregation == "sum":
        return config.m
    return config.m0 + config.m * (d - 1)


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor
    pad: int = 0
    dilation: int = 1
    stride: int = 1

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.pad, self.dilation, self.stride)


@dataclass
class NeuronParams:
    concept: int
    depth: int
    conv1: Conv
    conv2: Conv
    head: Conv

    @property
    def num_children(self) -> int:
        return self.head.weight.shape[0]


@dataclass
class NeuronGraph:
    hierarchy: ConceptHierarchy
    config: ModelConfig
    stem: List[Conv]
    q: List[Conv]
    q_proj: Optional[Conv]
    neurons: Dict[int, NeuronParams] = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.neurons)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def params(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}

        def put(prefix, conv):
            out[prefix + ".weight"] = conv.weight
            out[prefix + ".bias"] = conv.bias

        for k, c in enumerate(self.stem):
            put(f"stem.{k}", c)
        for k, c in enumerate(self.q):
            put(f"q.branch{k}", c)
        if self.q_proj is not None:
            put("q.proj", self.q_proj)
        for nid in self.hierarchy.neuron_order():
            name = self.hierarchy.name_of(nid)
            p = self.neurons[nid]
            put(f"neuron.{name}.conv1", p.conv1)
            put(f"neuron.{name}.conv2", p.conv2)
            put(f"neuron.{name}.head", p.head)
        return out

    def neuron_params(self, nid: int) -> Dict[str, Tensor]:
        prefix = f"neuron.{self.hierarchy.name_of(nid)}."
        return {k: v for k, v in self.params().items() if k.startswith(prefix)}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            value = np.asarray(state[k])
            if value.shape != p.data.shape:
                raise ShapeError(f"{k}: checkpoint shape {value.shape} vs model {p.data.shape}")
            p.data = value.astype(self.dtype)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params().values())


def _make_conv(rng, dtype, out_c, in_c, k, pad=0, dilation=1, stride=1) -> Conv:
    fan_in = in_c * k * k
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(out_c, in_c, k, k)).astype(dtype)
    b = np.zeros(out_c, dtype=dtype)
    return Conv(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), pad, dilation, stride)


def build_model(h: ConceptHierarchy, config: Optional[ModelConfig] = None, seed: int = 0) -> NeuronGraph:
    """Instantiate parameters for every neuron concept (fan-in uniform init)."""
    config = config or ModelConfig()
    if not h.neurons:
        raise ValueError("degenerate hierarchy: no concept has two or more children")
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    stem = []
    prev = config.in_channels
    for k, width in enumerate(config.stem_channels):
        stem.append(_make_conv(rng, dt, width, prev, 3, pad=1, stride=2 if k < 3 else 1))
        prev = width
    q = [_make_conv(rng, dt, config.m0, prev, 3, pad=r, dilation=r) for r in config.aspp_rates]
    q_proj = None
    if config.aggregation == "sum" and config.propagation == "dense":
        q_proj = _make_conv(rng, dt, config.m, config.m0, 1)
    width = config.bottleneck * config.m
    neurons = {}
    for nid in h.neuron_order():
        d = h.neuron_depth(nid)
        neurons[nid] = NeuronParams(
            concept=nid,
            depth=d,
            conv1=_make_conv(rng, dt, width, input_channels(d, config), 1),
            conv2=_make_conv(rng, dt, config.m, width, 3, pad=1),
            head=_make_conv(rng, dt, len(h.children[nid]), config.m, 1),
        )
    model = NeuronGraph(h, config, stem, q, q_proj, neurons)
    for nid, p in neurons.items():
        from_path = path_input_width(h, nid, config)
        if p.conv1.weight.shape[1] != from_path:
            raise ShapeError(f"neuron {h.name_of(nid)} channels: conv1 takes "
                             f"{p.conv1.weight.shape[1]}, its ancestor path supplies {from_path}")
    return model


def path_input_width(h: ConceptHierarchy, nid: int, config: ModelConfig) -> int:
    """Input width counted from the features a neuron actually receives."""
    ancestors = h.neuron_ancestors(nid)
    root = config.m if config.aggregation == "sum" and config.propagation == "dense" else config.m0
    if config.propagation == "parent_only":
        return root if not ancestors else config.m
    if config.aggregation == "sum":
        return config.m
    return root + config.m * len(ancestors)


def stem_forward(model: NeuronGraph, image: Tensor) -> Tensor:
    """Five conv+ReLU stages; the first three halve the resolution."""
    if image.data.ndim != 4:
        raise ShapeError(f"stem input: expected 4-D image batch, got rank {image.data.ndim}")
    hh, ww = image.shape[2:]
    if hh % STRIDE or ww % STRIDE:
        raise ShapeError(f"stem height/width: {hh}x{ww} not divisible by {STRIDE}")
    x = image
    for conv in model.stem:
        x = relu(conv(x))
    return x


def transition_forward(model: NeuronGraph, x: Tensor) -> Tensor:
    """Sum of the three dilated 3x3 branches, then ReLU."""
    return relu(add([branch(x) for branch in model.q]))


def root_features(model: NeuronGraph, h0: Tensor) -> Tensor:
    """What the root slot of each neuron input holds: h0, or its m-channel
    projection under sum aggregation."""
    if model.q_proj is not None:
        return model.q_proj(h0)
    return h0


def neuron_forward(model: NeuronGraph, nid: int, inputs: Sequence[Tensor],
                   assembled: Optional[np.ndarray] = None, retain_concat: bool = False,
                   rows: Optional[Sequence] = None) -> Tuple[Tensor, Tensor]:
    """Run neuron ``nid`` on ``inputs`` and return (hidden, logits).

    ``inputs`` is ``[root, h_a1, ..., h_a(d-1)]`` in root-to-parent order for
    dense propagation, and ``[parent hidden]`` (``[h0]`` at the root) for
    parent-only propagation.
    """
    p = model.neurons[nid]
    cfg = model.config
    name = model.hierarchy.name_of(nid)
    want = 1 if cfg.propagation == "parent_only" else p.depth
    if len(inputs) != want:
        raise ShapeError(f"neuron {name} input count: got {len(inputs)}, depth {p.depth} needs {want}")
    if cfg.propagation == "dense" and cfg.aggregation == "sum":
        if rows is not None:
            inputs = [t if r is None else take_samples(t, r) for t, r in zip(inputs, rows)]
        z = p.conv1(add(list(inputs)))
    else:
        widths = sum(t.shape[1] for t in inputs)
        if widths != p.conv1.weight.shape[1]:
            raise ShapeError(f"neuron {name} channels: inputs sum to {widths}, "
                             f"expected {p.conv1.weight.shape[1]}")
        z = dense_conv1x1(inputs, p.conv1.weight, p.conv1.bias, rows=rows,
                          assembled=assembled, retain_concat=retain_concat)
    hidden = relu(p.conv2(relu(z)))
    return hidden, p.head(hidden)

"""Network components: partitionable conv stages, gated-attention MIL heads,
and patch reconstructors, plus a flat-blob checkpoint format.

Everything is a plain parameter container over the tensor engine; forward
passes are single-threaded per training job.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from localsup import tensor as T
from localsup.tensor import Parameter, Tensor

__all__ = [
    "Conv",
    "Relu",
    "MaxPool",
    "StagePlan",
    "Stage",
    "GatedAttentionHead",
    "Reconstructor",
    "AuxiliaryModel",
    "NetworkPartition",
    "ConfigError",
    "CheckpointError",
    "plan_output_shape",
    "desk_backbone_plans",
    "compact_backbone_plans",
    "save_checkpoint",
    "load_checkpoint",
    "DESK_CHANNELS",
    "DESK_STRIDES",
    "COMPACT_CHANNELS",
    "COMPACT_STRIDES",
]


class ConfigError(ValueError):
    """Raised at build time when a plan is internally inconsistent."""


class CheckpointError(ValueError):
    """Raised when a checkpoint does not match the current plan."""


# ---------------------------------------------------------------------------
# Layer descriptors and plans


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: Optional[int] = None  # None -> kernel // 2

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2


LayerSpec = Union[Conv, Relu, MaxPool]


@dataclass
class StagePlan:
    """Declarative description of one gradient-isolated backbone stage."""

    layers: list = field(default_factory=list)
    frozen: bool = False

    @property
    def spatial_stride(self) -> int:
        s = 1
        for layer in self.layers:
            if isinstance(layer, Conv):
                s *= layer.stride
            elif isinstance(layer, MaxPool):
                s *= layer.kernel
        return s

    def out_channels(self, in_channels: int) -> int:
        c = in_channels
        for layer in self.layers:
            if isinstance(layer, Conv):
                c = layer.out_channels
        return c


def plan_output_shape(plan: StagePlan, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
    """Analytic (C, H, W) after a stage, from the layer stride formula alone."""
    c, h, w = in_shape
    for layer in plan.layers:
        if isinstance(layer, Conv):
            h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
            w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
            c = layer.out_channels
        elif isinstance(layer, MaxPool):
            h //= layer.kernel
            w //= layer.kernel
        if h < 1 or w < 1:
            raise ConfigError(f"input too small: spatial extent collapses to {h}x{w} inside stage")
    return c, h, w


def _fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    # U(-sqrt(3/fan_in), +sqrt(3/fan_in)) keeps output variance at 1/fan_in scale
    limit = np.sqrt(3.0 / max(1, fan_in))
    return rng.uniform(-limit, limit, size=shape)


class Stage:
    """Runtime stage: parameters built from a StagePlan."""

    def __init__(self, plan: StagePlan, in_channels: int, rng: np.random.Generator,
                 name: str = "stage"):
        self.plan = plan
        self.name = name
        self.in_channels = in_channels
        self.out_channels = plan.out_channels(in_channels)
        self.spatial_stride = plan.spatial_stride
        self._params: list[tuple[str, Tensor]] = []
        c = in_channels
        conv_idx = 0
        for layer in plan.layers:
            if isinstance(layer, Conv):
                fan_in = c * layer.kernel * layer.kernel
                w = Parameter(_fan_in_uniform(rng, (layer.out_channels, c, layer.kernel, layer.kernel), fan_in),
                              requires_grad=not plan.frozen)
                b = Parameter(np.zeros(layer.out_channels), requires_grad=not plan.frozen)
                self._params.append((f"conv{conv_idx}.weight", w))
                self._params.append((f"conv{conv_idx}.bias", b))
                conv_idx += 1
                c = layer.out_channels

    @property
    def frozen(self) -> bool:
        return self.plan.frozen

    def freeze(self):
        self.plan.frozen = True
        for _, p in self._params:
            p.requires_grad = False
            p.grad = None

    def parameters(self) -> list[Tensor]:
        """Trainable parameters; empty for a frozen stage."""
        if self.plan.frozen:
            return []
        return [p for _, p in self._params]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{self.name}.{n}", p) for n, p in self._params]

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.in_channels:
            raise T.ShapeMismatchError(
                f"{self.name}: input has {x.data.shape[1]} channels, plan expects {self.in_channels}")
        plan_output_shape(self.plan, x.data.shape[1:])  # rejects too-small inputs up front
        h = x
        it = iter(self._params)
        for layer in self.plan.layers:
            if isinstance(layer, Conv):
                w = next(it)[1]
                b = next(it)[1]
                h = T.conv2d(h, w, b, stride=layer.stride, padding=layer.pad)
            elif isinstance(layer, Relu):
                h = T.relu(h)
            elif isinstance(layer, MaxPool):
                h = T.maxpool2d(h, layer.kernel)
        return h

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


# ---------------------------------------------------------------------------
# Gated-attention MIL head


class GatedAttentionHead:
    """Attention-pooled bag classifier over the spatial instances of a feature map.

    Per instance h_k, the attention logit is w^T (tanh(V h_k) * sigmoid(U h_k));
    weights are softmax-normalized over instances, so they are non-negative and
    sum to one. ``gated=False`` drops the sigmoid gate (the ungated variant).
    ``instance_cap`` bounds the number of instances: larger maps are first
    average-pooled down to a square grid, which keeps auxiliary heads small on
    very large feature maps.
    """

    def __init__(self, embed_dim: int, attn_dim: int, num_classes: int,
                 rng: np.random.Generator, gated: bool = True,
                 instance_cap: Optional[int] = None, name: str = "head"):
        self.embed_dim = embed_dim
        self.attn_dim = attn_dim
        self.num_classes = num_classes
        self.gated = gated
        self.instance_cap = instance_cap
        self.name = name
        self.V = Parameter(_fan_in_uniform(rng, (attn_dim, embed_dim), embed_dim))
        self.U = Parameter(_fan_in_uniform(rng, (attn_dim, embed_dim), embed_dim)) if gated else None
        # small-scale attention vector starts near-uniform attention
        self.w = Parameter(rng.uniform(-1e-2, 1e-2, size=(1, attn_dim)))
        self.cls_w = Parameter(_fan_in_uniform(rng, (num_classes, embed_dim), embed_dim))
        self.cls_b = Parameter(np.zeros(num_classes))

    def parameters(self) -> list[Tensor]:
        ps = [self.V, self.w, self.cls_w, self.cls_b]
        if self.U is not None:
            ps.insert(1, self.U)
        return ps

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        names = ["V", "U", "w", "cls_w", "cls_b"] if self.U is not None else ["V", "w", "cls_w", "cls_b"]
        return [(f"{self.name}.{n}", p) for n, p in zip(names, self.parameters())]

    def _instances(self, x: Tensor) -> Tensor:
        _, _, h, w = x.data.shape
        if self.instance_cap is not None and h * w > self.instance_cap:
            g = max(1, int(np.sqrt(self.instance_cap)))
            x = T.adaptive_avgpool2d(x, min(h, g), min(w, g))
        return T.to_instances(x)

    def attend(self, h: Tensor) -> Tensor:
        """Attention weights over instance rows h (N, C); non-negative, sum to 1."""
        pre = T.tanh(T.linear(h, self.V))
        if self.gated:
            pre = T.mul(pre, T.sigmoid(T.linear(h, self.U)))
        scores = T.reshape(T.linear(pre, self.w), (h.data.shape[0],))
        return T.softmax(scores)

    def pool(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Bag embedding (1, C) and attention weights (N,) for a (1, C, H, W) map."""
        h = self._instances(x)
        attn = self.attend(h)
        bag = T.matmul(T.reshape(attn, (1, h.data.shape[0])), h)
        return bag, attn

    def forward(self, x: Tensor) -> Tensor:
        """Bag logits (num_classes,) for a (1, C, H, W) feature map."""
        bag, _ = self.pool(x)
        return T.reshape(T.linear(bag, self.cls_w, self.cls_b), (self.num_classes,))

    def forward_instances(self, h: Tensor) -> Tensor:
        """Bag logits straight from precomputed instance rows (N, C)."""
        attn = self.attend(h)
        bag = T.matmul(T.reshape(attn, (1, h.data.shape[0])), h)
        return T.reshape(T.linear(bag, self.cls_w, self.cls_b), (self.num_classes,))

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


# ---------------------------------------------------------------------------
# Patch reconstructor


class Reconstructor:
    """Maps a cropped (P, C, p, p) feature patch batch back to the previous
    stage's channels and resolution: (P, C_prev, p*s, p*s).

    conv3x3 -> relu -> conv3x3 projecting to C_prev -> nearest upsample by the
    stage stride (skipped when s == 1).
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int,
                 rng: np.random.Generator, name: str = "recon"):
        if stride < 1:
            raise ConfigError(f"{name}: stride must be >= 1, got {stride}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.name = name
        fan1 = in_channels * 9
        self.w1 = Parameter(_fan_in_uniform(rng, (in_channels, in_channels, 3, 3), fan1))
        self.b1 = Parameter(np.zeros(in_channels))
        self.w2 = Parameter(_fan_in_uniform(rng, (out_channels, in_channels, 3, 3), fan1))
        self.b2 = Parameter(np.zeros(out_channels))

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{self.name}.{n}", p) for n, p in
                zip(["conv0.weight", "conv0.bias", "conv1.weight", "conv1.bias"], self.parameters())]

    def forward(self, patches: Tensor) -> Tensor:
        h = T.relu(T.conv2d(patches, self.w1, self.b1, stride=1, padding=1))
        h = T.conv2d(h, self.w2, self.b2, stride=1, padding=1)
        if self.stride > 1:
            h = T.upsample_nearest(h, self.stride)
        return h

    def __call__(self, patches: Tensor) -> Tensor:
        return self.forward(patches)


class AuxiliaryModel:
    """Per-stage training head: auxiliary classifier plus reconstruction unit."""

    def __init__(self, classifier: GatedAttentionHead, recon: Reconstructor, sampler,
                 stage_stride: int, name: str = "aux"):
        if recon.stride != stage_stride:
            raise ConfigError(
                f"{name}: reconstructor stride {recon.stride} != stage stride {stage_stride}")
        self.classifier = classifier
        self.recon = recon
        self.sampler = sampler
        self.stage_stride = stage_stride
        self.name = name

    def parameters(self) -> list[Tensor]:
        return self.classifier.parameters() + self.recon.parameters()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.classifier.named_parameters() + self.recon.named_parameters()


# ---------------------------------------------------------------------------
# Partition


class NetworkPartition:
    """The K stages, the bag-classifier head, and K-1 auxiliary models."""

    def __init__(self, stages: list[Stage], head: GatedAttentionHead,
                 aux: list[AuxiliaryModel]):
        if len(aux) != len(stages) - 1:
            raise ConfigError(f"need exactly K-1 auxiliary models, got {len(aux)} for K={len(stages)}")
        for a, b in zip(stages[:-1], stages[1:]):
            if a.out_channels != b.in_channels:
                raise ConfigError(
                    f"channel mismatch: {a.name} outputs {a.out_channels}, {b.name} expects {b.in_channels}")
        if head.embed_dim != stages[-1].out_channels:
            raise ConfigError(
                f"head embed_dim {head.embed_dim} != final stage channels {stages[-1].out_channels}")
        self.stages = stages
        self.head = head
        self.aux = aux

    @property
    def k(self) -> int:
        return len(self.stages)

    @classmethod
    def build(cls, plans: Sequence[StagePlan], in_channels: int, num_classes: int,
              sampler_cfg, seed: int = 0, head_attn_dim: int = 32,
              aux_instance_cap: Optional[int] = 1024,
              head_instance_cap: Optional[int] = None) -> "NetworkPartition":
        """Construct stages, head, and auxiliaries with per-component seed streams.

        The same (plans, seed) always produces bit-identical parameters.
        """
        stages = []
        c = in_channels
        for i, plan in enumerate(plans):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 1, i]))
            stages.append(Stage(plan, c, rng, name=f"stage{i}"))
            c = stages[-1].out_channels
        head = GatedAttentionHead(
            embed_dim=c, attn_dim=head_attn_dim, num_classes=num_classes,
            rng=np.random.default_rng(np.random.SeedSequence([seed, 2])),
            instance_cap=head_instance_cap, name="head")
        aux = []
        for i in range(len(stages) - 1):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 3, i]))
            classifier = GatedAttentionHead(
                embed_dim=stages[i].out_channels, attn_dim=max(4, head_attn_dim // 2),
                num_classes=num_classes, rng=rng,
                instance_cap=aux_instance_cap, name=f"aux{i}.cls")
            recon = Reconstructor(
                in_channels=stages[i].out_channels, out_channels=stages[i].in_channels,
                stride=stages[i].spatial_stride, rng=rng, name=f"aux{i}.recon")
            aux.append(AuxiliaryModel(classifier, recon, sampler_cfg, stages[i].spatial_stride,
                                      name=f"aux{i}"))
        return cls(stages, head, aux)

    def forward_backbone(self, x: Tensor, upto: Optional[int] = None) -> Tensor:
        """Run stages [0, upto) sequentially; upto=None runs all of them."""
        h = x
        for stage in self.stages[:upto]:
            h = stage(h)
        return h

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for s in self.stages:
            out.extend(s.named_parameters())
        out.extend(self.head.named_parameters())
        for a in self.aux:
            out.extend(a.named_parameters())
        return out

    def backbone_parameter_count(self) -> int:
        return sum(p.data.size for s in self.stages for _, p in s.named_parameters())


# ---------------------------------------------------------------------------
# Plan presets

# Desk-scale 8-block backbone. Channel widths rise steeply enough with depth to
# keep per-block activation mass roughly level, which is what makes per-stage
# training memory drop like 1/K instead of being dominated by the first stage.
DESK_CHANNELS = (8, 8, 32, 32, 96, 96, 224, 224)
DESK_STRIDES = (2, 1, 2, 1, 2, 1, 2, 1)

# Lighter 6-block backbone for desk training experiments (stride-3 stem).
COMPACT_CHANNELS = (12, 24, 32, 48, 64, 64)
COMPACT_STRIDES = (3, 2, 2, 2, 2, 1)


def _grouped_plans(channels: Sequence[int], strides: Sequence[int], k: int,
                   first_conv_stride: Optional[int], frozen_stages: int) -> list[StagePlan]:
    n = len(channels)
    if k < 1 or n % k:
        raise ConfigError(f"k={k} must evenly divide the {n} backbone blocks")
    strides = list(strides)
    if first_conv_stride is not None:
        strides[0] = first_conv_stride
    per = n // k
    plans = []
    for i in range(k):
        layers = []
        for j in range(i * per, (i + 1) * per):
            layers.append(Conv(channels[j], kernel=3, stride=strides[j]))
            layers.append(Relu())
        plans.append(StagePlan(layers, frozen=i < frozen_stages))
    return plans


def desk_backbone_plans(k: int = 4, first_conv_stride: Optional[int] = None,
                        frozen_stages: int = 0) -> list[StagePlan]:
    """8 conv blocks (3x3, relu, stride 2 at blocks 1,3,5,7) split into k stages."""
    return _grouped_plans(DESK_CHANNELS, DESK_STRIDES, k, first_conv_stride, frozen_stages)


def compact_backbone_plans(k: int = 3, first_conv_stride: Optional[int] = None,
                           frozen_stages: int = 0) -> list[StagePlan]:
    """6 thin conv blocks sized for minutes-scale CPU training, split into k stages."""
    return _grouped_plans(COMPACT_CHANNELS, COMPACT_STRIDES, k, first_conv_stride, frozen_stages)


# ---------------------------------------------------------------------------
# Checkpoints

_MANIFEST_HEADER = "localsup-checkpoint v1"


def save_checkpoint(directory: Union[str, Path], named_params: Sequence[tuple[str, Tensor]]):
    """Write a manifest (name, shape, byte offset) plus one flat little-endian
    float64 blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [_MANIFEST_HEADER]
    blob = bytearray()
    for name, p in named_params:
        shape = "x".join(str(d) for d in p.data.shape) or "scalar"
        lines.append(f"{name} {shape} {len(blob)}")
        blob.extend(p.data.astype("<f8").tobytes())
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    (directory / "weights.bin").write_bytes(bytes(blob))


def load_checkpoint(directory: Union[str, Path], named_params: Sequence[tuple[str, Tensor]]):
    """Load a checkpoint in place, validating names and shapes against the plan."""
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    blob_path = directory / "weights.bin"
    if not manifest_path.exists() or not blob_path.exists():
        raise CheckpointError(f"checkpoint incomplete under {directory}")
    lines = manifest_path.read_text().splitlines()
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise CheckpointError(f"unrecognized manifest header in {manifest_path}")
    entries = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        name, shape_s, offset_s = line.rsplit(" ", 2)
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        entries[name] = (shape, int(offset_s))
    blob = blob_path.read_bytes()
    for name, p in named_params:
        if name not in entries:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        shape, offset = entries[name]
        if shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {shape} vs plan {p.data.shape}")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        p.data = arr.astype(np.float64).copy()

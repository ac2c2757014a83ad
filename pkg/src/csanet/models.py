"""Toy staged CNN with optional channel attention on each stage's last block.

The backbone is a stack of (3x3 conv -> relu) blocks grouped into stages;
the first conv of every stage after the first downsamples with stride 2.
For the ``se`` and ``csa`` variants a gate block recalibrates the output of
each stage's final conv. Backbone initialization is driven by a seed stream
separate from the attention stream, so all three variants share identical
backbone weights under the same seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import CsaBlock, SeBlock, csa_forward, recalibrate, se_forward
from .autodiff import Node
from .tensor_ops import Array

VARIANTS = ("baseline", "se", "csa")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one CNN variant."""

    variant: str = "baseline"
    stage_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    reduction: int = 16
    num_classes: int = 4
    in_channels: int = 1
    seed: int = 0
    stop_grad_weights: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if not self.stage_channels or any(c < 1 for c in self.stage_channels):
            raise ValueError("stage_channels must be a non-empty list of positive ints")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.reduction < 1:
            raise ValueError("reduction must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(blob: str) -> "ModelSpec":
        fields = json.loads(blob)
        fields["stage_channels"] = tuple(fields["stage_channels"])
        return ModelSpec(**fields)


@dataclass
class ForwardTrace:
    """Per-stage intermediates captured during one forward pass."""

    stage_features: list[Array] = field(default_factory=list)
    attention: list[Array] = field(default_factory=list)


class Model:
    """Parameter container plus the forward graph builder."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        backbone_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
        attn_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))

        self.conv_kernels: list[list[Node]] = []
        in_ch = spec.in_channels
        for stage_ch in spec.stage_channels:
            stage_kernels = []
            for block in range(spec.blocks_per_stage):
                fan_in = in_ch * 9
                bound = math.sqrt(6.0 / fan_in)  # He-uniform: keeps relu activations O(1)
                k = backbone_rng.uniform(-bound, bound, (stage_ch, in_ch, 3, 3))
                stage_kernels.append(ad.parameter(k))
                in_ch = stage_ch
            self.conv_kernels.append(stage_kernels)

        last_ch = spec.stage_channels[-1]
        bound = 1.0 / math.sqrt(last_ch)
        self.fc_weight = ad.parameter(
            backbone_rng.uniform(-bound, bound, (spec.num_classes, last_ch))
        )
        self.fc_bias = ad.parameter(backbone_rng.uniform(-bound, bound, spec.num_classes))

        self.attention_blocks: list[CsaBlock | SeBlock | None] = []
        for stage_ch in spec.stage_channels:
            if spec.variant == "csa":
                self.attention_blocks.append(
                    CsaBlock(
                        stage_ch,
                        spec.reduction,
                        stop_grad_weights=spec.stop_grad_weights,
                        rng=attn_rng,
                    )
                )
            elif spec.variant == "se":
                self.attention_blocks.append(SeBlock(stage_ch, spec.reduction, rng=attn_rng))
            else:
                self.attention_blocks.append(None)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Node]:
        named: dict[str, Node] = {}
        for s, stage_kernels in enumerate(self.conv_kernels):
            for b, kernel in enumerate(stage_kernels):
                named[f"stage{s}.conv{b}.kernel"] = kernel
        for s, block in enumerate(self.attention_blocks):
            if block is not None:
                named.update(block.named_parameters(prefix=f"stage{s}.attn."))
        named["classifier.weight"] = self.fc_weight
        named["classifier.bias"] = self.fc_bias
        return named

    def parameters(self) -> list[Node]:
        return list(self.named_parameters().values())

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = sorted(set(named) - set(state))
        extra = sorted(set(state) - set(named))
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={missing}, unexpected={extra}")
        for name, node in named.items():
            if node.value.shape != state[name].shape:
                raise ValueError(
                    f"shape mismatch for {name}: model {node.value.shape}, "
                    f"checkpoint {state[name].shape}"
                )
            node.value[...] = state[name]

    # -- forward ------------------------------------------------------------

    def forward(self, image: Array, trace: ForwardTrace | None = None) -> Node:
        """Logits for one C x H x W sample; optionally records stage features."""
        x = ad.as_node(np.asarray(image, dtype=np.float64))
        for s, stage_kernels in enumerate(self.conv_kernels):
            for b, kernel in enumerate(stage_kernels):
                stride = 2 if (s > 0 and b == 0) else 1
                x = ad.relu(ad.conv2d(x, kernel, stride=stride, pad=1))
            block = self.attention_blocks[s]
            if trace is not None:
                trace.stage_features.append(x.value.copy())
            if isinstance(block, CsaBlock):
                p, _ = csa_forward(block, x)
                x = recalibrate(x, p)
            elif isinstance(block, SeBlock):
                p = se_forward(block, x)
                x = recalibrate(x, p)
            else:
                p = None
            if trace is not None:
                if p is None:
                    trace.attention.append(np.ones(x.value.shape[0]))
                else:
                    trace.attention.append(p.value.copy())
        pooled = ad.global_avg_pool(x)
        return ad.linear(pooled, self.fc_weight, self.fc_bias)

    def predict(self, image: Array) -> np.ndarray:
        """Class scores for one sample as a plain array (no graph kept)."""
        with ad.no_grad():
            return self.forward(image).value


def build_model(spec: ModelSpec) -> Model:
    """Construct and initialize the variant described by ``spec``."""
    return Model(spec)

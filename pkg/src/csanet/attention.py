"""Channel-gating blocks: the spatial-autocorrelation gate and an SE baseline.

Both blocks share the same bottleneck MLP (reduce by ``r``, relu, expand,
sigmoid) and therefore identical parameter counts; they differ only in the
channel descriptor fed to the MLP. The squeeze-excite baseline uses the raw
per-channel spatial mean, which is sensitive to affine rescaling of the
input. The autocorrelation gate standardizes that mean and weighs it by
per-sample inter-channel spatial weights, making the attention map
invariant to positive affine transforms of the feature map.

The forward paths here build autodiff graphs; the plain-numpy pipeline in
``spatial_stats`` is the reference they are tested against value-for-value.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import spatial_stats
from .autodiff import Node, as_node
from .tensor_ops import Array, ShapeMismatchError


def hidden_width(channels: int, reduction: int) -> int:
    """Bottleneck width: ceil(C / r), floored at 4 so tiny stages keep capacity."""
    return max(math.ceil(channels / reduction), 4)


class _GateMlp:
    """Shared reduce/expand MLP; subclasses choose the descriptor."""

    def __init__(
        self,
        channels: int,
        reduction: int = 16,
        rng: np.random.Generator | None = None,
        zero_init: bool = False,
    ):
        if channels < 1 or reduction < 1:
            raise ValueError("channels and reduction must be positive")
        self.channels = channels
        self.reduction = reduction
        hidden = hidden_width(channels, reduction)
        self.hidden = hidden
        if zero_init:
            d_w = np.zeros((hidden, channels))
            d_b = np.zeros(hidden)
            u_w = np.zeros((channels, hidden))
            u_b = np.zeros(channels)
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            d_bound = 1.0 / math.sqrt(channels)
            u_bound = 1.0 / math.sqrt(hidden)
            d_w = rng.uniform(-d_bound, d_bound, (hidden, channels))
            d_b = rng.uniform(-d_bound, d_bound, hidden)
            u_w = rng.uniform(-u_bound, u_bound, (channels, hidden))
            # Open the gate (sigmoid(2) ~ 0.88) at init. Without batch norm a
            # 0.5 gate per stage attenuates activations 8x on a 3-stage net
            # and stalls early training; starting near identity lets the
            # gate learn to suppress instead.
            u_b = 2.0 + rng.uniform(-u_bound, u_bound, channels)
        self.d_weight = ad.parameter(d_w)
        self.d_bias = ad.parameter(d_b)
        self.u_weight = ad.parameter(u_w)
        self.u_bias = ad.parameter(u_b)

    def parameters(self) -> list[Node]:
        return [self.d_weight, self.d_bias, self.u_weight, self.u_bias]

    def named_parameters(self, prefix: str = "") -> dict[str, Node]:
        return {
            f"{prefix}d_weight": self.d_weight,
            f"{prefix}d_bias": self.d_bias,
            f"{prefix}u_weight": self.u_weight,
            f"{prefix}u_bias": self.u_bias,
        }

    def _gate(self, descriptor: Node) -> Node:
        hidden = ad.relu(ad.linear(descriptor, self.d_weight, self.d_bias))
        return ad.sigmoid(ad.linear(hidden, self.u_weight, self.u_bias))


class CsaBlock(_GateMlp):
    """Gate driven by the standardized local autocorrelation of the channels."""

    def __init__(
        self,
        channels: int,
        reduction: int = 16,
        eps_sigma: float = spatial_stats.DEFAULT_EPS_SIGMA,
        eps_dist: float = spatial_stats.DEFAULT_EPS_DIST,
        stop_grad_weights: bool = False,
        rng: np.random.Generator | None = None,
        zero_init: bool = False,
    ):
        super().__init__(channels, reduction, rng, zero_init)
        self.eps_sigma = eps_sigma
        self.eps_dist = eps_dist
        self.stop_grad_weights = stop_grad_weights


class SeBlock(_GateMlp):
    """Squeeze-excite baseline: the raw spatial mean drives the same MLP."""


@dataclass(frozen=True)
class CsaTrace:
    """Intermediates of one gate evaluation, for analysis and verification."""

    x: Array
    z: Array
    i_local: Array
    q: Array
    w: Array
    weights_degenerate: bool
    sigma_floor_hit: bool


def channel_attribute(f) -> Node:
    """Per-channel global context: the spatial mean of each channel map."""
    return ad.global_avg_pool(as_node(f))


@functools.lru_cache(maxsize=32)
def _off_diagonal_mask(channels: int) -> np.ndarray:
    mask = np.ones((channels, channels))
    np.fill_diagonal(mask, 0.0)
    mask.setflags(write=False)  # cached; nobody may scribble on it
    return mask


def _weights_graph(f: Node, eps_dist: float) -> tuple[Node, bool]:
    """Differentiable unitary spatial weights from a feature-map Node."""
    channels = f.value.shape[0]
    if channels == 1:
        return as_node(np.zeros((1, 1))), True
    mask = as_node(_off_diagonal_mask(channels))
    rows = ad.reshape(f, (channels, -1))
    dist = ad.sqrt(ad.pairwise_sq_dist(rows), guard=spatial_stats.DIST_SQ_GUARD)
    mean_dist = ad.nsum(dist * mask) / (channels * (channels - 1))
    if float(mean_dist.value) < eps_dist:
        contiguity = mask  # uniform fallback: all channels coincide
        degenerate = True
    else:
        contiguity = ad.exp(-(dist / mean_dist)) * mask
        degenerate = False
    weights = contiguity / ad.nsum(contiguity)
    return weights, degenerate


def _standardize_graph(x: Node, eps_sigma: float) -> tuple[Node, bool]:
    """Differentiable zero-mean/unit-std map with the documented sigma floor."""
    centered = x - ad.nmean(x)
    sigma = ad.sqrt(ad.nmean(centered * centered))
    if float(sigma.value) < eps_sigma:
        return as_node(np.zeros_like(x.value)), True
    return centered / sigma, False


def csa_forward(block: CsaBlock, f) -> tuple[Node, CsaTrace]:
    """Attention map from the spatial-autocorrelation descriptor of ``f``.

    Returns ``(p, trace)``. ``p`` is a length-C Node with entries in (0,1);
    the trace carries numpy copies of every intermediate so analyses never
    reach into graph internals. Gradients flow through the weight matrix
    unless the block's ``stop_grad_weights`` ablation flag is set.
    """
    f = as_node(f)
    if f.value.ndim != 3 or f.value.shape[0] != block.channels:
        raise ShapeMismatchError(
            f"feature map {f.value.shape} does not match a {block.channels}-channel block"
        )
    x = ad.global_avg_pool(f)
    weights, degenerate = _weights_graph(f, block.eps_dist)
    if block.stop_grad_weights:
        weights = ad.detach(weights)
    z, _ = _standardize_graph(x, block.eps_sigma)
    i_local = z * ad.matmul(weights, z)
    q, floor_hit = _standardize_graph(i_local, block.eps_sigma)
    p = block._gate(q)
    trace = CsaTrace(
        x=x.value.copy(),
        z=z.value.copy(),
        i_local=i_local.value.copy(),
        q=q.value.copy(),
        w=weights.value.copy(),
        weights_degenerate=degenerate,
        sigma_floor_hit=floor_hit,
    )
    return p, trace


def se_forward(block: SeBlock, f) -> Node:
    """Squeeze-excite attention map: the raw pooled context through the MLP."""
    f = as_node(f)
    if f.value.ndim != 3 or f.value.shape[0] != block.channels:
        raise ShapeMismatchError(
            f"feature map {f.value.shape} does not match a {block.channels}-channel block"
        )
    return block._gate(ad.global_avg_pool(f))


def recalibrate(f, p) -> Node:
    """Channel-wise rescaling of ``f`` by the attention map ``p``."""
    return ad.scale_channels(as_node(f), as_node(p))


def param_count(block: _GateMlp) -> int:
    """Exact trainable scalar count of a gate block."""
    return sum(p.value.size for p in block.parameters())


def conjugate_by_permutation(block: _GateMlp, perm: np.ndarray):
    """The same gate expressed in a permuted channel order.

    If ``g`` maps descriptors to attention, the returned block computes
    ``g`` after relabeling channels by ``perm`` (reduce weights gather their
    columns through ``perm``; expand weights and bias scatter rows through
    it). Feeding it ``f[perm]`` reproduces ``p[perm]`` of the original
    block, which is the sense in which the gate is permutation-equivariant.
    """
    perm = np.asarray(perm)
    if isinstance(block, CsaBlock):
        twin = CsaBlock(
            block.channels,
            block.reduction,
            eps_sigma=block.eps_sigma,
            eps_dist=block.eps_dist,
            stop_grad_weights=block.stop_grad_weights,
            zero_init=True,
        )
    else:
        twin = SeBlock(block.channels, block.reduction, zero_init=True)
    twin.d_weight.value[...] = block.d_weight.value[:, perm]
    twin.d_bias.value[...] = block.d_bias.value
    twin.u_weight.value[...] = block.u_weight.value[perm, :]
    twin.u_bias.value[...] = block.u_bias.value[perm]
    return twin

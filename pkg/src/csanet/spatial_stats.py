"""Spatial contiguity weights and local/global Moran statistics over channels.

Each channel of a C x H x W feature map is treated as one observation
living in R^(H*W); closeness between observations is a negative exponential
of their L2 distance, normalized so all weights sum to one. The local
autocorrelation of a per-channel attribute vector then reduces to the
diagonal of an outer-product/weight-matrix product, which is what the
production path computes. The textbook double-loop form is kept verbatim
as an independent oracle.

Conventions pinned here (and relied on by everything downstream):
  * standard deviations are population (divide by C), which is exactly the
    convention under which the direct and matrix forms of the local
    autocorrelation coincide;
  * the average inter-channel distance excludes the C zero self-distances;
  * degenerate inputs (all channels equal, or a constant attribute vector)
    fall back to uniform weights / an all-zero vector instead of NaNs.

The differentiable twin of this pipeline (built in ``attention``) guards
every sqrt of a squared distance with the additive :data:`DIST_SQ_GUARD`
so backpropagation stays finite at coincident channels; the plain path
here takes exact square roots, and tests pin the two against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_ops import (
    Array,
    EmptyInputError,
    ShapeMismatchError,
    as_tensor,
    pairwise_sq_dist,
)

#: Additive guard under every sqrt of a squared distance (differentiable path).
DIST_SQ_GUARD = 1e-20

#: Default floor on the mean inter-channel distance before the uniform fallback.
DEFAULT_EPS_DIST = 1e-12

#: Default floor on a standard deviation before the all-zero fallback.
DEFAULT_EPS_SIGMA = 1e-8


class DegenerateInputError(ValueError):
    """The oracle path received input it cannot evaluate (zero variance)."""


@dataclass(frozen=True)
class SpatialWeights:
    """Contiguity matrix ``v``, unitary weights ``w`` and their provenance.

    ``w`` is ``v`` scaled so all entries sum to 1. Both are symmetric with a
    zero diagonal. ``degenerate`` records that the mean inter-channel
    distance fell below the floor and uniform contiguity was substituted.
    """

    contiguity: Array
    weights: Array
    mean_dist: float
    degenerate: bool

    @property
    def num_channels(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class MoranResult:
    """Local autocorrelation vector, its sum, and the standardized descriptor."""

    local: Array
    global_moran: float
    descriptor: Array
    sigma_floor_hit: bool


def build_weights(f, eps_dist: float = DEFAULT_EPS_DIST) -> SpatialWeights:
    """Construct contiguity and unitary weight matrices from a C x H x W map.

    Each channel is flattened to a d = H*W vector. Off-diagonal contiguity
    is exp(-l_ij / lbar) where l_ij is the L2 distance between channels i
    and j and lbar is the mean over the C*(C-1) ordered off-diagonal pairs.
    If lbar < eps_dist every channel is identical; contiguity falls back to
    uniform (ones off the diagonal) and the result is flagged degenerate.
    """
    f = as_tensor(f)
    if f.ndim != 3:
        raise ShapeMismatchError(f"expected a C x H x W feature map, got {f.shape}")
    if eps_dist <= 0:
        raise ValueError("eps_dist must be positive")
    num_channels = f.shape[0]
    if num_channels == 0:
        raise EmptyInputError("feature map has no channels")
    if num_channels == 1:
        zero = np.zeros((1, 1))
        return SpatialWeights(zero, zero.copy(), 0.0, True)

    rows = f.reshape(num_channels, -1)
    dist = np.sqrt(pairwise_sq_dist(rows))
    mean_dist = float(dist.sum() / (num_channels * (num_channels - 1)))

    if mean_dist < eps_dist:
        contiguity = np.ones((num_channels, num_channels))
        degenerate = True
    else:
        contiguity = np.exp(-dist / mean_dist)
        degenerate = False
    np.fill_diagonal(contiguity, 0.0)
    weights = contiguity / contiguity.sum()
    return SpatialWeights(contiguity, weights, mean_dist, degenerate)


def unitary_weights(v) -> Array:
    """Scale a contiguity matrix so all its entries sum to 1."""
    v = as_tensor(v)
    total = v.sum()
    if total <= 0:
        raise DegenerateInputError("contiguity matrix sums to zero")
    return v / total


def standardize(x, eps_sigma: float = DEFAULT_EPS_SIGMA) -> tuple[Array, bool]:
    """Center and scale ``x`` to zero mean and unit population std.

    Returns ``(z, floor_hit)``; when the population std is below
    ``eps_sigma`` the result is the all-zero vector with the flag set.
    """
    x = as_tensor(x)
    if x.ndim != 1 or x.size == 0:
        raise ShapeMismatchError(f"expected a non-empty vector, got shape {x.shape}")
    if eps_sigma <= 0:
        raise ValueError("eps_sigma must be positive")
    mu = x.mean()
    sigma = float(np.sqrt(((x - mu) ** 2).mean()))
    if sigma < eps_sigma:
        return np.zeros_like(x), True
    return (x - mu) / sigma, False


def local_moran_matrix(z, w) -> Array:
    """Local autocorrelation of a standardized vector under unitary weights.

    Computes the diagonal of the (z outer z) @ w product without forming
    the outer product: out[i] = z_i * sum_j w_ij z_j. ``w`` may be a
    SpatialWeights bundle or a raw matrix; it must be symmetric, which is
    checked rather than assumed, so the row/column convention is immaterial.
    """
    if isinstance(w, SpatialWeights):
        w = w.weights
    z = as_tensor(z)
    w = as_tensor(w)
    if z.ndim != 1 or w.shape != (z.size, z.size):
        raise ShapeMismatchError(
            f"vector of shape {z.shape} does not match weights of shape {w.shape}"
        )
    if not np.allclose(w, w.T, rtol=0.0, atol=1e-12):
        raise ValueError("weight matrix is not symmetric")
    return z * (w @ z)


def local_moran_direct(x, v) -> Array:
    """Textbook local autocorrelation, kept loop-for-loop as the oracle.

    out[i] = C (x_i - mu) * sum_j v_ij (x_j - mu)
             / ( sum_ij v_ij * sum_k (x_k - mu)^2 )

    No algebraic simplification is applied; this is the reference the
    production path is checked against.
    """
    x = as_tensor(x)
    v = as_tensor(v)
    n = x.size
    if n < 2:
        raise EmptyInputError("need at least two observations")
    if v.shape != (n, n):
        raise ShapeMismatchError(
            f"contiguity shape {v.shape} does not match {n} observations"
        )
    mu = 0.0
    for i in range(n):
        mu += x[i]
    mu /= n
    sum_sq = 0.0
    for i in range(n):
        sum_sq += (x[i] - mu) ** 2
    if sum_sq <= 0.0:
        raise DegenerateInputError("zero-variance attribute vector")
    sum_v = 0.0
    for i in range(n):
        for j in range(n):
            sum_v += v[i, j]
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += v[i, j] * (x[j] - mu)
        out[i] = n * (x[i] - mu) * acc / (sum_v * sum_sq)
    return out


def global_moran(local) -> float:
    """Aggregate autocorrelation: the sum of the local indicators."""
    return float(as_tensor(local).sum())


def csa_descriptor(local, eps_sigma: float = DEFAULT_EPS_SIGMA) -> Array:
    """Standardize the local autocorrelation vector into the channel descriptor.

    The raw local values scale like 1/C^2 through the unitary weights and
    can underflow for wide layers; standardization restores an O(1) range.
    Constant input (std below the floor) yields the all-zero vector, which
    the downstream sigmoid maps to uniform 0.5 attention.
    """
    q, _ = standardize(local, eps_sigma)
    return q


def moran_profile(
    f,
    eps_dist: float = DEFAULT_EPS_DIST,
    eps_sigma: float = DEFAULT_EPS_SIGMA,
) -> tuple[SpatialWeights, MoranResult, Array, Array]:
    """Full per-sample pipeline: weights, attribute, z, local, descriptor.

    Returns ``(weights, result, x, z)`` where ``x`` is the per-channel
    spatial mean of ``f`` and ``z`` its standardized form. Works for any
    feature map; no learned parameters are involved.
    """
    f = as_tensor(f)
    weights = build_weights(f, eps_dist)
    x = f.mean(axis=(1, 2))
    z, _ = standardize(x, eps_sigma)
    local = local_moran_matrix(z, weights.weights)
    q, floor_hit = standardize(local, eps_sigma)
    result = MoranResult(local, global_moran(local), q, floor_hit)
    return weights, result, x, z

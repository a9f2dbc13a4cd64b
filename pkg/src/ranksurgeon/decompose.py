"""Two factorization routes for dense layers, plus budget/rank arithmetic.

Weight route: truncated SVD of the weight matrix. Data-free, and by
Eckart-Young the best rank-r approximation of W in Frobenius norm.

Feature route: eigendecomposition of the accumulated output second moment
G = sum(y y^T). The top-r eigenvectors V_r are kept as the down factor and
V_r^T W becomes the up factor, so the factored layer reproduces exactly the
component of the output that lies in span(V_r). The discarded subspace is
replaced by a constant bias b = (I - V_r V_r^T) W x_bar, which restores the
calibration-mean output: the residual (Y~ - Y) has zero column mean on the
calibration data by construction. The complement projector form avoids
materializing the discarded eigenvector block; by orthogonality it is
numerically identical at half the memory. Weight-route factors never carry
a bias: with no data there is no mean to compensate.

A rank budget beta in (0, 1] maps to a rank via kappa = d2*d1 / (d2+d1),
the rank at which a factor pair costs as many parameters as the dense
layer; r = floor(beta * kappa), clamped to at least 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .linalg import GramAccumulator, as_matrix, eigh_symmetric, svd
from .model import FactoredLayer


@dataclass(frozen=True)
class RankSpec:
    rank: int
    kappa: float


def rank_for_budget(d2: int, d1: int, beta: float) -> RankSpec:
    """Rank whose factor pair retains (at most) a beta fraction of d2*d1 params."""
    if d1 < 1 or d2 < 1:
        raise ValueError("dimensions must be >= 1")
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"budget must be in (0, 1], got {beta}")
    kappa = d2 * d1 / (d2 + d1)
    return RankSpec(rank=max(1, math.floor(beta * kappa)), kappa=kappa)


def decompose_weight(w, rank: int) -> FactoredLayer:
    """Data-free truncated SVD: W ~ (U_r S_r) V_r^T, no bias."""
    w = as_matrix(w, "weight")
    if not 1 <= rank <= min(w.shape):
        raise ValueError(f"rank must be in [1, {min(w.shape)}], got {rank}")
    res = svd(w)
    w_down = res.u[:, :rank] * res.sigma[:rank]
    w_up = res.vt[:rank, :]
    return FactoredLayer(w_down=w_down, w_up=w_up, bias=None, rank=rank)


def decompose_feature(w, acc: GramAccumulator, rank: int) -> FactoredLayer:
    """Calibration-aware factorization with mean-compensating bias.

    The accumulator must have been built from this layer's activations:
    acc.gram is the output second moment and acc.mean_input the mean layer
    input. With fewer accumulated columns than output dimensions the gram
    is rank-deficient; the trailing zero-eigenvalue directions are still
    the most stable ones, so we proceed but warn.
    """
    w = as_matrix(w, "weight")
    d2, d1 = w.shape
    if acc.dim_out != d2 or acc.dim_in != d1:
        raise ValueError(
            f"accumulator dims ({acc.dim_out}, {acc.dim_in}) do not match weight {w.shape}"
        )
    if acc.sample_count == 0:
        raise ValueError("accumulator is empty: no calibration columns seen")
    if not 1 <= rank <= d2:
        raise ValueError(f"rank must be in [1, {d2}], got {rank}")
    if acc.sample_count < d2:
        warnings.warn(
            f"gram built from {acc.sample_count} columns < {d2} output dims; "
            "decomposition proceeds on a rank-deficient second moment",
            stacklevel=2,
        )
    basis = eigh_symmetric(acc.gram).eigenvectors[:, :rank]
    y_mean = w @ acc.mean_input
    bias = y_mean - basis @ (basis.T @ y_mean)
    return FactoredLayer(w_down=basis, w_up=basis.T @ w, bias=bias, rank=rank)


class ApproxError(NamedTuple):
    value: float
    relative: bool


def approximation_error(layer_original, layer_factored, x_columns) -> ApproxError:
    """Output-space Frobenius error of a factored layer on given inputs.

    Returns ||Y~ - Y||_F / ||Y||_F where Y~ includes the bias term. When
    the reference output has zero norm the absolute error is returned
    with relative=False.
    """
    x = as_matrix(x_columns, "x_columns")
    if layer_original.in_dim != x.shape[0] or layer_factored.in_dim != x.shape[0]:
        raise ValueError("input rows do not match layer input dims")
    if layer_original.out_dim != layer_factored.out_dim:
        raise ValueError("layers have different output dims")
    y = layer_original.apply(x.T)
    y_tilde = layer_factored.apply(x.T)
    err = float(np.linalg.norm(y_tilde - y))
    denom = float(np.linalg.norm(y))
    if denom == 0.0:
        return ApproxError(value=err, relative=False)
    return ApproxError(value=err / denom, relative=True)

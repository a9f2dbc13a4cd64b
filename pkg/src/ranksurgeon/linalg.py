"""Dense float64 linear algebra used by the decomposition routines.

Activation matrices follow the column convention throughout: a batch of D
samples from a layer with d features is a (d, D) array, one column per
sample. All computation is float64; callers round to storage precision
only when serializing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a finite float64 2-D array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and column, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class SvdResult:
    """Full SVD: u (d2, d2), sigma descending (min(d1, d2),), vt (d1, d1)."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        d2, d1 = self.u.shape[0], self.vt.shape[0]
        core = np.zeros((d2, d1))
        k = self.sigma.shape[0]
        core[:k, :k] = np.diag(self.sigma)
        return self.u @ core @ self.vt


def svd(m) -> SvdResult:
    """Full singular value decomposition of a real matrix.

    Deterministic for a fixed input up to the sign of singular-vector
    pairs. Raises NumericalError on non-finite input or non-convergence.
    """
    m = as_matrix(m)
    try:
        u, sigma, vt = np.linalg.svd(m, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for shape {m.shape}: {exc}") from exc
    return SvdResult(u=u, sigma=sigma, vt=vt)


@dataclass(frozen=True)
class EighResult:
    """Symmetric eigendecomposition, eigenvalues descending.

    eigenvectors holds one eigenvector per column, ordered to match
    eigenvalues. Ties are left in whatever order the solver produced
    after the descending sort, so only spans/projectors are stable
    across solver implementations, not individual tied columns.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def eigh_symmetric(s) -> EighResult:
    """Eigendecomposition of a (nearly) symmetric matrix.

    The input is symmetrized internally as (s + s.T) / 2; asymmetry
    beyond 1e-8 relative is rejected as a caller error.
    """
    s = as_matrix(s, "symmetric matrix")
    if s.shape[0] != s.shape[1]:
        raise ValueError(f"eigh requires a square matrix, got {s.shape}")
    scale = max(1.0, float(np.abs(s).max()))
    if float(np.abs(s - s.T).max()) > 1e-8 * scale:
        raise ValueError("matrix is not symmetric within 1e-8 relative")
    sym = (s + s.T) / 2.0
    try:
        vals, vecs = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigh did not converge for shape {s.shape}: {exc}") from exc
    # eigh returns ascending order; flip to descending.
    return EighResult(
        eigenvalues=np.ascontiguousarray(vals[::-1]),
        eigenvectors=np.ascontiguousarray(vecs[:, ::-1]),
    )


@dataclass
class GramAccumulator:
    """Streaming sums of an output second moment and an input mean.

    gram accumulates sum over columns of y @ y.T (uncentered, no 1/(D-1)
    normalization), input_sum the column sum of the matching inputs, and
    sample_count the number of columns seen. Single writer per instance;
    independently built accumulators combine with merge().
    """

    dim_out: int
    dim_in: int
    gram: np.ndarray = field(default=None)  # type: ignore[assignment]
    input_sum: np.ndarray = field(default=None)  # type: ignore[assignment]
    sample_count: int = 0

    def __post_init__(self):
        if self.dim_out < 1 or self.dim_in < 1:
            raise ValueError("accumulator dimensions must be positive")
        if self.gram is None:
            self.gram = np.zeros((self.dim_out, self.dim_out))
        if self.input_sum is None:
            self.input_sum = np.zeros(self.dim_in)
        if self.gram.shape != (self.dim_out, self.dim_out):
            raise ValueError(f"gram shape {self.gram.shape} != ({self.dim_out}, {self.dim_out})")
        if self.input_sum.shape != (self.dim_in,):
            raise ValueError(f"input_sum shape {self.input_sum.shape} != ({self.dim_in},)")

    def accumulate(self, x_batch, y_batch) -> "GramAccumulator":
        """Add one batch of paired input/output columns; returns self."""
        x = as_matrix(x_batch, "x_batch")
        y = as_matrix(y_batch, "y_batch")
        if y.shape[0] != self.dim_out:
            raise ValueError(f"y_batch has {y.shape[0]} rows, accumulator expects {self.dim_out}")
        if x.shape[0] != self.dim_in:
            raise ValueError(f"x_batch has {x.shape[0]} rows, accumulator expects {self.dim_in}")
        if x.shape[1] != y.shape[1]:
            raise ValueError(f"batch column counts differ: x {x.shape[1]}, y {y.shape[1]}")
        self.gram += y @ y.T
        self.input_sum += x.sum(axis=1)
        self.sample_count += x.shape[1]
        return self

    def merge(self, other: "GramAccumulator") -> "GramAccumulator":
        """Element-wise combination of two independently built accumulators."""
        if (other.dim_out, other.dim_in) != (self.dim_out, self.dim_in):
            raise ValueError("cannot merge accumulators with different dimensions")
        self.gram += other.gram
        self.input_sum += other.input_sum
        self.sample_count += other.sample_count
        return self

    @property
    def mean_input(self) -> np.ndarray:
        if self.sample_count == 0:
            raise ValueError("accumulator is empty")
        return self.input_sum / self.sample_count

"""Dense float64 arrays and the small linear-algebra kernel used by the rest of the package.

Tensors are plain ``numpy.ndarray`` objects with ``dtype=float64``. The helpers
here add the shape and finiteness checks the other modules rely on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DEFAULT_RANK_TOL = 1e-10


def as_tensor(x, *, name: str = "tensor") -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_matrix(x, *, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be rank 2, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, name="a")
    b = as_matrix(b, name="b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


@dataclass(frozen=True)
class LstsqResult:
    """Minimum-norm least-squares solution plus conditioning diagnostics.

    ``rcond`` is the ratio of the smallest to the largest singular value of the
    coefficient matrix (0 for an all-zero matrix). ``ill_conditioned`` is set
    when that ratio falls below the rank tolerance; the solution is still the
    minimum-norm one with the small singular values truncated.
    """

    solution: np.ndarray
    singular_values: np.ndarray
    rank: int
    rcond: float
    ill_conditioned: bool
    residual_norm: float


def lstsq(a, rhs, rank_tol: float = DEFAULT_RANK_TOL) -> LstsqResult:
    """Solve ``min ||a X - rhs||_F`` through a thin SVD of ``a``.

    All right-hand-side columns share one factorization.
    """
    a = as_matrix(a, name="a")
    rhs_in = np.asarray(rhs, dtype=np.float64)
    vector_rhs = rhs_in.ndim == 1
    rhs = as_matrix(rhs_in, name="rhs")
    p, q = a.shape
    if p < 1 or q < 1:
        raise ShapeError(f"coefficient matrix must be non-empty, got {a.shape}")
    if rhs.shape[0] != p:
        raise ShapeError(f"rhs has {rhs.shape[0]} rows, coefficient matrix has {p}")

    u, s, vt = np.linalg.svd(a, full_matrices=False)
    smax = s[0] if s.size else 0.0
    if smax == 0.0:
        rcond = 0.0
        keep = np.zeros_like(s, dtype=bool)
    else:
        rcond = float(s[-1] / smax) if s.size == q else 0.0
        keep = s > rank_tol * smax
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    x = vt.T @ (inv_s[:, None] * (u.T @ rhs))
    residual = float(np.linalg.norm(a @ x - rhs))
    if vector_rhs:
        x = x[:, 0]
    return LstsqResult(
        solution=x,
        singular_values=s,
        rank=int(keep.sum()),
        rcond=rcond,
        ill_conditioned=bool(rcond < rank_tol),
        residual_norm=residual,
    )


def reciprocal_condition(a) -> float:
    a = as_matrix(a)
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0 or s.size < a.shape[1]:
        return 0.0
    return float(s[-1] / s[0])

"""Dense linear algebra kernels shared by every other module.

Matrices are plain 2-D float64 numpy arrays in C (row-major) order; there is
no wrapper class. The one non-trivial routine here is :func:`svd`, a
one-sided Jacobi decomposition chosen for determinism and high relative
accuracy at the matrix sizes this package works at (up to ~1024 x 1024).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "ConvergenceError",
    "SvdResult",
    "as_matrix",
    "matmul",
    "svd",
    "frobenius_norm",
    "gaussian_matrix",
    "make_rng",
    "derive_seed",
]

# One-sided Jacobi parameters: a column pair is rotated while its off-diagonal
# Gram entry exceeds JACOBI_REL_TOL relative to the two column norms; a clean
# pass over all pairs means convergence. 60 sweeps is far beyond what any
# non-pathological double-precision input needs (typical: 6-12).
JACOBI_MAX_SWEEPS = 60
JACOBI_REL_TOL = 1e-12


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class ConvergenceError(RuntimeError):
    """An iterative routine hit its sweep cap without converging."""


def as_matrix(w) -> np.ndarray:
    """Coerce input to a 2-D float64 C-order array, validating finiteness."""
    a = np.ascontiguousarray(w, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"expected a 2-D matrix, got array of shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains NaN or Inf entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check naming both operands."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul shape mismatch: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def frobenius_norm(w: np.ndarray) -> float:
    """sqrt of the sum of squared entries."""
    return float(np.sqrt(np.sum(np.square(np.asarray(w, dtype=np.float64)))))


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD of an n x m matrix, k = min(n, m).

    ``u`` is n x k with orthonormal columns, ``s`` the k singular values in
    descending order, ``v`` is m x k with orthonormal columns, and
    ``u @ diag(s) @ v.T`` reconstructs the input.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T

    def truncate(self, r: int) -> "SvdResult":
        """Keep the leading r singular triplets."""
        return SvdResult(self.u[:, :r], self.s[:r], self.v[:, :r])


def svd(w: np.ndarray, max_sweeps: int = JACOBI_MAX_SWEEPS,
        rel_tol: float = JACOBI_REL_TOL) -> SvdResult:
    """One-sided Jacobi SVD.

    Repeatedly applies plane rotations to column pairs of the (tall) working
    matrix until all columns are mutually orthogonal; the column norms are
    then the singular values. Deterministic: a fixed cyclic pair order, and a
    sign convention that makes the largest-magnitude entry of every left
    singular vector positive, so equal inputs always produce identical
    factors, including under repeated singular values.

    Raises ConvergenceError if the sweep cap is exhausted, which for finite
    float64 input indicates a bug rather than a hard matrix.
    """
    a = as_matrix(w)
    n, m = a.shape
    # Work on a tall matrix so the rotation count is driven by min(n, m).
    transposed = n < m
    g = a.T.copy() if transposed else a.copy()
    p, q = g.shape

    v = np.eye(q)
    converged = False
    for _ in range(max_sweeps):
        rotated = False
        for i in range(q - 1):
            for j in range(i + 1, q):
                gi = g[:, i]
                gj = g[:, j]
                aii = float(gi @ gi)
                ajj = float(gj @ gj)
                aij = float(gi @ gj)
                if abs(aij) <= rel_tol * math.sqrt(aii * ajj):
                    continue
                rotated = True
                # Rutishauser rotation zeroing the (i, j) Gram entry.
                zeta = (ajj - aii) / (2.0 * aij)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.hypot(1.0, t)
                s = c * t
                g_new_i = c * gi - s * gj
                g_new_j = s * gi + c * gj
                g[:, i] = g_new_i
                g[:, j] = g_new_j
                v_new_i = c * v[:, i] - s * v[:, j]
                v_new_j = s * v[:, i] + c * v[:, j]
                v[:, i] = v_new_i
                v[:, j] = v_new_j
        if not rotated:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"one-sided Jacobi SVD did not converge within {max_sweeps} sweeps "
            f"for a {n}x{m} matrix"
        )

    norms = np.sqrt(np.sum(g * g, axis=0))
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    g = g[:, order]
    v = v[:, order]

    # Columns whose norm is negligible relative to the spectrum belong to the
    # null space; their left vectors are completed to an orthonormal basis.
    tiny = max(p, q) * np.finfo(np.float64).eps * (norms[0] if norms[0] > 0 else 1.0)
    u = np.zeros((p, q))
    rank = int(np.sum(norms > tiny))
    if rank:
        u[:, :rank] = g[:, :rank] / norms[:rank]
    norms[rank:] = 0.0
    for col in range(rank, q):
        u[:, col] = _orthonormal_completion(u[:, :col], p)

    if transposed:
        u, v = v, u
    _fix_signs(u, v)
    return SvdResult(u=u, s=norms, v=v)


def _orthonormal_completion(basis: np.ndarray, dim: int) -> np.ndarray:
    """Deterministically extend ``basis`` (orthonormal columns) by one column."""
    for k in range(dim):
        cand = np.zeros(dim)
        cand[k] = 1.0
        if basis.shape[1]:
            cand -= basis @ (basis.T @ cand)
            cand -= basis @ (basis.T @ cand)  # second pass for orthogonality
        norm = np.linalg.norm(cand)
        if norm > 0.5:  # e_k was not (numerically) inside span(basis)
            return cand / norm
    raise ConvergenceError("failed to complete an orthonormal basis")


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    """Flip each (u, v) column pair so u's largest-magnitude entry is positive."""
    for col in range(u.shape[1]):
        pivot = np.argmax(np.abs(u[:, col]))
        if u[pivot, col] < 0.0:
            u[:, col] = -u[:, col]
            v[:, col] = -v[:, col]


def gaussian_matrix(rows: int, cols: int, std: float,
                    rng: np.random.Generator) -> np.ndarray:
    """rows x cols matrix of i.i.d. N(0, std^2) draws from ``rng``."""
    if std <= 0.0:
        raise ValueError(f"std must be positive, got {std}")
    if rows < 1 or cols < 1:
        raise ShapeError(f"invalid matrix shape ({rows}, {cols})")
    return rng.normal(0.0, std, size=(rows, cols))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds yield identical streams."""
    return np.random.default_rng(seed)


def _splitmix64(x: int) -> int:
    """One splitmix64 scramble step; used to decorrelate derived seeds."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def derive_seed(seed: int, *parts: int) -> int:
    """Stable 64-bit child seed for a (seed, index...) coordinate.

    Grid cells, sweep cells and per-seed repetitions each get a disjoint
    stream by xor-folding scrambled coordinates into the base seed, so cells
    can run in any order (or in parallel) with identical results.
    """
    out = _splitmix64(seed & 0xFFFFFFFFFFFFFFFF)
    for i, part in enumerate(parts):
        out ^= _splitmix64((int(part) + 0x1000 * (i + 1)) & 0xFFFFFFFFFFFFFFFF)
        out = _splitmix64(out)
    return out

"""Dense linear algebra used throughout the package.

Everything operates on float64 numpy arrays. The routines are thin,
deterministic wrappers around LAPACK with the checks the estimators rely on:
a fixed SVD sign convention, PSD-checked inverse square roots, regularized
solves, and subspace distances. The perturbation helpers at the bottom exist
so the Weyl / Wedin / Eckart-Young statements can be exercised as property
tests.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

DEFAULT_COV_EPS = 1e-8


class LinalgError(ValueError):
    """Raised when an input violates a precondition of a linear-algebra routine."""


class SvdConvergenceError(LinalgError):
    """The SVD driver failed to converge.

    ``iterations`` counts the LAPACK driver attempts that were made before
    giving up (divide-and-conquer first, then the QR-iteration driver).
    """

    def __init__(self, message: str, iterations: int):
        super().__init__(f"{message} (after {iterations} driver attempts)")
        self.iterations = iterations


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(s) @ vt`` with ``s`` sorted descending."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def v(self) -> np.ndarray:
        return self.vt.T

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def as_matrix(a, name: str = "a") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise LinalgError(f"{name} contains non-finite entries")
    return arr


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # argmax returns the lowest index on ties, which is the tie-break we want
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def svd(a) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    Each left singular vector is flipped so that its entry of largest
    magnitude is non-negative; the matching right vector is flipped with it.
    The all-zero matrix returns zero singular values with canonical bases.
    """
    a = as_matrix(a)
    m, n = a.shape
    k = min(m, n)
    if not np.any(a):
        return SvdResult(np.eye(m, k), np.zeros(k), np.eye(k, n))
    attempts = 0
    for driver in ("gesdd", "gesvd"):
        attempts += 1
        try:
            u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver=driver)
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise SvdConvergenceError("SVD did not converge", attempts)
    u, vt = _fix_signs(u, vt)
    return SvdResult(u, s, vt)


def singular_values(a) -> np.ndarray:
    return svd(a).s


def op_norm(a) -> float:
    """Spectral norm, computed as the largest singular value."""
    a = as_matrix(a)
    if a.size == 0:
        return 0.0
    return float(svd(a).s[0])


def truncate(res: SvdResult, d: int) -> np.ndarray:
    """Best rank-``d`` approximation ``sum_{i<d} s_i u_i v_i^T``."""
    k = res.s.shape[0]
    if d < 0 or d > k:
        raise LinalgError(f"truncation rank d={d} outside [0, {k}]")
    return (res.u[:, :d] * res.s[:d]) @ res.vt[:d]


def _check_orthonormal(basis: np.ndarray, name: str, tol: float = 1e-8) -> None:
    gram = basis.T @ basis
    dev = float(np.max(np.abs(gram - np.eye(gram.shape[0])))) if gram.size else 0.0
    if dev > tol:
        raise LinalgError(f"{name} columns are not orthonormal: max |B^T B - I| = {dev:.3e}")


def subspace_distance(basis_a, basis_b) -> float:
    """``||P_A - P_B||_2`` for orthonormal bases of two subspaces."""
    a = as_matrix(basis_a, "basis_a")
    b = as_matrix(basis_b, "basis_b")
    if a.shape[0] != b.shape[0]:
        raise LinalgError(f"ambient dimensions differ: {a.shape[0]} vs {b.shape[0]}")
    _check_orthonormal(a, "basis_a")
    _check_orthonormal(b, "basis_b")
    return op_norm(a @ a.T - b @ b.T)


def _check_symmetric(m: np.ndarray, tol: float = 1e-8) -> None:
    if m.shape[0] != m.shape[1]:
        raise LinalgError(f"matrix must be square, got {m.shape}")
    asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if asym > tol * scale:
        raise LinalgError(f"matrix is not symmetric: max |M - M^T| = {asym:.3e}")


def _regularized_eigh(m, eps: float) -> tuple[np.ndarray, np.ndarray]:
    if eps < 0:
        raise LinalgError("eps must be non-negative")
    m = as_matrix(m, "m")
    _check_symmetric(m)
    sym = 0.5 * (m + m.T) + eps * np.eye(m.shape[0])
    w, q = np.linalg.eigh(sym)
    if w.size and w[0] <= 0.0:
        raise LinalgError(
            f"matrix is not positive definite after regularization: "
            f"smallest eigenvalue {w[0] - eps:.3e} <= -eps = {-eps:.3e}"
        )
    return w, q


def sym_inv_sqrt(m, eps: float = DEFAULT_COV_EPS) -> np.ndarray:
    """``(m + eps I)^{-1/2}`` for symmetric PSD ``m`` via eigendecomposition."""
    w, q = _regularized_eigh(m, eps)
    out = (q / np.sqrt(w)) @ q.T
    return 0.5 * (out + out.T)


def sym_sqrt(m, eps: float = 0.0) -> np.ndarray:
    """``(m + eps I)^{1/2}``; tiny negative round-off eigenvalues are clipped."""
    if eps < 0:
        raise LinalgError("eps must be non-negative")
    m = as_matrix(m, "m")
    _check_symmetric(m)
    w, q = np.linalg.eigh(0.5 * (m + m.T) + eps * np.eye(m.shape[0]))
    floor = -1e-10 * max(1.0, float(np.max(np.abs(w)))) if w.size else 0.0
    if w.size and w[0] < floor:
        raise LinalgError(f"matrix is not PSD: smallest eigenvalue {w[0]:.3e}")
    out = (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T
    return 0.5 * (out + out.T)


def ridge_solve(m, rhs, eps: float = DEFAULT_COV_EPS) -> np.ndarray:
    """Solve ``(m + eps I) x = rhs`` by LU with a conditioning check.

    ``rhs`` may be a vector or a matrix; the output has the same shape.
    """
    if eps < 0:
        raise LinalgError("eps must be non-negative")
    m = as_matrix(m, "m")
    if m.shape[0] != m.shape[1]:
        raise LinalgError(f"matrix must be square, got {m.shape}")
    rhs_arr = np.asarray(rhs, dtype=np.float64)
    reg = m + eps * np.eye(m.shape[0])
    with warnings.catch_warnings():
        # singularity is reported below through the condition estimate
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(reg, check_finite=True)
    anorm = np.linalg.norm(reg, 1)
    rcond, info = scipy.linalg.lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or not rcond > np.finfo(np.float64).eps:
        raise LinalgError(f"matrix is singular to working precision (rcond={rcond:.3e})")
    return scipy.linalg.lu_solve((lu, piv), rhs_arr)


# -- perturbation-theory helpers ------------------------------------------


def top_left_basis(a, d: int) -> np.ndarray:
    return svd(a).u[:, :d]


def weyl_excess(a, b) -> float:
    """``max_i |s_i(A) - s_i(B)| - ||A - B||``; never positive in exact arithmetic."""
    sa, sb = singular_values(a), singular_values(b)
    return float(np.max(np.abs(sa - sb)) - op_norm(np.asarray(a) - np.asarray(b)))


@dataclass(frozen=True)
class WedinCheck:
    distance: float
    gap: float
    gap_a: float
    perturbation: float

    @property
    def bound(self) -> float | None:
        return self.perturbation / self.gap if self.gap > 0 else None

    @property
    def bound_self_gap(self) -> float | None:
        if self.gap_a > 0 and self.perturbation <= self.gap_a / 2:
            return 2.0 * self.perturbation / self.gap_a
        return None


def wedin_check(a, b, d: int) -> WedinCheck:
    """Quantities entering the two sin-theta bounds for the top-``d`` left subspaces."""
    ra, rb = svd(a), svd(b)
    sa = np.append(ra.s, 0.0)
    sb = np.append(rb.s, 0.0)
    return WedinCheck(
        distance=subspace_distance(ra.u[:, :d], rb.u[:, :d]),
        gap=float(sa[d - 1] - sb[d]),
        gap_a=float(sa[d - 1] - sa[d]),
        perturbation=op_norm(np.asarray(a) - np.asarray(b)),
    )


# -- text serialization ------------------------------------------------------


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def dumps_matrix(a) -> str:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    lines += [" ".join(format_float(v) for v in row) for row in a]
    return "\n".join(lines) + "\n"


def loads_matrix(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise LinalgError("empty matrix text")
    rows, cols = (int(t) for t in lines[0].split())
    body = lines[1:]
    if len(body) != rows:
        raise LinalgError(f"expected {rows} rows, found {len(body)}")
    out = np.empty((rows, cols))
    for i, ln in enumerate(body):
        vals = ln.split()
        if len(vals) != cols:
            raise LinalgError(f"row {i} has {len(vals)} entries, expected {cols}")
        out[i] = [float(v) for v in vals]
    return out


def save_matrix(path, a) -> None:
    Path(path).write_text(dumps_matrix(a))


def load_matrix(path) -> np.ndarray:
    return loads_matrix(Path(path).read_text())

"""Two-stage least squares in a learned feature space, plus diagnostics.

With ``phi`` features of the treatment and ``psi`` features of the instrument,

    beta = (C_phipsi (C_psi + eI)^{-1} C_psiphi + eI)^{-1} C_phipsi (C_psi + eI)^{-1} E[Y psi]

and the structural estimate is ``h(x) = phi(x) . beta``. One ridge ``e`` is used
for both inversions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import linalg
from . import synthgen as sg

DEFAULT_RIDGE = 1e-8


@dataclass(frozen=True)
class StructuralEstimate:
    beta: np.ndarray
    ridge_used: float
    feature_map: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.beta)):
            raise linalg.LinalgError("2SLS coefficients are not finite")


def _moments(phi, psi, y):
    phi = linalg.as_matrix(phi, "phi_feats")
    psi = linalg.as_matrix(psi, "psi_feats")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = phi.shape[0]
    if psi.shape[0] != n or y.size != n:
        raise ValueError("phi_feats, psi_feats and y must have the same number of rows")
    if n <= max(phi.shape[1], psi.shape[1]):
        raise ValueError(f"need more rows ({n}) than features ({max(phi.shape[1], psi.shape[1])})")
    return phi, psi, y, n


def fit_2sls(phi_feats, psi_feats, y, ridge: float = DEFAULT_RIDGE, feature_map=None) -> StructuralEstimate:
    """Regularized 2SLS coefficients from empirical moments of the supplied rows.

    Raises
    ------
    LinalgError
        If either regularized system is singular to working precision.
    """
    phi, psi, y, n = _moments(phi_feats, psi_feats, y)
    c_phipsi = phi.T @ psi / n
    c_psi = psi.T @ psi / n
    e_y_psi = psi.T @ y / n
    # (C_psi + eI)^{-1} applied to [C_psiphi | E[Y psi]] in a single solve
    solved = linalg.ridge_solve(c_psi, np.column_stack([c_phipsi.T, e_y_psi]), ridge)
    lhs = c_phipsi @ solved[:, :-1]
    rhs = c_phipsi @ solved[:, -1]
    beta = linalg.ridge_solve(0.5 * (lhs + lhs.T), rhs, ridge)
    return StructuralEstimate(beta=beta, ridge_used=ridge, feature_map=feature_map)


def fit_naive(phi_feats, y, ridge: float = DEFAULT_RIDGE, feature_map=None) -> StructuralEstimate:
    """Least-squares regression of ``y`` on ``phi`` features (ignores the instrument)."""
    phi, _, y, n = _moments(phi_feats, phi_feats, y)
    beta = linalg.ridge_solve(phi.T @ phi / n, phi.T @ y / n, ridge)
    return StructuralEstimate(beta=beta, ridge_used=ridge, feature_map=feature_map)


def predict(est: StructuralEstimate, xs=None, phi_feats=None) -> np.ndarray:
    """``phi(x) . beta``, from raw inputs through ``est.feature_map`` or from given features."""
    if phi_feats is None:
        if est.feature_map is None:
            raise ValueError("estimate has no feature map; pass phi_feats")
        phi_feats = est.feature_map(xs)
    return linalg.as_matrix(phi_feats, "phi_feats") @ est.beta


def mse_l2(est: StructuralEstimate, op: sg.GroundTruthOperator, n_eval: int = 100_000, seed: int = 0,
           return_stderr: bool = False):
    """Monte-Carlo ``||h_hat - h0||^2`` over fresh uniform draws of X."""
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-np.pi, np.pi, n_eval)
    sq = (predict(est, xs) - sg.eval_h0(op, xs)) ** 2
    mse = float(sq.mean())
    if return_stderr:
        return mse, float(sq.std(ddof=1) / np.sqrt(n_eval))
    return mse


def illposedness(phi_feats, psi_feats, cov_eps: float = linalg.DEFAULT_COV_EPS) -> float:
    """Smallest singular value of the whitened cross-covariance of ``psi`` and ``phi``."""
    phi, psi, _, n = _moments(phi_feats, psi_feats, np.zeros(np.shape(phi_feats)[0]))
    if phi.shape[1] != psi.shape[1]:
        raise ValueError("illposedness needs equally many phi and psi features")
    w_psi = linalg.sym_inv_sqrt(psi.T @ psi / n, cov_eps)
    w_phi = linalg.sym_inv_sqrt(phi.T @ phi / n, cov_eps)
    return float(linalg.singular_values(w_psi @ (psi.T @ phi / n) @ w_phi)[-1])


def boundedness_rho(feats, cov_eps: float = linalg.DEFAULT_COV_EPS) -> float:
    """Largest absolute entry of the whitened features over the sample."""
    f = linalg.as_matrix(feats, "feats")
    n, d = f.shape
    if n < d:
        raise ValueError("need at least as many rows as features")
    white = f @ linalg.sym_inv_sqrt(f.T @ f / n, cov_eps)
    return float(np.max(np.abs(white)))


def stage2_loss(learned, est: StructuralEstimate, z, x, y) -> float:
    """Held-out ``mean((T_hat h)(z_i) - y_i)^2`` with ``T_hat h(z) = psi(z)' C_phi beta``.

    ``C_phi`` is the second-moment matrix of the learned ``phi`` on the held-out rows.
    """
    phi = learned.phi(x)
    psi = learned.psi(z)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    c_phi = phi.T @ phi / phi.shape[0]
    th = psi @ (c_phi @ est.beta)
    return float(np.mean((th - y) ** 2))


def normalized_mse(mse: np.ndarray, baseline: np.ndarray) -> np.ndarray:
    """Divide by the mean of the baseline (delta = 0) losses of the same cell."""
    return np.asarray(mse, dtype=np.float64) / float(np.mean(baseline))


def estimate_to_dict(est: StructuralEstimate, checkpoint: str | None = None, split: dict | None = None) -> dict:
    return {
        "beta": [float(b) for b in est.beta],
        "ridge": float(est.ridge_used),
        "checkpoint": checkpoint,
        "split": split,
    }


def save_estimate(est: StructuralEstimate, path, checkpoint: str | None = None, split: dict | None = None) -> None:
    Path(path).write_text(json.dumps(estimate_to_dict(est, checkpoint, split), indent=2) + "\n")


def load_estimate(path, feature_map=None) -> tuple[StructuralEstimate, dict]:
    obj = json.loads(Path(path).read_text())
    est = StructuralEstimate(np.array(obj["beta"], dtype=np.float64), float(obj["ridge"]), feature_map)
    return est, obj

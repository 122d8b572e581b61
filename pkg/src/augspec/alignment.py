"""Spectral alignment of learned features with the structural function.

The learned augmented operator maps ``(h, c)`` in ``L2(X) x R`` to
``psi(z)' (E[phi(X) h(X)] + omega c)``. Whitening both sides turns its SVD into
the SVD of a ``d x d`` matrix. If ``(psi_i, (phi_i, omega_i), s_i)`` are the
singular triples then ``a_i = E[Y psi_i(Z)] / s_i`` equals ``<h0, phi_i>``, and
because the ``phi_i`` have Gram matrix ``I - omega omega'`` the squared norm of
the projection of ``h0`` on their span is ``a' (I - omega omega')^{-1} a``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import linalg
from . import synthgen as sg
from .spectral_loss import LearnedOperator, TrainTrace
from .twosls import StructuralEstimate, stage2_loss

DROP_THRESHOLD = 1e-8
DEGENERACY_TOL = 1e-8
DEFAULT_ETA = 0.1


class DegenerateAugmentationError(ValueError):
    """``omega_hat' omega_hat`` reached 1, so ``I - omega_hat omega_hat'`` is singular."""


@dataclass(frozen=True)
class EmpiricalSvd:
    """SVD of the learned operator in empirically orthonormal coordinates.

    ``psi_hat_i = psi' left_coeffs[:, i]``, ``phi_hat_i = phi' right_coeffs[:, i]``
    and ``omega_hat[i]`` is the scalar coordinate of the i-th right singular element.
    """

    sigma_hat: np.ndarray
    left_coeffs: np.ndarray
    right_coeffs: np.ndarray
    omega_hat: np.ndarray


def svd_from_moments(c_psi, c_phi, omega, cov_eps: float = linalg.DEFAULT_COV_EPS) -> EmpiricalSvd:
    g_r = np.asarray(c_phi, dtype=np.float64) + np.outer(omega, omega)
    k = linalg.sym_sqrt(c_psi, cov_eps) @ linalg.sym_sqrt(g_r, cov_eps)
    res = linalg.svd(k)
    left = linalg.sym_inv_sqrt(c_psi, cov_eps) @ res.u
    right = linalg.sym_inv_sqrt(g_r, cov_eps) @ res.v
    return EmpiricalSvd(sigma_hat=res.s, left_coeffs=left, right_coeffs=right, omega_hat=right.T @ omega)


def empirical_svd(learned: LearnedOperator, z, x, cov_eps: float = linalg.DEFAULT_COV_EPS) -> EmpiricalSvd:
    """SVD of ``Psi [Phi* | omega]`` with moments taken over the rows ``(z, x)``.

    Raises
    ------
    LinalgError
        If a Gram matrix is not positive semi-definite to tolerance.
    """
    psi = learned.psi(z)
    phi = learned.phi(x)
    n = psi.shape[0]
    if n < 10 * learned.d:
        raise ValueError(f"need at least {10 * learned.d} rows for the moments, got {n}")
    return svd_from_moments(psi.T @ psi / n, phi.T @ phi / n, learned.omega, cov_eps)


def alignment_from_coeffs(alpha_hat, omega_hat) -> float:
    """``a' (I - w w')^{-1} a`` via Sherman-Morrison."""
    a = np.asarray(alpha_hat, dtype=np.float64)
    w = np.asarray(omega_hat, dtype=np.float64)
    ww = float(w @ w)
    if ww >= 1.0 - DEGENERACY_TOL:
        raise DegenerateAugmentationError(f"omega_hat' omega_hat = {ww:.10f} >= 1 - {DEGENERACY_TOL}")
    return float(a @ a + (w @ a) ** 2 / (1.0 - ww))


def alignment_plugin(emp: EmpiricalSvd, learned: LearnedOperator, z, y, return_dropped: bool = False):
    """Plug-in estimate of ``||P_phi h0||^2`` from held-out ``(z, y)``.

    Components with ``sigma_hat < 1e-8`` are dropped; with ``return_dropped``
    the number dropped is returned alongside the value.
    """
    keep = emp.sigma_hat >= DROP_THRESHOLD
    psi_hat = learned.psi(z) @ emp.left_coeffs[:, keep]
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    alpha_hat = psi_hat.T @ y / y.size / emp.sigma_hat[keep]
    value = alignment_from_coeffs(alpha_hat, emp.omega_hat[keep])
    if return_dropped:
        return value, int((~keep).sum())
    return value


def projection_norm_sq(feats, target) -> float:
    """Squared empirical L2 norm of the least-squares projection of ``target`` on ``feats``."""
    f = linalg.as_matrix(feats, "feats")
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    coef = np.linalg.lstsq(f, t, rcond=None)[0]
    fitted = f @ coef
    return float(fitted @ fitted / t.size)


def alignment_true(learned: LearnedOperator, op: sg.GroundTruthOperator, n_eval: int = 100_000, seed: int = 0) -> float:
    """Monte-Carlo ``||P_phi h0||^2`` with X drawn from its uniform marginal."""
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-np.pi, np.pi, n_eval)
    return projection_norm_sq(learned.phi(xs), sg.eval_h0(op, xs))


# -- choosing delta -----------------------------------------------------------------


def select_delta_loss_balance(traces: Mapping[float, TrainTrace], eta: float = DEFAULT_ETA) -> float:
    """Largest delta whose final ``L0`` stays within ``eta |L0(0)|`` of the delta = 0 run."""
    if not traces:
        raise ValueError("empty delta grid")
    if 0.0 not in traces:
        raise ValueError("the grid must include delta = 0")
    base = traces[0.0].l0[-1]
    limit = base + eta * abs(base)
    chosen = 0.0
    for delta in sorted(traces):
        if traces[delta].l0[-1] <= limit:
            chosen = delta
    return float(chosen)


def _argbest(scores: Mapping[float, float], maximize: bool) -> float:
    if not scores:
        raise ValueError("no candidates")
    best = None
    for delta in sorted(scores):
        val = scores[delta]
        if best is None or (val > scores[best] if maximize else val < scores[best]):
            best = delta
    return float(best)


def select_delta_stage2(candidates: Mapping[float, tuple[LearnedOperator, StructuralEstimate]], z, x, y) -> float:
    """Argmin of the held-out stage-2 loss; ties go to the smaller delta.

    A heuristic: no consistency guarantee is known for this criterion.
    """
    scores = {d: stage2_loss(lo, est, z, x, y) for d, (lo, est) in candidates.items()}
    return _argbest(scores, maximize=False)


def select_delta_alignment(candidates: Mapping[float, LearnedOperator], z, x, y,
                           cov_eps: float = linalg.DEFAULT_COV_EPS) -> float:
    """Argmax of the plug-in alignment; ties go to the smaller delta."""
    scores = {d: alignment_plugin(empirical_svd(lo, z, x, cov_eps), lo, z, y) for d, lo in candidates.items()}
    return _argbest(scores, maximize=True)


@dataclass(frozen=True)
class AlignmentRow:
    delta: float
    sigma_hat: np.ndarray
    alignment_plugin: float
    alignment_true: float
    l0_final: float
    r_delta_final: float


def report_csv(rows: list[AlignmentRow]) -> str:
    if not rows:
        raise ValueError("no rows to report")
    d = rows[0].sigma_hat.size
    fmt = linalg.format_float
    buf = io.StringIO()
    head = ["delta"] + [f"sigma_hat_{i + 1}" for i in range(d)]
    head += ["alignment_plugin", "alignment_true", "l0_final", "r_delta_final"]
    buf.write(",".join(head) + "\n")
    for r in rows:
        vals = [r.delta, *r.sigma_hat, r.alignment_plugin, r.alignment_true, r.l0_final, r.r_delta_final]
        buf.write(",".join(fmt(v) for v in vals) + "\n")
    return buf.getvalue()


def save_report(rows: list[AlignmentRow], path) -> None:
    Path(path).write_text(report_csv(rows))

"""Contrastive spectral losses and the feature-training loop.

Given paired features ``phi_i = phi(x_i)`` and ``psi_i = psi(z_i)`` the basic
loss is

    L0 = mean_{i != j} (phi_i . psi_j)^2 - 2 mean_i phi_i . psi_i,

an unbiased estimate of ``E_X E_Z[(phi(X).psi(Z))^2] - 2 E[phi(X).psi(Z)]``.
Its population minimum over rank-``d`` feature pairs is ``-sum_{i<=d} s_i(T)^2``.
The augmented loss adds an outcome column ``delta * r0`` to the operator; with
an auxiliary vector ``omega`` it reads

    L0 + omega' C_psi omega - 2 delta E[y psi]' omega,

and profiling ``omega`` out gives ``L0 - delta^2 E[y psi]' C_psi^{-1} E[y psi]``.
Training uses the joint form, the profiled value is only reported.

The off-diagonal sum is computed as ``tr(G_phi G_psi) - sum_i s_i^2`` with
``G = F'F``, so a batch costs ``O(B d^2)`` rather than ``O(B^2 d)``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import features as feat
from . import linalg

LOSS_COLUMNS = ("step", "l0", "r_delta", "ortho_pen")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, trace: "TrainTrace"):
        super().__init__(message)
        self.trace = trace


def _check_pair(phi, psi) -> tuple[np.ndarray, np.ndarray]:
    phi = linalg.as_matrix(phi, "phi_feats")
    psi = linalg.as_matrix(psi, "psi_feats")
    if phi.shape != psi.shape:
        raise ValueError(f"feature shapes differ: {phi.shape} vs {psi.shape}")
    if phi.shape[0] < 2:
        raise ValueError("the loss needs at least two rows")
    return phi, psi


def _check_y(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != n:
        raise ValueError(f"y has {y.size} entries, expected {n}")
    return y


# -- losses ------------------------------------------------------------------------


def _l0_parts(phi: np.ndarray, psi: np.ndarray):
    b = phi.shape[0]
    g_phi = phi.T @ phi
    g_psi = psi.T @ psi
    s = np.einsum("ij,ij->i", phi, psi)
    off = float(np.sum(g_phi * g_psi) - s @ s)
    value = off / (b * (b - 1)) - 2.0 * float(s.sum()) / b
    return value, g_phi, g_psi, s


def loss_l0(phi_feats, psi_feats) -> float:
    phi, psi = _check_pair(phi_feats, psi_feats)
    return _l0_parts(phi, psi)[0]


def loss_l0_grad(phi_feats, psi_feats) -> tuple[float, np.ndarray, np.ndarray]:
    """``L0`` with its gradients w.r.t. the two feature matrices."""
    phi, psi = _check_pair(phi_feats, psi_feats)
    b = phi.shape[0]
    value, g_phi, g_psi, s = _l0_parts(phi, psi)
    pair = 2.0 / (b * (b - 1))
    d_phi = pair * (phi @ g_psi - s[:, None] * psi) - (2.0 / b) * psi
    d_psi = pair * (psi @ g_phi - s[:, None] * phi) - (2.0 / b) * phi
    return value, d_phi, d_psi


def _omega_terms(psi, targets, omegas, deltas):
    # sum_k omega_k' C_psi omega_k - 2 delta_k E[f_k psi]' omega_k, with gradients
    b = psi.shape[0]
    value = 0.0
    d_psi = np.zeros_like(psi)
    d_omegas = []
    for f, w, dk in zip(targets, omegas, deltas):
        pw = psi @ w
        e = psi.T @ f / b
        value += float(pw @ pw) / b - 2.0 * dk * float(e @ w)
        d_psi += (2.0 / b) * np.outer(pw, w) - (2.0 * dk / b) * np.outer(f, w)
        d_omegas.append(2.0 * (psi.T @ pw) / b - 2.0 * dk * e)
    return value, d_psi, d_omegas


def _check_omegas(omegas, deltas, d: int) -> tuple[np.ndarray, np.ndarray]:
    om = np.asarray(omegas, dtype=np.float64)
    if om.ndim == 1:
        om = om[None, :]
    dl = np.atleast_1d(np.asarray(deltas, dtype=np.float64))
    if om.shape != (dl.size, d) or dl.size < 1:
        raise ValueError(f"need K >= 1 omegas of length {d} matching K deltas; got {om.shape} and {dl.shape}")
    return om, dl


def loss_ldelta_extended(phi_feats, psi_feats, y, omega, delta: float) -> float:
    return loss_ldelta_extended_grad(phi_feats, psi_feats, y, omega, delta)[0]


def loss_ldelta_extended_grad(phi_feats, psi_feats, y, omega, delta: float):
    """Value and gradients ``(dL/dphi, dL/dpsi, dL/domega)`` of the joint augmented loss."""
    value, d_phi, d_psi, d_om = loss_higher_rank_grad(phi_feats, psi_feats, y, [omega], [delta])
    return value, d_phi, d_psi, d_om[0]


def loss_higher_rank(phi_feats, psi_feats, y, omegas, deltas) -> float:
    return loss_higher_rank_grad(phi_feats, psi_feats, y, omegas, deltas)[0]


def loss_higher_rank_grad(phi_feats, psi_feats, y, omegas, deltas):
    """Augmented loss with ``K`` outcome columns ``delta_k E[y^k | Z]``.

    Returns ``(value, d_phi, d_psi, d_omegas)`` with ``d_omegas`` of shape ``(K, d)``.
    """
    phi, psi = _check_pair(phi_feats, psi_feats)
    y = _check_y(y, phi.shape[0])
    om, dl = _check_omegas(omegas, deltas, phi.shape[1])
    value, d_phi, d_psi = loss_l0_grad(phi, psi)
    targets = [y ** (k + 1) for k in range(dl.size)]
    extra, d_psi_extra, d_om = _omega_terms(psi, targets, om, dl)
    return value + extra, d_phi, d_psi + d_psi_extra, np.array(d_om)


def loss_ldelta_profile(phi_feats, psi_feats, y, delta, cov_eps: float = 1e-6) -> tuple[float, float]:
    """Profiled augmented loss; returns ``(L0 + r_delta, r_delta)``.

    ``delta`` may be a scalar or a vector of per-moment weights, in which case
    ``r_delta`` sums ``-delta_k^2 E[y^k psi]' (C_psi + eps I)^{-1} E[y^k psi]``.
    """
    phi, psi = _check_pair(phi_feats, psi_feats)
    y = _check_y(y, phi.shape[0])
    deltas = np.atleast_1d(np.asarray(delta, dtype=np.float64))
    l0 = _l0_parts(phi, psi)[0]
    b = psi.shape[0]
    r = 0.0
    if np.any(deltas != 0):
        c_psi = psi.T @ psi / b
        for k, dk in enumerate(deltas):
            if dk == 0:
                continue
            e = psi.T @ (y ** (k + 1)) / b
            r -= dk**2 * float(e @ linalg.ridge_solve(c_psi, e, cov_eps))
    return l0 + r, r


def orthonormal_penalty(feats) -> float:
    return orthonormal_penalty_grad(feats)[0]


def orthonormal_penalty_grad(feats) -> tuple[float, np.ndarray]:
    """``||F'F/B - I||_F^2`` and its gradient ``(4/B) F (F'F/B - I)``."""
    f = linalg.as_matrix(feats, "feats")
    b = f.shape[0]
    if b < 2:
        raise ValueError("the penalty needs at least two rows")
    dev = f.T @ f / b - np.eye(f.shape[1])
    return float(np.sum(dev * dev)), (4.0 / b) * f @ dev


def population_loss_from_moments(c_phi, c_psi, c_psi_phi, e_y_psi=None, omega=None, delta: float = 0.0) -> float:
    """Population augmented loss from second moments of the features.

    ``c_phi = E[phi phi']``, ``c_psi = E[psi psi']``, ``c_psi_phi = E[psi(Z) phi(X)']``
    and ``e_y_psi = E[Y psi(Z)]``.
    """
    c_phi = np.asarray(c_phi, dtype=np.float64)
    c_psi = np.asarray(c_psi, dtype=np.float64)
    value = float(np.sum(c_psi * c_phi) - 2.0 * np.trace(np.asarray(c_psi_phi, dtype=np.float64)))
    if omega is not None:
        w = np.asarray(omega, dtype=np.float64)
        value += float(w @ c_psi @ w)
        if delta != 0:
            value -= 2.0 * delta * float(np.asarray(e_y_psi, dtype=np.float64) @ w)
    return value


# -- learned operator and training ------------------------------------------------------


@dataclass
class LearnedOperator:
    """Trained feature pair plus the augmentation coordinates ``omega``.

    ``input_map`` records how raw inputs are encoded before the networks (see
    :func:`augspec.features.encode_inputs`). With higher-rank training the
    extra auxiliary vectors live in ``extra_omegas`` (rows ``k = 2..K``).
    """

    phi_params: feat.MlpParams
    psi_params: feat.MlpParams
    omega: np.ndarray
    delta: float
    input_map: str = "identity"
    extra_omegas: np.ndarray | None = None
    extra_deltas: np.ndarray | None = None

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if self.phi_params.out_dim != self.d or self.psi_params.out_dim != self.d:
            raise ValueError("phi and psi must both output d features")
        if self.omega.shape != (self.d,):
            raise ValueError(f"omega must have length {self.d}")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.delta == 0 and np.any(self.omega != 0):
            raise ValueError("omega must vanish when delta = 0")

    @property
    def d(self) -> int:
        return self.phi_params.out_dim

    def phi(self, xs) -> np.ndarray:
        return feat.forward(self.phi_params, feat.encode_inputs(self.input_map, xs))

    def psi(self, zs) -> np.ndarray:
        return feat.forward(self.psi_params, feat.encode_inputs(self.input_map, zs))


@dataclass(frozen=True)
class TrainConfig:
    """Feature-training hyperparameters.

    ``feature_net`` is ``"mlp"`` (snake / GeLU / linear, ``width`` hidden units)
    or ``"linear"`` (a single affine layer on the encoded input).
    ``higher_rank_deltas`` overrides ``delta`` with one weight per moment ``y^k``.
    """

    d: int = 10
    delta: float = 0.0
    batch_size: int = 256
    steps: int = 5000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    cov_eps: float = 1e-6
    orthonormal_reg_weight: float = 0.0
    higher_rank_deltas: tuple[float, ...] | None = None
    seed: int = 0
    feature_net: str = "mlp"
    width: int = 50
    input_map: str = "identity"
    log_every: int = 100

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.batch_size < 4:
            raise ValueError("batch_size must be at least 4")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.delta < 0 or self.orthonormal_reg_weight < 0 or self.cov_eps < 0:
            raise ValueError("delta, orthonormal_reg_weight and cov_eps must be non-negative")
        if self.feature_net not in ("mlp", "linear"):
            raise ValueError(f"unknown feature_net {self.feature_net!r}")
        if self.log_every < 1:
            raise ValueError("log_every must be positive")
        if self.higher_rank_deltas is not None:
            if len(self.higher_rank_deltas) < 1 or min(self.higher_rank_deltas) < 0:
                raise ValueError("higher_rank_deltas must be a nonempty list of non-negative weights")
        feat.input_width(self.input_map)

    @property
    def deltas(self) -> np.ndarray:
        if self.higher_rank_deltas is not None:
            return np.asarray(self.higher_rank_deltas, dtype=np.float64)
        return np.array([self.delta])

    def arch(self) -> list[tuple[int, int, str]]:
        in_dim = feat.input_width(self.input_map)
        if self.feature_net == "linear":
            return feat.linear_arch(in_dim, self.d)
        return feat.synthetic_arch(in_dim, self.width, self.d)


@dataclass
class TrainTrace:
    step: list[int] = field(default_factory=list)
    l0: list[float] = field(default_factory=list)
    r_delta: list[float] = field(default_factory=list)
    ortho_pen: list[float] = field(default_factory=list)

    def append(self, step: int, l0: float, r_delta: float, ortho_pen: float) -> None:
        if self.step and step <= self.step[-1]:
            raise ValueError("trace steps must be strictly increasing")
        self.step.append(int(step))
        self.l0.append(float(l0))
        self.r_delta.append(float(r_delta))
        self.ortho_pen.append(float(ortho_pen))

    def __len__(self) -> int:
        return len(self.step)

    def final(self) -> dict:
        return {k: getattr(self, k)[-1] for k in LOSS_COLUMNS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(LOSS_COLUMNS) + "\n")
        fmt = linalg.format_float
        for row in zip(self.step, self.l0, self.r_delta, self.ortho_pen):
            buf.write(f"{row[0]},{fmt(row[1])},{fmt(row[2])},{fmt(row[3])}\n")
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _full_split_record(learned: LearnedOperator, z, x, y, cfg: TrainConfig):
    phi, psi = learned.phi(x), learned.psi(z)
    total, r = loss_ldelta_profile(phi, psi, y, cfg.deltas, cfg.cov_eps)
    pen = orthonormal_penalty(phi) + orthonormal_penalty(psi)
    return total - r, r, pen


def _batches(rng: np.random.Generator, n: int, batch: int):
    # epochs of a fresh permutation, sliced into consecutive batches
    if batch >= n:
        while True:
            yield slice(None)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            yield perm[start:start + batch]


def batch_loss_grad(phi_params: feat.MlpParams, psi_params: feat.MlpParams, omegas, x_in, z_in, y_pows,
                    deltas, ortho_weight: float = 0.0) -> tuple[float, list[np.ndarray]]:
    """Minibatch training objective and its gradient with respect to every parameter.

    ``x_in`` and ``z_in`` are encoded inputs and ``y_pows`` holds ``y^k`` in
    row ``k - 1``. With ``omegas`` None only ``L0`` (plus the penalty) is used.
    Gradients are ordered as ``phi`` leaves, ``psi`` leaves, then ``omegas``.
    """
    phi_b, phi_cache = feat.forward_cached(phi_params, x_in)
    psi_b, psi_cache = feat.forward_cached(psi_params, z_in)
    value, g_phi, g_psi = loss_l0_grad(phi_b, psi_b)
    g_om = None
    if omegas is not None:
        extra, g_psi_extra, g_om = _omega_terms(psi_b, y_pows, omegas, deltas)
        value += extra
        g_psi = g_psi + g_psi_extra
    if ortho_weight > 0:
        p1, gp1 = orthonormal_penalty_grad(phi_b)
        p2, gp2 = orthonormal_penalty_grad(psi_b)
        value += ortho_weight * (p1 + p2)
        g_phi = g_phi + ortho_weight * gp1
        g_psi = g_psi + ortho_weight * gp2
    grads = (feat.backward(phi_params, x_in, g_phi, phi_cache).leaves()
             + feat.backward(psi_params, z_in, g_psi, psi_cache).leaves())
    if g_om is not None:
        grads.append(np.array(g_om))
    return float(value), grads


def train_features(
    z, x, y, config: TrainConfig, init_params: tuple[feat.MlpParams, feat.MlpParams] | None = None
) -> tuple[LearnedOperator, TrainTrace]:
    """Fit ``(phi, psi, omega)`` with Adam on minibatches of the paired sample.

    Logs the full-sample ``L0``, profiled ``r_delta`` and orthonormality penalty
    at step 0, every ``log_every`` steps and at the final step.

    Raises
    ------
    TrainingDivergedError
        If the loss or any activation becomes non-finite; the partial trace is
        attached as ``err.trace``.
    """
    cfg = config
    deltas = cfg.deltas
    augmented = bool(np.any(deltas != 0))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = y.size
    if n < 2:
        raise ValueError("training data must contain at least two rows")
    x_in = feat.encode_inputs(cfg.input_map, x)
    z_in = feat.encode_inputs(cfg.input_map, z)
    if x_in.shape[0] != n or z_in.shape[0] != n:
        raise ValueError("z, x and y must have equal length")
    y_pows = np.stack([y ** (k + 1) for k in range(deltas.size)])

    seeds = np.random.SeedSequence(cfg.seed).generate_state(3)
    if init_params is None:
        phi_p = feat.init(cfg.arch(), int(seeds[0]))
        psi_p = feat.init(cfg.arch(), int(seeds[1]))
    else:
        phi_p, psi_p = (p.copy() for p in init_params)
    omegas = np.zeros((deltas.size, cfg.d))
    rng = np.random.default_rng(seeds[2])

    n_phi = len(phi_p.leaves())
    n_psi = len(psi_p.leaves())
    leaves = phi_p.leaves() + psi_p.leaves() + ([omegas] if augmented else [])
    adam = feat.AdamState.zeros_like(leaves, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps_adam=cfg.eps_adam)

    def assemble(leaves):
        om = leaves[-1] if augmented else omegas
        extra = om[1:] if deltas.size > 1 else None
        return LearnedOperator(
            phi_params=phi_p.with_leaves(leaves[:n_phi]),
            psi_params=psi_p.with_leaves(leaves[n_phi:n_phi + n_psi]),
            omega=om[0].copy() if deltas[0] != 0 else np.zeros(cfg.d),
            delta=float(deltas[0]),
            input_map=cfg.input_map,
            extra_omegas=None if extra is None else extra.copy(),
            extra_deltas=None if extra is None else deltas[1:].copy(),
        )

    trace = TrainTrace()

    def log(step, leaves):
        try:
            rec = _full_split_record(assemble(leaves), z, x, y, cfg)
        except feat.NonFiniteError as err:
            raise TrainingDivergedError(f"non-finite features at step {step}: {err}", trace) from err
        if not all(np.isfinite(rec)):
            raise TrainingDivergedError(f"loss became non-finite at step {step}", trace)
        trace.append(step, *rec)

    log(0, leaves)
    batches = _batches(rng, n, cfg.batch_size)
    lam = cfg.orthonormal_reg_weight
    for step in range(1, cfg.steps + 1):
        idx = next(batches)
        phi_cur = phi_p.with_leaves(leaves[:n_phi])
        psi_cur = psi_p.with_leaves(leaves[n_phi:n_phi + n_psi])
        try:
            value, grads = batch_loss_grad(phi_cur, psi_cur, leaves[-1] if augmented else None,
                                           x_in[idx], z_in[idx], y_pows[:, idx], deltas, lam)
        except feat.NonFiniteError as err:
            raise TrainingDivergedError(f"non-finite features at step {step}: {err}", trace) from err
        if not np.isfinite(value):
            raise TrainingDivergedError(f"loss became non-finite at step {step}", trace)
        adam, leaves = feat.adam_step(adam, leaves, grads)
        if step % cfg.log_every == 0 or step == cfg.steps:
            log(step, leaves)
    return assemble(leaves), trace


def with_delta(config: TrainConfig, delta: float) -> TrainConfig:
    return replace(config, delta=float(delta), higher_rank_deltas=None)


def operator_population_moments(learned_phi_coeffs, learned_psi_coeffs, t_matrix, h0_coeffs):
    """Moments of linear features ``phi = A' b(x)``, ``psi = B' b(z)`` in an orthonormal basis ``b``.

    Returns ``(c_phi, c_psi, c_psi_phi, e_y_psi)`` given the operator matrix
    ``t_matrix`` (rows index Z) and the basis coefficients of ``h0``.
    """
    a = np.asarray(learned_phi_coeffs, dtype=np.float64)
    b = np.asarray(learned_psi_coeffs, dtype=np.float64)
    t = np.asarray(t_matrix, dtype=np.float64)
    return a.T @ a, b.T @ b, b.T @ t @ a, b.T @ t @ np.asarray(h0_coeffs, dtype=np.float64)


def linear_effective_coeffs(params: feat.MlpParams) -> np.ndarray:
    """Basis coefficients of a single affine layer on ``sine_basis`` inputs.

    The bias folds into the constant basis function, which is the first input.
    """
    if len(params.layers) != 1 or params.layers[0].activation != "linear":
        raise ValueError("expected a single linear layer")
    w = params.layers[0].weight.copy()
    w[0] += params.layers[0].bias
    return w


def population_loss_linear(learned: LearnedOperator, t_matrix, h0_coeffs, delta: float | None = None) -> float:
    """Exact population profile loss of a linear-on-basis learned operator.

    ``omega`` is profiled out at its population optimum, so the value can be
    compared with ``-sum_{i<=d} s_i(T_delta)^2``.
    """
    a = linear_effective_coeffs(learned.phi_params)
    b = linear_effective_coeffs(learned.psi_params)
    c_phi, c_psi, c_psi_phi, e = operator_population_moments(a, b, t_matrix, h0_coeffs)
    delta = learned.delta if delta is None else delta
    value = population_loss_from_moments(c_phi, c_psi, c_psi_phi)
    if delta:
        value -= delta**2 * float(e @ np.linalg.lstsq(c_psi, e, rcond=None)[0])
    return value

"""Synthetic NPIV benchmark with a closed-form conditional expectation operator.

The joint law of ``(Z, X)`` on ``[-pi, pi]^2`` has uniform marginals and
density (with respect to the uniform product measure)

    p(z, x) = 1 + sum_i sigma_i u_i(z) v_i(x),

where ``u_i`` and ``v_i`` are random orthonormal combinations of
``sqrt(2) sin(l t)``, ``l = 1..d-1``. The operator ``h -> E[h(X) | Z]`` is then
exactly ``1 (x) 1 + sum_i sigma_i u_i (x) v_i``. The structural function is
``h0 = sum_i alpha_i v_i`` and the confounder

    U = rho_c * sum_i c_i (v_i(X) - sigma_i u_i(Z)) + eps

satisfies ``E[U | Z] = 0`` while correlating with ``X``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import linalg

GRID_SIZE = 400
POSITIVITY_FLOOR = 0.01
ENVELOPE_INFLATION = 1.05
MIN_ACCEPTANCE = 0.01


class OperatorSpecError(ValueError):
    """The requested operator does not define a valid joint density."""


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticOperatorSpec:
    d: int = 11
    sigma1: float = 0.1
    c_sigma: float = 0.8
    c_alpha: float = 5.0
    noise_std: float = 0.1
    confound_strength: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.d < 2:
            raise OperatorSpecError("d must be at least 2")
        if not 0.0 < self.sigma1 < 1.0:
            raise OperatorSpecError("sigma1 must lie in (0, 1)")
        if not 0.0 <= self.c_sigma <= 1.0:
            raise OperatorSpecError("c_sigma must lie in [0, 1]")
        if self.c_alpha <= 0:
            raise OperatorSpecError("c_alpha must be positive")
        if self.noise_std < 0 or self.confound_strength < 0:
            raise OperatorSpecError("noise_std and confound_strength must be non-negative")


@dataclass(frozen=True)
class GroundTruthOperator:
    spec: SyntheticOperatorSpec
    sigmas: np.ndarray
    u_coeffs: np.ndarray
    v_coeffs: np.ndarray
    alpha: np.ndarray
    confound_dir: np.ndarray
    positivity_margin: float
    v_sup: np.ndarray = field(repr=False)

    @property
    def rank(self) -> int:
        return self.spec.d - 1

    def u(self, zs) -> np.ndarray:
        """Left singular functions evaluated at ``zs``; shape ``(n, d-1)``."""
        return sine_basis(zs, self.rank) @ self.u_coeffs

    def v(self, xs) -> np.ndarray:
        return sine_basis(xs, self.rank) @ self.v_coeffs

    def density(self, zs, xs) -> np.ndarray:
        """Pointwise joint density ``p(z_i, x_i)`` w.r.t. the uniform product law."""
        return 1.0 + np.sum(self.u(zs) * self.sigmas * self.v(xs), axis=1)

    def h0_sine_coeffs(self) -> np.ndarray:
        return self.v_coeffs @ self.alpha

    def operator_matrix(self) -> np.ndarray:
        """Matrix of T in the (constant, sqrt2 sin) bases; rows index Z, columns X."""
        k = self.rank
        out = np.zeros((k + 1, k + 1))
        out[0, 0] = 1.0
        out[1:, 1:] = (self.u_coeffs * self.sigmas) @ self.v_coeffs.T
        return out

    def h0_basis_coeffs(self) -> np.ndarray:
        return np.concatenate([[0.0], self.h0_sine_coeffs()])

    def augmented_matrix(self, delta: float) -> np.ndarray:
        """Matrix of ``T_delta = [T | delta r0]`` in the same orthonormal bases."""
        t = self.operator_matrix()
        r0 = t @ self.h0_basis_coeffs()
        return np.hstack([t, delta * r0[:, None]])


def sine_basis(t, k: int) -> np.ndarray:
    """``sqrt(2) sin(l t)`` for ``l = 1..k``; orthonormal under Uniform[-pi, pi]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    return np.sqrt(2.0) * np.sin(np.outer(t, np.arange(1, k + 1)))


def full_basis(t, k: int) -> np.ndarray:
    """Constant function followed by ``sine_basis``; shape ``(n, k+1)``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    return np.hstack([np.ones((t.size, 1)), sine_basis(t, k)])


def _random_orthogonal(rng: np.random.Generator, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _linear_profile(first: float, ratio: float, k: int) -> np.ndarray:
    if k == 1:
        return np.array([first])
    return np.linspace(first, ratio * first, k)


def build_operator(spec: SyntheticOperatorSpec) -> GroundTruthOperator:
    """Draw the random singular bases and check that the density stays positive."""
    k = spec.d - 1
    rng = np.random.default_rng(spec.seed)
    u_coeffs = _random_orthogonal(rng, k)
    v_coeffs = _random_orthogonal(rng, k)
    c = rng.standard_normal(k)
    c /= np.linalg.norm(c)
    sigmas = _linear_profile(spec.sigma1, spec.c_sigma, k)
    if np.any(sigmas <= 0):
        raise OperatorSpecError("all singular values must be positive; use c_sigma > 0")
    alpha = _linear_profile(1.0, spec.c_alpha, k)
    alpha = alpha / np.linalg.norm(alpha)

    grid = np.linspace(-np.pi, np.pi, GRID_SIZE)
    ug = sine_basis(grid, k) @ u_coeffs
    vg = sine_basis(grid, k) @ v_coeffs
    dens = 1.0 + (ug * sigmas) @ vg.T
    margin = float(dens.min())
    if margin <= POSITIVITY_FLOOR:
        raise OperatorSpecError(
            f"joint density not positive: grid minimum {margin:.4f} <= {POSITIVITY_FLOOR}; "
            f"choose a smaller sigma1 (currently {spec.sigma1})"
        )
    return GroundTruthOperator(
        spec=spec,
        sigmas=sigmas,
        u_coeffs=u_coeffs,
        v_coeffs=v_coeffs,
        alpha=alpha,
        confound_dir=c,
        positivity_margin=margin,
        v_sup=np.max(np.abs(vg), axis=0) * ENVELOPE_INFLATION,
    )


class Samples(NamedTuple):
    z: np.ndarray
    x: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class Dataset:
    z: np.ndarray
    x: np.ndarray
    y: np.ndarray
    seed: int
    split_m: int
    spec: SyntheticOperatorSpec | None = None

    def __post_init__(self):
        n = self.z.shape[0]
        if not (self.x.shape[0] == self.y.shape[0] == n):
            raise ValueError("z, x, y must have equal length")
        if not 0 < self.split_m < n:
            raise ValueError(f"split_m={self.split_m} must lie in (0, {n})")

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def feature_split(self) -> Samples:
        """Rows used to learn features (the first ``split_m``)."""
        m = self.split_m
        return Samples(self.z[:m], self.x[:m], self.y[:m])

    def estimation_split(self) -> Samples:
        m = self.split_m
        return Samples(self.z[m:], self.x[m:], self.y[m:])

    def all(self) -> Samples:
        return Samples(self.z, self.x, self.y)


def _sample_x_given_z(op: GroundTruthOperator, zs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    uz = op.u(zs)
    envelope = 1.0 + np.abs(uz) @ (op.sigmas * op.v_sup)
    xs = np.empty_like(zs)
    pending = np.arange(zs.size)
    proposed = accepted = 0
    while pending.size:
        cand = rng.uniform(-np.pi, np.pi, pending.size)
        coin = rng.uniform(0.0, 1.0, pending.size)
        dens = 1.0 + np.sum(uz[pending] * op.sigmas * op.v(cand), axis=1)
        ok = coin * envelope[pending] <= dens
        xs[pending[ok]] = cand[ok]
        proposed += pending.size
        accepted += int(ok.sum())
        if proposed >= 100 * zs.size and accepted / proposed < MIN_ACCEPTANCE:
            raise SamplingError(f"rejection acceptance rate {accepted / proposed:.4f} below 1%")
        pending = pending[~ok]
    return xs


def confounder(op: GroundTruthOperator, zs, xs) -> np.ndarray:
    """Systematic part of U (without the independent noise)."""
    rho = op.spec.confound_strength
    return rho * ((op.v(xs) - op.sigmas * op.u(zs)) @ op.confound_dir)


def sample_dataset(op: GroundTruthOperator, n: int, split_fraction: float = 0.5, seed: int = 0) -> Dataset:
    """Draw ``n`` i.i.d. triples; the first ``round(n * split_fraction)`` rows form the feature split."""
    if n < 10:
        raise ValueError("n must be at least 10")
    split_m = int(round(n * split_fraction))
    if not 0 < split_m < n:
        raise ValueError(f"split_fraction={split_fraction} leaves an empty split for n={n}")
    rng = np.random.default_rng(seed)
    zs = rng.uniform(-np.pi, np.pi, n)
    xs = _sample_x_given_z(op, zs, rng)
    eps = rng.standard_normal(n) * op.spec.noise_std
    y = eval_h0(op, xs) + confounder(op, zs, xs) + eps
    return Dataset(z=zs, x=xs, y=y, seed=seed, split_m=split_m, spec=op.spec)


def _check_domain(t: np.ndarray, name: str) -> None:
    if np.any(np.abs(t) > np.pi + 1e-12):
        raise ValueError(f"{name} must lie in [-pi, pi]")


def eval_h0(op: GroundTruthOperator, xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    _check_domain(xs, "xs")
    return op.v(xs) @ op.alpha


def apply_T(op: GroundTruthOperator, coeffs_in_v_basis, zs) -> np.ndarray:
    """``(T h)(z)`` for ``h = sum_i beta_i v_i``."""
    beta = np.asarray(coeffs_in_v_basis, dtype=np.float64)
    if beta.shape != (op.rank,):
        raise ValueError(f"expected {op.rank} coefficients, got shape {beta.shape}")
    zs = np.asarray(zs, dtype=np.float64).reshape(-1)
    _check_domain(zs, "zs")
    return op.u(zs) @ (op.sigmas * beta)


def r0(op: GroundTruthOperator, zs) -> np.ndarray:
    return apply_T(op, op.alpha, zs)


def gap_gamma(op: GroundTruthOperator, bar_n, delta: float) -> float:
    """Signal/noise singular gap for the partition ``bar_n`` (1-based indices).

    Returns ``s_min(L (I + delta^2 a a^T)^{1/2}) - max(complement sigmas)`` where
    ``L`` and ``a`` are the singular values and coefficients of ``h0`` on
    ``bar_n``.
    """
    idx = sorted(set(int(i) for i in bar_n))
    if not idx:
        raise ValueError("bar_n must be non-empty")
    if idx[0] < 1 or idx[-1] > op.rank:
        raise ValueError(f"bar_n indices must lie in 1..{op.rank}")
    sel = np.array(idx) - 1
    lam = op.sigmas[sel]
    a = op.alpha[sel]
    root = linalg.sym_sqrt(np.eye(sel.size) + delta**2 * np.outer(a, a))
    signal = float(linalg.singular_values(lam[:, None] * root)[-1])
    rest = np.delete(op.sigmas, sel)
    noise = float(rest.max()) if rest.size else 0.0
    return signal - noise


def gap_crossover_delta(op: GroundTruthOperator, k: int) -> float:
    """Closed-form ``delta`` at which the one-dimensional gap for ``{k}`` vanishes."""
    rest = np.delete(op.sigmas, k - 1)
    noise = float(rest.max()) if rest.size else 0.0
    sk, ak = op.sigmas[k - 1], op.alpha[k - 1]
    ratio = noise / sk
    if ratio <= 1.0:
        return 0.0
    return float(np.sqrt(ratio**2 - 1.0) / abs(ak))


# -- serialization -------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> Path:
    """Write ``z,x,y`` CSV plus a JSON sidecar; returns the sidecar path."""
    path = Path(path)
    rows = ["z,x,y"]
    fmt = linalg.format_float
    rows += [f"{fmt(a)},{fmt(b)},{fmt(c)}" for a, b, c in zip(ds.z, ds.x, ds.y)]
    path.write_text("\n".join(rows) + "\n")
    meta = {
        "n": ds.n,
        "seed": ds.seed,
        "split_m": ds.split_m,
        "spec": asdict(ds.spec) if ds.spec is not None else None,
    }
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return sidecar


def load_dataset(path) -> Dataset:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    meta = json.loads(path.with_suffix(".json").read_text())
    spec = SyntheticOperatorSpec(**meta["spec"]) if meta.get("spec") else None
    return Dataset(
        z=data[:, 0].copy(), x=data[:, 1].copy(), y=data[:, 2].copy(),
        seed=meta["seed"], split_m=meta["split_m"], spec=spec,
    )

"""Off-policy evaluation as an instrumental-variable problem on tabular MDPs.

For a target policy ``pi`` the Bellman equation ``Q(s,a) = r(s,a) + gamma
E[Q(S',A') | s,a]`` with ``A' ~ pi(.|S')`` reads ``T Q = (Q - r) / gamma`` where
``T`` is the conditional expectation operator from ``X = (S',A')`` to
``Z = (S,A)``. With the outcome ``Y_k = -(R - Q_k(S,A)) / gamma`` one has
``E[Y_k | Z] = T Q`` at ``Q_k = Q``, which is what the iteration targets.

Two updates are available. ``"literal"`` solves ``T Q_{k+1} = E[Y_k | Z]`` by
2SLS; since ``T`` has eigenvalue 1 on constants this inverse iteration expands
errors by about ``1/gamma`` per step and is kept only for study. The default
``"fixed_point"`` solves the same moment equations with ``Q_k`` replaced by the
unknown, i.e. 2SLS with treatment features ``phi(X) - phi(Z)/gamma`` and outcome
``-R/gamma``, which is stable. In both modes learned features are refit each
iteration against ``Y_k``.
"""
from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import features as feat
from . import linalg
from . import spectral_loss as sl
from .twosls import fit_2sls

TRACE_COLUMNS = ("iter", "supnorm_change", "bellman_residual", "rho_hat")
DIVERGENCE_RUN = 5


class OpeDivergedError(RuntimeError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


class CoverageWarning(UserWarning):
    pass


def _check_stochastic(m: np.ndarray, name: str, tol: float = 1e-12) -> None:
    if np.any(m < 0) or not np.all(np.isfinite(m)):
        raise ValueError(f"{name} must be non-negative and finite")
    dev = float(np.max(np.abs(m.sum(axis=-1) - 1.0)))
    if dev > tol:
        raise ValueError(f"{name} rows must sum to 1 (max deviation {dev:.2e})")


@dataclass(frozen=True)
class TabularMdp:
    transition: np.ndarray
    reward_mean: np.ndarray
    reward_std: float
    gamma: float
    mu0: np.ndarray

    def __post_init__(self):
        s, a, s2 = self.transition.shape
        if s != s2 or self.reward_mean.shape != (s, a) or self.mu0.shape != (s,):
            raise ValueError("inconsistent MDP shapes")
        _check_stochastic(self.transition, "transition")
        _check_stochastic(self.mu0, "mu0")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.reward_std < 0:
            raise ValueError("reward_std must be non-negative")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class Policy:
    probs: np.ndarray

    def __post_init__(self):
        _check_stochastic(self.probs, "policy")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))


def state_action_transition(mdp: TabularMdp, pi: Policy) -> np.ndarray:
    """``P_pi[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')`` as an ``SA x SA`` matrix."""
    s, a = mdp.n_states, mdp.n_actions
    return (mdp.transition[:, :, :, None] * pi.probs[None, None, :, :]).reshape(s * a, s * a)


def exact_q(mdp: TabularMdp, pi: Policy) -> np.ndarray:
    """Solve ``(I - gamma P_pi) q = r`` directly."""
    p = state_action_transition(mdp, pi)
    r = mdp.reward_mean.reshape(-1)
    m = np.eye(r.size) - mdp.gamma * p
    q = np.linalg.solve(m, r)
    resid = float(np.max(np.abs(m @ q - r)))
    if resid > 1e-10 * max(1.0, float(np.max(np.abs(q)))):
        raise linalg.LinalgError(f"Bellman solve residual {resid:.2e} too large")
    return q.reshape(mdp.n_states, mdp.n_actions)


def bellman_residual(mdp: TabularMdp, pi: Policy, q) -> float:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    p = state_action_transition(mdp, pi)
    return float(np.max(np.abs(mdp.reward_mean.reshape(-1) + mdp.gamma * p @ q - q)))


def policy_value(mdp: TabularMdp, q, pi: Policy) -> float:
    """``sum_s mu0(s) sum_a pi(a|s) q(s,a)``."""
    q = np.asarray(q, dtype=np.float64).reshape(mdp.n_states, mdp.n_actions)
    return float(mdp.mu0 @ np.sum(pi.probs * q, axis=1))


def _draw(rng: np.random.Generator, cdf: np.ndarray) -> np.ndarray:
    # one categorical draw per row of a (n, k) matrix of cumulative probabilities
    u = rng.uniform(size=(cdf.shape[0], 1))
    return np.minimum((u > cdf).sum(axis=1), cdf.shape[1] - 1)


def monte_carlo_value(mdp: TabularMdp, pi: Policy, n_episodes: int, seed: int = 0, tol: float = 1e-10):
    """Mean and standard error of discounted returns from ``mu0`` under ``pi``."""
    rng = np.random.default_rng(seed)
    horizon = int(np.ceil(np.log(tol) / np.log(mdp.gamma)))
    pi_cdf = np.cumsum(pi.probs, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    s = _draw(rng, np.tile(np.cumsum(mdp.mu0), (n_episodes, 1)))
    ret = np.zeros(n_episodes)
    disc = 1.0
    for _ in range(horizon):
        a = _draw(rng, pi_cdf[s])
        ret += disc * (mdp.reward_mean[s, a] + mdp.reward_std * rng.standard_normal(n_episodes))
        s = _draw(rng, p_cdf[s, a])
        disc *= mdp.gamma
    return float(ret.mean()), float(ret.std(ddof=1) / np.sqrt(n_episodes))


# -- offline data ----------------------------------------------------------------------


@dataclass(frozen=True)
class OfflineData:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    n_states: int
    n_actions: int
    gamma: float
    mu0: np.ndarray
    behavior: Policy

    def __post_init__(self):
        n = self.s.size
        if n == 0:
            raise ValueError("offline data must be nonempty")
        if not (self.a.size == self.r.size == self.s_next.size == n):
            raise ValueError("tuple arrays must have equal length")
        for arr, hi, name in ((self.s, self.n_states, "s"), (self.s_next, self.n_states, "s_next"),
                              (self.a, self.n_actions, "a")):
            if np.any(arr < 0) or np.any(arr >= hi):
                raise ValueError(f"{name} indices out of range")

    @property
    def n(self) -> int:
        return self.s.size

    def counts(self) -> np.ndarray:
        """Number of tuples per ``(s, a)``."""
        out = np.zeros((self.n_states, self.n_actions), dtype=np.int64)
        np.add.at(out, (self.s, self.a), 1)
        return out


def collect_offline(mdp: TabularMdp, pi_b: Policy, n: int, seed: int = 0,
                    restart: np.ndarray | None = None) -> OfflineData:
    """Simulate one long trajectory that restarts with probability ``1 - gamma``.

    Restarts draw from ``restart``, which defaults to ``mu0``. The visited
    ``(s, a)`` pairs follow the discounted occupancy of ``pi_b`` started there.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if pi_b.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("behaviour policy shape does not match the MDP")
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=(n, 4))
    noise = rng.standard_normal(n)
    if restart is None:
        restart = mdp.mu0
    restart = np.asarray(restart, dtype=float)
    if restart.shape != (mdp.n_states,) or np.any(restart < 0) or abs(restart.sum() - 1.0) > 1e-9:
        raise ValueError("restart must be a distribution over states")
    mu_cdf = np.cumsum(restart)
    pi_cdf = np.cumsum(pi_b.probs, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)

    def pick(cdf, x):
        return min(int(np.searchsorted(cdf, x, side="right")), cdf.size - 1)

    s_arr = np.empty(n, dtype=np.int64)
    a_arr = np.empty(n, dtype=np.int64)
    s2_arr = np.empty(n, dtype=np.int64)
    s = pick(mu_cdf, u[0, 0])
    for t in range(n):
        a = pick(pi_cdf[s], u[t, 1])
        s2 = pick(p_cdf[s, a], u[t, 2])
        s_arr[t], a_arr[t], s2_arr[t] = s, a, s2
        s = pick(mu_cdf, u[t, 0]) if u[t, 3] < 1.0 - mdp.gamma else s2
    r = mdp.reward_mean[s_arr, a_arr] + mdp.reward_std * noise
    return OfflineData(s_arr, a_arr, r, s2_arr, mdp.n_states, mdp.n_actions, mdp.gamma, mdp.mu0.copy(), pi_b)


def unreachable_gaps(data: OfflineData, pi: Policy) -> list[tuple[int, int]]:
    """``(s, a)`` pairs reachable under ``pi`` from the ``mu0`` support yet absent from the data.

    Reachability follows the transitions observed in the data.
    """
    counts = data.counts()
    succ: dict[int, set] = {}
    for s, s2 in zip(data.s, data.s_next):
        succ.setdefault(int(s), set()).add(int(s2))
    frontier = [int(s) for s in np.flatnonzero(data.mu0 > 0)]
    seen = set(frontier)
    missing = []
    while frontier:
        s = frontier.pop()
        for a in np.flatnonzero(pi.probs[s] > 0):
            if counts[s, a] == 0:
                missing.append((s, int(a)))
        for s2 in succ.get(s, ()):
            if s2 not in seen:
                seen.add(s2)
                frontier.append(s2)
    return sorted(missing)


# -- iterative NPIV -------------------------------------------------------------------


@dataclass(frozen=True)
class OpeConfig:
    """Settings for :func:`iterative_npiv_ope`.

    ``feature_mode`` is ``"tabular"`` (one-hot state-action indicators, nothing
    to learn) or ``"linear"`` (``train.d`` learned linear features of the
    one-hot encoding). ``feature_refresh`` ``"once"`` learns the features from
    the first outcome and keeps them for all iterations; ``"every"`` warm-starts
    a refit on each new outcome. ``estimator`` ``"speciv"`` forces ``delta = 0``.
    """

    estimator: str = "speciv"
    delta: float = 0.0
    max_iter: int = 100
    tol: float = 1e-4
    feature_mode: str = "tabular"
    train: sl.TrainConfig = field(default_factory=lambda: sl.TrainConfig(
        d=3, feature_net="linear", batch_size=1 << 20, steps=3000, lr=1e-2, log_every=1000))
    warm_steps: int = 300
    warm_lr: float = 1e-3
    ridge: float = 1e-8
    update: str = "fixed_point"
    action_sampling: str = "once"
    feature_refresh: str = "once"
    seed: int = 0

    def __post_init__(self):
        if self.estimator not in ("speciv", "augspeciv"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.estimator == "augspeciv" and self.delta <= 0:
            raise ValueError("augspeciv needs delta > 0")
        if self.feature_mode not in ("tabular", "linear"):
            raise ValueError(f"unknown feature_mode {self.feature_mode!r}")
        if self.update not in ("fixed_point", "literal"):
            raise ValueError(f"unknown update {self.update!r}")
        if self.action_sampling not in ("once", "per_iteration"):
            raise ValueError(f"unknown action_sampling {self.action_sampling!r}")
        if self.feature_refresh not in ("once", "every"):
            raise ValueError(f"unknown feature_refresh {self.feature_refresh!r}")
        if self.max_iter < 1 or self.tol <= 0:
            raise ValueError("max_iter must be positive and tol > 0")

    @property
    def effective_delta(self) -> float:
        return self.delta if self.estimator == "augspeciv" else 0.0


@dataclass
class OpeTraceRow:
    iter: int
    supnorm_change: float
    bellman_residual: float
    rho_hat: float


@dataclass
class OpeResult:
    q_hat: np.ndarray
    rho_hat: float
    trace: list[OpeTraceRow]
    converged: bool
    estimator: str
    delta: float

    @property
    def iterations(self) -> int:
        return len(self.trace)


class _FeatureState:
    """Holds the current feature maps over the ``S*A`` one-hot index space."""

    def __init__(self, cfg: OpeConfig, n_sa: int):
        self.cfg = cfg
        self.n_sa = n_sa
        self.params = None
        self.tag = f"onehot:{n_sa}"

    def refit(self, z_idx, x_idx, y, first: bool):
        # outcome-agnostic features do not change between iterations, so they are fit once
        if self.cfg.feature_mode == "tabular":
            return
        if not first and (self.cfg.effective_delta == 0 or self.cfg.feature_refresh == "once"):
            return
        base = replace(self.cfg.train, input_map=self.tag, delta=self.cfg.effective_delta,
                       higher_rank_deltas=None, seed=self.cfg.seed)
        if not first:
            base = replace(base, steps=self.cfg.warm_steps, lr=self.cfg.warm_lr)
        learned, _ = sl.train_features(z_idx, x_idx, y, base, init_params=self.params)
        self.params = (learned.phi_params, learned.psi_params)

    def phi(self, idx) -> np.ndarray:
        if self.params is None:
            return feat.encode_inputs(self.tag, idx)
        return feat.forward(self.params[0], feat.encode_inputs(self.tag, idx))

    def psi(self, idx) -> np.ndarray:
        if self.params is None:
            return feat.encode_inputs(self.tag, idx)
        return feat.forward(self.params[1], feat.encode_inputs(self.tag, idx))


def iterative_npiv_ope(data: OfflineData, pi: Policy, cfg: OpeConfig | None = None,
                       mdp: TabularMdp | None = None, q_init=None) -> OpeResult:
    """Estimate ``Q_pi`` and ``rho(pi)`` from offline tuples.

    ``mdp`` is used only to report the true Bellman residual in the trace.

    Raises
    ------
    OpeDivergedError
        When the sup-norm change grows for five consecutive iterations.
    """
    cfg = cfg or OpeConfig()
    n_s, n_a = data.n_states, data.n_actions
    n_sa = n_s * n_a
    if pi.probs.shape != (n_s, n_a):
        raise ValueError("target policy shape does not match the data")
    gaps = unreachable_gaps(data, pi)
    if gaps:
        warnings.warn(f"{len(gaps)} state-action pairs reachable under the target policy are "
                      f"missing from the data, e.g. {gaps[:3]}", CoverageWarning, stacklevel=2)
    gamma = data.gamma
    rng = np.random.default_rng(cfg.seed)
    pi_cdf = np.cumsum(pi.probs, axis=1)
    z_idx = data.s * n_a + data.a
    all_idx = np.arange(n_sa)

    def sample_x():
        return data.s_next * n_a + _draw(rng, pi_cdf[data.s_next])

    x_idx = sample_x()
    q = np.zeros(n_sa) if q_init is None else np.asarray(q_init, dtype=np.float64).reshape(-1).copy()
    feats = _FeatureState(cfg, n_sa)
    trace: list[OpeTraceRow] = []
    converged = False
    growing = 0
    for k in range(1, cfg.max_iter + 1):
        if k > 1 and cfg.action_sampling == "per_iteration":
            x_idx = sample_x()
        y = -(data.r - q[z_idx]) / gamma
        feats.refit(z_idx, x_idx, y, first=(k == 1))
        phi_all = feats.phi(all_idx)
        psi_z = feats.psi(z_idx)
        if cfg.update == "fixed_point":
            est = fit_2sls(phi_all[x_idx] - phi_all[z_idx] / gamma, psi_z, -data.r / gamma, cfg.ridge)
        else:
            est = fit_2sls(phi_all[x_idx], psi_z, y, cfg.ridge)
        q_new = phi_all @ est.beta
        change = float(np.max(np.abs(q_new - q)))
        resid = bellman_residual(mdp, pi, q_new) if mdp is not None else float("nan")
        rho = float(data.mu0 @ np.sum(pi.probs * q_new.reshape(n_s, n_a), axis=1))
        if trace and change > trace[-1].supnorm_change:
            growing += 1
        else:
            growing = 0
        trace.append(OpeTraceRow(k, change, resid, rho))
        q = q_new
        if not np.isfinite(change) or growing >= DIVERGENCE_RUN:
            raise OpeDivergedError(
                f"iteration diverged: sup-norm change grew for {growing} consecutive iterations "
                f"(last {change:.3e})", trace)
        if change < cfg.tol:
            converged = True
            break
    q_hat = q.reshape(n_s, n_a)
    return OpeResult(q_hat, float(data.mu0 @ np.sum(pi.probs * q_hat, axis=1)), trace, converged,
                     cfg.estimator, cfg.effective_delta)


def trace_csv(result: OpeResult) -> str:
    fmt = linalg.format_float
    buf = io.StringIO()
    buf.write(",".join(TRACE_COLUMNS) + "\n")
    for row in result.trace:
        buf.write(f"{row.iter},{fmt(row.supnorm_change)},{fmt(row.bellman_residual)},{fmt(row.rho_hat)}\n")
    return buf.getvalue()


def save_trace(result: OpeResult, path) -> None:
    Path(path).write_text(trace_csv(result))


# -- benchmark MDPs --------------------------------------------------------------------


def chain_mdp(n_states: int = 5, p_move: float = 0.8, reward_std: float = 0.1, gamma: float = 0.9) -> TabularMdp:
    """Chain with actions left (0) / right (1); the intended move succeeds with ``p_move``.

    The mean reward is ``s / (n_states - 1)`` for either action; episodes start
    uniformly.
    """
    trans = np.zeros((n_states, 2, n_states))
    for s in range(n_states):
        for a, step in ((0, -1), (1, 1)):
            target = min(max(s + step, 0), n_states - 1)
            trans[s, a, target] += p_move
            trans[s, a, s] += 1.0 - p_move
    reward = np.repeat((np.arange(n_states) / (n_states - 1))[:, None], 2, axis=1)
    return TabularMdp(trans, reward, reward_std, gamma, np.full(n_states, 1.0 / n_states))


def chain_target_policy(n_states: int = 5, p_right: float = 0.7) -> Policy:
    return Policy(np.tile([1.0 - p_right, p_right], (n_states, 1)))


def misaligned_mdp(n_slow: int = 3, n_fast: int = 3, stay: float = 0.95, fast_memory: float = 0.2,
                   reward_scale: float = 10.0, reward_std: float = 0.1, gamma: float = 0.9) -> TabularMdp:
    """MDP whose reward lives on a weakly persistent factor.

    States are pairs ``(c, f)`` indexed ``c * n_fast + f``. The slow factor ``c``
    is steered by the action: action 0 keeps it with probability ``stay`` and
    otherwise jumps uniformly, action 1 advances it to ``(c + 1) mod n_slow``
    with probability ``1 - stay``. The fast factor ignores the action, staying
    put with probability ``fast_memory`` and otherwise being redrawn uniformly. The mean reward is a cosine of ``f`` only, so the value
    function loads on a direction the transition operator barely propagates
    while the dominant singular functions follow ``c``. Because neither the
    reward nor the fast dynamics see the action, the Q-function depends on the
    state only and is identified from the next-state operator.
    """
    n_s = n_slow * n_fast
    n_a = 2
    slow = np.zeros((n_a, n_slow, n_slow))
    for c in range(n_slow):
        slow[0, c] = (1.0 - stay) / (n_slow - 1)
        slow[0, c, c] = stay
        slow[1, c, c] = stay
        slow[1, c, (c + 1) % n_slow] += 1.0 - stay
    fast = np.full((n_fast, n_fast), (1.0 - fast_memory) / n_fast)
    fast[np.arange(n_fast), np.arange(n_fast)] += fast_memory
    trans = np.stack([np.kron(slow[a], fast) for a in range(n_a)], axis=1)
    f_of_s = np.arange(n_s) % n_fast
    reward = np.repeat(reward_scale * np.cos(2 * np.pi * f_of_s / n_fast)[:, None], n_a, axis=1)
    # start in the rewarded fast state so the policy value depends on f
    mu0 = np.where(f_of_s == 0, 1.0 / n_slow, 0.0)
    return TabularMdp(trans, reward, reward_std, gamma, mu0)


def misaligned_target_policy(n_slow: int = 3, n_fast: int = 3, p_first: float = 0.8) -> Policy:
    return Policy(np.tile([p_first, 1.0 - p_first], (n_slow * n_fast, 1)))

"""Diffusion mathematics for the two graph channels.

Continuous channel: standard Gaussian forward marginal and the
deterministic reverse update (no fresh noise on the way back, so interval
stepping is well defined).  Discrete channel: uniform-mixture transition
matrices Q = a*I + (1-a)/d * ones.  These commute and form a semigroup,
so the cumulative matrix uses the cumulative product of alphas directly.

Edge tensors are noised by right-multiplying each port row by the
cumulative matrix over d = k ports and Bernoulli-sampling every entry of
the product; the reverse walks each entry through the two-category
posterior.  Both directions sample the upper triangle only and mirror it,
which keeps the transpose symmetry an invariant rather than a hope.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_STEPS = 500
COSINE_S = 0.008
ALPHA_FLOOR = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step alpha and its running product, index 0 = clean data."""

    t_max: int
    alpha: np.ndarray      # shape (t_max + 1,); alpha[0] == 1
    alpha_bar: np.ndarray  # alpha_bar[t] == prod(alpha[1:t+1])

    def __post_init__(self):
        self.alpha.flags.writeable = False
        self.alpha_bar.flags.writeable = False


def cosine_schedule(t_max: int = DEFAULT_STEPS, s: float = COSINE_S,
                    floor: float = ALPHA_FLOOR) -> NoiseSchedule:
    """Squared-cosine alpha_bar, renormalized so alpha_bar[0] == 1."""
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    t = np.arange(t_max + 1, dtype=float)
    f = np.cos(((t / t_max + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    bar = f / f[0]
    alpha = np.ones(t_max + 1)
    alpha[1:] = np.clip(bar[1:] / bar[:-1], floor, 1.0)
    # rebuild the product so alpha_bar[t] == prod alpha exactly even after
    # clipping
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(t_max, alpha, alpha_bar)


# ---------------------------------------------------------------------------
# transition matrices

def q_matrix(alpha_t: float, d: int) -> np.ndarray:
    """One-step uniform-mixture transition matrix."""
    if not 0.0 <= alpha_t <= 1.0:
        raise ValueError(f"alpha {alpha_t} outside [0, 1]")
    if d < 2:
        raise ValueError("need at least two categories")
    return alpha_t * np.eye(d) + (1.0 - alpha_t) / d * np.ones((d, d))


def q_bar_matrix(alpha_bar_t: float, d: int) -> np.ndarray:
    """Cumulative transition matrix; same mixture form by the semigroup."""
    return q_matrix(alpha_bar_t, d)


# ---------------------------------------------------------------------------
# continuous channel

def forward_continuous(v0: np.ndarray, t: int, sched: NoiseSchedule,
                       rng: np.random.Generator):
    """Noisy parameters at step t plus the noise that made them."""
    _check_t(t, sched)
    ab = sched.alpha_bar[t]
    eps = rng.standard_normal(v0.shape)
    return math.sqrt(ab) * v0 + math.sqrt(1.0 - ab) * eps, eps


def reverse_continuous_step(vt: np.ndarray, eps_hat: np.ndarray, t: int,
                            sched: NoiseSchedule,
                            t_prev: int | None = None) -> np.ndarray:
    """Deterministic reverse update from t to t_prev (default t - 1).

    For interval stepping the effective per-step alpha is the ratio of the
    cumulative products across the skipped range.
    """
    _check_t(t, sched)
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev {t_prev} must lie in [0, {t})")
    a_eff = sched.alpha_bar[t] / sched.alpha_bar[t_prev]
    one_minus_bar = 1.0 - sched.alpha_bar[t]
    coef = 0.0 if one_minus_bar == 0.0 else (1.0 - a_eff) / math.sqrt(one_minus_bar)
    return (vt - coef * eps_hat) / math.sqrt(a_eff)


# ---------------------------------------------------------------------------
# discrete channel

def forward_discrete(nodes: np.ndarray, edges: np.ndarray, t: int,
                     sched: NoiseSchedule, rng: np.random.Generator):
    """Sampled noisy one-hots and edge tensor at step t."""
    _check_t(t, sched)
    ab = sched.alpha_bar[t]
    n, a = nodes.shape
    k = edges.shape[-1]

    node_probs = nodes @ q_bar_matrix(ab, a)
    picks = _sample_rows(node_probs, rng)
    nodes_t = np.zeros_like(nodes)
    nodes_t[np.arange(n), picks] = 1.0

    qk = q_bar_matrix(ab, k)
    edges_t = np.zeros_like(edges)
    for i in range(n):
        for j in range(i + 1, n):
            if not edges[i, j].any():
                continue  # a zero row has nowhere to send mass
            probs = edges[i, j] @ qk
            block = (rng.random((k, k)) < probs).astype(edges.dtype)
            edges_t[i, j] = block
            edges_t[j, i] = block.T
    return nodes_t, edges_t


@dataclass
class DiffusionDiagnostics:
    """Counts repaired degenerate posterior rows (renormalized to uniform)."""

    degenerate_rows: int = 0


def _normalized_posterior(q_col: np.ndarray, qbar_prev: np.ndarray,
                          diag: DiffusionDiagnostics | None) -> np.ndarray:
    """Per-x0 categorical posterior rows, each normalized.

    q_col is Q^t[:, x_t]; qbar_prev rows are Q-bar^{t_prev}[x0, :].
    All-zero rows are repaired to uniform and counted.
    """
    w = q_col[None, :] * qbar_prev          # (x0, x_{t-1})
    sums = w.sum(axis=1, keepdims=True)
    bad = sums[:, 0] <= 0.0
    if np.any(bad):
        if diag is not None:
            diag.degenerate_rows += int(bad.sum())
        w[bad] = 1.0 / w.shape[1]
        sums = w.sum(axis=1, keepdims=True)
    return w / sums


def reverse_discrete_step(nodes_t: np.ndarray, edges_t: np.ndarray,
                          p_hat_nodes: np.ndarray, p_hat_edges: np.ndarray,
                          t: int, sched: NoiseSchedule,
                          rng: np.random.Generator,
                          t_prev: int | None = None,
                          diag: DiffusionDiagnostics | None = None):
    """One reverse sampling step for both discrete tensors.

    p_hat_nodes holds per-node kind distributions; p_hat_edges per-entry
    probabilities that the wire exists.  Entries walk the two-category
    posterior; nodes the full categorical one.
    """
    _check_t(t, sched)
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev {t_prev} must lie in [0, {t})")
    a_eff = sched.alpha_bar[t] / sched.alpha_bar[t_prev]
    ab_prev = sched.alpha_bar[t_prev]

    n, a = nodes_t.shape
    k = edges_t.shape[-1]
    q_n = q_matrix(a_eff, a)
    qbar_n = q_bar_matrix(ab_prev, a)
    q_e = q_matrix(a_eff, 2)
    qbar_e = q_bar_matrix(ab_prev, 2)

    nodes_out = np.zeros_like(nodes_t)
    node_post = {}
    for i in range(n):
        c = int(np.argmax(nodes_t[i]))
        if c not in node_post:
            node_post[c] = _normalized_posterior(q_n[:, c], qbar_n, diag)
        post = p_hat_nodes[i] @ node_post[c]
        nodes_out[i, _sample_categorical(post, rng)] = 1.0

    # the binary posterior is linear in the predicted wire probability:
    # P(e_prev = 1) = bias[e] + slope[e] * p_hat, one coefficient pair per
    # current entry value
    bias = np.zeros(2)
    slope = np.zeros(2)
    for e in (0, 1):
        wn = _normalized_posterior(q_e[:, e], qbar_e, diag)
        bias[e] = wn[0, 1]
        slope[e] = wn[1, 1] - wn[0, 1]

    edges_out = np.zeros_like(edges_t)
    for i in range(n):
        for j in range(i + 1, n):
            cur = edges_t[i, j].astype(int)
            p1 = np.clip(p_hat_edges[i, j], 0.0, 1.0)
            post1 = bias[cur] + slope[cur] * p1
            block = (rng.random((k, k)) < post1).astype(edges_t.dtype)
            edges_out[i, j] = block
            edges_out[j, i] = block.T
    return nodes_out, edges_out


def ddim_schedule(t_max: int, interval: int) -> list[int]:
    """Descending timestep subsequence; ceil(t_max / interval) entries."""
    if interval < 1:
        raise ValueError("interval must be at least 1")
    if interval > t_max:
        raise ValueError(f"interval {interval} exceeds total steps {t_max}")
    return list(range(t_max, 0, -interval))


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 1 <= t <= sched.t_max:
        raise ValueError(f"t {t} outside [1, {sched.t_max}]")


def _sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    total = probs.sum()
    if total <= 0.0:
        return int(rng.integers(len(probs)))
    idx = int(np.searchsorted(np.cumsum(probs / total), rng.random()))
    return min(idx, len(probs) - 1)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF categorical draw per row, vectorized."""
    cum = np.cumsum(probs, axis=1)
    total = cum[:, -1:]
    u = rng.random(probs.shape[0])[:, None] * np.where(total > 0, total, 1.0)
    idx = (u >= cum).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)

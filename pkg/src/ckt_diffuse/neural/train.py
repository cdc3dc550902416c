"""Training loops for the three networks.

Batches are grouped by node count so each forward pass is a dense
stack; groups are drawn proportionally to their size, items uniformly
with replacement inside the group, and every item gets its own uniform
timestep.  A non-finite loss or gradient aborts immediately with the
step index in the exception rather than letting NaNs propagate into a
checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..diffusion import NoiseSchedule, forward_discrete
from ..graph import CircuitGraph, to_discrete_tensor
from .autograd import Tensor, bce_with_logits, mse_loss, softmax_cross_entropy
from .models import CountPredictor, Denoiser


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, grad_norm: float):
        super().__init__(
            f"non-finite training state at step {step}: "
            f"loss={loss!r} grad_norm={grad_norm!r}")
        self.step = step
        self.loss = loss
        self.grad_norm = grad_norm


@dataclass
class Adam:
    """Adam with global-norm gradient clipping."""

    params: dict[str, Tensor]
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)
    _t: int = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        return float(np.sqrt(total))

    def step(self) -> float:
        """One update; returns the pre-clip global gradient norm."""
        norm = self.grad_norm()
        scale = self.clip / norm if norm > self.clip else 1.0
        self._t += 1
        b1t = 1.0 - self.beta1 ** self._t
        b2t = 1.0 - self.beta2 ** self._t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        return norm


@dataclass
class _Group:
    """All training examples with one node count, stacked."""

    nodes: np.ndarray   # (N, n, a) clean one-hots
    edges: np.ndarray   # (N, n, n, k, k) clean, float
    params: np.ndarray  # (N, n, param_width)
    y: np.ndarray       # (N, cond_dim)


def group_examples(items) -> dict[int, _Group]:
    """Stack (graph, y) pairs by node count.

    items: iterable of (CircuitGraph, metrics vector) or objects with
    .graph and .metrics_norm attributes (dataset records).
    """
    buckets: dict[int, list] = {}
    for item in items:
        if isinstance(item, tuple):
            g, y = item
        else:
            g, y = item.graph, item.metrics_norm
        buckets.setdefault(g.n, []).append((g, np.asarray(y, dtype=float)))
    groups = {}
    for n, pairs in sorted(buckets.items()):
        nodes, edges, params, ys = [], [], [], []
        for g, y in pairs:
            v, e = to_discrete_tensor(g)
            nodes.append(v)
            edges.append(e)
            params.append(g.params_matrix())
            ys.append(y)
        groups[n] = _Group(np.stack(nodes), np.stack(edges),
                           np.stack(params), np.stack(ys))
    return groups


def _draw_batch(groups: dict[int, _Group], batch_size: int,
                rng: np.random.Generator):
    ns = list(groups)
    sizes = np.array([groups[n].y.shape[0] for n in ns], dtype=float)
    n = ns[rng.choice(len(ns), p=sizes / sizes.sum())]
    grp = groups[n]
    idx = rng.integers(0, grp.y.shape[0], size=batch_size)
    return grp.nodes[idx], grp.edges[idx], grp.params[idx], grp.y[idx]


def _check_finite(step: int, loss: float, norm: float) -> None:
    if not (np.isfinite(loss) and np.isfinite(norm)):
        raise TrainingDiverged(step, loss, norm)


def train_continuous(items, model: Denoiser, sched: NoiseSchedule, *,
                     steps: int, batch_size: int = 64,
                     rng: np.random.Generator, lr: float = 3e-4,
                     clip: float = 1.0) -> list[float]:
    """Noise-prediction regression; returns the per-step loss trace."""
    groups = group_examples(items)
    opt = Adam(model.params, lr=lr, clip=clip)
    trace = []
    for step in range(steps):
        nodes, edges, params, y = _draw_batch(groups, batch_size, rng)
        t = rng.integers(1, sched.t_max + 1, size=batch_size)
        ab = sched.alpha_bar[t][:, None, None]
        eps = rng.standard_normal(params.shape)
        vt = np.sqrt(ab) * params + np.sqrt(1.0 - ab) * eps

        eps_hat = model.forward_continuous(nodes, edges, vt, y, t)
        loss = mse_loss(eps_hat, eps)
        opt.zero_grad()
        loss.backward()
        norm = opt.step()
        _check_finite(step, float(loss.data), norm)
        trace.append(float(loss.data))
    return trace


def train_discrete(items, model: Denoiser, sched: NoiseSchedule, *,
                   steps: int, batch_size: int = 64,
                   rng: np.random.Generator, lr: float = 3e-4,
                   clip: float = 1.0) -> list[float]:
    """Clean-graph prediction from noised graphs; per-step loss trace.

    Loss is mean node cross-entropy plus, per off-diagonal pair, the
    summed entrywise binary cross-entropy of the port matrix (averaged
    over pairs and batch).  With zero output heads that starts at
    ln(classes) + ports^2 * ln 2.
    """
    groups = group_examples(items)
    opt = Adam(model.params, lr=lr, clip=clip)
    trace = []
    for step in range(steps):
        nodes, edges, _, y = _draw_batch(groups, batch_size, rng)
        bsz, n = nodes.shape[0], nodes.shape[1]
        t = rng.integers(1, sched.t_max + 1, size=batch_size)
        nodes_t = np.empty_like(nodes)
        edges_t = np.empty_like(edges)
        for b in range(bsz):
            nodes_t[b], edges_t[b] = forward_discrete(
                nodes[b], edges[b], int(t[b]), sched, rng)

        node_logits, edge_logits = model.forward_discrete(
            nodes_t, edges_t, y, t)
        node_loss = softmax_cross_entropy(node_logits, nodes)
        bce = bce_with_logits(edge_logits, edges)
        per_pair = bce.sum(axis=(-1, -2))              # (B, n, n)
        offdiag = 1.0 - np.eye(n)
        edge_loss = (per_pair * Tensor(offdiag)).sum() \
            * (1.0 / (bsz * n * (n - 1)))
        loss = node_loss + edge_loss
        opt.zero_grad()
        loss.backward()
        norm = opt.step()
        _check_finite(step, float(loss.data), norm)
        trace.append(float(loss.data))
    return trace


def train_count(items, model: CountPredictor, *, epochs: int,
                batch_size: int = 64, rng: np.random.Generator,
                lr: float = 3e-4, clip: float = 1.0) -> list[float]:
    """Node-count classification; returns per-epoch training accuracy."""
    ys, classes = [], []
    for item in items:
        if isinstance(item, tuple):
            g, y = item
        else:
            g, y = item.graph, item.metrics_norm
        ys.append(np.asarray(y, dtype=float))
        classes.append(model.count_to_class(g.n))
    y_all = np.stack(ys)
    cls = np.array(classes)
    onehot = np.zeros((len(cls), model.n_classes))
    onehot[np.arange(len(cls)), cls] = 1.0

    opt = Adam(model.params, lr=lr, clip=clip)
    trace = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(cls))
        for lo in range(0, len(cls), batch_size):
            sel = order[lo:lo + batch_size]
            logits = model.forward(y_all[sel])
            loss = softmax_cross_entropy(logits, onehot[sel])
            opt.zero_grad()
            loss.backward()
            norm = opt.step()
            _check_finite(step, float(loss.data), norm)
            step += 1
        pred = model.forward(y_all).data.argmax(axis=-1)
        trace.append(float(np.mean(pred == cls)))
    return trace

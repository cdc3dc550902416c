"""Conditional circuit generation from trained networks.

The pipeline mirrors the data direction in reverse: predict a node
count from the target metrics, denoise a random discrete graph to a
topology, then denoise random parameters conditioned on that topology,
and finally recover the io binding.  A sample that fails any structural
check is returned with valid=False and the failing stage named; nothing
is repaired, resampled or dropped silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..devicelib import expand, recover_io
from ..diffusion import (DiffusionDiagnostics, NoiseSchedule, ddim_schedule,
                         reverse_continuous_step, reverse_discrete_step)
from ..graph import (KIND_COUNT, MAX_PORTS, PARAM_WIDTH, CircuitGraph,
                     from_discrete_tensor, validate)
from .autograd import softmax


@dataclass
class GenResult:
    """One generated sample plus bookkeeping.

    graph is always the best-effort object (possibly without io binding)
    so failures stay inspectable; valid=True means decoded, io-bound,
    rule-clean and expandable.
    """

    graph: CircuitGraph | None
    n: int
    valid: bool
    reason: str | None
    calls: dict[str, int] = field(default_factory=dict)
    degenerate_rows: int = 0


def _random_discrete(n: int, rng: np.random.Generator):
    k = MAX_PORTS
    picks = rng.integers(0, KIND_COUNT, size=n)
    nodes = np.zeros((n, KIND_COUNT))
    nodes[np.arange(n), picks] = 1.0
    edges = np.zeros((n, n, k, k))
    for i in range(n):
        for j in range(i + 1, n):
            block = (rng.random((k, k)) < 0.5).astype(float)
            edges[i, j] = block
            edges[j, i] = block.T
    return nodes, edges


def generate(y, count_model, discrete_model, continuous_model,
             sched: NoiseSchedule, rng: np.random.Generator, *,
             interval: int = 1) -> GenResult:
    """Sample one circuit conditioned on the normalized metrics vector y."""
    y = np.asarray(y, dtype=float)
    ts = ddim_schedule(sched.t_max, interval)
    diag = DiffusionDiagnostics()

    logits = count_model.predict_logits(y)
    cls = rng.choice(len(logits), p=softmax(logits))
    n = count_model.class_to_count(int(cls))
    calls = {"count": 1, "discrete": 0, "continuous": 0}

    nodes, edges = _random_discrete(n, rng)
    for pos, t in enumerate(ts):
        t_prev = ts[pos + 1] if pos + 1 < len(ts) else 0
        p_nodes, p_edges = discrete_model.predict_probs(nodes, edges, y, t)
        calls["discrete"] += 1
        nodes, edges = reverse_discrete_step(
            nodes, edges, p_nodes, p_edges, t, sched, rng,
            t_prev=t_prev, diag=diag)

    try:
        skeleton = from_discrete_tensor(nodes, edges)
    except ValueError as exc:
        return GenResult(None, n, False, f"decode: {exc}", calls,
                         diag.degenerate_rows)

    v = rng.standard_normal((n, PARAM_WIDTH))
    for pos, t in enumerate(ts):
        t_prev = ts[pos + 1] if pos + 1 < len(ts) else 0
        eps_hat = continuous_model.predict_eps(nodes, edges, v, y, t)
        calls["continuous"] += 1
        v = reverse_continuous_step(v, eps_hat, t, sched, t_prev=t_prev)

    params = np.clip(v, 0.0, 1.0)
    for i, node in enumerate(skeleton.nodes):
        params[i, len(node.kind.slots):] = 0.0

    io = recover_io(skeleton)
    if io is None:
        g = from_discrete_tensor(nodes, edges, params=params)
        return GenResult(g, n, False, "io-binding", calls,
                         diag.degenerate_rows)
    g = from_discrete_tensor(nodes, edges, params=params, io_binding=io)

    report = validate(g)
    if not report.ok:
        codes = sorted({v.code for v in report.violations})
        return GenResult(g, n, False, f"validate: {','.join(codes)}",
                         calls, diag.degenerate_rows)
    try:
        expand(g)
    except (ValueError, KeyError) as exc:
        return GenResult(g, n, False, f"expand: {exc}", calls,
                         diag.degenerate_rows)
    return GenResult(g, n, True, None, calls, diag.degenerate_rows)

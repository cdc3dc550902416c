import math

import numpy as np
import pytest
from numpy.random import default_rng

import _gradcheck as gc
from ckt_diffuse.config import canonical_hash
from ckt_diffuse.dataset import randomize_params
from ckt_diffuse.devicelib import build_structure
from ckt_diffuse.diffusion import cosine_schedule, forward_discrete
from ckt_diffuse.graph import KIND_COUNT, MAX_PORTS, to_discrete_tensor
from ckt_diffuse.neural import (Adam, CheckpointError, CountConfig,
                                CountPredictor, Denoiser, DenoiserConfig,
                                TrainingDiverged, bce_with_logits, concat,
                                generate, group_examples, load_checkpoint,
                                mse_loss, save_checkpoint, softmax,
                                softmax_cross_entropy, time_embedding,
                                train_continuous, train_count, train_discrete)
from ckt_diffuse.neural.autograd import Tensor


# ---------------------------------------------------------------- layers


def _weights(shape, seed):
    return Tensor(default_rng(seed).standard_normal(shape))


def _case_arrays(shapes, seed, keep_off_zero=False):
    rng = default_rng(seed)
    out = []
    for s in shapes:
        a = rng.standard_normal(s)
        if keep_off_zero:
            a = a + 0.2 * np.sign(a)
        out.append(a)
    return out


LAYER_CASES = {
    "add_broadcast": (
        [(3, 4), (4,)],
        lambda a, b: ((a + b) * _weights((3, 4), 1)).sum()),
    "scalar_ops": (
        [(3, 4)],
        lambda a: ((a * 2.5 + 0.7 - a * 0.3) * _weights((3, 4), 2)).sum()),
    "mul_broadcast": (
        [(3, 4), (3, 1)],
        lambda a, b: ((a * b) * _weights((3, 4), 3)).sum()),
    "matmul": (
        [(3, 4), (4, 5)],
        lambda a, b: ((a @ b) * _weights((3, 5), 4)).sum()),
    "matmul_stacked": (
        [(2, 3, 4), (4, 5)],
        lambda a, b: ((a @ b) * _weights((2, 3, 5), 5)).sum()),
    "matmul_batched": (
        [(2, 3, 4), (2, 4, 5)],
        lambda a, b: ((a @ b) * _weights((2, 3, 5), 6)).sum()),
    "reshape": (
        [(3, 4)],
        lambda a: ((a.reshape(2, 6)) * _weights((2, 6), 7)).sum()),
    "transpose": (
        [(2, 3, 4)],
        lambda a: ((a.transpose((2, 0, 1))) * _weights((4, 2, 3), 8)).sum()),
    "broadcast_to": (
        [(1, 3)],
        lambda a: ((a.broadcast_to((4, 3))) * _weights((4, 3), 9)).sum()),
    "sum_axes": (
        [(3, 4, 5)],
        lambda a: ((a.sum(axis=(0, 2))) * _weights((4,), 10)).sum()),
    "sum_keepdims": (
        [(3, 4)],
        lambda a: ((a.sum(axis=1, keepdims=True)) * _weights((3, 1), 11)).sum()),
    "mean": (
        [(3, 4)],
        lambda a: ((a.mean(axis=0)) * _weights((4,), 12)).sum()),
    "relu": (
        [(3, 4)],
        lambda a: ((a.relu()) * _weights((3, 4), 13)).sum()),
    "tanh": (
        [(3, 4)],
        lambda a: ((a.tanh()) * _weights((3, 4), 14)).sum()),
    "concat": (
        [(3, 2), (3, 4)],
        lambda a, b: ((concat([a, b], axis=1)) * _weights((3, 6), 15)).sum()),
}


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_gradients(name):
    shapes, build = LAYER_CASES[name]
    arrays = _case_arrays(shapes, seed=hash(name) % 2**31,
                          keep_off_zero=name == "relu")
    assert gc.check_against_fd(build, arrays) < 1e-4


def test_loss_gradients_mse():
    target = default_rng(16).standard_normal((3, 4))
    assert gc.check_against_fd(
        lambda a: mse_loss(a, target), _case_arrays([(3, 4)], 17)) < 1e-4


def test_loss_gradients_softmax_ce():
    rng = default_rng(18)
    onehot = np.zeros((4, 3, 6))
    idx = rng.integers(0, 6, size=(4, 3))
    for i in range(4):
        for j in range(3):
            onehot[i, j, idx[i, j]] = 1.0
    assert gc.check_against_fd(
        lambda a: softmax_cross_entropy(a, onehot),
        _case_arrays([(4, 3, 6)], 19)) < 1e-4


def test_loss_gradients_bce():
    bits = (default_rng(20).random((3, 5)) < 0.5).astype(float)
    w = _weights((3, 5), 21)
    assert gc.check_against_fd(
        lambda a: (bce_with_logits(a, bits) * w).sum(),
        _case_arrays([(3, 5)], 22)) < 1e-4


def test_backward_requires_scalar():
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2.0).backward()


# ------------------------------------------------------- whole networks


def _tiny(task: str, seed: int) -> Denoiser:
    """Small randomized model whose relu inputs sit away from the kink.

    Zero-init heads and biases put many preactivations at exactly 0,
    where central differences straddle the relu corner; the checks need
    every parameter perturbed off that set.
    """
    cfg = DenoiserConfig(task=task, cond_dim=3, t_embed=4, hidden=4,
                         rounds=1, t_max=5)
    model = Denoiser(cfg, default_rng(seed))
    r = default_rng(seed + 1)
    for p in model.params.values():
        p.data = p.data + 0.3 * r.standard_normal(p.data.shape)
    return model


def _graph_tensors(sid="ota5-n/1"):
    g = build_structure(sid)
    v, e = to_discrete_tensor(g)
    return g, v, e


def test_discrete_model_gradients():
    _, v, e = _graph_tensors()
    n = v.shape[0]
    rng = default_rng(23)
    y = rng.random((1, 3))
    t = np.array([3])
    node_target = np.zeros((1, n, KIND_COUNT))
    node_target[0, np.arange(n), rng.integers(0, KIND_COUNT, n)] = 1.0
    edge_target = (rng.random((1, n, n, 5, 5)) < 0.3).astype(float)
    model = _tiny("discrete", 24)

    def loss():
        nl, el = model.forward_discrete(v[None], e[None], y, t)
        per_pair = bce_with_logits(el, edge_target).sum(axis=(-1, -2))
        mask = Tensor(1.0 - np.eye(n))
        edge = (per_pair * mask).sum() * (1.0 / (n * (n - 1)))
        return softmax_cross_entropy(nl, node_target) + edge

    assert gc.check_model_params(model, loss) < 1e-4


def test_continuous_model_gradients():
    _, v, e = _graph_tensors()
    n = v.shape[0]
    rng = default_rng(25)
    y = rng.random((1, 3))
    vt = rng.standard_normal((1, n, 4))
    eps = rng.standard_normal((1, n, 4))
    model = _tiny("continuous", 26)

    def loss():
        return mse_loss(model.forward_continuous(v[None], e[None], vt, y,
                                                 np.array([2])), eps)

    assert gc.check_model_params(model, loss) < 1e-4


def test_count_model_gradients():
    model = CountPredictor(CountConfig(cond_dim=5, hidden=6), default_rng(27))
    model.params["w2"].data = 0.3 * default_rng(28).standard_normal(
        model.params["w2"].data.shape)
    y = default_rng(29).random((4, 5))
    onehot = np.zeros((4, model.n_classes))
    onehot[np.arange(4), [0, 3, 7, 10]] = 1.0

    def loss():
        return softmax_cross_entropy(model.forward(y), onehot)

    assert gc.check_model_params(model, loss) < 1e-4


def test_time_embedding_basics():
    emb = time_embedding(np.array([0, 1, 7, 499]), 32)
    assert emb.shape == (4, 32)
    assert np.all(np.abs(emb) <= 1.0)
    assert np.allclose(emb[0, :16], 0.0)
    assert np.allclose(emb[0, 16:], 1.0)
    assert not np.allclose(emb[1], emb[2])


def test_task_guards():
    model = _tiny("discrete", 30)
    _, v, e = _graph_tensors()
    with pytest.raises(ValueError):
        model.forward_continuous(v[None], e[None],
                                 np.zeros((1, v.shape[0], 4)),
                                 np.zeros((1, 3)), np.array([1]))
    with pytest.raises(ValueError):
        DenoiserConfig(task="sideways")
    cp = CountPredictor()
    with pytest.raises(ValueError):
        cp.count_to_class(13)


# ----------------------------------------------------- invariant checks


def _rand_headed(task: str, seed: int, hidden=16, rounds=2) -> Denoiser:
    cfg = DenoiserConfig(task=task, hidden=hidden, rounds=rounds, t_embed=8)
    model = Denoiser(cfg, default_rng(seed))
    r = default_rng(seed + 1)
    for name, p in model.params.items():
        if name.startswith(("node_", "edge_w2", "edge_b2")):
            p.data = 0.5 * r.standard_normal(p.data.shape)
    return model


def test_permutation_consistency():
    g = build_structure("telescopic-n/1")
    v, e = to_discrete_tensor(g)
    n = g.n
    model = _rand_headed("discrete", 31)
    y = default_rng(32).random(13)
    nl, el = model.forward_discrete(v[None], e[None], y[None], np.array([7]))
    nl, el = nl.data[0], el.data[0]

    perm = default_rng(33).permutation(n)
    vp = v[perm]
    ep = e[perm][:, perm]
    nlp, elp = model.forward_discrete(vp[None], ep[None], y[None],
                                      np.array([7]))
    assert np.allclose(nlp.data[0], nl[perm], atol=1e-9)
    assert np.allclose(elp.data[0], el[perm][:, perm], atol=1e-9)


def test_edge_logit_symmetry_exact():
    _, v, e = _graph_tensors("cm-ota-n/1")
    model = _rand_headed("discrete", 34)
    _, el = model.forward_discrete(v[None], e[None],
                                   default_rng(35).random((1, 13)),
                                   np.array([4]))
    block = el.data[0]
    assert np.array_equal(block, np.transpose(block, (1, 0, 3, 2)))


def test_count_predictor_uniform_at_init():
    model = CountPredictor(rng=default_rng(36))
    logits = model.predict_logits(np.linspace(0, 1, 13))
    assert logits.shape == (11,)
    assert np.all(logits == 0.0)


# -------------------------------------------------------------- training


def _items(sids, seed, copies=4):
    rng = default_rng(seed)
    items = []
    for sid in sids:
        for _ in range(copies):
            g = randomize_params(build_structure(sid), rng)
            items.append((g, rng.random(13)))
    return items


def test_group_examples_shapes():
    groups = group_examples(_items(["ota5-n/1", "ota5-n/2"], 37, copies=3))
    ns = sorted(groups)
    assert len(ns) == 2
    for n in ns:
        grp = groups[n]
        assert grp.nodes.shape == (3, n, KIND_COUNT)
        assert grp.edges.shape == (3, n, n, MAX_PORTS, MAX_PORTS)
        assert grp.params.shape == (3, n, 4)
        assert grp.y.shape == (3, 13)


def test_discrete_init_loss_is_uniform_constant():
    model = Denoiser(DenoiserConfig(task="discrete", t_max=10),
                     default_rng(38))
    trace = train_discrete(_items(["ota5-n/1"], 39), model,
                           cosine_schedule(10), steps=1, batch_size=8,
                           rng=default_rng(40), lr=0.0)
    expect = math.log(KIND_COUNT) + MAX_PORTS ** 2 * math.log(2.0)
    assert abs(trace[0] - expect) < 1e-9


def test_continuous_init_loss_near_unit_variance():
    model = Denoiser(DenoiserConfig(task="continuous", t_max=10),
                     default_rng(41))
    trace = train_continuous(_items(["ota5-n/1"], 42), model,
                             cosine_schedule(10), steps=1, batch_size=64,
                             rng=default_rng(43), lr=0.0)
    assert 0.7 < trace[0] < 1.3


def test_continuous_training_reduces_loss():
    model = Denoiser(DenoiserConfig(task="continuous", hidden=16, rounds=1,
                                    t_max=10), default_rng(44))
    trace = train_continuous(_items(["ota5-n/1", "ota5-p/1"], 45), model,
                             cosine_schedule(10), steps=150, batch_size=16,
                             rng=default_rng(46), lr=3e-3)
    assert np.mean(trace[-20:]) < 0.7 * trace[0]


def test_discrete_training_reduces_loss():
    model = Denoiser(DenoiserConfig(task="discrete", hidden=16, rounds=1,
                                    t_max=10), default_rng(47))
    trace = train_discrete(_items(["ota5-n/1"], 48), model,
                           cosine_schedule(10), steps=120, batch_size=16,
                           rng=default_rng(49), lr=3e-3)
    assert np.mean(trace[-20:]) < 0.7 * trace[0]


def test_training_is_reproducible():
    def run():
        model = Denoiser(DenoiserConfig(task="continuous", hidden=8,
                                        rounds=1, t_max=10), default_rng(50))
        return train_continuous(_items(["ota5-n/1"], 51), model,
                                cosine_schedule(10), steps=20, batch_size=8,
                                rng=default_rng(52))
    assert run() == run()


def test_divergence_aborts_with_context():
    model = Denoiser(DenoiserConfig(task="continuous", hidden=8, rounds=1,
                                    t_max=10), default_rng(53))
    model.params["embed_w"].data[:] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train_continuous(_items(["ota5-n/1"], 54), model,
                         cosine_schedule(10), steps=3, batch_size=4,
                         rng=default_rng(55))
    assert info.value.step == 0


def test_adam_clips_global_norm():
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-2, clip=1.0)
    loss = (p * 1000.0).sum()
    loss.backward()
    norm = opt.step()
    assert abs(norm - 1000.0) < 1e-9
    # clipped gradient is exactly 1, so the bias-corrected step is lr
    assert abs(p.data[0] + 1e-2) < 1e-10


def test_count_learns_constant_class():
    rng = default_rng(56)
    items = [(build_structure("ota5-n/1"), rng.random(13))
             for _ in range(40)]
    model = CountPredictor(rng=default_rng(57))
    trace = train_count(items, model, epochs=1, rng=default_rng(58))
    assert trace[-1] == 1.0


def test_count_learns_simple_rule():
    rng = default_rng(59)
    sids = ["ota5-n/1", "ota5-n/2", "telescopic-n/1", "telescopic-n/2"]
    items = []
    for i, sid in enumerate(sids):
        g = build_structure(sid)
        for _ in range(20):
            y = 0.05 * rng.random(13)
            y[i] += 1.0
            items.append((g, y))
    counts = {g.n for g, _ in items}
    assert len(counts) == 4  # the rule is non-trivial
    model = CountPredictor(rng=default_rng(60))
    trace = train_count(items, model, epochs=120, rng=default_rng(61),
                        lr=1e-2)
    assert trace[-1] == 1.0
    assert trace[-1] > max(20 / 80, 0.25)


# ------------------------------------------------------------ checkpoints


def test_checkpoint_roundtrip(tmp_path):
    model = _rand_headed("discrete", 62, hidden=8, rounds=1)
    path = tmp_path / "model.ckpt"
    chash = save_checkpoint(model, path)
    assert chash == canonical_hash(model.config_dict())

    clone = load_checkpoint(path)
    assert clone.config == model.config
    for name, p in model.params.items():
        assert np.array_equal(clone.params[name].data, p.data)

    _, v, e = _graph_tensors()
    y = default_rng(63).random(13)
    a = model.predict_probs(v, e, y, 3)
    b = clone.predict_probs(v, e, y, 3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_checkpoint_count_roundtrip(tmp_path):
    model = CountPredictor(rng=default_rng(64))
    model.params["w2"].data += 0.1
    path = tmp_path / "count.ckpt"
    save_checkpoint(model, path)
    clone = load_checkpoint(path)
    assert isinstance(clone, CountPredictor)
    y = default_rng(65).random(13)
    assert np.array_equal(clone.predict_logits(y), model.predict_logits(y))


def test_checkpoint_refuses_wrong_config(tmp_path):
    model = _rand_headed("discrete", 66, hidden=8, rounds=1)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    load_checkpoint(path, expect_config=model.config_dict())  # sanity
    other = dict(model.config_dict(), hidden=128)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect_config=other)


def test_checkpoint_refuses_tampered_config(tmp_path):
    import json
    model = _rand_headed("discrete", 67, hidden=8, rounds=1)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    doc = json.loads(path.read_text())
    doc["config"]["rounds"] = 9
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_refuses_garbage(tmp_path):
    path = tmp_path / "noise.ckpt"
    path.write_text("definitely not json {", encoding="utf-8")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# ------------------------------------------------------------- generation


class _FixedCount:
    def __init__(self, n: int):
        self.n = n

    def predict_logits(self, y):
        logits = np.full(11, -30.0)
        logits[self.n - 2] = 30.0
        return logits

    def class_to_count(self, idx: int) -> int:
        return 2 + idx


class _OracleDiscrete:
    """Always predicts one memorized clean graph."""

    def __init__(self, g):
        self.v, self.e = to_discrete_tensor(g)

    def predict_probs(self, nodes_t, edges_t, y, t):
        return self.v.copy(), self.e.copy()


class _OracleContinuous:
    """Inverts the forward marginal around memorized parameters."""

    def __init__(self, v0, sched):
        self.v0 = v0
        self.sched = sched

    def predict_eps(self, kinds, edges, vt, y, t):
        ab = self.sched.alpha_bar[t]
        return (vt - np.sqrt(ab) * self.v0) / np.sqrt(1.0 - ab)


class _ZeroEps:
    def predict_eps(self, kinds, edges, vt, y, t):
        return np.zeros_like(vt)


def _memorized():
    g = randomize_params(build_structure("ota5-n/1"), default_rng(68))
    return g


def test_memorization_oracle():
    g = _memorized()
    sched = cosine_schedule(50)
    fakes = (_FixedCount(g.n), _OracleDiscrete(g),
             _OracleContinuous(g.params_matrix(), sched))
    y = default_rng(69).random(13)
    hits = 0
    for trial in range(100):
        res = generate(y, *fakes, sched, default_rng(1000 + trial),
                       interval=5)
        if not res.valid:
            continue
        out = res.graph
        same = ([nd.kind.name for nd in out.nodes]
                == [nd.kind.name for nd in g.nodes]
                and np.array_equal(out.edges, g.edges)
                and np.allclose(out.params_matrix(), g.params_matrix(),
                                atol=1e-6)
                and out.io_binding == g.io_binding)
        hits += same
    assert hits >= 99


@pytest.mark.parametrize("interval", [1, 5, 10, 20, 100])
def test_generate_call_counts(interval):
    g = _memorized()
    sched = cosine_schedule(100)
    fakes = (_FixedCount(g.n), _OracleDiscrete(g),
             _OracleContinuous(g.params_matrix(), sched))
    res = generate(np.zeros(13), *fakes, sched, default_rng(70),
                   interval=interval)
    expect = math.ceil(100 / interval)
    assert res.calls == {"count": 1, "discrete": expect, "continuous": expect}
    assert res.n == g.n


def test_generate_reproducible():
    g = _memorized()
    sched = cosine_schedule(20)
    model = _rand_headed("discrete", 71, hidden=8, rounds=1)
    cont = Denoiser(DenoiserConfig(task="continuous", hidden=8, rounds=1),
                    default_rng(72))
    count = CountPredictor(rng=default_rng(73))
    y = default_rng(74).random(13)
    a = generate(y, count, model, cont, sched, default_rng(75), interval=4)
    b = generate(y, count, model, cont, sched, default_rng(75), interval=4)
    assert a.valid == b.valid and a.reason == b.reason and a.n == b.n
    if a.graph is not None:
        assert [nd.kind.name for nd in a.graph.nodes] \
            == [nd.kind.name for nd in b.graph.nodes]
        assert np.array_equal(a.graph.edges, b.graph.edges)
        assert np.array_equal(a.graph.params_matrix(),
                              b.graph.params_matrix())


def test_generate_invalid_is_returned_untouched():
    class _JunkDiscrete:
        def predict_probs(self, nodes_t, edges_t, y, t):
            n = nodes_t.shape[0]
            v = np.zeros((n, KIND_COUNT))
            v[:, 6] = 1.0  # every node a resistor: nothing to bind io to
            return v, np.zeros_like(edges_t)

    sched = cosine_schedule(10)
    res = generate(np.zeros(13), _FixedCount(4), _JunkDiscrete(), _ZeroEps(),
                   sched, default_rng(76))
    assert res.valid is False
    assert res.reason == "io-binding"
    assert res.graph is not None
    assert all(nd.kind.name == "RESISTOR" for nd in res.graph.nodes)


def test_generate_parameter_postprocessing():
    g = _memorized()
    sched = cosine_schedule(30)
    res = generate(np.zeros(13), _FixedCount(g.n), _OracleDiscrete(g),
                   _ZeroEps(), sched, default_rng(77), interval=3)
    assert res.valid
    params = res.graph.params_matrix()
    assert np.all(params >= 0.0) and np.all(params <= 1.0)
    for i, nd in enumerate(res.graph.nodes):
        assert np.all(params[i, len(nd.kind.slots):] == 0.0)


def test_generate_rejects_bad_interval():
    g = _memorized()
    sched = cosine_schedule(10)
    fakes = (_FixedCount(g.n), _OracleDiscrete(g), _ZeroEps())
    with pytest.raises(ValueError):
        generate(np.zeros(13), *fakes, sched, default_rng(78), interval=11)


# --------------------------------------------- short-horizon memorization


def test_discrete_single_template_reconstruction():
    """A model trained on one structure must denoise t=1 corruptions."""
    sched = cosine_schedule(10)
    items = _items(["ota5-n/1"], 79, copies=16)
    model = Denoiser(DenoiserConfig(task="discrete", hidden=32, rounds=2,
                                    t_max=10), default_rng(80))
    train_discrete(items, model, sched, steps=500, batch_size=16,
                   rng=default_rng(81), lr=1e-2)

    g = build_structure("ota5-n/1")
    v, e = to_discrete_tensor(g)
    rng = default_rng(82)
    ok = 0
    trials = 200
    for _ in range(trials):
        vt, et = forward_discrete(v, e, 1, sched, rng)
        p_nodes, p_edges = model.predict_probs(vt, et, np.zeros(13), 1)
        picks = p_nodes.argmax(axis=1)
        nodes_ok = np.all(v[np.arange(v.shape[0]), picks] == 1.0)
        edges_ok = np.array_equal((p_edges > 0.5).astype(float), e)
        ok += nodes_ok and edges_ok
    assert ok / trials >= 0.95

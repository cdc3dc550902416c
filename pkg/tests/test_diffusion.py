import math

import numpy as np
import pytest

from ckt_diffuse import diffusion as df
from ckt_diffuse.graph import make_five_t_ota, to_discrete_tensor


def schedule_from(alphas) -> df.NoiseSchedule:
    alpha = np.concatenate([[1.0], np.asarray(alphas, dtype=float)])
    return df.NoiseSchedule(len(alphas), alpha, np.cumprod(alpha))


def test_cosine_schedule_invariants():
    sched = df.cosine_schedule(500)
    assert sched.t_max == 500
    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0.0)
    assert sched.alpha_bar[-1] < 1e-3
    assert np.all(sched.alpha[1:] >= df.ALPHA_FLOOR)
    assert np.all(sched.alpha <= 1.0)
    # the running product is exact by construction, clipping included
    assert np.array_equal(sched.alpha_bar, np.cumprod(sched.alpha))


def test_tiny_schedule_rejected():
    with pytest.raises(ValueError):
        df.cosine_schedule(0)


def test_q_matrix_identity_and_uniform():
    assert np.array_equal(df.q_matrix(1.0, 7), np.eye(7))
    assert np.allclose(df.q_matrix(0.0, 4), np.full((4, 4), 0.25),
                       atol=1e-15)


def test_q_matrix_half():
    expect = np.array([[0.75, 0.25], [0.25, 0.75]])
    assert np.allclose(df.q_matrix(0.5, 2), expect, atol=1e-15)


def test_q_matrix_rejects():
    with pytest.raises(ValueError):
        df.q_matrix(1.5, 2)
    with pytest.raises(ValueError):
        df.q_matrix(-0.1, 2)
    with pytest.raises(ValueError):
        df.q_matrix(0.5, 1)


@pytest.mark.parametrize("d", [2, 5, 9])
def test_rows_stochastic(d):
    sched = df.cosine_schedule(200)
    for t in (1, 50, 200):
        for q in (df.q_matrix(sched.alpha[t], d),
                  df.q_bar_matrix(sched.alpha_bar[t], d)):
            assert np.all(q >= 0.0)
            assert np.allclose(q.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("d", [2, 5, 9])
def test_semigroup(d):
    sched = df.cosine_schedule(200)
    prod = np.eye(d)
    for t in range(1, 201):
        prod = prod @ df.q_matrix(sched.alpha[t], d)
        assert np.allclose(prod, df.q_bar_matrix(sched.alpha_bar[t], d),
                           atol=1e-9)


def test_uniform_limit():
    q = df.q_bar_matrix(1e-9, 5)
    assert np.max(np.abs(q - 0.2)) < 1e-9


# ---------------------------------------------------------------------------
# continuous channel

def test_forward_continuous_noiseless():
    sched = schedule_from([1.0])
    rng = np.random.default_rng(0)
    v0 = rng.normal(size=(4, 4))
    vt, eps = df.forward_continuous(v0, 1, sched, rng)
    assert np.array_equal(vt, v0)
    assert eps.shape == v0.shape


def test_forward_continuous_statistics():
    sched = schedule_from([0.64])
    rng = np.random.default_rng(123)
    v0 = np.ones(100_000)
    vt, _ = df.forward_continuous(v0, 1, sched, rng)
    assert abs(vt.mean() - 0.8) < 0.01
    assert abs(vt.var() - 0.36) < 0.02 * 0.36


def test_forward_continuous_pure_noise():
    sched = schedule_from([0.0])
    rng = np.random.default_rng(5)
    v0 = np.full(50_000, 7.0)
    vt, eps = df.forward_continuous(v0, 1, sched, rng)
    assert np.array_equal(vt, eps)


def test_reverse_identity_step():
    sched = schedule_from([0.5, 1.0])
    vt = np.random.default_rng(1).normal(size=(3, 4))
    out = df.reverse_continuous_step(vt, np.ones_like(vt), 2, sched)
    assert np.allclose(out, vt, atol=1e-15)


def test_reverse_inverts_single_step():
    sched = schedule_from([0.37])
    rng = np.random.default_rng(9)
    v0 = rng.normal(size=(6, 4))
    vt, eps = df.forward_continuous(v0, 1, sched, rng)
    back = df.reverse_continuous_step(vt, eps, 1, sched)
    assert np.allclose(back, v0, atol=1e-9)


def test_reverse_telescopes_with_oracle():
    # a denoiser that reports the exact noise consistent with the current
    # iterate walks all the way back to the clean data
    sched = df.cosine_schedule(10)
    rng = np.random.default_rng(42)
    v0 = rng.uniform(size=(5, 4))
    vt, _ = df.forward_continuous(v0, 10, sched, rng)
    for t in range(10, 0, -1):
        ab = sched.alpha_bar[t]
        eps_hat = (vt - math.sqrt(ab) * v0) / math.sqrt(1.0 - ab)
        vt = df.reverse_continuous_step(vt, eps_hat, t, sched)
    assert np.allclose(vt, v0, atol=1e-6)


def test_reverse_interval_matches_composition():
    # one stride over [t-2, t] equals two unit steps when the denoiser
    # output is the locally consistent noise
    sched = df.cosine_schedule(50)
    rng = np.random.default_rng(3)
    v0 = rng.uniform(size=(4, 4))
    vt, _ = df.forward_continuous(v0, 20, sched, rng)

    def oracle(v, t):
        ab = sched.alpha_bar[t]
        return (v - math.sqrt(ab) * v0) / math.sqrt(1.0 - ab)

    strided = df.reverse_continuous_step(vt, oracle(vt, 20), 20, sched,
                                         t_prev=18)
    stepped = df.reverse_continuous_step(vt, oracle(vt, 20), 20, sched)
    stepped = df.reverse_continuous_step(stepped, oracle(stepped, 19), 19,
                                         sched)
    assert np.allclose(strided, stepped, atol=1e-9)


def test_reverse_rejects_bad_t():
    sched = df.cosine_schedule(10)
    v = np.zeros((2, 2))
    with pytest.raises(ValueError):
        df.reverse_continuous_step(v, v, 11, sched)
    with pytest.raises(ValueError):
        df.reverse_continuous_step(v, v, 5, sched, t_prev=5)


# ---------------------------------------------------------------------------
# discrete channel

def test_forward_discrete_noiseless():
    sched = schedule_from([1.0])
    nodes, edges = to_discrete_tensor(make_five_t_ota())
    rng = np.random.default_rng(0)
    nodes_t, edges_t = df.forward_discrete(nodes, edges, 1, sched, rng)
    assert np.array_equal(nodes_t, nodes)
    assert np.array_equal(edges_t, edges)


def test_forward_discrete_uniform_marginal():
    # chi-square over ~1e5 node draws at full noise; the critical value is
    # the Wilson-Hilferty approximation of the 99th percentile for 8 dof
    sched = schedule_from([0.0])
    rng = np.random.default_rng(77)
    nodes = np.zeros((12, 9))
    nodes[:, 2] = 1.0
    edges = np.zeros((12, 12, 5, 5))
    counts = np.zeros(9)
    draws = 0
    for _ in range(8334):
        nodes_t, _ = df.forward_discrete(nodes, edges, 1, sched, rng)
        counts += nodes_t.sum(axis=0)
        draws += 12
    expect = draws / 9
    stat = np.sum((counts - expect) ** 2 / expect)
    dof = 8
    z99 = 2.3263478740408408
    crit = dof * (1 - 2 / (9 * dof) + z99 * math.sqrt(2 / (9 * dof))) ** 3
    assert stat < crit


def test_forward_discrete_empty_edges_stay_empty():
    sched = schedule_from([0.001])
    rng = np.random.default_rng(1)
    nodes = np.zeros((3, 9))
    nodes[:, 0] = 1.0
    edges = np.zeros((3, 3, 5, 5))
    _, edges_t = df.forward_discrete(nodes, edges, 1, sched, rng)
    assert not edges_t.any()


def test_forward_discrete_preserves_symmetry():
    sched = df.cosine_schedule(50)
    nodes, edges = to_discrete_tensor(make_five_t_ota())
    rng = np.random.default_rng(11)
    for t in (1, 25, 50):
        nodes_t, edges_t = df.forward_discrete(nodes, edges, t, sched, rng)
        assert nodes_t.shape == nodes.shape
        assert np.array_equal(nodes_t.sum(axis=1), np.ones(3))
        for i in range(3):
            assert not edges_t[i, i].any()
            for j in range(3):
                assert np.array_equal(edges_t[i, j], edges_t[j, i].T)


def test_reverse_discrete_point_mass_collapse():
    # alpha_bar[t_prev] == 1 pins the outcome to the prediction
    sched = schedule_from([0.4])
    rng = np.random.default_rng(2)
    nodes_t = np.zeros((2, 9))
    nodes_t[:, 5] = 1.0
    edges_t = np.zeros((2, 2, 5, 5))
    edges_t[0, 1, 0, 0] = edges_t[1, 0, 0, 0] = 1.0
    p_nodes = np.zeros((2, 9))
    p_nodes[:, 3] = 1.0
    p_edges = np.zeros((2, 2, 5, 5))
    p_edges[0, 1, 4, 4] = p_edges[1, 0, 4, 4] = 1.0
    nodes_out, edges_out = df.reverse_discrete_step(
        nodes_t, edges_t, p_nodes, p_edges, 1, sched, rng)
    assert np.array_equal(nodes_out[:, 3], np.ones(2))
    assert edges_out[0, 1, 4, 4] == 1.0 and edges_out[0, 1, 0, 0] == 0.0


def test_reverse_discrete_hand_posterior():
    # frozen two-category case: alpha = 0.5, alpha_bar_prev = 0.8,
    # current value 1, even prediction -> (11/28, 17/28) by enumeration
    post = np.array([0.5, 0.5]) @ df._normalized_posterior(
        df.q_matrix(0.5, 2)[:, 1], df.q_bar_matrix(0.8, 2), None)
    assert np.allclose(post, [11 / 28, 17 / 28], atol=1e-12)
    assert post[1] == pytest.approx(0.6071428571428571)


def test_reverse_discrete_hand_posterior_sampled():
    sched = df.NoiseSchedule(
        2, np.array([1.0, 0.8, 0.5]), np.array([1.0, 0.8, 0.4]))
    rng = np.random.default_rng(4)
    nodes_t = np.zeros((2, 9))
    nodes_t[:, 0] = 1.0
    edges_t = np.zeros((2, 2, 5, 5))
    edges_t[0, 1, 1, 2] = edges_t[1, 0, 2, 1] = 1.0
    p_nodes = np.full((2, 9), 1.0 / 9)
    p_edges = np.full((2, 2, 5, 5), 0.5)
    hits = 0
    n_draws = 20_000
    for _ in range(n_draws):
        _, edges_out = df.reverse_discrete_step(
            nodes_t, edges_t, p_nodes, p_edges, 2, sched, rng)
        hits += int(edges_out[0, 1, 1, 2])
    p = 17 / 28
    sigma = math.sqrt(p * (1 - p) / n_draws)
    assert abs(hits / n_draws - p) < 4 * sigma


def test_reverse_discrete_preserves_symmetry_and_counts():
    sched = df.cosine_schedule(30)
    rng = np.random.default_rng(8)
    nodes, edges = to_discrete_tensor(make_five_t_ota())
    p_nodes = np.full((3, 9), 1.0 / 9)
    p_edges = np.full((3, 3, 5, 5), 0.3)
    nodes_out, edges_out = df.reverse_discrete_step(
        nodes, edges, p_nodes, p_edges, 15, sched, rng)
    assert nodes_out.shape == nodes.shape
    assert np.array_equal(nodes_out.sum(axis=1), np.ones(3))
    for i in range(3):
        assert not edges_out[i, i].any()
        for j in range(3):
            assert np.array_equal(edges_out[i, j], edges_out[j, i].T)


def test_reverse_discrete_degenerate_rows_counted():
    # an all-identity stretch zeroes the off-diagonal posterior rows
    sched = schedule_from([1.0, 1.0])
    rng = np.random.default_rng(6)
    nodes_t = np.zeros((1, 9))
    nodes_t[0, 0] = 1.0
    edges_t = np.zeros((1, 1, 5, 5))
    p_nodes = np.full((1, 9), 1.0 / 9)
    p_edges = np.zeros((1, 1, 5, 5))
    diag = df.DiffusionDiagnostics()
    df.reverse_discrete_step(nodes_t, edges_t, p_nodes, p_edges, 2, sched,
                             rng, diag=diag)
    assert diag.degenerate_rows > 0


def test_ddim_schedule():
    assert df.ddim_schedule(500, 1) == list(range(500, 0, -1))
    assert len(df.ddim_schedule(500, 1)) == 500
    assert df.ddim_schedule(500, 20) == list(range(500, 0, -20))
    assert len(df.ddim_schedule(500, 20)) == 25
    assert df.ddim_schedule(100, 10) == [100, 90, 80, 70, 60, 50, 40, 30,
                                         20, 10]
    seq = df.ddim_schedule(500, 7)
    assert len(seq) == math.ceil(500 / 7)
    assert seq[0] == 500 and seq[-1] >= 1
    assert all(a > b for a, b in zip(seq, seq[1:]))


def test_ddim_schedule_rejects():
    with pytest.raises(ValueError):
        df.ddim_schedule(100, 0)
    with pytest.raises(ValueError):
        df.ddim_schedule(100, 101)

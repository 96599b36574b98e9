import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import fd_grad, linear_net, rel_err
from stjem import energy_net
from stjem.exceptions import InvalidArgumentError
from stjem.objectives import (REPORT_COLUMNS, Batch, LossWeights, candidate_weights,
                              generative_from_logits, mi_diagnostic, res_jem_term,
                              samples_xent_term, stjem_generative_term, total_loss,
                              unlabeled_from_logits, unlabeled_term, xent_from_logits, xent_loss)


def random_instance(rng, seed, n=5, m=3, dx=2, dy=3, unlabeled=True):
    net = energy_net.init((dx, 5, dy), "swish", seed=seed)
    net.params = net.params + 0.1 * rng.normal(size=net.n_params)
    xs = rng.uniform(-1, 1, (n, dx))
    ys = rng.integers(dy, size=n)
    mask = np.ones(n, bool)
    if unlabeled:
        mask[rng.permutation(n)[: max(1, n // 2)]] = False
        if mask.all() or not mask.any():
            mask[0], mask[1] = True, False
    negs = rng.uniform(-1.2, 1.2, (m, dx))
    return net, Batch(xs, ys, mask, negs)


def check_fd(term, net, tol=1e-5):
    value, grad = term(net)
    fd = fd_grad(lambda p: term(net.with_params(p))[0], net.params)
    assert rel_err(grad, fd) < tol, rel_err(grad, fd)
    return value


# --- cross-entropy ----------------------------------------------------------------

def test_xent_examples():
    v, _ = xent_from_logits(np.zeros((3, 4)), [0, 1, 3])
    assert_allclose(v, math.log(4), atol=1e-15)
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 50.0
    v, _ = xent_from_logits(logits, [1, 2])
    assert v < 1e-9
    with pytest.raises(InvalidArgumentError):
        xent_from_logits(np.zeros((1, 2)), [2])


def test_xent_needs_labels():
    net = energy_net.init((2, 3), seed=0)
    with pytest.raises(InvalidArgumentError):
        xent_loss(net, Batch(np.zeros((2, 2)), [0, 0], [False, False]))


def test_xent_finite_differences(rng):
    for seed in range(50):
        net, batch = random_instance(rng, seed)
        check_fd(lambda n: xent_loss(n, batch), net)


# --- generative term --------------------------------------------------------------

def test_gen_symmetric_pair_is_ln2():
    net = linear_net(np.zeros((2, 1)), np.zeros(2))
    v, _ = stjem_generative_term(net, Batch([[0.3]], [1], negatives=[[-0.5]]))
    assert_allclose(v, math.log(2), atol=1e-15)


def test_gen_wall():
    # f(x) = x; the negatives sit 1e6 nats below the positive
    net = linear_net([[1.0]], [0.0])
    batch = Batch([[0.0]], [0], negatives=np.full((8, 1), -1e6))
    v, g = stjem_generative_term(net, batch)
    assert 0 <= v <= 8 * math.exp(-700)
    assert np.linalg.norm(g) < 1e-12


def test_gen_candidate_weights_by_enumeration(rng):
    for seed in range(20):
        net = energy_net.init((2, 4, 2), seed=seed)
        C = rng.uniform(-1, 1, (3, 2))
        f = net.forward(C)
        for y in range(2):
            e = [math.exp(float(f[i, y])) for i in range(3)]
            assert_allclose(candidate_weights(f, y), [v / sum(e) for v in e], atol=1e-15)
        batch = Batch(C[:1], [1], negatives=C[1:])
        expected = -math.log(math.exp(f[0, 1]) / sum(math.exp(f[i, 1]) for i in range(3)))
        check_fd(lambda n: stjem_generative_term(n, batch), net)
        assert_allclose(stjem_generative_term(net, batch)[0], expected, rtol=1e-12)


def test_gen_candidates_include_every_batch_row():
    net = linear_net([[1.0], [-1.0]], [0.0, 0.0])
    batch = Batch([[0.1], [0.4], [-0.2]], [0, 1, 0], [True, True, False], negatives=[[0.9]])
    f = net.forward(batch.candidates())
    want = np.mean([np.log(np.exp(f[:, y]).sum()) - f[i, y] for i, y in [(0, 0), (1, 1)]])
    v, _ = stjem_generative_term(net, batch)
    assert_allclose(v, want, rtol=1e-13)


def test_gen_finite_differences(rng):
    for seed in range(50):
        net, batch = random_instance(rng, seed)
        check_fd(lambda n: stjem_generative_term(n, batch), net)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.floats(-300, 300))
def test_gen_nonnegative_and_bounded(seed, spread):
    r = np.random.default_rng(seed)
    L = r.normal(size=(6, 3)) * spread
    v, d = generative_from_logits(L, [0, 2], [1, 2])
    assert v >= 0 and np.isfinite(v) and np.all(np.isfinite(d))
    # weights may underflow to 0 at extreme spreads but stay a distribution
    for y in (1, 2):
        w = candidate_weights(L, y)
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12


def test_res_jem_examples(rng):
    net = energy_net.init((2, 6, 3), seed=1)
    v, g = res_jem_term(net, Batch([[0.2, 0.3]], [2], negatives=[[0.0, 0.0]]))
    assert v == 0.0 and not g.any()
    for seed in range(10):
        _, batch = random_instance(rng, seed)
        v1, g1 = res_jem_term(net, batch)
        v2, g2 = stjem_generative_term(net, Batch(batch.xs, batch.ys, batch.labeled_mask))
        assert v1 == v2 and g1.tobytes() == g2.tobytes()
    lin = linear_net([[2.0, -1.0]], [0.5])
    xs = np.array([[0.1, 0.7], [-0.4, 0.2]])
    f = xs @ np.array([2.0, -1.0]) + 0.5
    v, _ = res_jem_term(lin, Batch(xs, [0, 0], [True, False]))
    assert_allclose(v, -math.log(math.exp(f[0]) / (math.exp(f[0]) + math.exp(f[1]))), rtol=1e-14)


def test_res_jem_finite_differences(rng):
    for seed in range(50):
        net, batch = random_instance(rng, seed)
        check_fd(lambda n: res_jem_term(n, batch), net)


# --- unlabeled term --------------------------------------------------------------

def test_unlabeled_dy1_reduces_to_gen(rng):
    net = energy_net.init((2, 5, 1), seed=3)
    xs = rng.uniform(-1, 1, (4, 2))
    negs = rng.uniform(-1, 1, (3, 2))
    vu, gu = unlabeled_term(net, Batch(xs, [0] * 4, [False] * 4, negs))
    vg, gg = stjem_generative_term(net, Batch(xs, [0] * 4, [True] * 4, negs))
    assert_allclose(vu, vg, rtol=1e-14)
    assert_allclose(gu, gg, rtol=1e-12, atol=1e-15)


def test_unlabeled_symmetric_logits():
    L = np.repeat(np.array([[0.3], [-0.2], [1.1], [0.0]]), 4, axis=1)
    v, _ = unlabeled_from_logits(L, [1, 2])
    gen = [math.log(np.exp(L[:, 0]).sum()) - L[i, 0] for i in (1, 2)]
    assert_allclose(v, math.log(4) + np.mean(gen), rtol=1e-14)


def test_unlabeled_matches_grid_enumeration():
    # candidates are every cell of a 1-D grid; the unlabeled inputs are grid cells too
    net = energy_net.init((1, 6, 3), seed=8)
    grid = np.linspace(-1, 1, 41)[:, None]
    f = net.forward(grid)
    unl = [3, 17, 30]
    p_x_given_y = np.exp(f) / np.exp(f).sum(axis=0)
    total = 0.0
    for i in unl:
        post = np.exp(f[i]) / np.exp(f[i]).sum()
        total += sum(post[y] * (math.log(post[y]) + math.log(p_x_given_y[i, y])) for y in range(3))
    v, _ = unlabeled_from_logits(f, unl)
    assert abs(v - (-total / len(unl))) <= 1e-9


@pytest.mark.parametrize("stop_grad", [True, False])
def test_unlabeled_finite_differences(stop_grad, rng):
    for seed in range(50):
        net, batch = random_instance(rng, seed)
        C = batch.candidates()
        idx = np.flatnonzero(~batch.labeled_mask)
        if stop_grad:
            # the stop-gradient path treats the posterior weights as constants
            w = np.exp(net.forward(C)[idx])
            w /= w.sum(axis=1, keepdims=True)

            def value(n):
                L = n.forward(C)
                lse = np.log(np.exp(L).sum(axis=0))
                logpost = L[idx] - np.log(np.exp(L[idx]).sum(axis=1, keepdims=True))
                return float(np.mean(np.sum(w * (-logpost + lse - L[idx]), axis=1)))

            _, grad = unlabeled_term(net, batch, stop_grad=True)
            fd = fd_grad(lambda p: value(net.with_params(p)), net.params)
            assert rel_err(grad, fd) < 1e-5
        else:
            check_fd(lambda n: unlabeled_term(n, batch, stop_grad=False), net)


def test_unlabeled_requires_rows():
    net = energy_net.init((2, 3), seed=0)
    with pytest.raises(InvalidArgumentError):
        unlabeled_term(net, Batch(np.zeros((2, 2)), [0, 1]))


# --- samples cross-entropy ------------------------------------------------------

def test_samples_xent_examples(rng):
    net = linear_net(np.zeros((10, 2)), np.zeros(10))
    v, _ = samples_xent_term(net, rng.uniform(-1, 1, (5, 2)), [0, 3, 9, 9, 1])
    assert_allclose(v, math.log(10), atol=1e-14)
    b = np.zeros(3)
    b[2] = 60.0
    v, _ = samples_xent_term(linear_net(np.zeros((3, 2)), b), np.zeros((4, 2)), [2] * 4)
    assert v < 1e-9
    with pytest.raises(InvalidArgumentError):
        samples_xent_term(net, np.zeros((2, 2)), [0, 10])
    with pytest.raises(InvalidArgumentError):
        samples_xent_term(net, np.zeros((0, 2)), [])


def test_samples_xent_finite_differences(rng):
    for seed in range(50):
        net = energy_net.init((2, 5, 3), seed=seed)
        S = rng.uniform(-1.2, 1.2, (4, 2))
        t = rng.integers(3, size=4)
        check_fd(lambda n: samples_xent_term(n, S, t), net)


# --- total loss -------------------------------------------------------------------

def test_total_composition(rng):
    net, batch = random_instance(rng, 0, unlabeled=False)
    plain = Batch(batch.xs, batch.ys)
    rep, grad = total_loss(net, plain, LossWeights())
    xv, xg = xent_loss(net, plain)
    rv, rg = res_jem_term(net, plain)
    assert_allclose(rep.total, xv + rv, rtol=1e-14)
    assert_allclose(grad, xg + rg, rtol=1e-10, atol=1e-14)
    assert rep.candidate_count == len(plain.xs)


def test_total_gen_weight_zero_is_discriminative(rng):
    net, batch = random_instance(rng, 1, unlabeled=False)
    rep, grad = total_loss(net, batch, LossWeights(gen=0.0))
    xv, xg = xent_loss(net, batch)
    assert rep.total == xv
    assert_allclose(grad, xg, rtol=1e-12, atol=1e-15)


def test_total_errors(rng):
    net, batch = random_instance(rng, 2, unlabeled=False)
    with pytest.raises(InvalidArgumentError):
        total_loss(net, batch, LossWeights(use_unlabeled=True))
    with pytest.raises(InvalidArgumentError):
        total_loss(net, batch, LossWeights(use_samples_xent=True))


def test_total_finite_differences(rng):
    w = LossWeights(xent=0.7, gen=1.3, unlabeled=0.5, samples_xent=0.4, use_unlabeled=True,
                    use_samples_xent=True, unlabeled_stop_grad=False)
    for seed in range(50):
        net, batch = random_instance(rng, seed)
        S = rng.uniform(-1, 1, (3, 2))
        t = rng.integers(3, size=3)

        def term(n):
            rep, g = total_loss(n, batch, w, S, t)
            return rep.total, g

        check_fd(term, net)


def test_report_row():
    net = energy_net.init((2, 3), seed=0)
    rep, _ = total_loss(net, Batch(np.zeros((2, 2)), [0, 1]))
    assert tuple(rep.to_row()) == REPORT_COLUMNS
    assert rep.gen_term >= 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_shift_invariances(seed):
    r = np.random.default_rng(seed)
    L = r.normal(size=(7, 4)) * 5
    ys = r.integers(4, size=5)
    x0, _ = xent_from_logits(L[:5], ys)
    x1, _ = xent_from_logits(L[:5] + r.normal(size=(5, 1)) * 100, ys)
    assert abs(x0 - x1) <= 1e-9
    g0, _ = generative_from_logits(L, np.arange(5), ys)
    g1, _ = generative_from_logits(L + r.normal(size=(1, 4)) * 100, np.arange(5), ys)
    assert abs(g0 - g1) <= 1e-9


# --- MI diagnostic ---------------------------------------------------------------

def kl_form(P):
    joint = P / P.shape[0]
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.where(joint > 0, joint * np.log(joint / (px * py)), 0.0).sum())


def test_mi_examples():
    mi, _, h = mi_diagnostic(np.full((6, 3), 1 / 3))
    assert mi == 0.0 or abs(mi) < 1e-15
    mi, mlp, h = mi_diagnostic(np.eye(4))
    assert_allclose([mi, mlp, h], [math.log(4), 0.0, math.log(4)], atol=1e-15)


def test_mi_dual_formula(rng):
    for _ in range(200):
        P = rng.dirichlet(np.ones(4) * 0.5, size=int(rng.integers(1, 30)))
        assert abs(mi_diagnostic(P)[0] - kl_form(P)) <= 1e-12

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smlp import routing as R
from smlp import tensor as T
from smlp.errors import ConfigError, DivisibilityError
from smlp.gradcheck import check_gradients
from smlp.tensor import Tensor


def brute_force_best(aff):
    """Maximum total affinity over every assignment with loads in {floor, ceil}(M/N)."""
    M, N = aff.shape
    fl, r = divmod(M, N)
    best = -np.inf
    for choice in itertools.product(range(N), repeat=M):
        loads = np.bincount(choice, minlength=N)
        if loads.min() < fl or loads.max() > fl + (1 if r else 0):
            continue
        best = max(best, aff[np.arange(M), choice].sum())
    return best


def router(rng, kind, n, dim, k=1):
    p = R.init_router(rng, kind, n, dim, k=k, std=1.0)
    return p


def test_softmax_gates_closed_form(rng):
    p = router(rng, "softmax_topk", 4, 3, k=2)
    x = rng.normal(size=(6, 3))
    plan = R.softmax_topk_route(p, Tensor(x))
    z = x @ p.w.data
    probs = np.exp(z - z.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    order = np.argsort(-probs, axis=1, kind="stable")[:, :2]
    np.testing.assert_array_equal(plan.expert, order)
    np.testing.assert_allclose(plan.gates.data, np.take_along_axis(probs, order, 1), atol=1e-15)


def test_softmax_all_gates_sum_to_one(rng):
    p = router(rng, "softmax_topk", 5, 4, k=5)
    plan = R.softmax_topk_route(p, Tensor(rng.normal(size=(30, 4)) * 5))
    assert np.abs(plan.gates.data.sum(1) - 1).max() <= 1e-12


def test_topk_ties_go_to_lower_index():
    p = R.RouterParams("softmax_topk", 4, k=2, w=Tensor(np.zeros((3, 4)), requires_grad=True))
    plan = R.softmax_topk_route(p, Tensor(np.ones((2, 3))))
    np.testing.assert_array_equal(plan.expert, [[0, 1], [0, 1]])


def test_switch_balance_loss_formula_and_gradient(rng):
    p = router(rng, "softmax_topk", 3, 4)
    x = Tensor(rng.normal(size=(10, 4)))
    plan = R.softmax_topk_route(p, x)
    f = np.bincount(plan.expert[:, 0], minlength=3) / 10
    P = plan.probs.data.mean(0)
    assert plan.aux_loss.item() == pytest.approx(3 * (f * P).sum(), abs=1e-14)
    assert check_gradients(lambda: R.softmax_topk_route(p, x).aux_loss, [p.w])[0] < 1e-4


def test_balance_loss_is_one_when_uniform():
    p = R.RouterParams("softmax_topk", 4, w=Tensor(np.zeros((2, 4)), requires_grad=True))
    plan = R.softmax_topk_route(p, Tensor(np.ones((8, 2))))
    plan.expert[:, 0] = np.arange(8) % 4
    assert R.switch_balance_loss(plan, plan.probs).item() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("M,N", [(8, 4), (7, 3), (5, 4), (3, 3), (6, 2), (1, 2)])
def test_balanced_assignment_is_optimal_small(M, N, rng):
    for _ in range(5):
        aff = rng.uniform(size=(M, N))
        a = R.balanced_assignment(aff)
        loads = np.bincount(a, minlength=N)
        assert loads.max() - loads.min() <= 1
        assert aff[np.arange(M), a].sum() == pytest.approx(brute_force_best(aff), abs=1e-12)


def test_greedy_is_balanced_but_can_be_suboptimal():
    aff = np.array([[1.0, 0.9], [0.95, 0.0]])
    g = R.greedy_balanced_assignment(aff)
    e = R.balanced_assignment(aff)
    assert aff[[0, 1], g].sum() < aff[[0, 1], e].sum()
    assert sorted(np.bincount(g, minlength=2)) == [1, 1]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_balanced_loads_within_one(M, N, seed):
    aff = np.random.default_rng(seed).normal(size=(M, N))
    for fn in (R.balanced_assignment, R.greedy_balanced_assignment):
        loads = np.bincount(fn(aff), minlength=N)
        assert loads.max() - loads.min() <= 1 and loads.sum() == M


def test_balanced_route_gates_and_inference_argmax(rng):
    p = router(rng, "balanced_assignment", 3, 4)
    x = Tensor(rng.normal(size=(9, 4)))
    train = R.balanced_assignment_route(p, x, training=True)
    assert list(train.loads()) == [3, 3, 3]
    aff = x.data @ p.w.data
    np.testing.assert_allclose(train.gates.data[:, 0],
                               1 / (1 + np.exp(-aff[np.arange(9), train.expert[:, 0]])))
    infer = R.balanced_assignment_route(p, x, training=False)
    np.testing.assert_array_equal(infer.expert[:, 0], aff.argmax(1))


def test_grouped_balanced_route_balances_each_group(rng):
    p = router(rng, "balanced_assignment", 2, 3)
    p.group = 4
    plan = R.balanced_assignment_route(p, Tensor(rng.normal(size=(12, 3))), training=True)
    for g in range(3):
        assert list(np.bincount(plan.expert[4 * g:4 * g + 4, 0], minlength=2)) == [2, 2]


def test_splitmix64_reference_values():
    # first outputs of the reference generator seeded with 0
    state, outs = 0, []
    for _ in range(3):
        outs.append(int(R.splitmix64(np.uint64(state))))
        state = (state + 0x9E3779B97F4A7C15) % 2**64
    assert outs == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_hash_router_repeatable_and_seeded():
    ids = np.arange(200)
    p0 = R.RouterParams("hash", 4, hash_seed=0)
    a, b = R.hash_route(p0, ids), R.hash_route(p0, ids)
    np.testing.assert_array_equal(a.expert, b.expert)
    assert np.all(a.gates.data == 1.0)
    c = R.hash_route(R.RouterParams("hash", 4, hash_seed=1), ids)
    assert np.any(a.expert != c.expert)
    assert np.bincount(a.expert[:, 0], minlength=4).min() > 30


def test_deterministic_chunks():
    plan = R.deterministic_chunk_route(12, 3)
    np.testing.assert_array_equal(plan.expert[:, 0], np.repeat([0, 1, 2], 4))
    with pytest.raises(DivisibilityError):
        R.deterministic_chunk_route(10, 3)


def test_prefix_len():
    assert R.prefix_len(16) == 3
    assert R.prefix_len(10) == 2
    assert R.prefix_len(1024) == 204
    assert R.prefix_len(4) == 1


def test_router_validation():
    with pytest.raises(ConfigError):
        R.RouterParams("nope", 2)
    with pytest.raises(ConfigError):
        R.RouterParams("softmax_topk", 2, k=3)


def test_balanced_assignment_worked_example():
    aff = np.array([[5.0, 1.0], [4.0, 3.0]])
    np.testing.assert_array_equal(R.balanced_assignment(aff), [0, 1])
    assert brute_force_best(aff) == 8.0


def test_balance_loss_worst_case_is_n():
    n = 3
    p = R.RouterParams("softmax_topk", n, w=Tensor(np.zeros((1, n)), requires_grad=True))
    p.w.data[0, 0] = 1e3
    plan = R.softmax_topk_route(p, Tensor(np.ones((5, 1))))
    assert plan.aux_loss.item() == pytest.approx(n, abs=1e-12)


def test_fewer_items_than_experts():
    a = R.balanced_assignment(np.array([[0.1, 0.9, 0.3]]))
    assert list(a) == [1]
    assert R.balanced_assignment(np.zeros((0, 3))).size == 0

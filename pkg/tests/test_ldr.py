import numpy as np
from hypothesis import given, settings, strategies as st

from mbgr.ldr import MASK, route_batch, route_labels


def brute(bs, n_business):
    L = len(bs)
    out = [[MASK] * n_business for _ in range(L)]
    for t in range(L):
        for k in range(n_business):
            for s in range(t + 1, L):
                if bs[s] == k:
                    out[t][k] = s
                    break
    return np.array(out, dtype=np.int64).reshape(L, n_business)


def test_interleaved_example():
    A, B = 0, 1
    got = route_labels([A, B, A, B], 2)
    assert got.tolist() == [[2, 1], [2, 3], [MASK, 3], [MASK, MASK]]


def test_single_business():
    got = route_labels([0, 0, 0], 3)
    assert got.tolist() == [[1, MASK, MASK], [2, MASK, MASK], [MASK, MASK, MASK]]


def test_empty_sequence():
    assert route_labels([], 4).shape == (0, 4)


def test_matches_brute_force_on_random_sequences():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_b = int(rng.integers(1, 7))
        bs = rng.integers(0, n_b, size=int(rng.integers(1, 65)))
        got = route_labels(bs, n_b)
        assert np.array_equal(got, brute(bs.tolist(), n_b))
        assert (got[-1] == MASK).all()


seqs = st.integers(1, 6).flatmap(lambda n: st.tuples(st.just(n), st.lists(st.integers(0, n - 1), max_size=40)))


@settings(max_examples=200, deadline=None)
@given(seqs)
def test_targets_are_valid(case):
    n_b, bs = case
    got = route_labels(bs, n_b)
    for t, row in enumerate(got):
        for k, tgt in enumerate(row):
            if tgt == MASK:
                assert k not in bs[t + 1:]
            else:
                assert tgt > t and bs[tgt] == k and k not in bs[t + 1:tgt]


@settings(max_examples=200, deadline=None)
@given(seqs)
def test_denser_than_next_token(case):
    n_b, bs = case
    ldr = route_labels(bs, n_b)
    ntp = route_labels(bs, n_b, mode="ntp")
    assert (ldr != MASK).sum() >= (ntp != MASK).sum()
    # the immediate successor is always among the routed targets
    assert np.all((ntp == MASK) | (ntp == ldr))


def test_ntp_mode():
    got = route_labels([0, 1, 1, 2], 3, mode="ntp")
    assert got.tolist() == [[MASK, 1, MASK], [MASK, 2, MASK], [MASK, MASK, 3], [MASK, MASK, MASK]]


def test_batch_respects_left_padding():
    bs = np.array([[0, 0, 1, 0, 1], [2, 1, 0, 2, 1]])
    valid = np.array([[False, False, True, True, True], [True] * 5])
    out = route_batch(bs, valid, 3)
    assert (out[0, :2] == MASK).all()
    assert np.array_equal(out[0, 2:], route_labels([1, 0, 1], 3) + np.where(route_labels([1, 0, 1], 3) == MASK, 0, 2))
    assert np.array_equal(out[1], route_labels(bs[1], 3))

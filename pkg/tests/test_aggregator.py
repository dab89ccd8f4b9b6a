import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedarks.aggregator import (
    WEIGHT_COLUMNS,
    AggregationState,
    KSConfig,
    ProtocolError,
    aggregate,
    compute_weights,
    consistency_ratio,
    fedavg_aggregate,
    fedavg_round,
    server_round,
    smooth_ratio,
    write_weight_history,
)
from fedarks.client import ClientUpdate
from fedarks.params import ParamVector
from fedarks.synthdata import ConfigError

from . import oracles


def upd(cid, values, norm=1.0):
    return ClientUpdate(cid, ParamVector(np.asarray(values, dtype=float)), norm, [])


def state_with_delta(delta_norm):
    prev = ParamVector(np.zeros(3))
    return AggregationState(ParamVector(np.array([delta_norm, 0.0, 0.0])), prev, {0: 1.0}, 2)


# consistency ratio and smoothing

def test_ratio_examples():
    assert consistency_ratio(state_with_delta(2.0), 2.0) == 1.0
    assert consistency_ratio(state_with_delta(2.0), 4.0) == 0.5


def test_ratio_matches_norm_oracle(rng):
    for _ in range(20):
        a, b, c, d = (rng.standard_normal(17) for _ in range(4))
        st_ = AggregationState(ParamVector(a), ParamVector(b), {}, 2)
        got = consistency_ratio(st_, float(np.linalg.norm(c - d)))
        want = oracles.ratio(a, b, c, d)
        assert got == pytest.approx(want, rel=1e-12)


def test_ratio_errors():
    with pytest.raises(ProtocolError):
        consistency_ratio(AggregationState(ParamVector(np.zeros(2))), 1.0)
    with pytest.raises(ProtocolError):
        consistency_ratio(state_with_delta(1.0), 0.0)


def test_smooth_examples():
    assert smooth_ratio(1.0, 2.0, 0.7) == pytest.approx(1.7, rel=1e-15)
    assert smooth_ratio(5.0, 2.0, 1.0) == 2.0
    assert smooth_ratio(5.0, 2.0, 0.0) == 5.0
    with pytest.raises(ValueError):
        smooth_ratio(float("nan"), 1.0, 0.5)


@settings(max_examples=100, deadline=None)
@given(gamma=st.floats(0.0, 1.0), start=st.floats(0.0, 10.0),
       ratios=st.lists(st.floats(0.0, 10.0), min_size=1, max_size=12))
def test_smoothing_unrolls(gamma, start, ratios):
    s = start
    for r in ratios:
        s = smooth_ratio(s, r, gamma)
    n = len(ratios)
    closed = gamma * sum((1 - gamma) ** i * ratios[n - 1 - i] for i in range(n)) + (1 - gamma) ** n * start
    assert s == pytest.approx(closed, rel=1e-10, abs=1e-10)


# weights

def test_weight_examples():
    cfg = KSConfig()
    assert compute_weights({0: 1.0, 1: 1.0}, {0: 1.0, 1: 1.0}, cfg) == {0: 0.5, 1: 0.5}
    w = compute_weights({0: 1.0, 1: 2.0}, {0: 1.0, 1: 1.0}, cfg)
    assert w[0] == pytest.approx(0.993307, abs=1e-6)
    assert w[1] == pytest.approx(0.006693, abs=1e-6)
    assert compute_weights({0: 1.0, 1: 1.0}, {0: 1e-9, 1: 1.0}, cfg) == {0: 0.0, 1: 1.0}
    flat = compute_weights({0: 0.1, 1: 3.0, 2: 1.0}, {0: 1.0, 1: 1.0, 2: 1.0}, KSConfig(beta=0.0))
    assert all(v == pytest.approx(1 / 3, rel=1e-15) for v in flat.values())


def test_two_client_example_against_decimal():
    from decimal import Decimal, getcontext
    getcontext().prec = 40
    e = Decimal(-5).exp()
    want = [float(1 / (1 + e)), float(e / (1 + e))]
    w = compute_weights({0: 1.0, 1: 2.0}, {0: 1.0, 1: 1.0}, KSConfig())
    assert [w[0], w[1]] == pytest.approx(want, rel=1e-14)


def test_weights_survive_large_beta():
    w = compute_weights({0: 50.0, 1: 60.0}, {0: 1.0, 1: 1.0}, KSConfig(beta=100.0))
    assert w == {0: 1.0, 1: 0.0}


def test_all_gated_is_uniform():
    w = compute_weights({0: 1.0, 1: 3.0}, {0: 0.0, 1: 1e-10}, KSConfig())
    assert w == {0: 0.5, 1: 0.5}


def test_weight_errors():
    with pytest.raises(ProtocolError):
        compute_weights({}, {}, KSConfig())
    with pytest.raises(ProtocolError):
        compute_weights({0: 1.0}, {1: 1.0}, KSConfig())
    with pytest.raises(ConfigError):
        KSConfig(gamma=1.5)
    with pytest.raises(ConfigError):
        KSConfig(epsilon=0.0)


@settings(max_examples=200, deadline=None)
@given(data=st.lists(st.tuples(st.floats(0.0, 4.0), st.sampled_from([0.0, 1e-9, 1e-3, 0.5, 2.0])),
                     min_size=1, max_size=8),
       beta=st.floats(0.0, 20.0))
def test_weight_law(data, beta):
    ratios = {k: r for k, (r, _) in enumerate(data)}
    norms = {k: n for k, (_, n) in enumerate(data)}
    cfg = KSConfig(beta=beta)
    w = compute_weights(ratios, norms, cfg)
    assert abs(sum(w.values()) - 1.0) <= 1e-12
    assert all(v >= 0 for v in w.values())
    live = [k for k in w if norms[k] >= cfg.epsilon]
    if not live:
        assert all(v == 1 / len(w) for v in w.values())
        return
    assert all(w[k] == 0.0 for k in w if k not in live)
    if beta > 0:
        for i in live:
            for j in live:
                if abs(1 - ratios[i]) < abs(1 - ratios[j]):
                    assert w[i] >= w[j]


@settings(max_examples=100, deadline=None)
@given(ratios=st.lists(st.floats(0.0, 3.0), min_size=2, max_size=6), beta=st.floats(0.1, 8.0))
def test_weights_match_oracle_and_strict_monotone(ratios, beta):
    norms = [1.0] * len(ratios)
    w = compute_weights(dict(enumerate(ratios)), dict(enumerate(norms)), KSConfig(beta=beta))
    want = oracles.gated_softmax_weights(ratios, norms, beta, 1e-8)
    assert [w[k] for k in range(len(ratios))] == pytest.approx(want, rel=1e-10, abs=1e-300)
    dev = [abs(1 - r) for r in ratios]
    for i in range(len(ratios)):
        for j in range(len(ratios)):
            # distinct enough that the exp() gap is representable
            if beta * (dev[j] - dev[i]) > 1e-9:
                assert w[i] > w[j]


# aggregation

def test_uniform_weights_equal_fedavg_bitwise(rng):
    ups = [upd(k, rng.standard_normal(50)) for k in range(5)]
    a = aggregate(ups, {k: 1 / 5 for k in range(5)})
    assert np.array_equal(a.values, fedavg_aggregate(ups).values)
    # input order must not matter
    assert np.array_equal(aggregate(ups[::-1], {k: 1 / 5 for k in range(5)}).values, a.values)


def test_one_hot_selects_client(rng):
    ups = [upd(k, rng.standard_normal(9)) for k in range(3)]
    out = aggregate(ups, {0: 0.0, 1: 1.0, 2: 0.0})
    assert np.array_equal(out.values, ups[1].post_params.values)


def test_weighted_aggregate_matches_double_loop(rng):
    ups = [upd(k, rng.standard_normal(33)) for k in range(3)]
    out = aggregate(ups, {0: 0.2, 1: 0.3, 2: 0.5})
    want = oracles.weighted_sum([u.post_params.values for u in ups], [0.2, 0.3, 0.5])
    np.testing.assert_allclose(out.values, want, rtol=1e-12, atol=1e-15)


def test_fedavg_examples(rng):
    v = rng.standard_normal(6)
    assert np.allclose(fedavg_aggregate([upd(0, v), upd(1, v), upd(2, v)]).values, v, rtol=1e-15)
    assert fedavg_aggregate([upd(0, [0.0]), upd(1, [2.0])]).values.tolist() == [1.0]
    ups = [upd(k, rng.standard_normal(8)) for k in range(4)]
    want = oracles.mean([u.post_params.values for u in ups])
    np.testing.assert_allclose(fedavg_aggregate(ups).values, want, rtol=1e-12)
    with pytest.raises(ProtocolError):
        fedavg_aggregate([])


def test_aggregate_rejects_bad_weights(rng):
    ups = [upd(k, rng.standard_normal(3)) for k in range(2)]
    with pytest.raises(ProtocolError):
        aggregate(ups, {0: 0.5, 1: 0.6})
    with pytest.raises(ProtocolError):
        aggregate(ups, {0: 1.5, 1: -0.5})


# server rounds

def test_first_round_uniform(rng):
    state = AggregationState.start(ParamVector(np.zeros(4)), [0, 1, 2])
    ups = [upd(k, rng.standard_normal(4), norm=float(k) * 1e-12) for k in range(3)]
    state, rec = server_round(state, ups, KSConfig())
    assert rec.fallback == "first-round"
    assert rec.alphas() == {0: 1 / 3, 1: 1 / 3, 2: 1 / 3}
    assert state.round == 2 and state.previous_global is not None


def test_all_gated_round_flagged():
    state = AggregationState.start(ParamVector(np.zeros(2)), [0, 1])
    state, _ = server_round(state, [upd(0, [1.0, 0.0]), upd(1, [0.0, 1.0])], KSConfig())
    state, rec = server_round(state, [upd(0, [1.0, 0.0], 0.0), upd(1, [0.0, 1.0], 1e-9)], KSConfig())
    assert rec.fallback == "all-gated"
    assert rec.alphas() == {0: 0.5, 1: 0.5}
    assert all(e.gated for e in rec.entries)
    assert state.smoothed_ratios == {0: 1.0, 1: 1.0}


def test_missing_client_is_protocol_error():
    state = AggregationState.start(ParamVector(np.zeros(2)), [0, 1])
    with pytest.raises(ProtocolError):
        server_round(state, [upd(0, [1.0, 0.0])], KSConfig())
    with pytest.raises(ProtocolError):
        server_round(state, [], KSConfig())


def test_scripted_two_rounds():
    """Hand-worked fixture: three clients, client 1 gated in round 2.

    Round 1 is uniform: global = mean([1,0], [0,1], [1,1]) = [2/3, 2/3], so the
    global delta in round 2 is sqrt(8/9).  With update norms 0.5 and 2.0 the
    raw ratios are 2*sqrt(8/9) and sqrt(8/9)/2, smoothed against 1.0 with
    gamma 0.7, then weighted by exp(-5 |1 - R~|).  Values below were
    evaluated with 40-digit decimals.
    """
    state = AggregationState.start(ParamVector(np.zeros(2)), [0, 1, 2])
    r1 = [upd(0, [1.0, 0.0], 1.0), upd(1, [0.0, 1.0], 1.0), upd(2, [1.0, 1.0], 2 ** 0.5)]
    state, rec1 = server_round(state, r1, KSConfig())
    assert state.current_global.values == pytest.approx([2 / 3, 2 / 3], rel=1e-15)

    r2 = [upd(0, [2.0, 0.0], 0.5), upd(1, [0.0, 2.0], 1e-9), upd(2, [0.0, 3.0], 2.0)]
    state, rec2 = server_round(state, r2, KSConfig())
    e = {x.client_id: x for x in rec2.entries}
    assert e[0].ratio == pytest.approx(1.885618083164126731735584965612930771426, rel=1e-14)
    assert e[2].ratio == pytest.approx(0.4714045207910316829338962414032326928566, rel=1e-14)
    assert e[1].ratio is None and e[1].gated and e[1].smoothed == 1.0
    assert e[0].smoothed == pytest.approx(1.619932658214888712214909475929051539998, rel=1e-14)
    assert e[2].smoothed == pytest.approx(0.6299831645537221780537273689822628849996, rel=1e-14)
    a0, a2 = 0.2227730047370818090324516383297044578994, 0.7772269952629181909675483616702955421004
    assert e[0].alpha == pytest.approx(a0, rel=1e-13)
    assert e[2].alpha == pytest.approx(a2, rel=1e-13)
    assert e[1].alpha == 0.0
    assert state.current_global.values == pytest.approx([2 * a0, 3 * a2], rel=1e-13)
    assert state.previous_global.values == pytest.approx([2 / 3, 2 / 3], rel=1e-15)
    assert [r.round for r in state.weight_history] == [1, 2]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rounds=st.integers(2, 6))
def test_beta_zero_equals_fedavg_and_history_integrity(seed, rounds):
    rng = np.random.default_rng(seed)
    init = ParamVector(rng.standard_normal(7))
    ks = AggregationState.start(init, [0, 1, 2])
    fa = AggregationState.start(init, [0, 1, 2])
    for _ in range(rounds):
        ups = [upd(k, rng.standard_normal(7), float(rng.uniform(0.1, 2))) for k in range(3)]
        before = ks.current_global
        ks, rec = server_round(ks, ups, KSConfig(beta=0.0))
        fa, _ = fedavg_round(fa, ups)
        assert ks.previous_global is before
        assert np.array_equal(ks.current_global.values, fa.current_global.values)
        assert abs(sum(rec.alphas().values()) - 1) <= 1e-12


def test_weight_history_csv(tmp_path):
    state = AggregationState.start(ParamVector(np.zeros(2)), [0, 1])
    for norms in ([1.0, 1.0], [0.3, 0.0]):
        ups = [upd(0, [1.0, 0.5], norms[0]), upd(1, [0.25, 1.0], norms[1])]
        state, _ = server_round(state, ups, KSConfig())
    path = tmp_path / "weights.csv"
    write_weight_history(state.weight_history, path)
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == WEIGHT_COLUMNS
    assert len(rows) == 4
    assert rows[0]["R"] == "" and rows[3]["gated"] == "1" and rows[3]["alpha"] == "0.0"
    assert float(rows[2]["alpha"]) == 1.0
    assert math.isclose(float(rows[2]["R"]), float(np.linalg.norm([0.625, 0.75])) / 0.3, rel_tol=1e-15)

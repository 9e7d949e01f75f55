import math

import numpy as np
import pytest

from ffnsplit.analysis import churn, count_flops, evaluate, route_stats, smoothed, usage_entropy
from ffnsplit.model import ModelConfig
from ffnsplit.moe import MoeConfig, RoutingRecord
from ffnsplit.tensor import ContractError


def test_dense_ffn_flops_at_desk_dims():
    r = count_flops(64, 256, 1, MoeConfig(4, 1), 64)
    assert r.dense_ffn_per_token == 4 * 64 * 256 == 65536
    assert r.router_per_token == 2 * 64 * 4


def test_reduction_examples():
    r1 = count_flops(64, 256, 2, MoeConfig(4, 1), 64)
    r2 = count_flops(64, 256, 2, MoeConfig(4, 2), 64)
    assert 0.74 <= r1.reduction_ffn <= 0.76
    assert 0.49 <= r2.reduction_ffn <= 0.51
    assert r1.reduction_ffn == pytest.approx(0.75 - 512 / 65536)
    assert r2.reduction_ffn == pytest.approx(0.5 - 512 / 65536)


def test_full_selection_is_pure_overhead():
    r = count_flops(64, 256, 2, MoeConfig(4, 4), 64)
    assert r.reduction_ffn < 0
    assert r.reduction_ffn == pytest.approx(-r.router_per_token / r.dense_ffn_per_token)


@pytest.mark.parametrize("N", [4, 8, 16])
def test_reduction_closed_form(N):
    d, h = 64, 256
    for K in range(1, N + 1):
        r = count_flops(d, h, 2, MoeConfig(N, K), 64)
        assert r.reduction_ffn == pytest.approx(1 - K / N - (2 * d * N) / (4 * d * h), abs=1e-12)
        assert r.reduction_total < r.reduction_ffn or K == N


def test_attention_flops_have_quadratic_term():
    a = count_flops(64, 256, 1, MoeConfig(4, 1), 64).attention_per_token
    b = count_flops(64, 256, 1, MoeConfig(4, 1), 128).attention_per_token
    assert b - a == pytest.approx(4 * 64 * 64)


def test_report_header_states_convention():
    d = count_flops(64, 256, 2, MoeConfig(4, 2), 64).to_dict()
    assert "2 FLOPs" in d["convention"]


def test_entropy_examples():
    assert usage_entropy([10, 0, 0, 0]) == 0.0
    assert usage_entropy([5, 5, 5, 5]) == pytest.approx(math.log(4))
    assert usage_entropy([0, 0]) == 0.0


def test_churn_identical_and_disjoint():
    a = np.array([[[0, 1], [2, 3]]])
    assert churn(a, a) == 0.0
    assert churn(a, np.array([[[1, 0], [3, 2]]])) == 0.0  # order within a set is irrelevant
    assert churn(a, np.array([[[0, 2], [2, 3]]])) == 0.5
    with pytest.raises(ContractError):
        churn(a, a[:, :1])


def _rec(sel, step, layer=0, N=4):
    sel = np.array(sel)
    probs = np.full(sel.shape[:-1] + (N,), 1.0 / N)
    return RoutingRecord(probs, sel, layer, step)


def test_three_snapshot_fixture():
    # one sample, four positions, K=1
    s0 = _rec([[[0], [0], [1], [2]]], 0)
    s1 = _rec([[[0], [1], [1], [3]]], 5)
    s2 = _rec([[[0], [1], [1], [3]]], 10)
    stats = route_stats([[s0], [s1], [s2]])
    assert stats.steps == [0, 5, 10]
    assert stats.usage[0] == [[2, 1, 1, 0], [1, 2, 0, 1], [1, 2, 0, 1]]
    assert stats.churn[0] == [0.5, 0.0]
    e0 = -(0.5 * math.log(0.5) + 2 * 0.25 * math.log(0.25))
    assert stats.entropy[0] == pytest.approx([e0, e0, e0])
    assert stats.mean_churn == [0.5, 0.0]


def test_route_stats_averages_layers_and_accepts_flat_records():
    recs = [_rec([[[0], [1]]], 0, 0), _rec([[[0], [1]]], 0, 1),
            _rec([[[1], [1]]], 1, 0), _rec([[[0], [1]]], 1, 1)]
    stats = route_stats(recs)
    assert stats.layers == [0, 1]
    assert stats.churn == {0: [0.5], 1: [0.0]}
    assert stats.mean_churn == [0.25]
    with pytest.raises(ContractError):
        route_stats([])


def test_smoothed():
    assert smoothed([3.0, 1.0, 2.0, 0.0]) == [3.0, 2.0, 2.0, 1.0]


def _windows(n=5, seq=8, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 256, (n, seq))
    return list(zip(x, np.roll(x, -1, axis=1)))


def test_uniform_model_ce_is_log_vocab():
    report = evaluate(lambda t: np.zeros(t.shape + (256,)), _windows())
    assert report.cross_entropy == pytest.approx(math.log(256))
    assert report.perplexity == pytest.approx(256)
    assert report.tokens == 40


def test_maintenance_is_one_for_identical_models():
    def fn(t):
        return np.sin(np.arange(256) * (t[..., None] + 1.0))

    teacher = evaluate(fn, _windows())
    student = evaluate(fn, _windows(), teacher=teacher)
    assert student.maintenance == 1.0 and student.ce_ratio == 1.0


def test_evaluation_is_repeatable():
    def fn(t):
        return np.cos(np.arange(256) * 0.1 * t[..., None])

    a = evaluate(fn, _windows(33), batch_size=8).to_json()
    b = evaluate(fn, _windows(33), batch_size=8).to_json()
    assert a == b


def test_batching_does_not_change_result():
    def fn(t):
        return np.cos(np.arange(256) * 0.1 * t[..., None])

    a = evaluate(fn, _windows(10), batch_size=3).cross_entropy
    b = evaluate(fn, _windows(10), batch_size=10).cross_entropy
    assert a == pytest.approx(b, rel=1e-12)


def test_empty_stream_raises():
    with pytest.raises(ContractError):
        evaluate(lambda t: np.zeros(t.shape + (4,)), [])

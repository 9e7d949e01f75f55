import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ffnsplit.factorize import (
    ConfigurationError,
    ExpertBank,
    PermutationMap,
    build_permutation,
    coactivation_groups,
    expert_sum,
    merge_experts,
    permutation_matrix,
    split_ffn,
    verify_equivalence,
)
from ffnsplit.model import FfnWeights, ffn_forward
from ffnsplit.tensor import ContractError, Tensor


def random_ffn(rng, d_e=16, d_h=64, dtype=np.float64):
    return FfnWeights(*(Tensor(rng.standard_normal(s).astype(dtype)) for s in ((d_e, d_h), (d_h,), (d_h, d_e), (d_e,))))


def test_contiguous_is_identity():
    assert build_permutation("contiguous", 8, 2).delta.tolist() == list(range(8))


def test_random_is_seeded_bijection():
    a = build_permutation("random", 64, 4, seed=9)
    b = build_permutation("random", 64, 4, seed=9)
    c = build_permutation("random", 64, 4, seed=10)
    assert a.delta.tolist() == b.delta.tolist() != c.delta.tolist()
    assert sorted(a.delta.tolist()) == list(range(64))


def test_divisibility_and_calibration_errors():
    with pytest.raises(ConfigurationError):
        build_permutation("contiguous", 10, 4)
    with pytest.raises(ContractError):
        build_permutation("coactivation", 8, 2)
    with pytest.raises(ConfigurationError):
        build_permutation("kmeans", 8, 2)


def _block_activations(rng, blocks, d_h, S=200):
    acts = np.zeros((S, d_h))
    for b in blocks:
        z = rng.standard_normal(S)
        for j in b:
            acts[:, j] = rng.uniform(0.5, 2.0) * z + rng.uniform(-1, 1)
    return acts


def _score(acts, groups):
    c = np.corrcoef(acts.T)
    return sum(c[i, j] for g in groups for i, j in itertools.combinations(g, 2))


def _best_balanced_bipartition(acts):
    d_h = acts.shape[1]
    best, best_groups = -np.inf, None
    for first in itertools.combinations(range(d_h), d_h // 2):
        if 0 not in first:
            continue
        groups = [sorted(first), sorted(set(range(d_h)) - set(first))]
        s = _score(acts, groups)
        if s > best + 1e-12:
            best, best_groups = s, groups
    return best_groups


@pytest.mark.parametrize("blocks", [[[0, 1, 2, 3], [4, 5, 6, 7]], [[0, 2, 5, 7], [1, 3, 4, 6]]])
def test_coactivation_recovers_correlated_blocks(rng, blocks):
    acts = _block_activations(rng, blocks, 8)
    oracle = _best_balanced_bipartition(acts)
    assert sorted(oracle) == sorted(blocks)
    pm = build_permutation("coactivation", 8, 2, calib=acts)
    got = [sorted(pm.delta[:4].tolist()), sorted(pm.delta[4:].tolist())]
    assert sorted(got) == sorted(blocks)


def test_coactivation_groups_are_balanced(rng):
    acts = rng.standard_normal((50, 24))
    groups = coactivation_groups(acts, 6)
    assert all(len(g) == 4 for g in groups)
    assert sorted(sum(groups, [])) == list(range(24))


def test_permutation_matrix_examples():
    np.testing.assert_array_equal(permutation_matrix(PermutationMap(np.arange(3))), np.eye(3))
    np.testing.assert_array_equal(permutation_matrix(PermutationMap([1, 0])), [[0, 1], [1, 0]])


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(12))))
def test_permutation_matrix_is_orthogonal_with_one_one_per_line(delta):
    P = permutation_matrix(PermutationMap(delta))
    assert np.all(P.sum(axis=0) == 1) and np.all(P.sum(axis=1) == 1)
    np.testing.assert_array_equal(P @ P.T, np.eye(12))
    for q, p in enumerate(delta):
        assert P[p, q] == 1


def test_bad_delta_rejected():
    with pytest.raises(ContractError):
        PermutationMap([0, 0, 1])


def test_split_matches_matrix_form(rng):
    w = random_ffn(rng, 4, 8)
    pm = build_permutation("random", 8, 2, seed=3)
    bank = split_ffn(w, pm, 2)
    P = permutation_matrix(pm)
    np.testing.assert_array_equal(bank.w1.data, w.w1.data @ P)
    np.testing.assert_array_equal(bank.b1.data, w.b1.data @ P)
    np.testing.assert_array_equal(bank.w2.data, P.T @ w.w2.data)
    np.testing.assert_array_equal(bank.b2.data, w.b2.data)


def test_identity_split_is_definitional_slicing(rng):
    w = random_ffn(rng, 4, 8)
    bank = split_ffn(w, build_permutation("contiguous", 8, 2), 2)
    w1_0, b1_0, w2_0 = bank.expert(0)
    w1_1, _, w2_1 = bank.expert(1)
    np.testing.assert_array_equal(w1_0, w.w1.data[:, :4])
    np.testing.assert_array_equal(w1_1, w.w1.data[:, 4:])
    np.testing.assert_array_equal(b1_0, w.b1.data[:4])
    np.testing.assert_array_equal(w2_0, w.w2.data[:4])
    np.testing.assert_array_equal(w2_1, w.w2.data[4:])


def test_single_expert_is_the_whole_ffn(rng):
    w = random_ffn(rng, 4, 8)
    pm = build_permutation("random", 8, 1, seed=1)
    bank = split_ffn(w, pm, 1)
    x = rng.standard_normal((10, 4))
    np.testing.assert_allclose(expert_sum(x, bank), ffn_forward(Tensor(x), w).data, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("strategy", ["contiguous", "random", "coactivation"])
@pytest.mark.parametrize("N", [1, 2, 4, 8])
def test_reconstruction_is_bit_exact(rng, strategy, N):
    w = random_ffn(rng, 8, 32, np.float32)
    calib = rng.standard_normal((40, 32))
    bank = split_ffn(w, build_permutation(strategy, 32, N, calib=calib, seed=5), N)
    back = merge_experts(bank)
    for a, b in zip((w.w1, w.b1, w.w2, w.b2), (back.w1, back.b1, back.w2, back.b2)):
        assert a.data.tobytes() == b.data.tobytes()
    # split -> merge -> split is stable
    again = split_ffn(back, bank.perm, N)
    assert again.w1.data.tobytes() == bank.w1.data.tobytes()
    assert again.w2.data.tobytes() == bank.w2.data.tobytes()


def test_all_expert_sum_equals_dense_ffn(rng):
    w = random_ffn(rng, 16, 64)
    bank = split_ffn(w, build_permutation("random", 64, 4, seed=11), 4)
    x = rng.standard_normal((100, 16))
    ref = ffn_forward(Tensor(x), w).data
    got = expert_sum(x, bank)
    assert np.abs(got - ref).max() / np.abs(ref).max() <= 1e-10


def test_certificate_passes_for_valid_split(rng, tmp_path):
    w = random_ffn(rng, 16, 64, np.float32)
    bank = split_ffn(w, build_permutation("random", 64, 4, seed=2), 4)
    cert = verify_equivalence(w, bank, samples=200, tol=1e-10, f32_tol=1e-5)
    assert cert.passed
    assert set(cert.max_rel) == {"float64", "float32"}
    assert cert.max_rel["float64"] <= 1e-10 and cert.max_rel["float32"] <= 1e-5
    import json
    back = json.loads(cert.save(tmp_path / "cert.json").read_text())
    assert back["passed"] is True and back["strategy"] == "random" and back["n_experts"] == 4


def test_certificate_fails_when_an_expert_is_zeroed(rng):
    w = random_ffn(rng, 16, 64)
    bank = split_ffn(w, build_permutation("contiguous", 64, 4), 4)
    bank.w2.data[bank.block(2), :] = 0.0
    cert = verify_equivalence(w, bank, samples=50)
    assert not cert.passed
    assert cert.failures and cert.max_rel["float64"] > 1e-3


def test_certificate_dimension_mismatch(rng):
    w = random_ffn(rng, 16, 64)
    bank = split_ffn(random_ffn(rng, 8, 64), build_permutation("contiguous", 64, 4), 4)
    with pytest.raises(ContractError):
        verify_equivalence(w, bank)


def test_bank_stores_b2_once(rng):
    w = random_ffn(rng, 4, 8)
    bank = split_ffn(w, build_permutation("contiguous", 8, 4), 4)
    assert bank.b2.shape == (4,)
    assert all(len(bank.expert(i)) == 3 for i in range(4))
    assert bank.d_expert == 2

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featrace.ngram import NgramTable, bigram_kl, count_ngrams, entropy_floor, successor_entropy, unigram_kl
from featrace.store import read_token_shard, write_token_shard

from oracles import dense_bigram_kl, dense_unigram_kl


def test_counts_do_not_cross_sequences(tmp_path):
    write_token_shard(tmp_path / "a.toks", [[0, 1, 2], [2, 0]])
    t = count_ngrams([tmp_path / "a.toks", read_token_shard(tmp_path / "a.toks"), [1, 1]], 3)
    assert t.unigram.tolist() == [4, 4, 4]
    assert t.n_tokens == 12
    dense = t.bigram.toarray()
    assert dense[0, 1] == 2 and dense[1, 2] == 2 and dense[2, 0] == 2 and dense[1, 1] == 1
    assert dense[2, 2] == 0  # the boundary between [0, 1, 2] and [2, 0] is not a bigram
    assert t.n_bigrams == 7


def test_out_of_range_tokens():
    with pytest.raises(ValueError):
        count_ngrams([[0, 5]], 3)


def test_merge_equals_joint_count_and_round_trip(tmp_path):
    a, b = [0, 1, 1, 2], [2, 2, 0]
    merged = count_ngrams([a], 3).merge(count_ngrams([b], 3))
    joint = count_ngrams([a, b], 3)
    assert np.array_equal(merged.unigram, joint.unigram)
    assert (merged.bigram != joint.bigram).nnz == 0
    joint.save(tmp_path / "t.json")
    back = NgramTable.load(tmp_path / "t.json")
    assert back.to_dict() == joint.to_dict()


def test_unigram_kl_closed_form():
    P = count_ngrams([[0, 1]], 2)
    Q = count_ngrams([[0, 1, 1, 1]], 2)
    assert unigram_kl(P, Q, eps=1e-15) == pytest.approx(0.5 * math.log(4 / 3), abs=1e-9)
    assert unigram_kl(Q, P, eps=1e-15) != pytest.approx(unigram_kl(P, Q, eps=1e-15), abs=1e-3)
    assert unigram_kl(P, P) == 0.0


def test_bigram_kl_deterministic_vs_uniform():
    eps = 1e-6
    P = count_ngrams([[0, 1] * 50], 2)  # 0 -> 1 and 1 -> 0 always
    Q = count_ngrams([[0, 0], [0, 1], [1, 0], [1, 1]], 2)  # uniform successors
    p_hi, p_lo = (1 + eps) / (1 + 2 * eps), eps / (1 + 2 * eps)
    per_context = p_hi * math.log(2 * p_hi) + p_lo * math.log(2 * p_lo)
    assert bigram_kl(P, Q, eps) == pytest.approx(per_context, abs=1e-12)
    assert bigram_kl(P, Q, 1e-15) == pytest.approx(math.log(2), abs=1e-9)


def test_unseen_context_is_uniform():
    # context 2 never appears in P; its conditional is uniform over 3 tokens
    P = count_ngrams([[0, 1]], 3)
    Q = count_ngrams([[2, 2]], 3)
    eps = 1e-12
    q = np.array([eps, eps, 1 + eps]) / (1 + 3 * eps)
    expected = float(np.sum(np.full(3, 1 / 3) * np.log((1 / 3) / q)))
    assert bigram_kl(P, Q, eps) == pytest.approx(expected, rel=1e-12)


def random_table(rng, V, n_seqs=5, max_len=30, concentration=0.3):
    probs = rng.dirichlet(np.full(V, concentration))
    seqs = [rng.choice(V, size=int(rng.integers(1, max_len)), p=probs).tolist() for _ in range(n_seqs)]
    return count_ngrams(seqs, V)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31), st.sampled_from([1e-9, 1e-6, 1e-3]))
def test_kl_matches_dense_oracle(V, seed, eps):
    rng = np.random.default_rng(seed)
    P, Q = random_table(rng, V), random_table(rng, V)
    assert unigram_kl(P, Q, eps) == pytest.approx(dense_unigram_kl(P.unigram, Q.unigram, eps), rel=1e-9, abs=1e-12)
    if Q.n_bigrams:
        got = bigram_kl(P, Q, eps)
        ref = dense_bigram_kl(P.bigram.toarray(), Q.bigram.toarray(), Q.unigram, eps)
        assert got == pytest.approx(max(ref, 0.0), rel=1e-9, abs=1e-12)
        assert got >= 0
    assert unigram_kl(P, Q, eps) >= 0
    assert unigram_kl(P, P, eps) == 0.0


def test_entropy_order_one_and_two():
    t = count_ngrams([[0, 1, 0, 1, 0, 1]], 2)
    assert entropy_floor(t, 1) == pytest.approx(math.log(2))
    assert entropy_floor(t, 2) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        entropy_floor(t, 3)


def test_unigram_entropy_can_sit_below_conditional_entropy():
    # sequence boundaries: every sequence starts with token 0, then one uniform token from 1..5
    seqs = [[0, s] for s in range(1, 6)] * 4
    t = count_ngrams(seqs, 6)
    assert entropy_floor(t, 2) == pytest.approx(math.log(5))
    assert entropy_floor(t, 1) < entropy_floor(t, 2)
    assert entropy_floor(t, 2) <= successor_entropy(t) + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 20), st.integers(0, 2**31))
def test_conditional_entropy_below_successor_entropy(V, seed):
    t = random_table(np.random.default_rng(seed), V, max_len=40)
    if t.n_bigrams:
        assert entropy_floor(t, 2) <= successor_entropy(t) + 1e-12

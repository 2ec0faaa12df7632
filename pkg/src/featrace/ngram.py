"""Unigram and bigram statistics of token streams: counts, KL divergences, entropies.

All logarithms are natural (results in nats). Smoothing adds ``eps`` to every
probability over the shared vocabulary and renormalises, so KL values stay
finite when one distribution has zeros.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .store import TokenShard, read_token_shard

DEFAULT_EPS = 1e-9


@dataclass
class NgramTable:
    vocab_size: int
    unigram: np.ndarray  # (V,) int64
    bigram: sparse.csr_matrix  # (V, V) int64, row = context, column = successor
    n_tokens: int

    def __post_init__(self) -> None:
        self.bigram = sparse.csr_matrix(self.bigram, dtype=np.int64)
        self.bigram.sum_duplicates()
        self.bigram.eliminate_zeros()

    @property
    def n_bigrams(self) -> int:
        return int(self.bigram.sum())

    def merge(self, other: "NgramTable") -> "NgramTable":
        if other.vocab_size != self.vocab_size:
            raise ValueError("vocab sizes differ")
        return NgramTable(self.vocab_size, self.unigram + other.unigram, self.bigram + other.bigram,
                          self.n_tokens + other.n_tokens)

    def unigram_probs(self) -> np.ndarray:
        if self.n_tokens == 0:
            raise ValueError("empty table")
        return self.unigram / self.n_tokens

    def to_dict(self) -> dict:
        coo = self.bigram.tocoo()
        return {
            "vocab_size": self.vocab_size,
            "n_tokens": self.n_tokens,
            "unigram": self.unigram.tolist(),
            "bigram": [coo.row.tolist(), coo.col.tolist(), coo.data.tolist()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NgramTable":
        V = int(d["vocab_size"])
        r, c, v = d["bigram"]
        big = sparse.coo_matrix((np.asarray(v, np.int64), (np.asarray(r, np.int64), np.asarray(c, np.int64))), shape=(V, V))
        return cls(V, np.asarray(d["unigram"], np.int64), big.tocsr(), int(d["n_tokens"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NgramTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _as_sequences(source) -> Iterable[np.ndarray]:
    if isinstance(source, TokenShard):
        yield from source.sequences()
    elif isinstance(source, (str, Path)):
        yield from read_token_shard(source).sequences()
    else:
        yield np.asarray(source, dtype=np.int64)


def count_ngrams(sources: Sequence, vocab_size: int) -> NgramTable:
    """Count unigrams and within-sequence bigrams.

    ``sources`` mixes token-shard paths, :class:`TokenShard` objects and plain
    token sequences (each one sequence). No bigram spans two sequences.
    """
    if vocab_size < 1:
        raise ValueError("vocab_size must be positive")
    uni = np.zeros(vocab_size, np.int64)
    pair_codes = []
    n = 0
    for src in sources:
        for seq in _as_sequences(src):
            seq = np.asarray(seq, dtype=np.int64)
            if seq.size == 0:
                continue
            if seq.min() < 0 or seq.max() >= vocab_size:
                raise ValueError(f"token id outside [0, {vocab_size})")
            uni += np.bincount(seq, minlength=vocab_size)
            n += seq.size
            if seq.size > 1:
                pair_codes.append(seq[:-1] * vocab_size + seq[1:])
    if pair_codes:
        codes, counts = np.unique(np.concatenate(pair_codes), return_counts=True)
        rows, cols = np.divmod(codes, vocab_size)
    else:
        rows = cols = counts = np.zeros(0, np.int64)
    big = sparse.coo_matrix((counts.astype(np.int64), (rows, cols)), shape=(vocab_size, vocab_size)).tocsr()
    return NgramTable(vocab_size, uni, big, n)


def _smooth(p: np.ndarray, eps: float) -> np.ndarray:
    return (p + eps) / (p.sum() + eps * p.size)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def unigram_kl(P: NgramTable, Q: NgramTable, eps: float = DEFAULT_EPS) -> float:
    """``KL(P || Q)`` between smoothed unigram distributions."""
    if P.vocab_size != Q.vocab_size:
        raise ValueError("vocab sizes differ")
    if eps <= 0:
        raise ValueError("eps must be positive")
    return max(0.0, _kl(_smooth(P.unigram_probs(), eps), _smooth(Q.unigram_probs(), eps)))


def _row(table: NgramTable, c: int) -> tuple[np.ndarray, np.ndarray, int]:
    lo, hi = table.bigram.indptr[c], table.bigram.indptr[c + 1]
    return table.bigram.indices[lo:hi], table.bigram.data[lo:hi], int(table.bigram.data[lo:hi].sum())


def bigram_kl(P: NgramTable, Q: NgramTable, eps: float = DEFAULT_EPS) -> float:
    """``sum_c w(c) KL(P(.|c) || Q(.|c))`` with ``w`` = Q's unigram distribution.

    Each conditional is smoothed as ``(freq + eps) / (sum freq + V eps)``; a
    context never seen in a table therefore gets the uniform conditional.
    Successors outside both supports share one smoothed value per side and
    are summed in closed form, so the cost is linear in the number of
    observed bigrams.
    """
    if P.vocab_size != Q.vocab_size:
        raise ValueError("vocab sizes differ")
    if eps <= 0:
        raise ValueError("eps must be positive")
    V = P.vocab_size
    w = Q.unigram_probs()
    total = 0.0
    for c in np.flatnonzero(w):
        pi, pc, pn = _row(P, c)
        qi, qc, qn = _row(Q, c)
        pfreq = pc / pn if pn else pc.astype(np.float64)
        qfreq = qc / qn if qn else qc.astype(np.float64)
        pden = (1.0 if pn else 0.0) + V * eps
        qden = (1.0 if qn else 0.0) + V * eps
        support = np.union1d(pi, qi)
        p = np.full(support.size, eps / pden)
        q = np.full(support.size, eps / qden)
        p[np.searchsorted(support, pi)] += pfreq / pden
        q[np.searchsorted(support, qi)] += qfreq / qden
        rest = V - support.size
        kl_c = float(np.sum(p * np.log(p / q)))
        if rest:
            p0, q0 = eps / pden, eps / qden
            kl_c += rest * p0 * math.log(p0 / q0)
        total += w[c] * kl_c
    return max(0.0, total)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def entropy_floor(table: NgramTable, order: int = 1) -> float:
    """Order 1: unigram entropy ``H(X)``. Order 2: ``H(X_i | X_{i-1})`` under the bigram joint."""
    if order == 1:
        return _entropy(table.unigram_probs())
    if order != 2:
        raise ValueError("order must be 1 or 2")
    total = table.n_bigrams
    if total == 0:
        raise ValueError("table has no bigrams")
    h = 0.0
    big = table.bigram
    for c in range(table.vocab_size):
        lo, hi = big.indptr[c], big.indptr[c + 1]
        if hi == lo:
            continue
        counts = big.data[lo:hi]
        n_c = counts.sum()
        h += (n_c / total) * _entropy(counts / n_c)
    return h


def successor_entropy(table: NgramTable) -> float:
    """Entropy of the successor marginal of the bigram joint.

    This is the marginal that ``entropy_floor(table, 2)`` is guaranteed not
    to exceed; the unigram entropy can differ from it because sequence
    starts are never successors.
    """
    total = table.n_bigrams
    if total == 0:
        raise ValueError("table has no bigrams")
    return _entropy(np.asarray(table.bigram.sum(axis=0)).ravel() / total)

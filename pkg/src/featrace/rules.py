"""Top-activation index and rule-based feature classes.

Rules, evaluated on a feature's top activating samples:

* previous-token: the tokens *before* activating tokens are consistent
  (largest share > 0.8) while the activating tokens themselves are not
  (< 0.3). Tokens are compared after stripping whitespace and case folding.
* induction: at least 20 activations on a token ``A`` whose bigram ``A B``
  already occurred earlier in the sequence, where the feature did not fire
  on that earlier ``A``.
* context-sensitive: more than 4000 activating tokens inside the samples
  but fewer than 2M activations per 100M corpus tokens.

When several rules match, the earlier one in this list wins.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .crosscoder import CrosscoderModel, forward
from .store import AlignedReader, AlignmentError, SnapshotManifest, read_token_shard

PREV_CONSISTENCY = 0.8
SELF_CONSISTENCY = 0.3
INDUCTION_INSTANCES = 20
CONTEXT_IN_SAMPLE = 4000
CONTEXT_TOTAL_CAP = 2_000_000
CONTEXT_CAP_TOKENS = 100_000_000
TOP_SAMPLES = 20
CLASSES = ("previous-token", "induction", "context-sensitive", "none")


@dataclass
class IndexSample:
    shard: int
    sequence: int
    position: int  # shard row of the strongest token
    strength: float
    start: int  # shard row of tokens[0]
    tokens: list[int]
    activations: list[float]  # one per token

    def to_dict(self) -> dict:
        acts = np.asarray(self.activations)
        nz = np.flatnonzero(acts)
        return {
            "shard": self.shard, "sequence": self.sequence, "position": self.position,
            "strength": self.strength, "start": self.start, "tokens": list(self.tokens),
            "act_idx": nz.tolist(), "act_val": acts[nz].tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IndexSample":
        acts = np.zeros(len(d["tokens"]))
        acts[np.asarray(d["act_idx"], dtype=np.int64)] = d["act_val"]
        return cls(int(d["shard"]), int(d["sequence"]), int(d["position"]), float(d["strength"]),
                   int(d["start"]), [int(t) for t in d["tokens"]], acts.tolist())


@dataclass
class IndexEntry:
    feature_id: int
    samples: list[IndexSample] = field(default_factory=list)
    total_count: int = 0  # activating tokens over the whole corpus


@dataclass
class TopActivationIndex:
    entries: dict[int, IndexEntry]
    k: int
    step: int | None
    n_tokens: int
    vocab: list[str] | None = None

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"meta": {"k": self.k, "step": self.step, "n_tokens": self.n_tokens,
                                          "n_features": len(self.entries)}}) + "\n")
            for fid in sorted(self.entries):
                e = self.entries[fid]
                fh.write(json.dumps({"feature_id": fid, "total_count": e.total_count,
                                     "samples": [s.to_dict() for s in e.samples]}) + "\n")

    @classmethod
    def load(cls, path, vocab: list[str] | None = None) -> "TopActivationIndex":
        with open(path, encoding="utf-8") as fh:
            meta = json.loads(fh.readline())["meta"]
            entries = {}
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                entries[int(d["feature_id"])] = IndexEntry(
                    int(d["feature_id"]), [IndexSample.from_dict(s) for s in d["samples"]], int(d["total_count"])
                )
        return cls(entries, int(meta["k"]), meta.get("step"), int(meta["n_tokens"]), vocab)


def load_vocab(path) -> list[str]:
    """A JSON list of token strings indexed by id."""
    vocab = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(vocab, list):
        raise ValueError(f"{path}: vocabulary must be a JSON list of strings")
    return [str(t) for t in vocab]


def _chunks(lengths: Sequence[int], target_rows: int) -> list[tuple[int, int]]:
    """Group consecutive sequences into (first_seq, end_seq) chunks of about ``target_rows`` rows."""
    out, first, rows = [], 0, 0
    for j, n in enumerate(lengths):
        rows += n
        if rows >= target_rows:
            out.append((first, j + 1))
            first, rows = j + 1, 0
    if first < len(lengths):
        out.append((first, len(lengths)))
    return out


def build_top_index(
    model: CrosscoderModel,
    manifest: SnapshotManifest,
    snapshot: int = -1,
    k: int = TOP_SAMPLES,
    chunk_rows: int = 4096,
    vocab: list[str] | None = None,
) -> TopActivationIndex:
    """Top-``k`` sequences per feature ranked by their largest activation at one snapshot.

    Ties keep the earlier (shard, position). Also counts every activating
    token per feature over the whole corpus.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    snap = snapshot % manifest.n_snapshots
    tok_paths = manifest.token_paths()
    counts = manifest.shard_row_counts()
    if len(tok_paths) != len(counts):
        raise AlignmentError(f"{len(tok_paths)} token shards but {len(counts)} activation shards")
    shards = [read_token_shard(p) for p in tok_paths]
    for s, (ts, n) in enumerate(zip(shards, counts)):
        if ts.n_tokens != n:
            raise AlignmentError(f"token shard {s} has {ts.n_tokens} tokens but activation shard has {n} rows")
    L = max((max(ts.seq_lengths) for ts in shards if ts.n_seqs), default=1)
    F = model.n_features
    best = np.full((k, F), -np.inf)
    meta = np.full((k, F, 3), -1, dtype=np.int64)  # shard, sequence, position
    acts = np.zeros((k, L, F), dtype=np.float32)
    total = np.zeros(F, dtype=np.int64)
    offsets = np.cumsum([0, *counts])
    with AlignedReader(manifest) as reader:
        for s, ts in enumerate(shards):
            starts = ts.sequence_starts()
            for lo, hi in _chunks(ts.seq_lengths, chunk_rows):
                row0 = int(starts[lo])
                n = int(starts[hi - 1] + ts.seq_lengths[hi - 1] - row0)
                f = forward(model, reader.read(int(offsets[s]) + row0, n)).f[snap]
                total += (f > 0).sum(axis=0)
                local = (starts[lo:hi] - row0).astype(np.int64)
                seq_max = np.maximum.reduceat(f, local, axis=0)  # (n_seq, F)
                n_seq = hi - lo
                padded = np.zeros((n_seq, L, F), dtype=np.float32)
                arg = np.empty((n_seq, F), dtype=np.int64)
                for j in range(n_seq):
                    seg = f[local[j] : local[j] + ts.seq_lengths[lo + j]]
                    padded[j, : seg.shape[0]] = seg
                    arg[j] = seg.argmax(axis=0) + local[j] + row0
                cand = np.where(seq_max > 0, seq_max, -np.inf)
                cmeta = np.stack(
                    [np.full((n_seq, F), s), np.broadcast_to((np.arange(lo, hi))[:, None], (n_seq, F)), arg], axis=-1
                )
                score = np.concatenate([best, cand])
                order = np.argsort(-score, axis=0, kind="stable")[:k]  # (k, F)
                best = np.take_along_axis(score, order, axis=0)
                meta = np.take_along_axis(np.concatenate([meta, cmeta]), order[:, :, None], axis=0)
                allacts = np.concatenate([acts, padded])
                acts = np.take_along_axis(allacts, order[:, None, :], axis=0)
    entries = {}
    for i in range(F):
        samples = []
        for r in range(k):
            if not np.isfinite(best[r, i]):
                break
            s, seq, pos = (int(v) for v in meta[r, i])
            start = int(shards[s].sequence_starts()[seq])
            length = shards[s].seq_lengths[seq]
            toks = shards[s].token_ids[start : start + length]
            samples.append(IndexSample(s, seq, pos, float(best[r, i]), start, [int(t) for t in toks],
                                       acts[r, :length, i].astype(np.float64).tolist()))
        entries[i] = IndexEntry(i, samples, int(total[i]))
    return TopActivationIndex(entries, k, manifest.steps[snap], int(offsets[-1]), vocab)


# ---------------------------------------------------------------------------
# rules
# ---------------------------------------------------------------------------


def stem(token: str) -> str:
    """Whitespace strip plus case folding."""
    return token.strip().casefold()


def _token_text(tok: int, vocab: Sequence[str] | None) -> str:
    if vocab is None:
        return str(tok)
    return vocab[tok] if 0 <= tok < len(vocab) else f"<{tok}>"


def consistency(tokens: Sequence[str]) -> float:
    """Share of the most common item (0 for an empty list)."""
    if not tokens:
        return 0.0
    return Counter(tokens).most_common(1)[0][1] / len(tokens)


@dataclass
class RuleFragment:
    positive: bool
    evidence: dict


def classify_previous_token(
    entry: IndexEntry, vocab: Sequence[str] | None = None, stemming: bool = True, top: int = TOP_SAMPLES
) -> RuleFragment:
    norm = stem if stemming else (lambda t: t)
    prev, cur = [], []
    for s in entry.samples[:top]:
        for p in np.flatnonzero(np.asarray(s.activations) > 0):
            if p == 0:
                continue
            prev.append(norm(_token_text(s.tokens[p - 1], vocab)))
            cur.append(norm(_token_text(s.tokens[p], vocab)))
    pc, sc = consistency(prev), consistency(cur)
    return RuleFragment(
        positive=bool(prev) and pc > PREV_CONSISTENCY and sc < SELF_CONSISTENCY,
        evidence={"prev_consistency": pc, "self_consistency": sc, "n_activating": len(cur)},
    )


def induction_instances(sample: IndexSample) -> int:
    toks = sample.tokens
    acts = np.asarray(sample.activations)
    first_seen: dict[tuple[int, int], int] = {}
    for q in range(len(toks) - 1):
        first_seen.setdefault((toks[q], toks[q + 1]), q)
    n = 0
    for p in np.flatnonzero(acts > 0):
        if p + 1 >= len(toks):
            continue
        q = first_seen.get((toks[p], toks[p + 1]))
        if q is not None and q < p and acts[q] <= 0:
            n += 1
    return n


def classify_induction(entry: IndexEntry, top: int = TOP_SAMPLES) -> RuleFragment:
    n = sum(induction_instances(s) for s in entry.samples[:top])
    return RuleFragment(positive=n >= INDUCTION_INSTANCES, evidence={"induction_instances": n})


def context_cap(n_tokens: int) -> float:
    return CONTEXT_TOTAL_CAP * n_tokens / CONTEXT_CAP_TOKENS


def classify_context_sensitive(
    entry: IndexEntry, total_activation_count: int, n_tokens: int, top: int = TOP_SAMPLES
) -> RuleFragment:
    in_sample = int(sum(np.count_nonzero(np.asarray(s.activations) > 0) for s in entry.samples[:top]))
    cap = context_cap(n_tokens)
    return RuleFragment(
        positive=in_sample > CONTEXT_IN_SAMPLE and total_activation_count < cap,
        evidence={"in_sample_count": in_sample, "total_count": int(total_activation_count), "total_cap": cap},
    )


@dataclass
class RuleVerdict:
    feature_id: int
    kind: str
    evidence: dict


def classify_feature(
    entry: IndexEntry,
    n_tokens: int,
    total_activation_count: int | None = None,
    vocab: Sequence[str] | None = None,
    stemming: bool = True,
) -> RuleVerdict:
    total = entry.total_count if total_activation_count is None else total_activation_count
    prev = classify_previous_token(entry, vocab, stemming)
    ind = classify_induction(entry)
    ctx = classify_context_sensitive(entry, total, n_tokens)
    evidence = {**prev.evidence, **ind.evidence, **ctx.evidence}
    for kind, frag in (("previous-token", prev), ("induction", ind), ("context-sensitive", ctx)):
        if frag.positive:
            return RuleVerdict(entry.feature_id, kind, evidence)
    return RuleVerdict(entry.feature_id, "none", evidence)


def classify_index(index: TopActivationIndex, stemming: bool = True) -> list[RuleVerdict]:
    return [
        classify_feature(index.entries[f], index.n_tokens, vocab=index.vocab, stemming=stemming)
        for f in sorted(index.entries)
    ]

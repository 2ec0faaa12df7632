"""Synthetic multi-snapshot activations with planted features.

For snapshot ``k`` and token ``x``::

    a_k(x) = sum_i s_i(k) c_i(x) g_i + rho(k) U u(x) + sigma * eta_k(x)

``g_i`` are unit directions, ``c_i(x) >= 0`` fires with probability ``p_i``
and an exponential magnitude, ``U u(x)`` is a dense low-rank component and
``eta_k`` is per-snapshot Gaussian noise. Strength schedules ``s_i`` are
either decaying ("initialization") or log-step sigmoids ("emergent").
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .crosscoder import CrosscoderModel
from .store import (
    SnapshotEntry,
    SnapshotManifest,
    compute_norm_scalar,
    write_activation_shard,
    write_token_shard,
)


@dataclass
class SynthConfig:
    d_model: int = 64
    n_true_features: int = 100
    steps: tuple[int, ...] = (0, 128, 1000, 10000, 100000)
    n_tokens: int = 500_000
    seq_len: int = 128
    shard_rows: int = 65536
    vocab_size: int = 1024
    init_fraction: float = 0.2
    p_range: tuple[float, float] = (0.005, 0.04)
    magnitude_mean: float = 1.0
    # emergent onsets and initialization decay points, as step ranges (log-uniform)
    onset_range: tuple[float, float] | None = None
    decay_range: tuple[float, float] | None = None
    steepness_range: tuple[float, float] = (1.5, 4.0)
    dense_rank: int = 4
    rho_early: float = 0.5
    rho_late: float = 0.1
    rho_turn: float = 1000.0
    sigma: float = 0.02
    # explicit overrides (one row per feature / one value per snapshot)
    schedules: list[list[float]] | None = None
    firing_probs: list[float] | None = None
    rho: list[float] | None = None

    def __post_init__(self) -> None:
        self.steps = tuple(int(s) for s in self.steps)
        if self.d_model < 8:
            raise ValueError("d_model must be >= 8")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("steps must be strictly increasing")
        if self.shard_rows % self.seq_len:
            raise ValueError("shard_rows must be a multiple of seq_len")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for key in ("steps", "p_range", "onset_range", "decay_range", "steepness_range"):
            if known.get(key) is not None:
                known[key] = tuple(known[key])
        return cls(**known)

    def to_dict(self) -> dict:
        # JSON-shaped: tuples become lists
        return json.loads(json.dumps(asdict(self)))


@dataclass
class GroundTruth:
    directions: np.ndarray  # (N, d) unit rows
    schedules: np.ndarray  # (N, K) in [0, 1]
    firing_probs: np.ndarray  # (N,)
    kinds: list[str]  # "initialization" | "emergent"
    rho: np.ndarray  # (K,)
    dense_basis: np.ndarray  # (d, r)
    sigma: float
    steps: list[int]
    magnitude_mean: float = 1.0
    seed: int = 0
    config: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.directions.shape[0]

    def to_dict(self) -> dict:
        return {
            "directions": self.directions.tolist(),
            "schedules": self.schedules.tolist(),
            "firing_probs": self.firing_probs.tolist(),
            "kinds": list(self.kinds),
            "rho": self.rho.tolist(),
            "dense_basis": self.dense_basis.tolist(),
            "sigma": self.sigma,
            "steps": list(self.steps),
            "magnitude_mean": self.magnitude_mean,
            "seed": self.seed,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            directions=np.asarray(d["directions"], dtype=np.float64),
            schedules=np.asarray(d["schedules"], dtype=np.float64),
            firing_probs=np.asarray(d["firing_probs"], dtype=np.float64),
            kinds=list(d["kinds"]),
            rho=np.asarray(d["rho"], dtype=np.float64),
            dense_basis=np.asarray(d["dense_basis"], dtype=np.float64).reshape(len(d["directions"][0]), -1),
            sigma=float(d["sigma"]),
            steps=[int(s) for s in d["steps"]],
            magnitude_mean=float(d.get("magnitude_mean", 1.0)),
            seed=int(d.get("seed", 0)),
            config=d.get("config", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def make_ground_truth(config: SynthConfig, seed: int) -> GroundTruth:
    rng = np.random.default_rng([seed, 0])
    N, d = config.n_true_features, config.d_model
    K = len(config.steps)
    G = rng.standard_normal((N, d))
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    logt = np.log1p(np.asarray(config.steps, dtype=np.float64))

    if config.firing_probs is not None:
        p = np.asarray(config.firing_probs, dtype=np.float64)
    else:
        lo, hi = config.p_range
        p = np.exp(rng.uniform(math.log(lo), math.log(hi), N))

    n_init = int(round(config.init_fraction * N))
    kinds = ["initialization"] * n_init + ["emergent"] * (N - n_init)
    if config.schedules is not None:
        S = np.asarray(config.schedules, dtype=np.float64)
        if S.shape != (N, K):
            raise ValueError(f"schedules must have shape {(N, K)}")
        kinds = ["initialization" if S[i, 0] >= 0.5 * S[i].max() and S[i].max() > 0 else "emergent" for i in range(N)]
    else:
        S = np.empty((N, K))
        lo_s, hi_s = config.steepness_range
        inner = config.steps[1:-1] or config.steps
        onset_lo, onset_hi = config.onset_range or (max(inner[0], 1), max(inner[-1], 2))
        decay_lo, decay_hi = config.decay_range or (max(config.steps[1] if K > 1 else 1, 1), max(inner[-1], 2))
        for i in range(N):
            beta = rng.uniform(lo_s, hi_s)
            if kinds[i] == "initialization":
                c = rng.uniform(math.log1p(decay_lo), math.log1p(decay_hi))
                S[i] = 1.0 - _sigmoid(beta * (logt - c))
            else:
                c = rng.uniform(math.log1p(onset_lo), math.log1p(onset_hi))
                S[i] = _sigmoid(beta * (logt - c))
        S = np.clip(S, 0.0, 1.0)

    if config.rho is not None:
        rho = np.asarray(config.rho, dtype=np.float64)
    else:
        w = _sigmoid(2.0 * (logt - math.log1p(config.rho_turn)))
        rho = config.rho_early + (config.rho_late - config.rho_early) * w
    U, _ = np.linalg.qr(rng.standard_normal((d, max(config.dense_rank, 1))))
    U = U[:, : config.dense_rank]
    return GroundTruth(
        directions=G,
        schedules=S,
        firing_probs=p,
        kinds=kinds,
        rho=rho,
        dense_basis=U,
        sigma=config.sigma,
        steps=list(config.steps),
        magnitude_mean=config.magnitude_mean,
        seed=seed,
        config=config.to_dict(),
    )


def sample_codes(rng: np.random.Generator, n: int, truth: GroundTruth) -> np.ndarray:
    """Feature coefficients ``c_i(x)``, shape ``(n, N)``."""
    fire = rng.random((n, truth.n_features)) < truth.firing_probs
    mags = rng.exponential(truth.magnitude_mean, (n, truth.n_features))
    return np.where(fire, mags, 0.0)


def render_rows(truth: GroundTruth, codes: np.ndarray, dense: np.ndarray, noise: np.ndarray, k: int) -> np.ndarray:
    """Activations at snapshot ``k`` for given codes, dense coefficients and noise."""
    a = (codes * truth.schedules[:, k]) @ truth.directions
    if truth.dense_basis.size:
        a += truth.rho[k] * (dense @ truth.dense_basis.T)
    a += truth.sigma * noise
    return a


def generate_snapshots(config: SynthConfig, seed: int, out_dir: str | Path) -> tuple[SnapshotManifest, GroundTruth]:
    """Write shards, ``manifest.json``, ``ground_truth.json`` and ``vocab.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = make_ground_truth(config, seed)
    K = len(config.steps)
    n_shards = max(1, math.ceil(config.n_tokens / config.shard_rows))
    shard_seeds = np.random.default_rng([seed, 1]).integers(0, 2**63 - 1, n_shards)
    act_paths = [[] for _ in range(K)]
    tok_paths = []
    for s in range(n_shards):
        n = min(config.shard_rows, config.n_tokens - s * config.shard_rows)
        rng = np.random.default_rng(int(shard_seeds[s]))
        codes = sample_codes(rng, n, truth)
        dense = rng.standard_normal((n, truth.dense_basis.shape[1]))
        tokens = rng.integers(0, config.vocab_size, n)
        for k in range(K):
            noise = rng.standard_normal((n, config.d_model))
            rows = render_rows(truth, codes, dense, noise, k)
            name = f"snap{k:02d}_shard{s:03d}.acts"
            write_activation_shard(out / name, rows)
            act_paths[k].append(name)
        seqs = [tokens[i : i + config.seq_len] for i in range(0, n, config.seq_len)]
        tname = f"shard{s:03d}.toks"
        write_token_shard(out / tname, seqs)
        tok_paths.append(tname)
    snaps = []
    for k in range(K):
        scalar = compute_norm_scalar([out / p for p in act_paths[k]], config.d_model)
        snaps.append(SnapshotEntry(step=config.steps[k], activation_shard_paths=act_paths[k], norm_scalar=scalar))
    manifest = SnapshotManifest(
        d_model=config.d_model,
        snapshots=snaps,
        token_shard_paths=tok_paths,
        tokenizer_name="synthetic",
        root=out,
    )
    manifest.save(out / "manifest.json")
    truth.save(out / "ground_truth.json")
    (out / "vocab.json").write_text(json.dumps([f" t{i}" for i in range(config.vocab_size)]) + "\n")
    return manifest, truth


# ---------------------------------------------------------------------------
# matching learned features to planted ones
# ---------------------------------------------------------------------------


@dataclass
class MatchReport:
    assignment: dict[int, int]  # true feature -> crosscoder feature
    cosines: np.ndarray  # (N,) cosine of each true feature's match (nan if unmatched)
    pearsons: np.ndarray  # (N,) Pearson(norm trajectory, schedule) (nan where undefined)

    def fraction_matched(self, min_cosine: float = 0.8) -> float:
        return float(np.mean(np.nan_to_num(self.cosines, nan=-1.0) >= min_cosine))

    def median_pearson(self, min_cosine: float = 0.8) -> float:
        ok = (np.nan_to_num(self.cosines, nan=-1.0) >= min_cosine) & np.isfinite(self.pearsons)
        return float(np.median(self.pearsons[ok])) if ok.any() else float("nan")


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    den = math.sqrt(float(x @ x) * float(y @ y))
    return float(x @ y) / den if den > 0 else float("nan")


def match_features(
    model: CrosscoderModel,
    truth: GroundTruth,
    norm_scalars: Sequence[float] | None = None,
) -> MatchReport:
    """Greedy one-to-one matching by cosine at each learned feature's peak snapshot.

    Learned decoder norms are divided by ``norm_scalars`` (when given) so the
    trajectory lives in the same units as the planted schedules.
    """
    if model.n_features == 0:
        raise ValueError("empty checkpoint")
    W = model.W_dec.astype(np.float64)
    norms = np.sqrt(np.einsum("kdf,kdf->kf", W, W))
    if norm_scalars is not None:
        norms = norms / np.asarray(norm_scalars, dtype=np.float64)[:, None]
    peak = norms.argmax(axis=0)
    cols = W[peak, :, np.arange(model.n_features)]  # (F, d)
    cn = np.linalg.norm(cols, axis=1)
    live = cn > 0
    unit = np.zeros_like(cols)
    unit[live] = cols[live] / cn[live, None]
    cos = truth.directions @ unit.T  # (N, F)
    cos[:, ~live] = -np.inf
    N = truth.n_features
    order = np.argsort(-cos, axis=None, kind="stable")
    assignment: dict[int, int] = {}
    used: set[int] = set()
    for flat in order:
        i, j = divmod(int(flat), model.n_features)
        if i in assignment or j in used or not np.isfinite(cos[i, j]):
            continue
        assignment[i] = j
        used.add(j)
        if len(assignment) == min(N, model.n_features):
            break
    cosines = np.full(N, np.nan)
    pearsons = np.full(N, np.nan)
    for i, j in assignment.items():
        cosines[i] = cos[i, j]
        pearsons[i] = _pearson(norms[:, j], truth.schedules[i])
    return MatchReport(assignment=assignment, cosines=cosines, pearsons=pearsons)


# ---------------------------------------------------------------------------
# synthetic attribution task
# ---------------------------------------------------------------------------


@dataclass
class TaskConfig:
    n_causal: int = 10
    n_samples: int = 200
    fire_prob: float = 0.1
    magnitude_offset: float = 0.5
    min_final_strength: float = 0.9


def generate_task(
    truth: GroundTruth,
    manifest: SnapshotManifest,
    config: TaskConfig,
    seed: int,
    out_dir: str | Path,
) -> dict:
    """Clean/corrupted sample pairs whose only difference is a set of causal features.

    Writes ``task_manifest.json`` (normalised with the training manifest's
    scalars), ``task.jsonl`` and ``head.json``; returns the causal feature ids
    and the paths.
    """
    from .attribution import MetricHead

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 2])
    final = truth.schedules[:, -1]
    eligible = np.flatnonzero(final >= config.min_final_strength)
    if eligible.size < config.n_causal:
        eligible = np.argsort(-final, kind="stable")[: max(config.n_causal, 1)]
    causal = np.sort(rng.choice(eligible, size=config.n_causal, replace=False))

    n = config.n_samples
    codes = sample_codes(rng, n, truth)
    codes[:, causal] = 0.0
    fire = rng.random((n, causal.size)) < config.fire_prob
    empty = ~fire.any(axis=1)
    if causal.size:
        fire[empty, rng.integers(0, causal.size, int(empty.sum()))] = True
    mags = config.magnitude_offset + rng.exponential(truth.magnitude_mean, (n, causal.size))
    clean_codes = codes.copy()
    clean_codes[:, causal] = np.where(fire, mags, 0.0)
    dense = rng.standard_normal((n, truth.dense_basis.shape[1]))
    K = len(truth.steps)
    names = []
    for k in range(K):
        noise = rng.standard_normal((n, truth.directions.shape[1]))
        clean = render_rows(truth, clean_codes, dense, noise, k)
        corrupt = render_rows(truth, codes, dense, noise, k)
        rows = np.empty((2 * n, clean.shape[1]))
        rows[0::2] = clean
        rows[1::2] = corrupt
        name = f"task_snap{k:02d}.acts"
        write_activation_shard(out / name, rows)
        names.append(name)
    task_manifest = SnapshotManifest(
        d_model=manifest.d_model,
        snapshots=[
            SnapshotEntry(step=s.step, activation_shard_paths=[names[k]], norm_scalar=s.norm_scalar)
            for k, s in enumerate(manifest.snapshots)
        ],
        tokenizer_name=manifest.tokenizer_name,
        root=out,
    )
    task_manifest.save(out / "task_manifest.json")
    with open(out / "task.jsonl", "w", encoding="utf-8") as fh:
        for i in range(n):
            active = [int(c) for c, on in zip(causal, fire[i]) if on]
            fh.write(json.dumps({"clean_row": 2 * i, "corrupted_row": 2 * i + 1,
                                 "label": f"causal:{active}", "corrupted_label": "none"}) + "\n")
    v = truth.directions[causal].sum(axis=0)
    v /= np.linalg.norm(v) or 1.0
    head = MetricHead.affine(v, 0.0)
    head.save(out / "head.json")
    info = {
        "causal_features": causal.tolist(),
        "task_manifest": str(out / "task_manifest.json"),
        "task_file": str(out / "task.jsonl"),
        "head": str(out / "head.json"),
    }
    (out / "task_truth.json").write_text(json.dumps(info, indent=1) + "\n")
    return info


# ---------------------------------------------------------------------------
# constructed streams for the rule-based classifiers
# ---------------------------------------------------------------------------


def rule_streams(seed: int = 0, per_class: int = 20, vocab_size: int = 2000):
    """Top-activation index entries with known classes.

    Returns ``(entries, labels, total_counts, n_tokens, vocab)`` where labels
    are one of ``previous-token``, ``induction``, ``context-sensitive`` or
    ``none``. Negatives include bigram features, features firing on every
    ``[A][B]`` occurrence, ubiquitous positional features and plain sparse
    features.
    """
    from .rules import IndexEntry, IndexSample

    rng = np.random.default_rng(seed)
    special = [" the", "The", "the ", " THE"]
    vocab = [f" w{i}" for i in range(vocab_size)] + special
    the_ids = list(range(vocab_size, vocab_size + len(special)))
    n_tokens = 10_000_000
    entries, labels, totals = [], [], {}
    fid = 0

    def add(samples, label, total):
        nonlocal fid
        samples.sort(key=lambda s: -s.strength)
        entries.append(IndexEntry(feature_id=fid, samples=samples))
        labels.append(label)
        totals[fid] = int(total)
        fid += 1

    def make_sample(seq_i, toks, acts):
        acts = np.asarray(acts, dtype=np.float64)
        pos = int(np.argmax(acts))
        return IndexSample(shard=0, sequence=seq_i, position=pos, strength=float(acts[pos]),
                           start=0, tokens=[int(t) for t in toks], activations=acts.tolist())

    def rand_tokens(n):
        return rng.integers(0, vocab_size, n)

    # previous-token: fires on varied tokens that follow some spelling of "the"
    for _ in range(per_class):
        samples = []
        for j in range(20):
            toks = rand_tokens(64)
            acts = np.zeros(64)
            for p in rng.choice(np.arange(1, 63), size=3, replace=False):
                toks[p - 1] = rng.choice(the_ids)
                acts[p] = rng.uniform(1, 5)
            # a little off-pattern firing keeps consistency below 1
            if rng.random() < 0.3:
                acts[rng.integers(1, 64)] = rng.uniform(0.1, 1)
            samples.append(make_sample(j, toks, acts))
        add(samples, "previous-token", rng.integers(1000, 50000))

    # bigram features: previous token and activating token both fixed -> not previous-token
    for _ in range(per_class):
        a_tok = int(rng.integers(0, vocab_size))
        samples = []
        for j in range(20):
            toks = rand_tokens(64)
            acts = np.zeros(64)
            for p in rng.choice(np.arange(1, 63), size=3, replace=False):
                toks[p - 1] = the_ids[0]
                toks[p] = a_tok
                acts[p] = rng.uniform(1, 5)
            samples.append(make_sample(j, toks, acts))
        add(samples, "none", rng.integers(1000, 50000))

    def induction_seq(fire_first: bool, n_patterns: int = 2):
        L = 96
        toks = rand_tokens(L)
        acts = np.zeros(L)
        for r in range(n_patterns):
            A, B = rng.integers(0, vocab_size, 2)
            p1 = 4 + 40 * r + int(rng.integers(0, 10))
            p2 = p1 + 12 + int(rng.integers(0, 10))
            toks[p1], toks[p1 + 1] = A, B
            toks[p2], toks[p2 + 1] = A, B
            acts[p2] = rng.uniform(2, 6)
            if fire_first:
                acts[p1] = rng.uniform(2, 6)
        return toks, acts

    for _ in range(per_class):
        samples = [make_sample(j, *induction_seq(False)) for j in range(20)]
        add(samples, "induction", rng.integers(1000, 50000))

    for _ in range(per_class):
        samples = [make_sample(j, *induction_seq(True)) for j in range(20)]
        add(samples, "none", rng.integers(1000, 50000))

    # context-sensitive: long samples with dense firing, globally rare
    for _ in range(per_class):
        samples = []
        for j in range(20):
            L = 400
            toks = rand_tokens(L)
            acts = np.where(rng.random(L) < 0.7, rng.uniform(0.5, 3, L), 0.0)
            samples.append(make_sample(j, toks, acts))
        add(samples, "context-sensitive", rng.integers(20_000, 150_000))

    # positional / bias features: dense everywhere, globally frequent
    for _ in range(per_class):
        samples = []
        for j in range(20):
            L = 400
            toks = rand_tokens(L)
            acts = rng.uniform(0.5, 3, L)
            samples.append(make_sample(j, toks, acts))
        add(samples, "none", int(0.05 * n_tokens))

    # plain sparse features
    for _ in range(per_class):
        samples = []
        for j in range(20):
            toks = rand_tokens(64)
            acts = np.zeros(64)
            acts[rng.choice(64, size=2, replace=False)] = rng.uniform(1, 5, 2)
            samples.append(make_sample(j, toks, acts))
        add(samples, "none", rng.integers(1000, 50000))

    return entries, labels, totals, n_tokens, vocab

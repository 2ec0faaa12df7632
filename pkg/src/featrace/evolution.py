"""Decoder-norm trajectories and the statistics built on them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .crosscoder import CrosscoderModel

LIFETIME_THRESHOLD = 0.3
INIT_FRACTION = 0.5
ONSET_FRACTION = 0.1
PROJECTION_FLOOR = 0.05
SPLIT_COSINE = 0.7


@dataclass
class FeatureTrajectory:
    feature_id: int
    steps: list[int]
    norms: np.ndarray  # (K,)
    directions: np.ndarray  # (K, d), unit rows where norm > 0, zero otherwise

    @property
    def rescaled(self) -> np.ndarray:
        peak = self.norms.max() if self.norms.size else 0.0
        if peak <= 0:
            return np.zeros_like(self.norms)
        return self.norms / peak


def decoder_norm_matrix(model: CrosscoderModel) -> np.ndarray:
    """``(K, F)`` column norms in float64."""
    W = model.W_dec.astype(np.float64)
    return np.sqrt(np.einsum("kdf,kdf->kf", W, W))


def unit_directions(model: CrosscoderModel) -> np.ndarray:
    """``(K, F, d)`` unit decoder columns; zero columns stay zero."""
    W = model.W_dec.astype(np.float64).transpose(0, 2, 1)
    n = np.linalg.norm(W, axis=2, keepdims=True)
    return np.divide(W, n, out=np.zeros_like(W), where=n > 0)


def trajectories(model: CrosscoderModel, features: Iterable[int] | None = None) -> list[FeatureTrajectory]:
    norms = decoder_norm_matrix(model)
    dirs = unit_directions(model)
    ids = range(model.n_features) if features is None else features
    return [
        FeatureTrajectory(feature_id=int(i), steps=list(model.steps), norms=norms[:, i].copy(), directions=dirs[:, i, :].copy())
        for i in ids
    ]


def lifetime(traj: FeatureTrajectory, threshold: float = LIFETIME_THRESHOLD, rescaled: bool = True) -> int:
    """Number of snapshots whose (rescaled by default) norm is strictly above ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    vals = traj.rescaled if rescaled else traj.norms
    return int(np.sum(vals > threshold))


@dataclass
class EvolutionStats:
    feature_id: int
    peak_index: int
    peak_step: int
    kind: str  # "initialization" | "emergent"
    onset_index: int | None
    onset_step: int | None
    steepness: int | None
    lifetime: int


def classify_and_peak(traj: FeatureTrajectory, lifetime_threshold: float = LIFETIME_THRESHOLD) -> EvolutionStats:
    """Peak snapshot, initialization/emergent class and emergence onset."""
    norms = traj.norms
    peak_i = int(np.argmax(norms))  # first maximum on ties
    peak = float(norms[peak_i])
    if norms[0] >= INIT_FRACTION * peak:
        kind, onset = "initialization", None
    else:
        kind = "emergent"
        onset = int(np.flatnonzero(norms > ONSET_FRACTION * peak)[0])
    return EvolutionStats(
        feature_id=traj.feature_id,
        peak_index=peak_i,
        peak_step=traj.steps[peak_i],
        kind=kind,
        onset_index=onset,
        onset_step=None if onset is None else traj.steps[onset],
        steepness=None if onset is None else peak_i - onset,
        lifetime=lifetime(traj, lifetime_threshold),
    )


def projection_matrix(
    trajs: Sequence[FeatureTrajectory], mode: str = "mean", floor: float = PROJECTION_FLOOR
) -> np.ndarray:
    """Cross-snapshot cosine matrix of decoder directions.

    ``per-feature`` needs exactly one trajectory and returns its ``(K, K)``
    matrix. ``mean`` averages, entry by entry, over features whose rescaled
    norm exceeds ``floor`` at both snapshots; entries with no eligible
    feature are NaN.
    """
    if not trajs:
        raise ValueError("no trajectories")
    if mode == "per-feature":
        if len(trajs) != 1:
            raise ValueError("per-feature mode takes one trajectory")
        t = trajs[0]
        if not np.any(t.norms > 0):
            raise ValueError("feature has zero norm at every snapshot")
        return t.directions @ t.directions.T
    if mode != "mean":
        raise ValueError(f"unknown mode {mode!r}")
    D = np.stack([t.directions for t in trajs])  # (N, K, d)
    R = np.stack([t.rescaled for t in trajs])  # (N, K)
    elig = (R > floor).astype(np.float64)
    pair = np.einsum("nj,nk->jk", elig, elig)
    if not np.any(pair > 0):
        raise ValueError("no feature is eligible at any snapshot pair")
    sums = np.einsum("njd,nkd,nj,nk->jk", D, D, elig, elig)
    out = np.full(pair.shape, np.nan)
    np.divide(sums, pair, out=out, where=pair > 0)
    return out


@dataclass
class Dimensionality:
    per_feature: np.ndarray  # (F,)
    total_ratio: float


def feature_dimensionality(model: CrosscoderModel, snapshot: int) -> Dimensionality:
    """``D_i = |W_i|^2 / sum_j (What_i . W_j)^2`` and ``sum_i D_i / d_model``."""
    W = model.W_dec[snapshot].astype(np.float64)  # (d, F)
    n = np.linalg.norm(W, axis=0)
    live = n > 0
    U = np.divide(W, n, out=np.zeros_like(W), where=live)
    G = U.T @ W  # G[i, j] = What_i . W_j
    den = np.einsum("ij,ij->i", G, G)
    D = np.zeros(W.shape[1])
    D[live] = n[live] ** 2 / den[live]
    return Dimensionality(per_feature=D, total_ratio=float(D.sum() / W.shape[0]))


@dataclass(frozen=True)
class SplitMatch:
    feature: int
    seed_snapshot: int
    snapshot: int
    cosine: float


def splitting_search(
    model: CrosscoderModel, seed_feature: int, cos_threshold: float = SPLIT_COSINE
) -> list[SplitMatch]:
    """Decoder columns (any feature, any snapshot) close to any of the seed's columns.

    Results are sorted by descending cosine, then feature and snapshots.
    """
    if not 0 < cos_threshold <= 1:
        raise ValueError("cos_threshold must be in (0, 1]")
    U = unit_directions(model)  # (K, F, d)
    norms = decoder_norm_matrix(model)
    seed_live = np.flatnonzero(norms[:, seed_feature] > 0)
    if seed_live.size == 0:
        raise ValueError(f"feature {seed_feature} has zero norm at every snapshot")
    out = []
    for s in seed_live:
        cos = U @ U[s, seed_feature]  # (K, F)
        cos[norms == 0] = -np.inf
        ks, fs = np.nonzero(cos > cos_threshold)
        for k, f in zip(ks, fs):
            if f == seed_feature and k == s:
                continue
            out.append(SplitMatch(int(f), int(s), int(k), float(cos[k, f])))
    out.sort(key=lambda m: (-m.cosine, m.feature, m.seed_snapshot, m.snapshot))
    return out

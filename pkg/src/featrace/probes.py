"""Logistic probes for crosscoder-feature firing, and their link to decoder norms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .crosscoder import CrosscoderModel, forward


@dataclass
class ProbeModel:
    w: np.ndarray
    b: float
    feature_id: int | None = None
    step: int | None = None


@dataclass
class ProbeResult:
    probe: ProbeModel
    bce_train: float
    bce_heldout: float
    degenerate: bool
    n_pos: int
    n_neg: int
    history: list[float] = field(default_factory=list)  # training BCE after each epoch


def _bce(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float) -> float:
    logits = X @ w + b
    # log(1 + exp(-s)) for y = 1, log(1 + exp(s)) for y = 0, computed stably
    s = np.where(y > 0, -logits, logits)
    return float(np.mean(np.logaddexp(0.0, s)))


def _bce_grad(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float) -> tuple[np.ndarray, float]:
    p = 0.5 * (1.0 + np.tanh(0.5 * (X @ w + b)))
    r = (p - y) / len(y)
    return X.T @ r, float(r.sum())


def split_indices(y: np.ndarray, holdout: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/held-out split."""
    train, test = [], []
    for cls in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == cls))
        n_test = int(round(holdout * idx.size))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def subsample_negatives(y: np.ndarray, max_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Row indices keeping all positives and at most ``max_ratio`` negatives per positive."""
    pos = np.flatnonzero(y > 0)
    neg = np.flatnonzero(y <= 0)
    if pos.size and neg.size > max_ratio * pos.size:
        neg = rng.choice(neg, size=int(max_ratio * pos.size), replace=False)
    return np.sort(np.concatenate([pos, neg]))


def train_probe(
    X: np.ndarray,
    y: np.ndarray,
    epochs: int = 200,
    lr: float = 0.05,
    holdout: float = 0.1,
    max_neg_ratio: float = 10.0,
    seed: int = 0,
    betas: tuple[float, float] = (0.9, 0.999),
) -> ProbeResult:
    """Full-batch logistic regression trained with Adam on binary cross-entropy.

    Every epoch proposes an Adam step and halves it until the training BCE
    does not increase, so the training loss is monotone. Reported BCE values
    are means (nats) on the training and held-out splits.
    """
    X = np.asarray(X, dtype=np.float64)
    y = (np.asarray(y) > 0).astype(np.float64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("need a non-empty (n, d) matrix and n labels")
    rng = np.random.default_rng(seed)
    keep = subsample_negatives(y, max_neg_ratio, rng)
    X, y = X[keep], y[keep]
    tr, te = split_indices(y, holdout, rng)
    if te.size == 0:
        te = tr
    Xtr, ytr = X[tr], y[tr]
    degenerate = ytr.min() == ytr.max()
    w = np.zeros(X.shape[1])
    b = 0.0
    m_w, v_w = np.zeros_like(w), np.zeros_like(w)
    m_b = v_b = 0.0
    b1, b2 = betas
    loss = _bce(Xtr, ytr, w, b)
    history = []
    for t in range(1, epochs + 1):
        gw, gb = _bce_grad(Xtr, ytr, w, b)
        m_w = b1 * m_w + (1 - b1) * gw
        v_w = b2 * v_w + (1 - b2) * gw * gw
        m_b = b1 * m_b + (1 - b1) * gb
        v_b = b2 * v_b + (1 - b2) * gb * gb
        c1, c2 = 1 - b1**t, 1 - b2**t
        dw = (m_w / c1) / (np.sqrt(v_w / c2) + 1e-8)
        db = (m_b / c1) / (math.sqrt(v_b / c2) + 1e-8)
        step = lr
        for _ in range(30):
            w_new, b_new = w - step * dw, b - step * db
            new_loss = _bce(Xtr, ytr, w_new, b_new)
            if new_loss <= loss:
                w, b, loss = w_new, b_new, new_loss
                break
            step *= 0.5
        history.append(loss)
    return ProbeResult(
        probe=ProbeModel(w=w, b=float(b)),
        bce_train=loss,
        bce_heldout=_bce(X[te], y[te], w, b),
        degenerate=bool(degenerate),
        n_pos=int(y.sum()),
        n_neg=int(len(y) - y.sum()),
        history=history,
    )


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length series")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = float(dx @ dx), float(dy @ dy)
    if sx == 0 or sy == 0:
        raise ValueError("zero variance")
    return float(dx @ dy) / math.sqrt(sx * sy)


def norm_error_correlation(errors: Sequence[float], norms: Sequence[float]) -> float:
    """Pearson r between per-snapshot probe errors and decoder norms."""
    if len(errors) < 3:
        raise ValueError("need at least 3 snapshots")
    return pearson(errors, norms)


LABEL_MODES = ("peak", "per-snapshot", "any")


def feature_labels(f: np.ndarray, feature: int, mode: str, peak_snapshot: int) -> np.ndarray:
    """Labels for one feature from gated activations ``f`` of shape ``(K, B, F)``.

    Returns ``(K, B)``: ``per-snapshot`` uses each snapshot's own gate,
    ``peak`` uses the gate at the feature's peak-norm snapshot for every
    snapshot, ``any`` marks tokens where any snapshot's gate is open.
    """
    col = f[:, :, feature] > 0
    if mode == "per-snapshot":
        return col
    if mode == "peak":
        return np.broadcast_to(col[peak_snapshot], col.shape)
    if mode == "any":
        return np.broadcast_to(col.any(axis=0), col.shape)
    raise ValueError(f"unknown label mode {mode!r}")


@dataclass
class ProbeRow:
    feature: int
    snapshot: int
    step: int
    bce_train: float
    bce_heldout: float
    decoder_norm: float
    degenerate: bool


def probe_features(
    model: CrosscoderModel,
    batch: np.ndarray,
    features: Sequence[int],
    label_mode: str = "peak",
    epochs: int = 200,
    lr: float = 0.05,
    seed: int = 0,
    max_neg_ratio: float = 10.0,
) -> list[ProbeRow]:
    """Train one probe per (feature, snapshot) on a normalised aligned batch ``(K, B, d)``."""
    rec = forward(model, batch)
    norms = model.decoder_norms().astype(np.float64)
    rows = []
    for i in features:
        peak = int(np.argmax(norms[:, i]))
        labels = feature_labels(rec.f, i, label_mode, peak)
        for k in range(model.n_snapshots):
            res = train_probe(batch[k], labels[k], epochs=epochs, lr=lr, seed=seed, max_neg_ratio=max_neg_ratio)
            rows.append(ProbeRow(int(i), k, model.steps[k], res.bce_train, res.bce_heldout, float(norms[k, i]), res.degenerate))
    return rows


def correlation_summary(rows: Sequence[ProbeRow]) -> dict[int, float]:
    """Per-feature Pearson(held-out BCE, decoder norm); features with a degenerate series are skipped."""
    by_feature: dict[int, list[ProbeRow]] = {}
    for r in rows:
        by_feature.setdefault(r.feature, []).append(r)
    out = {}
    for fid, rs in sorted(by_feature.items()):
        rs = sorted(rs, key=lambda r: r.snapshot)
        try:
            out[fid] = norm_error_correlation([r.bce_heldout for r in rs], [r.decoder_norm for r in rs])
        except ValueError:
            continue
    return out

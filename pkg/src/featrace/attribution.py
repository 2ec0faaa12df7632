"""Feature attribution against a scalar metric of the activations.

The metric ``m`` is a small exact-gradient head (affine or one tanh hidden
layer) or a fixed external gradient row. Attribution scores follow

    plain:        f_i * (grad m . W_dec_i)
    patching:     (f_i(x) - f_i(x~)) * (grad m . W_dec_i)

and the integrated-gradient variants average ``grad m`` over ``N`` points on
the straight path from the baseline feature vector (zero, or the corrupted
sample's features) to the clean one, holding the reconstruction error at the
clean sample's value.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .crosscoder import CrosscoderModel, forward
from .store import SnapshotManifest, load_rows

log = logging.getLogger(__name__)

VARIANTS = ("plain", "patching", "ig-plain", "ig-patching")
IG_RULES = {"midpoint": 0.5, "left": 0.0}


class MetricHead:
    """``affine``: m(a) = v.a + c.  ``mlp1``: m(a) = w2 . tanh(W1 a + b1) + b2."""

    def __init__(self, kind: str, params: dict[str, np.ndarray | float]):
        if kind not in ("affine", "mlp1", "external"):
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        self.params = {k: (np.asarray(v, dtype=np.float64) if not np.isscalar(v) else float(v)) for k, v in params.items()}

    @classmethod
    def affine(cls, v, offset: float = 0.0) -> "MetricHead":
        return cls("affine", {"v": np.asarray(v, np.float64), "offset": float(offset)})

    @classmethod
    def mlp1(cls, W1, b1, w2, b2: float = 0.0) -> "MetricHead":
        return cls("mlp1", {"W1": W1, "b1": b1, "w2": w2, "b2": float(b2)})

    @classmethod
    def random_mlp1(cls, d_model: int, hidden: int, seed: int = 0, scale: float = 1.0) -> "MetricHead":
        rng = np.random.default_rng(seed)
        return cls.mlp1(
            scale * rng.standard_normal((hidden, d_model)) / np.sqrt(d_model),
            0.1 * rng.standard_normal(hidden),
            rng.standard_normal(hidden) / np.sqrt(hidden),
            0.0,
        )

    @classmethod
    def external(cls, grad) -> "MetricHead":
        """A head known only through precomputed gradient rows, shape ``(d,)`` or ``(B, d)``.

        The metric is treated as linear in the activations.
        """
        return cls("external", {"v": np.asarray(grad, np.float64), "offset": 0.0})

    @property
    def d_model(self) -> int:
        return self.params["v"].shape[-1] if self.kind != "mlp1" else self.params["W1"].shape[1]

    def __call__(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        p = self.params
        if self.kind == "mlp1":
            return np.tanh(a @ p["W1"].T + p["b1"]) @ p["w2"] + p["b2"]
        return np.sum(a * p["v"], axis=-1) + p["offset"]

    def gradient(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        p = self.params
        if self.kind == "mlp1":
            h = np.tanh(a @ p["W1"].T + p["b1"])
            return ((1.0 - h * h) * p["w2"]) @ p["W1"]
        return np.broadcast_to(p["v"], a.shape).copy()

    def to_dict(self) -> dict:
        return {"kind": self.kind, **{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricHead":
        d = dict(d)
        return cls(d.pop("kind"), d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricHead":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class Decomposition:
    f: np.ndarray  # (F,) gated activations at the snapshot
    contributions: np.ndarray  # (F, d) f_i * W_dec_i
    bias: np.ndarray  # (d,)
    error: np.ndarray  # (d,) exact residual


def decompose(model: CrosscoderModel, snapshot: int, aligned_row: np.ndarray) -> Decomposition:
    """Split ``a`` at one snapshot into feature contributions, decoder bias and residual.

    ``aligned_row`` holds the token's activation at every snapshot, shape
    ``(K, d)``, since the shared code depends on all of them.
    """
    row = np.asarray(aligned_row)
    if row.shape != (model.n_snapshots, model.d_model):
        raise ValueError(f"expected row of shape {(model.n_snapshots, model.d_model)}, got {row.shape}")
    rec = forward(model, row[:, None, :])
    f = rec.f[snapshot, 0].astype(np.float64)
    W = model.W_dec[snapshot].astype(np.float64)
    contrib = f[:, None] * W.T
    bias = model.b_dec[snapshot].astype(np.float64)
    a = row[snapshot].astype(np.float64)
    error = a - (contrib.sum(axis=0) + bias)
    return Decomposition(f=f, contributions=contrib, bias=bias, error=error)


@dataclass
class TaskBatch:
    """Aligned clean rows ``(K, B, d)``, optional corrupted rows and label strings."""

    clean: np.ndarray
    corrupted: np.ndarray | None = None
    labels: list[str] | None = None

    def __post_init__(self) -> None:
        if self.corrupted is not None and self.corrupted.shape != self.clean.shape:
            raise ValueError("clean and corrupted rows must align")

    @property
    def n_samples(self) -> int:
        return self.clean.shape[1]

    def swapped(self) -> "TaskBatch":
        if self.corrupted is None:
            raise ValueError("no corrupted rows to swap")
        return TaskBatch(self.corrupted, self.clean, self.labels)


def load_task(task_file, manifest: SnapshotManifest) -> TaskBatch:
    """Read a JSON-lines task file whose records index rows of ``manifest``."""
    clean_rows, corrupt_rows, labels = [], [], []
    with open(task_file, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "clean_row" not in rec:
                raise ValueError(f"{task_file}:{n}: record lacks clean_row")
            clean_rows.append(int(rec["clean_row"]))
            corrupt_rows.append(rec.get("corrupted_row"))
            labels.append(str(rec.get("label", "")))
    if not clean_rows:
        raise ValueError(f"{task_file}: no task records")
    has = [c is not None for c in corrupt_rows]
    if any(has) and not all(has):
        raise ValueError(f"{task_file}: either every record or none must name a corrupted row")
    clean = load_rows(manifest, clean_rows)
    corrupted = load_rows(manifest, [int(c) for c in corrupt_rows]) if all(has) else None
    return TaskBatch(clean, corrupted, labels)


@dataclass
class _Codes:
    f: np.ndarray  # (B, F) at the snapshot
    error: np.ndarray  # (B, d) residual at the snapshot


def _rebuild(model: CrosscoderModel, snapshot: int, f: np.ndarray, error: np.ndarray | float = 0.0) -> np.ndarray:
    return f @ model.W_dec[snapshot].astype(np.float64).T + model.b_dec[snapshot].astype(np.float64) + error


def _codes(model: CrosscoderModel, snapshot: int, rows: np.ndarray) -> _Codes:
    f = forward(model, rows).f[snapshot].astype(np.float64)
    # residual taken against the float64 rebuild so that rebuilding unedited codes returns the row
    return _Codes(f=f, error=rows[snapshot].astype(np.float64) - _rebuild(model, snapshot, f))


def attribute(
    model: CrosscoderModel,
    snapshot: int,
    head: MetricHead,
    task: TaskBatch,
    variant: str = "ig-patching",
    n_steps: int = 10,
    rule: str = "midpoint",
) -> np.ndarray:
    """Attribution scores of shape ``(B, F)`` for every sample and feature at one snapshot.

    IG variants average the head gradient over ``n_steps`` points of the
    path from the baseline codes to the clean codes: ``alpha = (j + 1/2) / N``
    with ``rule="midpoint"`` or ``alpha = j / N`` with ``rule="left"``.
    The midpoint grid has O(1/N^2) error instead of O(1/N).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if rule not in IG_RULES:
        raise ValueError(f"unknown IG rule {rule!r}")
    patching = variant.endswith("patching")
    if patching and task.corrupted is None:
        raise ValueError(f"{variant} attribution needs corrupted rows")
    clean = _codes(model, snapshot, task.clean)
    base = _codes(model, snapshot, task.corrupted).f if patching else np.zeros_like(clean.f)
    W = model.W_dec[snapshot].astype(np.float64)
    if variant.startswith("ig"):
        g = np.zeros_like(clean.error)
        for j in range(n_steps):
            alpha = (j + IG_RULES[rule]) / n_steps
            f_alpha = alpha * clean.f + (1.0 - alpha) * base
            g += head.gradient(_rebuild(model, snapshot, f_alpha, clean.error))
        g /= n_steps
    else:
        g = head.gradient(task.clean[snapshot].astype(np.float64))
    return (clean.f - base) * (g @ W)


def residual_attribution(model: CrosscoderModel, snapshot: int, head: MetricHead, task: TaskBatch) -> np.ndarray:
    """``grad m . (b_dec + eps)`` per sample: the part of a linear metric not carried by features."""
    clean = _codes(model, snapshot, task.clean)
    g = head.gradient(task.clean[snapshot].astype(np.float64))
    return np.einsum("bd,bd->b", g, clean.error + model.b_dec[snapshot].astype(np.float64))


@dataclass(frozen=True)
class AttributionRecord:
    feature_id: int
    step: int
    score: float
    variant: str
    sample: int = 0


def to_records(scores: np.ndarray, step: int, variant: str) -> list[AttributionRecord]:
    return [
        AttributionRecord(int(i), int(step), float(scores[s, i]), variant, int(s))
        for s in range(scores.shape[0])
        for i in range(scores.shape[1])
    ]


def rank_features(scores: np.ndarray | Sequence[AttributionRecord]) -> list[int]:
    """Features by descending mean score over samples and snapshots; ties by id.

    ``scores`` is an array whose last axis indexes features, or a list of records.
    """
    if isinstance(scores, np.ndarray):
        if scores.size == 0:
            raise ValueError("no scores")
        F = scores.shape[-1]
        mean = scores.reshape(-1, F).mean(axis=0)
        ids = np.arange(F)
    else:
        if not scores:
            raise ValueError("no records")
        sums: dict[int, float] = {}
        counts: dict[int, int] = {}
        for r in scores:
            sums[r.feature_id] = sums.get(r.feature_id, 0.0) + r.score
            counts[r.feature_id] = counts.get(r.feature_id, 0) + 1
        ids = np.array(sorted(sums))
        mean = np.array([sums[i] / counts[i] for i in ids])
    order = np.lexsort((ids, -mean))
    return [int(ids[o]) for o in order]


@dataclass
class AblationResult:
    recovery: float
    per_sample: np.ndarray  # nan where skipped
    n_skipped: int


def edited_activations(
    model: CrosscoderModel, snapshot: int, task: TaskBatch, ranked: Sequence[int], k: int, mode: str
) -> np.ndarray:
    """Clean activations with selected feature contributions swapped for corrupted ones.

    ``ablate-top`` swaps the top ``k`` ranked features; ``keep-top`` swaps
    every feature except them. Without corrupted rows the swapped
    contributions are zero. The clean residual is kept.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if mode not in ("ablate-top", "keep-top"):
        raise ValueError(f"unknown mode {mode!r}")
    clean = _codes(model, snapshot, task.clean)
    alt = _codes(model, snapshot, task.corrupted).f if task.corrupted is not None else np.zeros_like(clean.f)
    top = np.zeros(model.n_features, dtype=bool)
    top[np.asarray(list(ranked[:k]), dtype=np.int64)] = True
    swap = top if mode == "ablate-top" else ~top
    f = np.where(swap, alt, clean.f)
    return _rebuild(model, snapshot, f, clean.error)


def ablation_experiment(
    model: CrosscoderModel,
    snapshot: int,
    head: MetricHead,
    task: TaskBatch,
    ranked: Sequence[int],
    k: int,
    mode: str = "ablate-top",
) -> AblationResult:
    """Mean metric recovery after editing feature contributions.

    With corrupted rows: ``(m(edited) - m(corrupt)) / (m(clean) - m(corrupt))``.
    Without: ``m(edited) / m(clean)``. Samples with a zero denominator are
    skipped and counted.
    """
    edited = edited_activations(model, snapshot, task, ranked, k, mode)
    m_edit = head(edited)
    m_clean = head(task.clean[snapshot].astype(np.float64))
    if task.corrupted is not None:
        m_corr = head(task.corrupted[snapshot].astype(np.float64))
        num, den = m_edit - m_corr, m_clean - m_corr
    else:
        num, den = m_edit, m_clean
    ok = den != 0
    per = np.full(len(den), np.nan)
    per[ok] = num[ok] / den[ok]
    skipped = int((~ok).sum())
    if skipped:
        log.warning("%d samples skipped: clean and corrupted metrics are equal", skipped)
    if not ok.any():
        raise ValueError("every sample has m(clean) == m(corrupt)")
    return AblationResult(recovery=float(np.mean(per[ok])), per_sample=per, n_skipped=skipped)


def recovery_curve(
    model: CrosscoderModel,
    snapshot: int,
    head: MetricHead,
    task: TaskBatch,
    ranked: Sequence[int],
    ks: Sequence[int],
    mode: str,
) -> list[float]:
    return [ablation_experiment(model, snapshot, head, task, ranked, k, mode).recovery for k in ks]

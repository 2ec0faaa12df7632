"""Crosscoder optimisation: initialisation, Adam with a warmup/decay schedule,
snapshot-block worker threads, checkpointing and periodic evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .crosscoder import (
    PARAM_NAMES,
    CrosscoderModel,
    Gradients,
    evaluate,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
    snapshot_blocks,
    total_loss,
)
from .store import AlignedReader, SnapshotManifest

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.xcck"
OPTIMIZER_NAME = "optimizer.npz"
REPORT_NAME = "train_report.json"


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    # defaults follow the Pythia-160M column of the hyperparameter table
    learning_rate: float = 5e-5
    batch_size: int = 2048
    lambda_sparsity: float = 0.3
    # not given in the source; see README
    omega0: float = 1e-2
    threshold_lr_multiplier: float = 0.1
    total_tokens: int = 800_000_000
    warmup_fraction: float = 0.1
    decay_fraction: float = 0.2
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    n_workers: int = 1
    ste_bandwidth: float = 1e-3
    threshold_init: float = 0.1
    eval_every: int = 1000
    eval_tokens: int = 16384
    checkpoint_every: int = 1000
    init_scale_grid: tuple[float, ...] = tuple(2.0**e for e in range(-4, 5))

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.total_tokens < 1:
            raise ValueError("learning_rate, batch_size and total_tokens must be positive")
        if self.lambda_sparsity < 0 or self.omega0 <= 0 or self.threshold_lr_multiplier <= 0:
            raise ValueError("need lambda >= 0, omega0 > 0, threshold multiplier > 0")
        if not (0 <= self.warmup_fraction and 0 <= self.decay_fraction and self.warmup_fraction + self.decay_fraction <= 1):
            raise ValueError("warmup_fraction + decay_fraction must lie in [0, 1]")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("adam betas must be in [0, 1)")
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        self.adam_betas = (float(b1), float(b2))
        self.init_scale_grid = tuple(float(c) for c in self.init_scale_grid)

    @property
    def total_steps(self) -> int:
        return max(1, self.total_tokens // self.batch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["init_scale_grid"] = list(self.init_scale_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "adam_betas" in known:
            known["adam_betas"] = tuple(known["adam_betas"])
        if "init_scale_grid" in known:
            known["init_scale_grid"] = tuple(known["init_scale_grid"])
        return cls(**known)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def init_model(
    manifest: SnapshotManifest | None,
    n_features: int,
    seed: int,
    *,
    d_model: int | None = None,
    steps: Sequence[int] | None = None,
    threshold: float = 0.1,
    dtype=np.float32,
) -> CrosscoderModel:
    """Unit-norm random decoder shared by every snapshot; encoders are its transpose."""
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    if manifest is not None:
        d_model, steps = manifest.d_model, manifest.steps
    if d_model is None or steps is None:
        raise ValueError("need a manifest or explicit d_model and steps")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((d_model, n_features))
    W /= np.linalg.norm(W, axis=0, keepdims=True)
    W = W.astype(dtype)
    K = len(steps)
    W_dec = np.repeat(W[None], K, axis=0)
    return CrosscoderModel(
        W_enc=np.ascontiguousarray(W_dec.transpose(0, 2, 1)),
        b_enc=np.zeros(n_features, dtype),
        W_dec=W_dec,
        b_dec=np.zeros((K, d_model), dtype),
        threshold=np.full(n_features, threshold, dtype),
        steps=list(steps),
    )


def scale_model(model: CrosscoderModel, c: float) -> CrosscoderModel:
    """Scale every decoder column by ``c`` and keep encoders tied to the scaled decoders."""
    out = model.copy()
    s = model.dtype.type(c)
    out.W_dec *= s
    out.W_enc *= s
    return out


def init_search(
    model: CrosscoderModel,
    sample_batch: np.ndarray,
    scale_grid: Sequence[float],
    omega0: float = 1e-2,
    lam: float = 0.3,
) -> tuple[CrosscoderModel, float]:
    """Pick the global decoder-norm scale with the lowest loss on ``sample_batch``.

    Ties go to the scale closest to 1 (in log distance).
    """
    grid = [float(c) for c in scale_grid]
    if not grid or any(c <= 0 for c in grid):
        raise ValueError("scale_grid must be non-empty and positive")
    best = None
    for c in grid:
        loss = total_loss(scale_model(model, c), sample_batch, omega0, lam)
        if not math.isfinite(loss):
            continue
        key = (loss, abs(math.log(c)))
        if best is None or key < best[0]:
            best = (key, c)
    if best is None:
        raise ValueError("loss is non-finite for every grid point")
    c = best[1]
    return scale_model(model, c), c


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def lr_schedule(step_index: int, total_steps: int, warmup_fraction: float = 0.1, decay_fraction: float = 0.2) -> float:
    """Linear warmup from 0, flat at 1, linear decay to 0 at ``total_steps``."""
    if not 0 <= step_index <= total_steps:
        raise ValueError(f"step_index {step_index} outside [0, {total_steps}]")
    warm = warmup_fraction * total_steps
    decay = decay_fraction * total_steps
    if warm > 0 and step_index < warm:
        return step_index / warm
    if decay > 0 and step_index > total_steps - decay:
        return max(0.0, (total_steps - step_index) / decay)
    return 1.0


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, model: CrosscoderModel) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in model.params().items()},
            v={k: np.zeros_like(p) for k, p in model.params().items()},
        )

    def save(self, path) -> None:
        arrays = {f"m_{k}": v for k, v in self.m.items()}
        arrays.update({f"v_{k}": v for k, v in self.v.items()})
        np.savez(path, t=np.int64(self.t), **arrays)

    @classmethod
    def load(cls, path) -> "AdamState":
        with np.load(path) as z:
            return cls(
                m={k: z[f"m_{k}"].copy() for k in PARAM_NAMES},
                v={k: z[f"v_{k}"].copy() for k in PARAM_NAMES},
                t=int(z["t"]),
            )


def adam_step(
    model: CrosscoderModel,
    grads: Gradients | dict[str, np.ndarray],
    state: AdamState,
    step_index: int,
    schedule: Callable[[int], float],
    learning_rate: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    threshold_lr_multiplier: float = 0.1,
) -> tuple[CrosscoderModel, AdamState]:
    """One in-place Adam update with bias correction; thresholds are clamped at 0."""
    g = grads.as_dict() if isinstance(grads, Gradients) else grads
    for k, v in g.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    lr = learning_rate * schedule(step_index)
    for name, p in model.params().items():
        m, v, grad = state.m[name], state.v[name], g[name]
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        step = lr * (threshold_lr_multiplier if name == "threshold" else 1.0)
        if step:
            p -= (step * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    np.maximum(model.threshold, 0, out=model.threshold)
    return model, state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    recon_losses: list[float] = field(default_factory=list)
    sparsity_losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint_path: str | None = None
    init_scale: float | None = None
    config: dict = field(default_factory=dict)
    n_features: int = 0
    start_step: int = 0
    model: CrosscoderModel | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "model"}
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")


class BatchSchedule:
    """Deterministic batch order: a seeded permutation of full batches per epoch.

    The row range for any global step is a pure function of (seed, step), so
    resuming needs no iterator state.
    """

    def __init__(self, n_rows: int, batch_size: int, seed: int):
        self.batch_size = min(batch_size, n_rows)
        self.n_batches = max(1, n_rows // self.batch_size)
        self.seed = seed
        self._cache: tuple[int, np.ndarray] | None = None

    def rows_for(self, step: int) -> tuple[int, int]:
        epoch, i = divmod(step, self.n_batches)
        if self._cache is None or self._cache[0] != epoch:
            perm = np.random.default_rng([self.seed, epoch]).permutation(self.n_batches)
            self._cache = (epoch, perm)
        b = int(self._cache[1][i])
        return b * self.batch_size, self.batch_size


def _eval_record(model: CrosscoderModel, reader: AlignedReader, n_tokens: int, batch_size: int, step: int) -> dict:
    n = min(n_tokens, reader.n_rows)
    batches = (reader.read(s, min(batch_size, n - s)) for s in range(0, n, batch_size))
    res = evaluate(model, batches)
    return {"step": step, "ev": res.explained_variance.tolist(), "l0": res.l0.tolist()}


def train(
    manifest: SnapshotManifest,
    config: TrainConfig,
    n_features: int,
    out_dir: str | Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainReport:
    """Train a crosscoder on ``manifest``.

    ``stop_after`` ends the run early at that global step (the schedule still
    uses ``config.total_steps``), which is how interrupted runs are simulated.
    """
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    total_steps = config.total_steps
    blocks = snapshot_blocks(manifest.n_snapshots, config.n_workers)  # validates divisibility
    del blocks
    schedule = lambda s: lr_schedule(s, total_steps, config.warmup_fraction, config.decay_fraction)  # noqa: E731

    report = TrainReport(config=config.to_dict(), n_features=n_features)
    with AlignedReader(manifest) as reader:
        order = BatchSchedule(reader.n_rows, config.batch_size, config.seed)
        if resume:
            if out is None:
                raise ValueError("resume needs out_dir")
            model = load_checkpoint(out / CHECKPOINT_NAME)
            state = AdamState.load(out / OPTIMIZER_NAME)
            prev = json.loads((out / REPORT_NAME).read_text()) if (out / REPORT_NAME).exists() else {}
            report.losses = prev.get("losses", [])[: state.t]
            report.recon_losses = prev.get("recon_losses", [])[: state.t]
            report.sparsity_losses = prev.get("sparsity_losses", [])[: state.t]
            report.evals = [e for e in prev.get("evals", []) if e["step"] < state.t]
            report.init_scale = prev.get("init_scale")
            start = state.t
        else:
            model = init_model(manifest, n_features, config.seed, threshold=config.threshold_init)
            start_row, count = order.rows_for(0)
            model, report.init_scale = init_search(
                model, reader.read(start_row, count), config.init_scale_grid, config.omega0, config.lambda_sparsity
            )
            log.info("init search picked decoder scale %g", report.init_scale)
            state = AdamState.zeros_like(model)
            start = 0
        report.start_step = start
        end = total_steps if stop_after is None else min(stop_after, total_steps)

        def save(m: CrosscoderModel, st: AdamState) -> None:
            if out is None:
                return
            save_checkpoint(m, out / CHECKPOINT_NAME)
            st.save(out / OPTIMIZER_NAME)
            report.checkpoint_path = str(out / CHECKPOINT_NAME)

        pool = ThreadPoolExecutor(config.n_workers) if config.n_workers > 1 else None
        try:
            for step in range(start, end):
                if config.eval_every and step % config.eval_every == 0 and step > start:
                    report.evals.append(_eval_record(model, reader, config.eval_tokens, config.batch_size, step))
                row, count = order.rows_for(step)
                batch = reader.read(row, count)
                res = loss_and_grads(
                    model, batch, config.omega0, config.lambda_sparsity, config.ste_bandwidth, config.n_workers, pool
                )
                if not math.isfinite(res.loss):
                    save(model, state)
                    raise TrainingDiverged(f"non-finite loss at step {step}; last good checkpoint kept")
                report.losses.append(res.loss)
                report.recon_losses.append(res.recon)
                report.sparsity_losses.append(res.sparsity)
                adam_step(
                    model, res.grads, state, step, schedule, config.learning_rate,
                    config.adam_betas, config.adam_eps, config.threshold_lr_multiplier,
                )
                if progress is not None:
                    progress(step, res.loss)
                if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                    save(model, state)
        finally:
            if pool is not None:
                pool.shutdown()
        report.evals.append(_eval_record(model, reader, config.eval_tokens, config.batch_size, end))
    save(model, state)
    report.wall_clock = time.perf_counter() - t0
    report.model = model
    if out is not None:
        report.save(out / REPORT_NAME)
    return report


def pareto_dominates(candidate: tuple[float, float], reference: tuple[float, float], tolerance: float = 0.05) -> bool:
    """Whether an ``(ev, l0)`` point beats a reference on the sparsity/fidelity plane.

    True when the candidate has ``ev >= ev_ref`` at ``l0 <= l0_ref``, or wins
    on one axis while losing no more than ``tolerance`` (relative) on the other.
    """
    ev, l0 = candidate
    ev_ref, l0_ref = reference
    if ev >= ev_ref and l0 <= l0_ref:
        return True
    if l0 <= l0_ref and ev >= ev_ref * (1 - tolerance):
        return True
    return ev >= ev_ref and l0 <= l0_ref * (1 + tolerance)


def frontier_point(evals: dict) -> tuple[float, float]:
    """Snapshot-averaged ``(ev, l0)`` of one evaluation record."""
    return float(np.mean(evals["ev"])), float(np.mean(evals["l0"]))

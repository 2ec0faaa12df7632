"""Cross-snapshot crosscoder with decoder-norm-coupled JumpReLU gating.

One shared pre-activation ``z = sum_k W_enc[k] a[k] + b_enc`` feeds a separate
gate per snapshot::

    f[k]_i = z_i * H(z_i * ||W_dec[k][:, i]|| - t_i)
    a_hat[k] = W_dec[k] f[k] + b_dec[k]

Gradients are analytic. The Heaviside gate is a constant in the backward
pass except for the thresholds, which get a rectangle pseudo-derivative of
bandwidth ``eps``.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import Executor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CKPT_MAGIC = b"XCCK"
CKPT_VERSION = 1
PARAM_NAMES = ("W_enc", "b_enc", "W_dec", "b_dec", "threshold")


@dataclass
class CrosscoderModel:
    W_enc: np.ndarray  # (K, F, d)
    b_enc: np.ndarray  # (F,)
    W_dec: np.ndarray  # (K, d, F)
    b_dec: np.ndarray  # (K, d)
    threshold: np.ndarray  # (F,)
    steps: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        K, F, d = self.W_enc.shape
        if self.W_dec.shape != (K, d, F):
            raise ValueError(f"W_dec shape {self.W_dec.shape} != {(K, d, F)}")
        if self.b_enc.shape != (F,) or self.threshold.shape != (F,):
            raise ValueError("b_enc and threshold must have shape (n_features,)")
        if self.b_dec.shape != (K, d):
            raise ValueError(f"b_dec shape {self.b_dec.shape} != {(K, d)}")
        if not self.steps:
            self.steps = list(range(K))
        if len(self.steps) != K:
            raise ValueError("one step label per snapshot required")

    @classmethod
    def zeros(cls, n_features: int, d_model: int, steps: Sequence[int], dtype=np.float32) -> "CrosscoderModel":
        K = len(steps)
        return cls(
            W_enc=np.zeros((K, n_features, d_model), dtype),
            b_enc=np.zeros(n_features, dtype),
            W_dec=np.zeros((K, d_model, n_features), dtype),
            b_dec=np.zeros((K, d_model), dtype),
            threshold=np.zeros(n_features, dtype),
            steps=list(steps),
        )

    @property
    def n_snapshots(self) -> int:
        return self.W_enc.shape[0]

    @property
    def n_features(self) -> int:
        return self.W_enc.shape[1]

    @property
    def d_model(self) -> int:
        return self.W_enc.shape[2]

    @property
    def dtype(self) -> np.dtype:
        return self.W_enc.dtype

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "CrosscoderModel":
        return CrosscoderModel(**{k: v.copy() for k, v in self.params().items()}, steps=list(self.steps))

    def astype(self, dtype) -> "CrosscoderModel":
        return CrosscoderModel(**{k: v.astype(dtype) for k, v in self.params().items()}, steps=list(self.steps))

    def decoder_norms(self) -> np.ndarray:
        """Column L2 norms, shape ``(K, F)``."""
        return np.sqrt(np.einsum("kdf,kdf->kf", self.W_dec, self.W_dec))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params().values())


@dataclass
class ForwardRecord:
    z: np.ndarray  # (B, F) shared pre-activation
    f: np.ndarray  # (K, B, F) gated activations
    a_hat: np.ndarray  # (K, B, d)
    mask: np.ndarray  # (K, B, F) bool
    gate_arg: np.ndarray  # (K, B, F)  z * n - t
    norms: np.ndarray  # (K, F)


@dataclass
class Gradients:
    W_enc: np.ndarray
    b_enc: np.ndarray
    W_dec: np.ndarray
    b_dec: np.ndarray
    threshold: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}


def tree_sum(parts: Sequence):
    """Pairwise sum with a fixed shape: split at the largest power of two below ``len(parts)``.

    Any contiguous, power-of-two-aligned grouping of the inputs is a subtree,
    so summing per-worker partials gives the same bits as summing everything
    in one place.
    """
    n = len(parts)
    if n == 0:
        raise ValueError("nothing to sum")
    if n == 1:
        return parts[0]
    mid = 1 << ((n - 1).bit_length() - 1)
    return tree_sum(parts[:mid]) + tree_sum(parts[mid:])


def _check_batch(model: CrosscoderModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 3 or batch.shape[0] != model.n_snapshots or batch.shape[2] != model.d_model:
        raise ValueError(
            f"batch shape {batch.shape} incompatible with model "
            f"(K={model.n_snapshots}, d={model.d_model})"
        )
    if not np.all(np.isfinite(batch)):
        raise ValueError("batch contains non-finite values")
    return batch.astype(model.dtype, copy=False)


def snapshot_blocks(n_snapshots: int, n_workers: int) -> list[list[int]]:
    """Equal contiguous snapshot blocks, one per worker."""
    if n_workers < 1 or n_snapshots % n_workers:
        raise ValueError(f"n_workers={n_workers} must divide n_snapshots={n_snapshots}")
    size = n_snapshots // n_workers
    return [list(range(w * size, (w + 1) * size)) for w in range(n_workers)]


def _run(pool: Executor | None, fn, items):
    if pool is None or len(items) == 1:
        return [fn(x) for x in items]
    return list(pool.map(fn, items))


def preactivation(model: CrosscoderModel, batch: np.ndarray, blocks=None, pool: Executor | None = None) -> np.ndarray:
    batch = _check_batch(model, batch)
    blocks = blocks or [list(range(model.n_snapshots))]

    def partial(block):
        return tree_sum([batch[k] @ model.W_enc[k].T for k in block])

    return tree_sum(_run(pool, partial, blocks)) + model.b_enc


def forward(model: CrosscoderModel, batch: np.ndarray) -> ForwardRecord:
    batch = _check_batch(model, batch)
    z = preactivation(model, batch)
    n = model.decoder_norms()
    gate_arg = z[None, :, :] * n[:, None, :] - model.threshold
    mask = gate_arg > 0
    f = (z[None] * mask).astype(model.dtype)
    a_hat = np.einsum("kbf,kdf->kbd", f, model.W_dec) + model.b_dec[:, None, :]
    return ForwardRecord(z=z, f=f, a_hat=a_hat, mask=mask, gate_arg=gate_arg, norms=n)


def reconstruction_loss(record: ForwardRecord, batch: np.ndarray) -> float:
    r = record.a_hat.astype(np.float64) - np.asarray(batch, np.float64)
    return float(np.sum(r * r) / r.shape[1])


def sparsity_loss(record: ForwardRecord, model: CrosscoderModel, omega0: float, lam: float) -> float:
    fn = record.f.astype(np.float64) * record.norms[:, None, :]
    omega = np.tanh(fn).mean(axis=1)
    return float(lam * np.sum(omega * (1.0 + omega / omega0)))


def total_loss(model: CrosscoderModel, batch: np.ndarray, omega0: float, lam: float) -> float:
    rec = forward(model, batch)
    return reconstruction_loss(rec, batch) + sparsity_loss(rec, model, omega0, lam)


@dataclass
class StepResult:
    loss: float
    recon: float
    sparsity: float
    grads: Gradients


def loss_and_grads(
    model: CrosscoderModel,
    batch: np.ndarray,
    omega0: float,
    lam: float,
    eps: float = 1e-3,
    n_workers: int = 1,
    pool: Executor | None = None,
) -> StepResult:
    """Loss and analytic gradients, optionally split across snapshot-block workers.

    Workers own contiguous snapshot blocks. Two reductions cross worker
    boundaries: the pre-activation ``z`` and the gradient w.r.t. ``z`` (plus
    the threshold gradient). Both go through :func:`tree_sum`.
    """
    batch = _check_batch(model, batch)
    dt = model.dtype
    B = batch.shape[1]
    blocks = snapshot_blocks(model.n_snapshots, n_workers)
    z = preactivation(model, batch, blocks, pool)
    t = model.threshold
    inv_eps = dt.type(1.0 / eps)
    half_eps = dt.type(eps / 2)
    two_over_b = dt.type(2.0 / B)

    W_dec_g = np.empty_like(model.W_dec)
    b_dec_g = np.empty_like(model.b_dec)
    W_enc_g = np.empty_like(model.W_enc)

    def decode_block(block):
        recon, sparse, dzs, dts = [], [], [], []
        for k in block:
            W = model.W_dec[k]
            n = np.sqrt(np.einsum("df,df->f", W, W))
            u = z * n - t
            mask = u > 0
            # multiplying by the mask is much faster than np.where here
            f = z * mask
            r = f @ W.T + model.b_dec[k] - batch[k]
            recon.append(float(np.sum(r.astype(np.float64) ** 2)) / B)
            th = np.tanh(f * n)
            omega = th.mean(axis=0, dtype=np.float64)
            sparse.append(float(lam * np.sum(omega * (1.0 + omega / omega0))))
            d_omega = (lam * (1.0 + 2.0 * omega / omega0) / B).astype(dt)
            g_fn = (1 - th * th) * d_omega  # dS / d(f n)
            df = two_over_b * (r @ W) + g_fn * n
            dn = np.einsum("bf,bf->f", g_fn, f)
            safe_n = np.where(n > 0, n, 1)
            W_dec_g[k] = two_over_b * (r.T @ f) + W * np.where(n > 0, dn / safe_n, 0)
            b_dec_g[k] = two_over_b * r.sum(axis=0)
            dzs.append(df * mask)
            near = np.abs(u) < half_eps
            if near.any():
                dts.append(-inv_eps * np.einsum("bf,bf->f", df * near, z))
            else:
                dts.append(np.zeros_like(t))
        return tree_sum(recon), tree_sum(sparse), tree_sum(dzs), tree_sum(dts)

    parts = _run(pool, decode_block, blocks)
    recon = tree_sum([p[0] for p in parts])
    sparse = tree_sum([p[1] for p in parts])
    dz = tree_sum([p[2] for p in parts])
    d_thresh = tree_sum([p[3] for p in parts])

    def encode_grad_block(block):
        for k in block:
            W_enc_g[k] = dz.T @ batch[k]

    _run(pool, encode_grad_block, blocks)
    grads = Gradients(
        W_enc=W_enc_g,
        b_enc=dz.sum(axis=0),
        W_dec=W_dec_g,
        b_dec=b_dec_g,
        threshold=d_thresh,
    )
    return StepResult(loss=recon + sparse, recon=recon, sparsity=sparse, grads=grads)


def backward(model: CrosscoderModel, batch: np.ndarray, omega0: float, lam: float, eps: float = 1e-3) -> Gradients:
    return loss_and_grads(model, batch, omega0, lam, eps).grads


def l0_norm(record: ForwardRecord) -> np.ndarray:
    """Mean active-feature count per row, one value per snapshot."""
    return (record.f > 0).sum(axis=2).mean(axis=1)


@dataclass
class EvalResult:
    explained_variance: np.ndarray  # (K,)
    l0: np.ndarray  # (K,)
    n_rows: int


def evaluate(model: CrosscoderModel, batches: Iterable[np.ndarray]) -> EvalResult:
    """Streaming per-snapshot explained variance (mean-centred) and L0."""
    K, d = model.n_snapshots, model.d_model
    sum_a = np.zeros((K, d))
    sum_sq = np.zeros(K)
    resid = np.zeros(K)
    active = np.zeros(K)
    n = 0
    for batch in batches:
        rec = forward(model, batch)
        a = np.asarray(batch, np.float64)
        sum_a += a.sum(axis=1)
        sum_sq += np.einsum("kbd,kbd->k", a, a)
        r = rec.a_hat.astype(np.float64) - a
        resid += np.einsum("kbd,kbd->k", r, r)
        active += (rec.f > 0).sum(axis=(1, 2))
        n += a.shape[1]
    if n < 2:
        raise ValueError("explained variance needs at least 2 rows")
    total = sum_sq - np.einsum("kd,kd->k", sum_a, sum_a) / n
    if np.any(total <= 0):
        raise ValueError("zero-variance activations; explained variance undefined")
    return EvalResult(explained_variance=1.0 - resid / total, l0=active / n, n_rows=n)


def explained_variance(model: CrosscoderModel, batches: Iterable[np.ndarray], snapshot: int) -> float:
    return float(evaluate(model, batches).explained_variance[snapshot])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(model: CrosscoderModel, path: str | os.PathLike) -> None:
    K, F, d = model.n_snapshots, model.n_features, model.d_model
    f32 = np.dtype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIII", CKPT_MAGIC, CKPT_VERSION, F, d, K))
        fh.write(np.asarray(model.steps, dtype="<u8").tobytes())
        for k in range(K):
            fh.write(np.ascontiguousarray(model.W_enc[k], f32).tobytes())
        fh.write(np.ascontiguousarray(model.b_enc, f32).tobytes())
        for k in range(K):
            fh.write(np.ascontiguousarray(model.W_dec[k], f32).tobytes())
        for k in range(K):
            fh.write(np.ascontiguousarray(model.b_dec[k], f32).tobytes())
        fh.write(np.ascontiguousarray(model.threshold, f32).tobytes())


def load_checkpoint(path: str | os.PathLike) -> CrosscoderModel:
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise CheckpointFormatError(f"{path}: truncated header")
    magic, version, F, d, K = struct.unpack_from("<4sIIII", data, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    expected = 20 + 8 * K + 4 * (2 * K * F * d + F + K * d + F)
    if len(data) != expected:
        raise CheckpointFormatError(f"{path}: {len(data)} bytes, expected {expected}")
    off = 20
    steps = np.frombuffer(data, "<u8", K, off).tolist()
    off += 8 * K

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(data, "<f4", count, off).reshape(shape).astype(np.float32)
        off += 4 * count
        return arr

    W_enc = np.stack([take(F * d, (F, d)) for _ in range(K)]) if K else np.zeros((0, F, d), np.float32)
    b_enc = take(F, (F,))
    W_dec = np.stack([take(d * F, (d, F)) for _ in range(K)]) if K else np.zeros((0, d, F), np.float32)
    b_dec = np.stack([take(d, (d,)) for _ in range(K)]) if K else np.zeros((0, d), np.float32)
    threshold = take(F, (F,))
    return CrosscoderModel(W_enc=W_enc, b_enc=b_enc, W_dec=W_dec, b_dec=b_dec, threshold=threshold, steps=[int(s) for s in steps])

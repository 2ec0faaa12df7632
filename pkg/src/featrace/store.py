"""Binary shard formats for activations and tokens, plus the snapshot manifest.

Activation shard (``.acts``)::

    b"XACT" | version u32 | d_model u32 | dtype u8 | 3 pad bytes | n_rows u64 | f32 LE payload

Token shard (``.toks``)::

    b"XTOK" | version u32 | n_seqs u32 | seq_lengths u32 * n_seqs | n_tokens u64 | u32 LE token ids

All integers are little-endian. Row ``i`` of an activation shard is token ``i``
of the paired token shard in concatenated sequence order.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

ACT_MAGIC = b"XACT"
TOK_MAGIC = b"XTOK"
FORMAT_VERSION = 1
DTYPE_F32 = 0
ACT_HEADER = struct.Struct("<4sIIB3xQ")
assert ACT_HEADER.size == 24

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


class ShardFormatError(ValueError):
    """Bad magic, version, dtype or truncated payload."""


class AlignmentError(ValueError):
    """Snapshots in a manifest do not line up row-for-row."""


# ---------------------------------------------------------------------------
# activation shards
# ---------------------------------------------------------------------------


def write_activation_shard(path: str | os.PathLike, rows: np.ndarray) -> None:
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {rows.shape}")
    n_rows, d_model = rows.shape
    if d_model < 1:
        raise ValueError("d_model must be >= 1")
    if not np.all(np.isfinite(rows)):
        raise ValueError("activation rows contain non-finite values")
    payload = np.ascontiguousarray(rows, dtype=_F32)
    with open(path, "wb") as fh:
        fh.write(ACT_HEADER.pack(ACT_MAGIC, FORMAT_VERSION, d_model, DTYPE_F32, n_rows))
        fh.write(payload.tobytes())


class ActivationShardReader:
    """Random-access reader over one ``.acts`` file.

    Reads go through ``os.pread`` so one reader can be shared by threads.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._fd = os.open(self.path, os.O_RDONLY)
        try:
            header = os.pread(self._fd, ACT_HEADER.size, 0)
            if len(header) != ACT_HEADER.size:
                raise ShardFormatError(f"{self.path}: truncated header")
            magic, version, d_model, dtype, n_rows = ACT_HEADER.unpack(header)
            if magic != ACT_MAGIC:
                raise ShardFormatError(f"{self.path}: bad magic {magic!r}")
            if version != FORMAT_VERSION:
                raise ShardFormatError(f"{self.path}: unsupported version {version}")
            if dtype != DTYPE_F32:
                raise ShardFormatError(f"{self.path}: unsupported dtype code {dtype}")
            expected = ACT_HEADER.size + 4 * n_rows * d_model
            actual = os.fstat(self._fd).st_size
            if actual != expected:
                raise ShardFormatError(
                    f"{self.path}: file is {actual} bytes, header implies {expected}"
                )
        except BaseException:
            os.close(self._fd)
            raise
        self.d_model = d_model
        self.n_rows = n_rows

    def read_rows(self, start: int, count: int) -> np.ndarray:
        if start < 0 or count < 0 or start + count > self.n_rows:
            raise IndexError(f"rows [{start}, {start + count}) out of range for {self.n_rows}")
        row_bytes = 4 * self.d_model
        buf = os.pread(self._fd, count * row_bytes, ACT_HEADER.size + start * row_bytes)
        return np.frombuffer(buf, dtype=_F32).reshape(count, self.d_model).astype(np.float32)

    def read_all(self) -> np.ndarray:
        return self.read_rows(0, self.n_rows)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self) -> "ActivationShardReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self) -> None:
        try:
            self.close()
        except Exception:
            pass


def read_activation_shard(path: str | os.PathLike) -> np.ndarray:
    with ActivationShardReader(path) as reader:
        return reader.read_all()


# ---------------------------------------------------------------------------
# token shards
# ---------------------------------------------------------------------------


@dataclass
class TokenShard:
    seq_lengths: list[int]
    token_ids: np.ndarray  # flat uint32

    @property
    def n_seqs(self) -> int:
        return len(self.seq_lengths)

    @property
    def n_tokens(self) -> int:
        return int(self.token_ids.size)

    def sequences(self) -> list[np.ndarray]:
        bounds = np.cumsum([0, *self.seq_lengths])
        return [self.token_ids[bounds[i] : bounds[i + 1]] for i in range(self.n_seqs)]

    def sequence_starts(self) -> np.ndarray:
        return np.cumsum([0, *self.seq_lengths])[:-1]


def write_token_shard(path: str | os.PathLike, sequences: Sequence[Sequence[int]]) -> None:
    lengths = [len(s) for s in sequences]
    if any(n <= 0 for n in lengths):
        raise ValueError("every sequence must be non-empty")
    flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in sequences]) if sequences else np.zeros(0, np.int64)
    if flat.size and (flat.min() < 0 or flat.max() > 0xFFFFFFFF):
        raise ValueError("token ids must fit in u32")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", TOK_MAGIC, FORMAT_VERSION, len(lengths)))
        fh.write(np.asarray(lengths, dtype=_U32).tobytes())
        fh.write(struct.pack("<Q", int(flat.size)))
        fh.write(flat.astype(_U32).tobytes())


def read_token_shard(path: str | os.PathLike) -> TokenShard:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ShardFormatError(f"{path}: truncated header")
    magic, version, n_seqs = struct.unpack_from("<4sII", data, 0)
    if magic != TOK_MAGIC:
        raise ShardFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ShardFormatError(f"{path}: unsupported version {version}")
    off = 12
    if len(data) < off + 4 * n_seqs + 8:
        raise ShardFormatError(f"{path}: truncated sequence table")
    lengths = np.frombuffer(data, dtype=_U32, count=n_seqs, offset=off).astype(np.int64)
    off += 4 * n_seqs
    (n_tokens,) = struct.unpack_from("<Q", data, off)
    off += 8
    if int(lengths.sum()) != n_tokens:
        raise ShardFormatError(f"{path}: sequence lengths sum to {lengths.sum()}, header says {n_tokens}")
    if len(data) != off + 4 * n_tokens:
        raise ShardFormatError(f"{path}: payload size mismatch")
    ids = np.frombuffer(data, dtype=_U32, count=n_tokens, offset=off).copy()
    return TokenShard(seq_lengths=[int(n) for n in lengths], token_ids=ids)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class SnapshotEntry:
    step: int
    activation_shard_paths: list[str]
    norm_scalar: float = 1.0


@dataclass
class SnapshotManifest:
    d_model: int
    snapshots: list[SnapshotEntry]
    token_shard_paths: list[str] = field(default_factory=list)
    tokenizer_name: str = ""
    root: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.d_model < 1:
            raise ValueError("d_model must be positive")
        steps = [s.step for s in self.snapshots]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"snapshot steps must be strictly increasing, got {steps}")
        for s in self.snapshots:
            if not (s.norm_scalar > 0 and math.isfinite(s.norm_scalar)):
                raise ValueError(f"norm_scalar must be positive, got {s.norm_scalar}")

    @property
    def steps(self) -> list[int]:
        return [s.step for s in self.snapshots]

    @property
    def n_snapshots(self) -> int:
        return len(self.snapshots)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.root / path

    def activation_paths(self, k: int) -> list[Path]:
        return [self.resolve(p) for p in self.snapshots[k].activation_shard_paths]

    def token_paths(self) -> list[Path]:
        return [self.resolve(p) for p in self.token_shard_paths]

    def snapshot_index(self, step: int) -> int:
        try:
            return self.steps.index(step)
        except ValueError:
            raise KeyError(f"no snapshot at step {step}; available {self.steps}") from None

    def shard_row_counts(self) -> list[int]:
        """Row count per shard position, after checking cross-snapshot alignment."""
        counts = None
        for k in range(self.n_snapshots):
            paths = self.activation_paths(k)
            these = []
            for p in paths:
                with ActivationShardReader(p) as r:
                    if r.d_model != self.d_model:
                        raise AlignmentError(f"{p}: d_model {r.d_model} != manifest {self.d_model}")
                    these.append(r.n_rows)
            if counts is None:
                counts = these
            elif these != counts:
                raise AlignmentError(
                    f"snapshot {self.snapshots[k].step} row counts {these} differ from {counts}"
                )
        return counts or []

    @property
    def n_rows(self) -> int:
        return sum(self.shard_row_counts())

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "snapshots": [
                {
                    "step": s.step,
                    "activation_shard_paths": list(s.activation_shard_paths),
                    "norm_scalar": s.norm_scalar,
                }
                for s in self.snapshots
            ],
            "token_shard_paths": list(self.token_shard_paths),
            "tokenizer_name": self.tokenizer_name,
        }

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict, root: str | os.PathLike = ".") -> "SnapshotManifest":
        # unknown keys are ignored on purpose
        snaps = [
            SnapshotEntry(
                step=int(s["step"]),
                activation_shard_paths=[str(p) for p in s["activation_shard_paths"]],
                norm_scalar=float(s.get("norm_scalar", 1.0)),
            )
            for s in d["snapshots"]
        ]
        return cls(
            d_model=int(d["d_model"]),
            snapshots=snaps,
            token_shard_paths=[str(p) for p in d.get("token_shard_paths", [])],
            tokenizer_name=str(d.get("tokenizer_name", "")),
            root=Path(root),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SnapshotManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), root=path.parent)


def compute_norm_scalar(shard_paths: Sequence[str | os.PathLike], d_model: int, chunk_rows: int = 65536) -> float:
    """Scalar s with mean ||s * a||_2 == sqrt(d_model) over every row of the shards."""
    total = 0.0
    n = 0
    for p in shard_paths:
        with ActivationShardReader(p) as r:
            if r.d_model != d_model:
                raise AlignmentError(f"{p}: d_model {r.d_model} != {d_model}")
            for start in range(0, r.n_rows, chunk_rows):
                rows = r.read_rows(start, min(chunk_rows, r.n_rows - start)).astype(np.float64)
                total += float(np.sqrt(np.einsum("ij,ij->i", rows, rows)).sum())
                n += rows.shape[0]
    if n == 0:
        raise ValueError("no rows to compute a norm scalar from")
    mean_norm = total / n
    if mean_norm == 0.0:
        raise ValueError("all activations are zero; norm scalar undefined")
    return math.sqrt(d_model) / mean_norm


class AlignedReader:
    """Holds one reader per (snapshot, shard) and serves aligned, normalized row ranges."""

    def __init__(self, manifest: SnapshotManifest, snapshot_subset: Sequence[int] | None = None):
        ks = list(range(manifest.n_snapshots)) if snapshot_subset is None else list(snapshot_subset)
        for k in ks:
            if not 0 <= k < manifest.n_snapshots:
                raise KeyError(f"snapshot index {k} not in manifest")
        self.manifest = manifest
        self.snapshots = ks
        self.counts = manifest.shard_row_counts()
        self.offsets = np.cumsum([0, *self.counts])
        self.n_rows = int(self.offsets[-1])
        self.d_model = manifest.d_model
        self._readers = [[ActivationShardReader(p) for p in manifest.activation_paths(k)] for k in ks]
        self._scales = [np.float32(manifest.snapshots[k].norm_scalar) for k in ks]

    def read(self, start: int, count: int) -> np.ndarray:
        if start < 0 or count < 0 or start + count > self.n_rows:
            raise IndexError(f"rows [{start}, {start + count}) out of range for {self.n_rows}")
        out = np.empty((len(self.snapshots), count, self.d_model), dtype=np.float32)
        filled = 0
        while filled < count:
            g = start + filled
            shard = int(np.searchsorted(self.offsets, g, side="right") - 1)
            local = g - int(self.offsets[shard])
            take = min(count - filled, self.counts[shard] - local)
            for j, rs in enumerate(self._readers):
                out[j, filled : filled + take] = rs[shard].read_rows(local, take)
            filled += take
        for j, s in enumerate(self._scales):
            out[j] *= s
        return out

    def gather(self, rows: Sequence[int]) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        out = np.empty((len(self.snapshots), rows.size, self.d_model), dtype=np.float32)
        for j, g in enumerate(rows):
            out[:, j] = self.read(int(g), 1)[:, 0]
        return out

    def close(self) -> None:
        for rs in self._readers:
            for r in rs:
                r.close()

    def __enter__(self) -> "AlignedReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_activation_batches(
    manifest: SnapshotManifest,
    snapshot_subset: Sequence[int] | None = None,
    batch_size: int = 2048,
    start_row: int = 0,
    stop_row: int | None = None,
) -> Iterator[np.ndarray]:
    """Stream aligned, normalized batches of shape ``(n_snapshots, rows, d_model)``.

    ``snapshot_subset`` holds snapshot *indices* into ``manifest.snapshots``.
    Row ``r`` of every slab refers to the same token. Only one batch per
    snapshot is resident at a time.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    with AlignedReader(manifest, snapshot_subset) as reader:
        stop = reader.n_rows if stop_row is None else min(stop_row, reader.n_rows)
        for pos in range(start_row, stop, batch_size):
            yield reader.read(pos, min(batch_size, stop - pos))


def load_rows(manifest: SnapshotManifest, rows: Sequence[int]) -> np.ndarray:
    """Gather normalized rows by global index, shape ``(n_snapshots, len(rows), d_model)``."""
    with AlignedReader(manifest) as reader:
        return reader.gather(rows)

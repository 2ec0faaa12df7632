import json
import math
import struct
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from featrace.store import (
    AlignedReader,
    AlignmentError,
    ShardFormatError,
    SnapshotEntry,
    SnapshotManifest,
    compute_norm_scalar,
    load_rows,
    read_activation_batches,
    read_activation_shard,
    read_token_shard,
    write_activation_shard,
    write_token_shard,
)


def make_manifest(root, steps, shards, scalars=None, tokens=None):
    """shards[k][s] is the row matrix of shard s at snapshot k."""
    snaps = []
    for k, step in enumerate(steps):
        names = []
        for s, rows in enumerate(shards[k]):
            name = f"k{k}_s{s}.acts"
            write_activation_shard(root / name, rows)
            names.append(name)
        snaps.append(SnapshotEntry(step, names, 1.0 if scalars is None else scalars[k]))
    tok_names = []
    for s, seqs in enumerate(tokens or []):
        name = f"s{s}.toks"
        write_token_shard(root / name, seqs)
        tok_names.append(name)
    m = SnapshotManifest(d_model=shards[0][0].shape[1], snapshots=snaps, token_shard_paths=tok_names, root=root)
    m.save(root / "manifest.json")
    return m


def test_small_shard_sizes(tmp_path):
    write_activation_shard(tmp_path / "z.acts", np.zeros((2, 3)))
    data = (tmp_path / "z.acts").read_bytes()
    # 24-byte header, then 2 * 3 float32 values
    assert len(data) == 24 + 2 * 3 * 4


def test_header_bytes_match_hand_written_file(tmp_path):
    write_activation_shard(tmp_path / "one.acts", np.array([[1.5]]))
    hand = b"XACT" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"\x00" + b"\x00" * 3 + struct.pack("<Q", 1)
    hand += struct.pack("<f", 1.5)
    data = (tmp_path / "one.acts").read_bytes()
    assert data == hand
    assert data[:4].hex() == "58414354"


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=9),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_activation_round_trip_bit_exact(tmp_path_factory, rows):
    p = tmp_path_factory.mktemp("rt") / "a.acts"
    write_activation_shard(p, rows)
    back = read_activation_shard(p)
    assert back.tobytes() == rows.astype("<f4").tobytes()


def test_empty_shard_round_trip(tmp_path):
    write_activation_shard(tmp_path / "e.acts", np.zeros((0, 4)))
    assert read_activation_shard(tmp_path / "e.acts").shape == (0, 4)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected_before_writing(tmp_path, bad):
    rows = np.ones((3, 2))
    rows[1, 1] = bad
    with pytest.raises(ValueError):
        write_activation_shard(tmp_path / "bad.acts", rows)
    assert not (tmp_path / "bad.acts").exists()


def test_corrupt_headers_rejected(tmp_path):
    write_activation_shard(tmp_path / "a.acts", np.ones((2, 2)))
    raw = bytearray((tmp_path / "a.acts").read_bytes())
    bad_magic = bytearray(raw)
    bad_magic[:4] = b"XXXX"
    (tmp_path / "m.acts").write_bytes(bad_magic)
    with pytest.raises(ShardFormatError):
        read_activation_shard(tmp_path / "m.acts")
    bad_version = bytearray(raw)
    bad_version[4:8] = struct.pack("<I", 7)
    (tmp_path / "v.acts").write_bytes(bad_version)
    with pytest.raises(ShardFormatError):
        read_activation_shard(tmp_path / "v.acts")
    (tmp_path / "t.acts").write_bytes(raw[:-1])
    with pytest.raises(ShardFormatError):
        read_activation_shard(tmp_path / "t.acts")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(0, 2**32 - 1), min_size=1, max_size=7), max_size=6))
def test_token_round_trip(tmp_path_factory, seqs):
    p = tmp_path_factory.mktemp("tok") / "t.toks"
    write_token_shard(p, seqs)
    shard = read_token_shard(p)
    assert shard.seq_lengths == [len(s) for s in seqs]
    assert shard.n_tokens == sum(len(s) for s in seqs)
    assert [list(map(int, s)) for s in shard.sequences()] == seqs


def test_batches_partition_rows(tmp_path):
    rows = np.arange(10 * 3, dtype=np.float32).reshape(10, 3)
    m = make_manifest(tmp_path, [0], [[rows]])
    batches = list(read_activation_batches(m, batch_size=4))
    assert [b.shape[1] for b in batches] == [4, 4, 2]
    assert np.array_equal(np.concatenate(batches, axis=1)[0], rows)


def test_norm_scalar_applied(tmp_path):
    rows = np.random.default_rng(0).standard_normal((6, 3)).astype(np.float32)
    m = make_manifest(tmp_path, [0, 5], [[rows], [rows]], scalars=[1.0, 2.0])
    (b,) = read_activation_batches(m, batch_size=100)
    assert np.array_equal(b[1], 2 * rows)
    assert np.array_equal(b[0], rows)


def test_alignment_by_row_tagging(tmp_path):
    # the first column carries the global row index at every snapshot
    def tagged(start, n, k):
        r = np.zeros((n, 4), np.float32)
        r[:, 0] = np.arange(start, start + n)
        r[:, 1] = k
        return r

    sizes = [30, 45, 25]
    shards = [[tagged(sum(sizes[:s]), n, k) for s, n in enumerate(sizes)] for k in range(2)]
    m = make_manifest(tmp_path, [0, 100], shards)
    seen = []
    for b in read_activation_batches(m, batch_size=7):
        assert np.array_equal(b[0, :, 0], b[1, :, 0])
        seen.extend(b[0, :, 0].astype(int).tolist())
    assert seen == list(range(100))
    assert np.array_equal(load_rows(m, [99, 3, 30])[1, :, 0], [99, 3, 30])


def test_snapshot_subset(tmp_path):
    rows = [np.full((5, 2), k, np.float32) for k in range(3)]
    m = make_manifest(tmp_path, [0, 1, 2], [[r] for r in rows])
    (b,) = read_activation_batches(m, snapshot_subset=[2, 0], batch_size=10)
    assert b.shape == (2, 5, 2)
    assert np.all(b[0] == 2) and np.all(b[1] == 0)
    with pytest.raises(KeyError):
        list(read_activation_batches(m, snapshot_subset=[3]))


def test_misaligned_manifest(tmp_path):
    m = make_manifest(tmp_path, [0, 1], [[np.ones((5, 2))], [np.ones((6, 2))]])
    with pytest.raises(AlignmentError):
        list(read_activation_batches(m))


def test_manifest_round_trip_ignores_unknown_fields(tmp_path):
    m = make_manifest(tmp_path, [0, 10], [[np.ones((2, 2))], [np.ones((2, 2))]], scalars=[0.5, 3.0],
                      tokens=[[[1, 2]]])
    d = json.loads((tmp_path / "manifest.json").read_text())
    d["future_field"] = {"x": 1}
    d["snapshots"][0]["extra"] = True
    (tmp_path / "manifest.json").write_text(json.dumps(d))
    back = SnapshotManifest.load(tmp_path)
    assert back == m
    assert back.to_dict() == m.to_dict()


def test_manifest_validation():
    with pytest.raises(ValueError):
        SnapshotManifest(2, [SnapshotEntry(5, []), SnapshotEntry(5, [])])
    with pytest.raises(ValueError):
        SnapshotManifest(2, [SnapshotEntry(0, [], norm_scalar=0.0)])


def test_norm_scalar_cases(tmp_path):
    d = 16
    rng = np.random.default_rng(1)
    dirs = rng.standard_normal((50, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    write_activation_shard(tmp_path / "a.acts", dirs * math.sqrt(d))
    assert compute_norm_scalar([tmp_path / "a.acts"], d) == pytest.approx(1.0, rel=1e-6)
    write_activation_shard(tmp_path / "b.acts", dirs * 2 * math.sqrt(d))
    assert compute_norm_scalar([tmp_path / "b.acts"], d) == pytest.approx(0.5, rel=1e-6)


def test_norm_scalar_matches_brute_force(tmp_path):
    rows = np.random.default_rng(2).standard_normal((1000, 64)).astype(np.float32)
    write_activation_shard(tmp_path / "g1.acts", rows[:600])
    write_activation_shard(tmp_path / "g2.acts", rows[600:])
    s = compute_norm_scalar([tmp_path / "g1.acts", tmp_path / "g2.acts"], 64, chunk_rows=128)
    brute = 8.0 / np.mean([np.sqrt(sum(float(v) ** 2 for v in r)) for r in rows])
    assert s == pytest.approx(brute, rel=1e-6)


def test_norm_scalar_all_zero(tmp_path):
    write_activation_shard(tmp_path / "z.acts", np.zeros((4, 3)))
    with pytest.raises(ValueError):
        compute_norm_scalar([tmp_path / "z.acts"], 3)


def test_streaming_memory_is_bounded(tmp_path):
    n, d, batch = 200_000, 32, 1000
    rows = np.zeros((n, d), np.float32)
    m = make_manifest(tmp_path, [0, 1], [[rows], [rows]])
    del rows
    shard_bytes = n * d * 4
    tracemalloc.start()
    for _ in read_activation_batches(m, batch_size=batch):
        pass
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    # a few batches' worth across both snapshots, far below one shard
    assert peak < 8 * 2 * batch * d * 4 + 200_000
    assert peak < shard_bytes / 10


def test_aligned_reader_bounds(tmp_path):
    m = make_manifest(tmp_path, [0], [[np.ones((3, 2))]])
    with AlignedReader(m) as r:
        with pytest.raises(IndexError):
            r.read(2, 2)

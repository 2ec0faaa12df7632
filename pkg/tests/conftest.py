import time

import numpy as np
import pytest

from featrace.store import SnapshotEntry, SnapshotManifest, write_activation_shard


def write_random_manifest(root, K=4, n_rows=512, d=8, seed=0, n_shards=2):
    """Gaussian activations with a shared low-rank sparse part, split over shards."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(16, d))
    codes = rng.exponential(1.0, (n_rows, 16)) * (rng.random((n_rows, 16)) < 0.1)
    snaps = []
    cuts = np.linspace(0, n_rows, n_shards + 1).astype(int)
    for k in range(K):
        rows = codes @ (dirs * (0.5 + k / K)) + 0.05 * rng.normal(size=(n_rows, d))
        names = []
        for s in range(n_shards):
            name = f"snap{k}_shard{s}.acts"
            write_activation_shard(root / name, rows[cuts[s]:cuts[s + 1]])
            names.append(name)
        snaps.append(SnapshotEntry(step=k * 100, activation_shard_paths=names, norm_scalar=1.0))
    m = SnapshotManifest(d_model=d, snapshots=snaps, root=root)
    m.save(root / "manifest.json")
    return m


@pytest.fixture
def tiny_manifest(tmp_path):
    return write_random_manifest(tmp_path)


# acceptance criteria report: one PASS/FAIL line per criterion at the end of the run

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


class _Criterion:
    def __init__(self, results, number, title):
        self.results, self.number, self.title = results, number, title
        self.detail = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{exc_type.__name__}: {exc}".splitlines()[0]
        line = f"{status} criterion {self.number:2d} {self.title}: {detail} ({time.perf_counter() - self.t0:.1f}s)"
        self.results[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion(request):
    results = request.config.stash[ACCEPTANCE]
    return lambda number, title: _Criterion(results, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featrace.crosscoder import load_checkpoint, total_loss
from featrace.training import (
    AdamState,
    BatchSchedule,
    NonFiniteGradient,
    TrainConfig,
    adam_step,
    init_model,
    frontier_point,
    init_search,
    lr_schedule,
    pareto_dominates,
    scale_model,
    train,
)

from oracles import random_model


def small_config(**kw):
    base = dict(learning_rate=1e-3, batch_size=64, total_tokens=64 * 20, eval_every=0, eval_tokens=256,
                checkpoint_every=0, init_scale_grid=(0.25, 0.5, 1.0))
    base.update(kw)
    return TrainConfig(**base)


def test_schedule_values():
    T = 100
    assert lr_schedule(0, T) == 0.0
    assert lr_schedule(5, T) == pytest.approx(0.5)
    assert lr_schedule(10, T) == 1.0
    assert lr_schedule(80, T) == 1.0
    assert lr_schedule(90, T) == pytest.approx(0.5)
    assert lr_schedule(100, T) == 0.0
    with pytest.raises(ValueError):
        lr_schedule(101, T)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000), st.data())
def test_schedule_bounded(T, data):
    s = data.draw(st.integers(0, T))
    assert 0.0 <= lr_schedule(s, T) <= 1.0


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(0)
    m = random_model(rng, 1, 2, 3)
    m.threshold[:] = 1.0
    state = AdamState.zeros_like(m)
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    ref = {k: v.copy() for k, v in m.params().items()}
    mom = {k: np.zeros_like(v) for k, v in ref.items()}
    vel = {k: np.zeros_like(v) for k, v in ref.items()}
    for t in range(1, 4):
        g = {k: rng.normal(size=v.shape) for k, v in ref.items()}
        adam_step(m, g, state, 50, lambda s: 1.0, lr, (b1, b2), eps, threshold_lr_multiplier=0.1)
        for k in ref:
            for idx in np.ndindex(ref[k].shape):
                mom[k][idx] = b1 * mom[k][idx] + (1 - b1) * g[k][idx]
                vel[k][idx] = b2 * vel[k][idx] + (1 - b2) * g[k][idx] ** 2
                mh = mom[k][idx] / (1 - b1 ** t)
                vh = vel[k][idx] / (1 - b2 ** t)
                step = lr * (0.1 if k == "threshold" else 1.0)
                ref[k][idx] -= step * mh / (math.sqrt(vh) + eps)
            if k == "threshold":
                ref[k] = np.maximum(ref[k], 0)
    for k, v in m.params().items():
        assert np.allclose(v, ref[k], rtol=1e-12, atol=1e-14), k
    assert state.t == 3


def test_thresholds_clamped_at_zero():
    m = random_model(np.random.default_rng(0), 1, 2, 3)
    m.threshold[:] = 1e-4
    g = {k: np.zeros_like(v) for k, v in m.params().items()}
    g["threshold"][:] = 1.0
    adam_step(m, g, AdamState.zeros_like(m), 0, lambda s: 1.0, 1.0)
    assert np.all(m.threshold == 0)


def test_non_finite_gradient_rejected():
    m = random_model(np.random.default_rng(0), 1, 2, 3)
    g = {k: np.zeros_like(v) for k, v in m.params().items()}
    g["W_dec"][0, 0, 0] = np.nan
    with pytest.raises(NonFiniteGradient):
        adam_step(m, g, AdamState.zeros_like(m), 0, lambda s: 1.0, 1.0)


def test_init_model_tied_and_unit_norm():
    m = init_model(None, 10, 3, d_model=6, steps=[0, 5, 9])
    assert np.allclose(m.decoder_norms(), 1.0, atol=1e-6)
    for k in range(3):
        assert np.array_equal(m.W_enc[k], m.W_dec[k].T)
        assert np.array_equal(m.W_dec[k], m.W_dec[0])
    assert np.all(m.threshold == np.float32(0.1))


def test_scale_model_keeps_tying():
    m = init_model(None, 4, 0, d_model=3, steps=[0, 1])
    s = scale_model(m, 0.5)
    assert np.allclose(s.decoder_norms(), 0.5)
    assert np.array_equal(s.W_enc[1], s.W_dec[1].T)


def test_init_search_picks_min_loss():
    rng = np.random.default_rng(1)
    m = init_model(None, 8, 0, d_model=4, steps=[0, 1], dtype=np.float64)
    batch = rng.normal(size=(2, 32, 4))
    grid = [0.125, 0.5, 1.0, 4.0]
    _, c = init_search(m, batch, grid)
    losses = {g: total_loss(scale_model(m, g), batch, 1e-2, 0.3) for g in grid}
    assert c == min(losses, key=losses.get)
    with pytest.raises(ValueError):
        init_search(m, batch, [])


def test_init_search_tie_prefers_scale_near_one():
    m = init_model(None, 2, 0, d_model=2, steps=[0], dtype=np.float64)
    m.threshold[:] = 1e6  # every gate shut: loss is flat in c
    _, c = init_search(m, np.ones((1, 4, 2)), [0.25, 2.0, 0.5])
    assert c == 0.5 or c == 2.0
    _, c = init_search(m, np.ones((1, 4, 2)), [0.25, 1.0, 4.0])
    assert c == 1.0


def test_batch_schedule_is_pure():
    a, b = BatchSchedule(1000, 64, 3), BatchSchedule(1000, 64, 3)
    seq = [a.rows_for(s) for s in range(40)]
    assert seq == [b.rows_for(s) for s in reversed(range(40))][::-1]
    epoch = sorted(r for r, _ in seq[: a.n_batches])
    assert epoch == [i * 64 for i in range(a.n_batches)]


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_fraction=0.9, decay_fraction=0.2)
    c = TrainConfig(batch_size=7, adam_betas=(0.8, 0.99))
    assert TrainConfig.from_dict({**c.to_dict(), "unknown": 1}) == c
    assert TrainConfig().total_steps == 800_000_000 // 2048


def test_training_reduces_loss(tiny_manifest):
    rep = train(tiny_manifest, small_config(total_tokens=64 * 200, learning_rate=3e-3), 32)
    first = np.mean(rep.losses[:10])
    last = np.mean(rep.losses[-10:])
    assert last < first
    assert rep.model.is_finite()
    assert len(rep.evals) == 1 and len(rep.evals[0]["ev"]) == 4


def test_worker_count_invariance(tiny_manifest):
    one = train(tiny_manifest, small_config(n_workers=1), 16)
    four = train(tiny_manifest, small_config(n_workers=4), 16)
    rel = max(abs(a - b) / abs(a) for a, b in zip(one.losses, four.losses))
    assert rel <= 1e-5
    for k, v in one.model.params().items():
        assert np.array_equal(v, four.model.params()[k])


def test_worker_count_must_divide_snapshots(tiny_manifest):
    with pytest.raises(ValueError):
        train(tiny_manifest, small_config(n_workers=3), 8)


def test_resume_reproduces_uninterrupted_run(tiny_manifest, tmp_path):
    cfg = small_config(total_tokens=64 * 30, checkpoint_every=5)
    straight = train(tiny_manifest, cfg, 16, out_dir=tmp_path / "a")
    train(tiny_manifest, cfg, 16, out_dir=tmp_path / "b", stop_after=15)
    resumed = train(tiny_manifest, cfg, 16, out_dir=tmp_path / "b", resume=True)
    assert resumed.start_step == 15
    assert resumed.losses == straight.losses
    a = (tmp_path / "a" / "checkpoint.xcck").read_bytes()
    b = (tmp_path / "b" / "checkpoint.xcck").read_bytes()
    assert a == b
    assert load_checkpoint(tmp_path / "b" / "checkpoint.xcck").steps == tiny_manifest.steps


def test_resume_without_directory_fails(tiny_manifest):
    with pytest.raises(ValueError):
        train(tiny_manifest, small_config(), 8, resume=True)


def test_pareto_dominance_rule():
    ref = (0.90, 10.0)
    assert pareto_dominates((0.91, 9.0), ref)
    assert pareto_dominates((0.86, 5.0), ref)  # 4.4% EV loss, fewer active features
    assert not pareto_dominates((0.85, 5.0), ref)  # 5.6% EV loss
    assert pareto_dominates((0.95, 10.4), ref)
    assert not pareto_dominates((0.95, 11.0), ref)
    assert not pareto_dominates((0.89, 11.0), ref)
    assert frontier_point({"ev": [0.5, 1.0], "l0": [2.0, 4.0]}) == (0.75, 3.0)

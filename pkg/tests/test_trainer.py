import json
from dataclasses import replace

import numpy as np
import pytest

from persemon import trainer as tr
from persemon.data import DataConfig, generate_bundle, make_batch
from persemon.errors import ConfigError
from persemon.losses import AblationFlags, LossWeights
from persemon.model import MAX, ArchitectureConfig, fem_forward
from persemon.tensor import smooth_l1_values
from persemon.trainer import TrainConfig, TrainState, lr_at, run_training, train_step

ARCH = ArchitectureConfig()


@pytest.fixture(scope="module")
def bundle():
    return generate_bundle(DataConfig(seed=0, n_emotion_train=40, n_emotion_test=10,
                                      n_videos_train=8, n_videos_test=4, frames_per_video=10))


def small(**kw):
    base = dict(total_steps=4, n_emotion=6, n_videos=2, k=5)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(params):
    return {n: t.data.copy() for n, t in params.named()}


def changed(before, params):
    return {n for n, t in params.named() if not np.array_equal(before[n], t.data)}


# -- schedule ---------------------------------------------------------------

def test_lr_schedule_default_values():
    cfg = TrainConfig(total_steps=56000)
    assert cfg.milestones() == (32000, 48000)
    assert lr_at(0, cfg) == 0.01
    assert lr_at(31999, cfg) == 0.01
    assert lr_at(32000, cfg) == pytest.approx(0.001, rel=1e-12)
    assert lr_at(48000, cfg) == pytest.approx(0.0001, rel=1e-12)


def test_short_run_milestones_collapse():
    assert TrainConfig(total_steps=2).milestones() == (1,)
    assert TrainConfig(total_steps=1).milestones() == ()


def test_lr_monotone():
    cfg = TrainConfig(total_steps=700)
    lrs = [lr_at(s, cfg) for s in range(700)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_bad_decay_steps_rejected():
    with pytest.raises(ConfigError):
        TrainConfig(total_steps=10, decay_steps=(5, 3))
    with pytest.raises(ConfigError):
        TrainConfig(total_steps=10, decay_steps=(10,))


# -- single step contracts -------------------------------------------------

def test_zero_weights_leave_parameters_unchanged(bundle):
    cfg = small(weights=LossWeights(0, 0, 0, 0, 0))
    state = TrainState.fresh(ARCH, 0)
    before = snapshot(state.params)
    train_step(state, tr.batch_for_step(bundle, cfg, 0), cfg)
    assert not changed(before, state.params)
    assert all(not v.any() for v in state.velocity.values())


def test_disable_coherence_freezes_discriminator(bundle):
    cfg = small(flags=AblationFlags(disable_coherence=True))
    state = TrainState.fresh(ARCH, 0)
    before = snapshot(state.params)
    for s in range(3):
        rec = train_step(state, tr.batch_for_step(bundle, cfg, s), cfg)
        assert rec["adversarial"] == 0.0 and rec["discriminator"] == 0.0
    diff = changed(before, state.params)
    assert diff and not any(n.startswith("discriminator.") for n in diff)


def test_one_step_fc3_matches_hand_gradient(bundle):
    w = LossWeights(0, 1, 0, 0, 0)
    cfg = small(weights=w, n_emotion=1, flags=AblationFlags(disable_personality=True), lr0=0.01)
    state = TrainState.fresh(ARCH, 3)
    batch = make_batch(bundle.emotion_train, None, 1, 0, 5, seed=1)
    f = fem_forward(batch.images(), state.params).data[0]
    W = state.params["eam"]["fc3.w"].data.copy()
    b = state.params["eam"]["fc3.b"].data.copy()
    pred = np.tanh(f @ W + b)
    r = batch.emotion_labels[0] - pred
    m = w.margin
    dl_dpred = -np.where(np.abs(r) < m, r / m, np.sign(r))
    dz = dl_dpred * (1 - pred ** 2)
    train_step(state, batch, cfg)
    np.testing.assert_allclose(state.params["eam"]["fc3.w"].data, W - 0.01 * np.outer(f, dz),
                               rtol=0, atol=1e-10)
    np.testing.assert_allclose(state.params["eam"]["fc3.b"].data, b - 0.01 * dz, rtol=0, atol=1e-10)
    # sanity on the oracle itself: its loss is the smooth-l1 sum
    assert smooth_l1_values(r, m).sum() >= 0


def test_frozen_group_discipline(bundle, monkeypatch):
    cfg = small()
    state = TrainState.fresh(ARCH, 1)
    snaps = [snapshot(state.params)]
    real = tr._sgd

    def spy(st, groups, lr, momentum):
        real(st, groups, lr, momentum)
        snaps.append(snapshot(st.params))

    monkeypatch.setattr(tr, "_sgd", spy)
    train_step(state, tr.batch_for_step(bundle, cfg, 0), cfg)
    assert len(snaps) == 3
    after_a = {n for n in snaps[0] if not np.array_equal(snaps[0][n], snaps[1][n])}
    assert after_a and all(n.startswith("discriminator.") for n in after_a)
    for n in snaps[1]:
        if n.startswith("discriminator."):
            assert snaps[2][n].tobytes() == snaps[1][n].tobytes()


def test_single_task_emotion_keeps_personality_heads(bundle):
    cfg = small(flags=AblationFlags(disable_personality=True))
    state, _ = run_training(cfg, bundle, ARCH)
    init = TrainState.fresh(ARCH, cfg.model_seed).params
    for g in ("pam", "ram", "discriminator"):
        for (n, a), b in zip(state.params[g].items(), init.tensors(g)):
            assert a.data.tobytes() == b.data.tobytes(), n


def test_single_task_personality_keeps_emotion_head(bundle):
    cfg = small(flags=AblationFlags(disable_emotion=True, disable_ram=True))
    state, _ = run_training(cfg, bundle, ARCH)
    init = TrainState.fresh(ARCH, cfg.model_seed).params
    for a, b in zip(state.params.tensors("eam"), init.tensors("eam")):
        assert a.data.tobytes() == b.data.tobytes()


def test_log_record_fields(bundle):
    cfg = small(total_steps=1)
    _, hist = run_training(cfg, bundle, ARCH)
    rec = hist[0]
    for key in ("step", "lr", "personality", "emotion", "discriminator", "adversarial", "ram",
                "total", "grad_norm"):
        assert key in rec
    assert set(rec["grad_norm"]) == {"fem", "pam", "eam", "ram", "discriminator"}
    expected = sum(getattr(cfg.weights, f"lambda{i + 1}") * rec[t]
                   for i, t in enumerate(("personality", "emotion", "discriminator",
                                          "adversarial", "ram")))
    assert rec["total"] == pytest.approx(expected, abs=1e-12)


# -- run level ------------------------------------------------------------

def test_same_seed_byte_identical_checkpoint(bundle, tmp_path):
    cfg = small()
    run_training(cfg, bundle, ARCH, out_dir=tmp_path / "a")
    run_training(cfg, bundle, ARCH, out_dir=tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a" / "checkpoint").iterdir())
    assert files
    for name in files:
        assert (tmp_path / "a" / "checkpoint" / name).read_bytes() == \
            (tmp_path / "b" / "checkpoint" / name).read_bytes(), name
    la = (tmp_path / "a" / "log.jsonl").read_text().splitlines()
    lb = (tmp_path / "b" / "log.jsonl").read_text().splitlines()
    assert la == lb and len(la) == cfg.total_steps


def test_resume_continues_trajectory(bundle, tmp_path):
    full = small(total_steps=4, checkpoint_every=2)
    state_full, hist_full = run_training(full, bundle, ARCH, out_dir=tmp_path / "full")
    state, hist = run_training(full, bundle, ARCH, resume_from=tmp_path / "full" / "checkpoint_2")
    assert [r["step"] for r in hist] == [2, 3]
    assert hist[-1]["total"] == hist_full[-1]["total"]
    for (n, a), (_, b) in zip(state.params.named(), state_full.params.named()):
        assert a.data.tobytes() == b.data.tobytes(), n


def test_manifest_written(bundle, tmp_path):
    run_training(small(total_steps=2), bundle, ARCH, out_dir=tmp_path)
    man = json.loads((tmp_path / "train_manifest.json").read_text())
    assert man["optimizer"]["momentum"] == 0.9
    assert man["steps_run"] == 2 and man["train_config"]["decay_steps"] == [1]
    assert man["data_config"]["seed"] == 0


def test_k_larger_than_frames_fails_before_step_zero(bundle, tmp_path):
    with pytest.raises(ConfigError):
        run_training(small(k=20), bundle, ARCH, out_dir=tmp_path / "x")
    assert not (tmp_path / "x").exists()


def test_pool_too_small_rejected(bundle):
    with pytest.raises(ConfigError):
        run_training(small(n_emotion=1000), bundle, ARCH)


def test_max_consensus_trains(bundle):
    cfg = small(consensus=MAX, total_steps=2)
    state, hist = run_training(cfg, bundle, ARCH)
    assert state.params.arch.consensus == MAX
    assert all(np.isfinite(r["total"]) for r in hist)


def test_nonfinite_aborts_with_diagnostic(bundle, tmp_path):
    cfg = small(lr0=1e12, total_steps=50, decay_steps=())
    with pytest.raises(tr.NumericalAbort) as info, np.errstate(all="ignore"):
        run_training(cfg, bundle, ARCH, out_dir=tmp_path)
    assert "step" in info.value.diagnostic
    assert (tmp_path / "abort_diagnostic.json").exists()


def test_video_order_inside_batch_is_seed_scoped(bundle):
    cfg = small()
    b1 = tr.batch_for_step(bundle, cfg, 3)
    b2 = tr.batch_for_step(bundle, replace(cfg, lr0=0.5), 3)
    assert b1.images().tobytes() == b2.images().tobytes()

import re

import numpy as np
import pytest

from persemon import tensor as T
from persemon.data import gen_emotion_set, gen_personality_set
from persemon.errors import ConfigError, ContractError
from persemon.model import (GROUPS, MAX, ArchitectureConfig, consensus, discriminator_forward,
                            eam_forward, fem_forward, fuse_pam_ram, init_params, load_checkpoint,
                            pam_forward, ram_forward, save_checkpoint)
from persemon.tensor import Tensor


@pytest.fixture(scope="module")
def params():
    return init_params(ArchitectureConfig(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(3)


def leaves(out: Tensor) -> set[int]:
    return {id(n) for n in T._topo_order(out) if not n._parents}


def test_fem_shape_micro(params, rng):
    out = fem_forward(rng.uniform(0, 1, (4, 1, 32, 32)), params)
    assert out.shape == (4, 64)


def test_fem_identical_frames_identical_rows(params, rng):
    img = rng.uniform(0, 1, (1, 1, 32, 32))
    out = fem_forward(np.concatenate([img, img]), params).data
    assert out[0].tobytes() == out[1].tobytes()


def test_fem_rejects_wrong_size(params):
    with pytest.raises(T.DimensionError):
        fem_forward(np.zeros((2, 1, 28, 28)), params)


def test_full_preset_matches_architecture_table():
    arch = ArchitectureConfig.full()
    assert arch.widths == (64, 128, 256, 512)
    assert arch.residual_units == (1, 2, 4, 1)
    assert arch.feature_dim == 512 and arch.ram_hidden == 128
    p = init_params(arch, 0)
    assert p["pam"]["fc2.w"].shape == (512, 5)
    assert p["eam"]["fc3.w"].shape == (512, 2)
    assert p["ram"]["fc4.w"].shape == (2, 128)
    assert p["ram"]["fc5.w"].shape == (128, 5)
    assert p["discriminator"]["fc6.w"].shape == (512, 2)
    convs = [k for k in p["fem"] if k.startswith("conv") and re.search(r"\.w\d?$", k)]
    # one downsampling conv per block plus two convs per residual unit
    assert len(convs) == 4 + 2 * 8


def test_full_preset_forward_shape():
    p = init_params(ArchitectureConfig.full(), 0)
    out = fem_forward(np.random.default_rng(0).uniform(0, 1, (1, 1, 112, 112)), p)
    assert out.shape == (1, 512)


def test_parameter_groups_disjoint(params):
    seen = {}
    for g in GROUPS:
        for t in params[g].values():
            assert id(t) not in seen
            seen[id(t)] = g
    assert len(seen) == len(list(params.named()))


# -- personality head -----------------------------------------------------

def test_pam_single_frame(params, rng):
    f = Tensor(rng.normal(size=(1, 64)))
    traits, logits = pam_forward(f, params)
    w, b = params["pam"]["fc2.w"].data, params["pam"]["fc2.b"].data
    expected = 1 / (1 + np.exp(-(f.data @ w + b)))
    np.testing.assert_allclose(traits.data, expected[0], rtol=1e-12, atol=1e-15)
    assert logits.shape == (1, 5)


def test_pam_duplicate_and_permutation(params, rng):
    f = rng.normal(size=(1, 64))
    one, _ = pam_forward(Tensor(f), params)
    many, _ = pam_forward(Tensor(np.repeat(f, 6, axis=0)), params)
    np.testing.assert_allclose(many.data, one.data, rtol=1e-12)
    feats = rng.normal(size=(7, 64))
    a, _ = pam_forward(Tensor(feats), params)
    b, _ = pam_forward(Tensor(feats[rng.permutation(7)]), params)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-12, atol=1e-15)


def test_pam_average_matches_loop_oracle(params, rng):
    feats = rng.normal(size=(10, 64))
    w, b = params["pam"]["fc2.w"].data, params["pam"]["fc2.b"].data
    acc = np.zeros(5)
    for k in range(10):
        acc += feats[k] @ w + b
    expected = 1 / (1 + np.exp(-acc / 10))
    traits, _ = pam_forward(Tensor(feats), params)
    np.testing.assert_allclose(traits.data, expected, rtol=0, atol=1e-12)


def test_pam_batched_equals_per_video(params, rng):
    feats = rng.normal(size=(3, 4, 64))
    batched, _ = pam_forward(Tensor(feats), params)
    for v in range(3):
        single, _ = pam_forward(Tensor(feats[v]), params)
        np.testing.assert_allclose(batched.data[v], single.data, rtol=1e-13)


def test_pam_empty_rejected(params):
    with pytest.raises(ContractError):
        pam_forward(Tensor(np.zeros((0, 64))), params)


# -- emotion head ---------------------------------------------------------

def test_eam_zero_weights_gives_zero(rng):
    p = init_params(ArchitectureConfig(), 1)
    p["eam"]["fc3.w"].data[...] = 0
    out = eam_forward(Tensor(rng.normal(size=(5, 64))), p)
    np.testing.assert_array_equal(out.data, 0.0)


def test_eam_range(params, rng):
    out = eam_forward(Tensor(rng.normal(scale=50, size=(20, 64))), params)
    assert np.all(np.abs(out.data) <= 1)


def test_eam_gradient_reaches_backbone(params, rng):
    imgs = rng.uniform(0, 1, (2, 1, 32, 32))
    w = params["fem"]["conv2.w"]
    params.zero_grad()
    eam_forward(fem_forward(imgs, params), params).sum().backward()
    assert np.abs(w.grad).max() > 0
    # finite-difference spot check on one coordinate
    idx = np.unravel_index(np.argmax(np.abs(w.grad)), w.shape)
    orig = w.data[idx]
    vals = []
    for d in (1e-4, -1e-4):
        w.data[idx] = orig + d
        vals.append(eam_forward(fem_forward(imgs, params), params).sum().item())
    w.data[idx] = orig
    num = (vals[0] - vals[1]) / 2e-4
    assert abs(num - w.grad[idx]) <= 1e-4 * abs(num)


# -- relationship head ----------------------------------------------------

def test_ram_depends_only_on_mean_emotion(params, rng):
    emo = rng.uniform(-1, 1, (8, 2))
    a = ram_forward(emo, params).data
    b = ram_forward(emo[rng.permutation(8)], params).data
    c = ram_forward(np.repeat(emo.mean(axis=0, keepdims=True), 8, axis=0), params).data
    d = ram_forward(emo.mean(axis=0, keepdims=True), params).data
    np.testing.assert_allclose(b, a, rtol=1e-12)
    np.testing.assert_allclose(c, a, rtol=1e-12)
    np.testing.assert_allclose(d, a, rtol=1e-12)


def test_ram_zero_weights_gives_half(rng):
    p = init_params(ArchitectureConfig(), 2)
    for t in p["ram"].values():
        t.data[...] = 0
    np.testing.assert_array_equal(ram_forward(rng.uniform(-1, 1, (4, 2)), p).data, 0.5)


def test_ram_empty_rejected(params):
    with pytest.raises(ContractError):
        ram_forward(np.zeros((0, 2)), params)


# -- dataset classifier ---------------------------------------------------

def test_discriminator_rows_sum_to_one(params, rng):
    q = discriminator_forward(Tensor(rng.normal(scale=10, size=(9, 64))), params).data
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)


def test_discriminator_zero_weights_uniform(rng):
    p = init_params(ArchitectureConfig(), 3)
    p["discriminator"]["fc6.w"].data[...] = 0
    q = discriminator_forward(Tensor(rng.normal(size=(4, 64))), p).data
    np.testing.assert_array_equal(q, 0.5)


def test_discriminator_learns_shift_on_frozen_random_backbone():
    from persemon.losses import discriminator_loss
    p = init_params(ArchitectureConfig(), 4)
    es = gen_emotion_set(200, seed=1)
    ps = gen_personality_set(20, 10, seed=2)
    imgs = np.concatenate([es.images, ps.frames.reshape(-1, 1, 32, 32)])
    tags = np.r_[np.zeros(200, dtype=int), np.ones(200, dtype=int)]
    with T.no_grad():
        feats = fem_forward(imgs, p).data
    rng = np.random.default_rng(0)
    order = rng.permutation(400)
    tr, te = order[:300], order[300:]
    mu, sd = feats[tr].mean(0), feats[tr].std(0) + 1e-8
    f = (feats - mu) / sd
    for _ in range(300):
        p.zero_grad()
        discriminator_loss(Tensor(f[tr]), tags[tr], p).backward()
        for t in p["discriminator"].values():
            t.data -= 0.5 * t.grad
    q = discriminator_forward(Tensor(f[te]), p).data
    assert (q.argmax(1) == tags[te]).mean() > 0.7


# -- consensus and fusion -------------------------------------------------

def test_consensus_variants():
    x = Tensor(np.array([[1.0] * 5, [3.0] * 5]))
    np.testing.assert_array_equal(consensus(x, axis=0).data, 2.0)
    np.testing.assert_array_equal(consensus(x, MAX, axis=0).data, 3.0)
    one = Tensor(np.arange(5.0).reshape(1, 5))
    np.testing.assert_array_equal(consensus(one, axis=0).data, np.arange(5.0))
    np.testing.assert_array_equal(consensus(one, MAX, axis=0).data, np.arange(5.0))


def test_max_consensus_permutation_and_duplication(rng):
    x = rng.normal(size=(6, 5))
    m = consensus(Tensor(x), MAX, axis=0).data
    np.testing.assert_array_equal(consensus(Tensor(x[::-1]), MAX, axis=0).data, m)
    np.testing.assert_array_equal(consensus(Tensor(np.vstack([x, x])), MAX, axis=0).data, m)


def test_fuse_pam_ram():
    np.testing.assert_allclose(fuse_pam_ram(np.full(5, 0.7), np.zeros(5), 6, 1), 0.6, rtol=1e-15)
    same = np.linspace(0.1, 0.9, 5)
    np.testing.assert_allclose(fuse_pam_ram(same, same, 3, 11), same, rtol=1e-15)
    pam = np.linspace(0.2, 0.6, 5)
    np.testing.assert_allclose(fuse_pam_ram(pam, 1 - pam, 1.0, 1e-9), pam, atol=1e-8)
    with pytest.raises(ContractError):
        fuse_pam_ram(pam, pam, 1.0, 0.0)


def test_fuse_is_convex(rng):
    pam, ram = rng.uniform(size=5), rng.uniform(size=5)
    f = fuse_pam_ram(pam, ram)
    assert np.all(np.minimum(pam, ram) <= f + 1e-15) and np.all(f <= np.maximum(pam, ram) + 1e-15)


# -- sharing and checkpoints ----------------------------------------------

def test_backbone_is_shared_storage(params, rng):
    feats = fem_forward(rng.uniform(0, 1, (4, 1, 32, 32)), params)
    pam, _ = pam_forward(feats.reshape(1, 4, -1), params)
    emo = eam_forward(feats, params)
    fem_ids = {id(t) for t in params["fem"].values()}
    assert fem_ids <= leaves(pam) and fem_ids <= leaves(emo)


def test_checkpoint_round_trip(tmp_path, params):
    save_checkpoint(tmp_path / "ck", params, step=7, seed=3)
    loaded, manifest, _ = load_checkpoint(tmp_path / "ck", params.arch)
    assert manifest["step"] == 7
    for (n1, a), (n2, b) in zip(params.named(), loaded.named()):
        assert n1 == n2 and a.data.tobytes() == b.data.tobytes()


def test_checkpoint_arch_mismatch(tmp_path, params):
    save_checkpoint(tmp_path / "ck", params, step=0, seed=0)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "ck", ArchitectureConfig(feature_dim=32))

import numpy as np
import pytest

from persemon.data import (DEFAULT_MATRIX, EMOTION_SHIFT, PERSONALITY_SHIFT, DataConfig,
                           PlantedRelationship, RenderParams, ShiftParams, eval_batch,
                           gen_emotion_set, gen_personality_set, generate_bundle, load_bundle,
                           make_batch, manifest_hash, save_bundle, segment_bounds,
                           sparse_indices, sparse_sample)
from persemon.errors import ConfigError
from persemon.metrics import linear_probe_accuracy


def test_emotion_set_is_deterministic():
    a, b = gen_emotion_set(10, seed=3), gen_emotion_set(10, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert gen_emotion_set(10, seed=4).labels.tobytes() != a.labels.tobytes()


def test_sample_ranges():
    es = gen_emotion_set(50, seed=0)
    assert es.images.min() >= 0 and es.images.max() <= 1
    assert np.abs(es.labels).max() <= 1
    s = es[0]
    assert s.image.shape == (1, 32, 32) and s.dataset_tag == "emotion"


def test_neutral_emotion_blob_is_centered():
    rp = RenderParams()
    rng = np.random.default_rng(0)
    from persemon.data import render
    img = render(np.zeros((1, 2)), ShiftParams(pixel_noise=0.0), rp, rng)[0, 0]
    yy, xx = np.mgrid[0:32, 0:32]
    cy, cx = (img * yy).sum() / img.sum(), (img * xx).sum() / img.sum()
    assert abs(cy - 15.5) < 1 and abs(cx - 15.5) < 1


def test_blob_moves_with_labels():
    from persemon.data import blob_center
    rp = RenderParams()
    r_up, _ = blob_center(0.5, 0.0, rp)
    _, c_right = blob_center(0.0, 0.5, rp)
    assert r_up < 15.5 < c_right


def test_linear_decoder_recovers_emotion():
    # least-squares oracle on raw pixels, held-out R^2 per label
    train = gen_emotion_set(1000, seed=11)
    test = gen_emotion_set(500, seed=12)
    def design(es):
        x = es.images.reshape(len(es), -1)
        return np.hstack([x, np.ones((len(es), 1))])
    coef, *_ = np.linalg.lstsq(design(train), train.labels, rcond=1e-6)
    pred = design(test) @ coef
    for j in range(2):
        y = test.labels[:, j]
        r2 = 1 - ((y - pred[:, j]) ** 2).sum() / ((y - y.mean()) ** 2).sum()
        assert r2 > 0.9


def test_zero_noise_video_frames_identical_and_traits_exact():
    rel = PlantedRelationship(noise_sigma=0.0)
    ps = gen_personality_set(5, 12, seed=1, rel=rel, shift=ShiftParams(pixel_noise=0.0), jitter=0.0)
    for v in range(5):
        for t in range(1, 12):
            np.testing.assert_array_equal(ps.frames[v, t], ps.frames[v, 0])
    z = ps.latents @ np.asarray(DEFAULT_MATRIX).T + np.asarray(rel.bias)
    np.testing.assert_allclose(ps.traits, 1 / (1 + np.exp(-z)), rtol=0, atol=1e-15)


def test_zero_relationship_gives_half():
    rel = PlantedRelationship(matrix=((0.0, 0.0),) * 5, bias=(0.0,) * 5, noise_sigma=0.0)
    ps = gen_personality_set(7, 10, seed=2, rel=rel)
    np.testing.assert_array_equal(ps.traits, 0.5)


def test_trait_latent_correlation_signs_match_matrix():
    # Monte-Carlo oracle over 500 videos
    ps = gen_personality_set(500, 10, seed=5)
    m = np.asarray(DEFAULT_MATRIX)
    for t in range(5):
        for d in range(2):
            corr = np.corrcoef(ps.traits[:, t], ps.latents[:, d])[0, 1]
            assert np.sign(corr) == np.sign(m[t, d]), (t, d, corr)


def test_traits_within_unit_interval():
    ps = gen_personality_set(200, 10, seed=9, rel=PlantedRelationship(noise_sigma=0.3))
    assert ps.traits.min() >= 0 and ps.traits.max() <= 1


def test_frames_per_video_below_k_rejected():
    with pytest.raises(ConfigError):
        gen_personality_set(3, 5, seed=0, k=10)
    with pytest.raises(ConfigError):
        DataConfig(frames_per_video=5, k=10).validate()


@pytest.mark.parametrize("length,k", [(10, 10), (20, 10), (23, 10), (7, 3), (100, 7)])
def test_segments_partition(length, k):
    segs = segment_bounds(length, k)
    assert len(segs) == k
    assert segs[0][0] == 0 and segs[-1][1] == length
    for (a, b), (c, _) in zip(segs, segs[1:]):
        assert b == c
    sizes = [b - a for a, b in segs]
    assert max(sizes) - min(sizes) <= 1 and min(sizes) >= 1


def test_sparse_sample_singleton_segments():
    ps = gen_personality_set(1, 10, seed=0)
    video = ps.video(0, 10)
    picked = sparse_sample(video, seed=3)
    assert [id(s) for s in picked] == [id(f) for f in video.frames]


def test_sparse_sample_respects_segments():
    rng = np.random.default_rng(0)
    for _ in range(200):
        idx = sparse_indices(20, 10, rng)
        assert all(2 * s <= i < 2 * s + 2 for s, i in enumerate(idx))


def test_sparse_sample_is_uniform_within_segments():
    rng = np.random.default_rng(1)
    draws = np.stack([sparse_indices(20, 10, rng) for _ in range(10000)])
    first = (draws == np.arange(0, 20, 2)).mean(axis=0)
    assert np.all(np.abs(first - 0.5) < 0.02)


def test_make_batch_default_composition():
    es = gen_emotion_set(120, seed=0)
    ps = gen_personality_set(12, 10, seed=1)
    b = make_batch(es, ps, 100, 10, 10, seed=0)
    assert b.size == 200
    assert b.images().shape == (200, 1, 32, 32)
    assert list(b.tags()) == [0] * 100 + [1] * 100


def test_make_batch_emotion_only_and_determinism():
    es = gen_emotion_set(40, seed=0)
    b = make_batch(es, None, 16, 0, 10, seed=4)
    assert b.n_videos == 0 and b.size == 16
    ps = gen_personality_set(8, 20, seed=1)
    b1 = make_batch(es, ps, 16, 4, 10, seed=9)
    b2 = make_batch(es, ps, 16, 4, 10, seed=9)
    assert b1.images().tobytes() == b2.images().tobytes()
    np.testing.assert_array_equal(b1.frame_index, b2.frame_index)


def test_make_batch_pool_exhaustion():
    es = gen_emotion_set(5, seed=0)
    with pytest.raises(ConfigError):
        make_batch(es, None, 6, 0, 10, seed=0)


def test_eval_batch_keeps_video_order():
    ps = gen_personality_set(6, 10, seed=1)
    b = eval_batch(ps, 5)
    np.testing.assert_array_equal(b.traits, ps.traits)
    np.testing.assert_array_equal(b.video_index, np.arange(6))


def test_raw_pixels_separate_the_two_corpora():
    # precondition for the coherence experiments
    es = gen_emotion_set(400, seed=21, shift=EMOTION_SHIFT)
    ps = gen_personality_set(40, 10, seed=22, shift=PERSONALITY_SHIFT)
    x = np.concatenate([es.images.reshape(400, -1), ps.frames.reshape(400, -1)])
    y = np.r_[np.zeros(400, dtype=int), np.ones(400, dtype=int)]
    assert linear_probe_accuracy(x, y, seed=0) > 0.9


def test_bundle_round_trip(tmp_path):
    cfg = DataConfig(seed=5, n_emotion_train=20, n_emotion_test=10, n_videos_train=4,
                     n_videos_test=3, frames_per_video=12, k=4)
    bundle = generate_bundle(cfg)
    save_bundle(bundle, tmp_path / "d")
    loaded = load_bundle(tmp_path / "d")
    assert loaded.config == cfg
    for (name, a), (_, b) in zip(bundle.splits(), loaded.splits()):
        for attr in ("images", "labels", "frames", "frame_emotions", "latents", "traits"):
            if hasattr(a, attr):
                assert getattr(a, attr).tobytes() == getattr(b, attr).tobytes(), (name, attr)
    assert loaded.personality_train.relationship == bundle.personality_train.relationship


def test_bundle_bytes_layout(tmp_path):
    cfg = DataConfig(seed=1, n_emotion_train=3, n_emotion_test=2, n_videos_train=2,
                     n_videos_test=1, frames_per_video=10)
    bundle = generate_bundle(cfg)
    manifest = save_bundle(bundle, tmp_path)
    entry = manifest["splits"]["emotion_train"]["arrays"]["labels"]
    raw = (tmp_path / entry["file"]).read_bytes()
    assert len(raw) == 3 * 2 * 8
    np.testing.assert_array_equal(np.frombuffer(raw, "<f8").reshape(3, 2), bundle.emotion_train.labels)


def test_same_seed_same_manifest_hash(tmp_path):
    cfg = DataConfig(seed=2, n_emotion_train=5, n_emotion_test=5, n_videos_train=2,
                     n_videos_test=2, frames_per_video=10)
    save_bundle(generate_bundle(cfg), tmp_path / "a")
    save_bundle(generate_bundle(cfg), tmp_path / "b")
    assert manifest_hash(tmp_path / "a") == manifest_hash(tmp_path / "b")


def test_splits_are_disjoint_draws():
    b = generate_bundle(DataConfig(seed=0, n_emotion_train=50, n_emotion_test=50))
    assert not np.isin(b.emotion_train.labels[:, 0], b.emotion_test.labels[:, 0]).any()

"""Synthetic stand-ins for a frame-level emotion corpus and a video-level
personality corpus.

Every image is a Gaussian blob on a 1xSxS canvas.  The blob's horizontal
offset encodes valence and its vertical offset encodes arousal (up is
positive).  Each corpus carries its own nuisance (brightness offset and a
concentric ring background), so the two are separable from raw pixels.
Big-Five traits of a video are a fixed sigmoid map of the video's latent
(arousal, valence).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError

EMOTION = "emotion"
PERSONALITY = "personality"
TAG_INDEX = {EMOTION: 0, PERSONALITY: 1}
TRAITS = ("extraversion", "agreeableness", "conscientiousness", "neuroticism", "openness")

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ShiftParams:
    brightness: float = 0.0
    ring_amplitude: float = 0.0
    ring_period: float = 6.0
    pixel_noise: float = 0.02


# Emotion corpus carries the nuisance, personality corpus is clean.
EMOTION_SHIFT = ShiftParams(brightness=0.15, ring_amplitude=0.12)
PERSONALITY_SHIFT = ShiftParams()

# Columns are (arousal, valence).  Agreeableness and conscientiousness rows are
# nearly parallel; the openness row is close to the negated neuroticism row.
DEFAULT_MATRIX = (
    (1.4, 0.8),
    (0.4, 1.6),
    (0.5, 1.4),
    (0.7, -1.5),
    (-0.6, 1.5),
)
DEFAULT_BIAS = (0.0, 0.1, 0.1, -0.1, 0.0)


@dataclass(frozen=True)
class PlantedRelationship:
    matrix: tuple = DEFAULT_MATRIX
    bias: tuple = DEFAULT_BIAS
    noise_sigma: float = 0.02

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (5, 2) or np.asarray(self.bias).shape != (5,):
            raise ConfigError(f"planted matrix must be 5x2 with a 5-bias, got {m.shape}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def traits(self, latent: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """Map (..., 2) latents to (..., 5) traits, adding label noise if an rng is given."""
        z = np.asarray(latent) @ np.asarray(self.matrix, dtype=float).T + np.asarray(self.bias)
        y = 0.5 * (1.0 + np.tanh(0.5 * z))
        if rng is not None and self.noise_sigma > 0:
            y = y + rng.normal(0.0, self.noise_sigma, size=y.shape)
        return np.clip(y, 0.0, 1.0)


@dataclass(frozen=True)
class RenderParams:
    size: int = 32
    blob_sigma: float = 3.2
    blob_amplitude: float = 0.7
    # fraction of the image width covered by one unit of arousal/valence
    span: float = 0.35
    latent_range: float = 0.8


@dataclass
class SyntheticSample:
    image: np.ndarray
    arousal: float
    valence: float
    dataset_tag: str


@dataclass
class SyntheticVideo:
    frames: list[SyntheticSample]
    traits: np.ndarray
    segments: list[tuple[int, int]]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def blob_center(arousal, valence, render: RenderParams):
    """Pixel (row, col) of the blob center for the given emotion."""
    c = (render.size - 1) / 2.0
    span = render.span * render.size
    return c - np.asarray(arousal) * span, c + np.asarray(valence) * span


def _background(shift: ShiftParams, size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(yy - c, xx - c)
    rings = 0.5 * (1.0 + np.cos(2.0 * np.pi * r / shift.ring_period))
    return shift.brightness + shift.ring_amplitude * rings


def render(emotions: np.ndarray, shift: ShiftParams, render_params: RenderParams,
           rng: np.random.Generator) -> np.ndarray:
    """Render (n, 2) [arousal, valence] rows into (n, 1, S, S) images in [0, 1]."""
    emotions = np.asarray(emotions, dtype=float).reshape(-1, 2)
    s = render_params.size
    rows, cols = blob_center(emotions[:, 0], emotions[:, 1], render_params)
    grid = np.arange(s, dtype=float)
    gy = np.exp(-((grid[None, :] - rows[:, None]) ** 2) / (2 * render_params.blob_sigma ** 2))
    gx = np.exp(-((grid[None, :] - cols[:, None]) ** 2) / (2 * render_params.blob_sigma ** 2))
    img = render_params.blob_amplitude * gy[:, :, None] * gx[:, None, :]
    img = img + _background(shift, s)[None]
    if shift.pixel_noise > 0:
        img = img + rng.normal(0.0, shift.pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)[:, None, :, :]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class EmotionSet(Sequence):
    """Frame-level set; indexing yields :class:`SyntheticSample`."""

    images: np.ndarray          # (n, 1, S, S)
    labels: np.ndarray          # (n, 2) arousal, valence
    seed: int = 0
    shift: ShiftParams = field(default_factory=ShiftParams)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return SyntheticSample(self.images[i], float(self.labels[i, 0]),
                               float(self.labels[i, 1]), EMOTION)


@dataclass
class PersonalitySet(Sequence):
    """Video-level set; indexing yields :class:`SyntheticVideo`."""

    frames: np.ndarray          # (V, L, 1, S, S)
    frame_emotions: np.ndarray  # (V, L, 2) rendered emotion per frame (not a training label)
    latents: np.ndarray         # (V, 2)
    traits: np.ndarray          # (V, 5)
    seed: int = 0
    shift: ShiftParams = field(default_factory=ShiftParams)
    relationship: PlantedRelationship = field(default_factory=PlantedRelationship)

    def __len__(self) -> int:
        return len(self.traits)

    @property
    def frames_per_video(self) -> int:
        return self.frames.shape[1]

    def video(self, i: int, k: int) -> SyntheticVideo:
        frames = [SyntheticSample(self.frames[i, t], float(self.frame_emotions[i, t, 0]),
                                  float(self.frame_emotions[i, t, 1]), PERSONALITY)
                  for t in range(self.frames_per_video)]
        return SyntheticVideo(frames, self.traits[i].copy(), segment_bounds(self.frames_per_video, k))

    def __getitem__(self, i):
        return self.video(i, min(10, self.frames_per_video))


def gen_emotion_set(n: int, seed: int, shift: ShiftParams = EMOTION_SHIFT,
                    render_params: RenderParams = RenderParams()) -> EmotionSet:
    if n < 1:
        raise ContractError("n must be >= 1")
    rng = np.random.default_rng(seed)
    r = render_params.latent_range
    labels = rng.uniform(-r, r, size=(n, 2))
    images = render(labels, shift, render_params, rng)
    return EmotionSet(images, labels, seed, shift)


def gen_personality_set(n_videos: int, frames_per_video: int, seed: int,
                        rel: PlantedRelationship = PlantedRelationship(),
                        shift: ShiftParams = PERSONALITY_SHIFT,
                        render_params: RenderParams = RenderParams(),
                        jitter: float = 0.1, k: int = 1) -> PersonalitySet:
    if n_videos < 1:
        raise ContractError("n_videos must be >= 1")
    if frames_per_video < k:
        raise ConfigError(f"frames_per_video={frames_per_video} is smaller than K={k}")
    rng = np.random.default_rng(seed)
    r = render_params.latent_range
    latents = rng.uniform(-r, r, size=(n_videos, 2))
    emo = latents[:, None, :] + rng.normal(0.0, jitter, size=(n_videos, frames_per_video, 2)) \
        if jitter > 0 else np.repeat(latents[:, None, :], frames_per_video, axis=1)
    emo = np.clip(emo, -1.0, 1.0)
    traits = rel.traits(latents, rng)
    frames = render(emo.reshape(-1, 2), shift, render_params, rng)
    frames = frames.reshape(n_videos, frames_per_video, 1, render_params.size, render_params.size)
    return PersonalitySet(frames, emo, latents, traits, seed, shift, rel)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def segment_bounds(length: int, k: int) -> list[tuple[int, int]]:
    """Split [0, length) into k contiguous ranges whose sizes differ by at most one."""
    if k < 1 or length < k:
        raise ContractError(f"cannot split {length} frames into {k} segments")
    edges = [(i * length) // k for i in range(k + 1)]
    return list(zip(edges[:-1], edges[1:]))


def sparse_indices(length: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn frame index per segment, in segment order."""
    edges = np.array([(i * length) // k for i in range(k + 1)])
    return rng.integers(edges[:-1], edges[1:])


def sparse_sample(video: SyntheticVideo, seed: int | np.random.Generator) -> list[SyntheticSample]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo = np.array([a for a, _ in video.segments])
    hi = np.array([b for _, b in video.segments])
    return [video.frames[i] for i in rng.integers(lo, hi)]


@dataclass
class Batch:
    emotion_images: np.ndarray   # (n_e, 1, S, S)
    emotion_labels: np.ndarray   # (n_e, 2)
    video_frames: np.ndarray     # (n_v, K, 1, S, S)
    traits: np.ndarray           # (n_v, 5)
    emotion_index: np.ndarray
    video_index: np.ndarray
    frame_index: np.ndarray      # (n_v, K)

    @property
    def n_emotion(self) -> int:
        return len(self.emotion_labels)

    @property
    def n_videos(self) -> int:
        return len(self.traits)

    @property
    def k(self) -> int:
        return self.video_frames.shape[1]

    @property
    def size(self) -> int:
        return self.n_emotion + self.n_videos * self.k

    def images(self) -> np.ndarray:
        """All frames stacked: emotion frames first, then videos frame-major."""
        s = self.emotion_images.shape[-1] if self.n_emotion else self.video_frames.shape[-1]
        parts = [self.emotion_images.reshape(-1, 1, s, s), self.video_frames.reshape(-1, 1, s, s)]
        return np.concatenate(parts, axis=0)

    def tags(self) -> np.ndarray:
        return np.concatenate([np.full(self.n_emotion, TAG_INDEX[EMOTION]),
                               np.full(self.n_videos * self.k, TAG_INDEX[PERSONALITY])])


def make_batch(emotion_pool: EmotionSet | None, video_pool: PersonalitySet | None,
               n_emotion: int, n_videos: int, k: int,
               seed: int | np.random.Generator | Sequence[int]) -> Batch:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    size = None
    for pool in (emotion_pool, video_pool):
        if pool is not None:
            size = pool.images.shape[-1] if isinstance(pool, EmotionSet) else pool.frames.shape[-1]
    if n_emotion and (emotion_pool is None or n_emotion > len(emotion_pool)):
        raise ConfigError(f"emotion pool too small for {n_emotion} frames")
    if n_videos and (video_pool is None or n_videos > len(video_pool)):
        raise ConfigError(f"personality pool too small for {n_videos} videos")
    if n_videos and video_pool.frames_per_video < k:
        raise ConfigError(f"K={k} exceeds frames_per_video={video_pool.frames_per_video}")
    if size is None:
        raise ConfigError("make_batch needs at least one pool")

    e_idx = (rng.choice(len(emotion_pool), size=n_emotion, replace=False)
             if n_emotion else np.zeros(0, dtype=int))
    v_idx = (rng.choice(len(video_pool), size=n_videos, replace=False)
             if n_videos else np.zeros(0, dtype=int))
    if n_videos:
        f_idx = np.stack([sparse_indices(video_pool.frames_per_video, k, rng) for _ in v_idx])
        frames = video_pool.frames[v_idx[:, None], f_idx]
        traits = video_pool.traits[v_idx]
    else:
        f_idx = np.zeros((0, k), dtype=int)
        frames = np.zeros((0, k, 1, size, size))
        traits = np.zeros((0, 5))
    if n_emotion:
        e_img, e_lab = emotion_pool.images[e_idx], emotion_pool.labels[e_idx]
    else:
        e_img, e_lab = np.zeros((0, 1, size, size)), np.zeros((0, 2))
    return Batch(e_img, e_lab, frames, traits, e_idx, v_idx, f_idx)


def eval_batch(video_pool: PersonalitySet, k: int, seed: int = 12345) -> Batch:
    """Every video of a pool, in pool order, with one fixed sparse draw."""
    if video_pool.frames_per_video < k:
        raise ConfigError(f"K={k} exceeds frames_per_video={video_pool.frames_per_video}")
    rng = np.random.default_rng(seed)
    n = len(video_pool)
    v_idx = np.arange(n)
    f_idx = np.stack([sparse_indices(video_pool.frames_per_video, k, rng) for _ in v_idx])
    size = video_pool.frames.shape[-1]
    return Batch(np.zeros((0, 1, size, size)), np.zeros((0, 2)), video_pool.frames[v_idx[:, None], f_idx],
                 video_pool.traits.copy(), np.zeros(0, dtype=int), v_idx, f_idx)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------
# A dataset directory holds manifest.json plus one raw little-endian float64
# C-order file per array.  Shapes live in the manifest.

@dataclass
class DataConfig:
    seed: int = 0
    image_size: int = 32
    n_emotion_train: int = 300
    n_emotion_test: int = 300
    n_videos_train: int = 60
    n_videos_test: int = 100
    frames_per_video: int = 20
    k: int = 10
    jitter: float = 0.1
    noise_sigma: float = 0.02
    emotion_brightness: float = EMOTION_SHIFT.brightness
    emotion_ring_amplitude: float = EMOTION_SHIFT.ring_amplitude
    personality_brightness: float = PERSONALITY_SHIFT.brightness
    personality_ring_amplitude: float = PERSONALITY_SHIFT.ring_amplitude

    def validate(self) -> None:
        if self.frames_per_video < self.k:
            raise ConfigError(f"frames_per_video={self.frames_per_video} < k={self.k}")
        for name in ("n_emotion_train", "n_emotion_test", "n_videos_train", "n_videos_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def emotion_shift(self) -> ShiftParams:
        return ShiftParams(self.emotion_brightness, self.emotion_ring_amplitude)

    def personality_shift(self) -> ShiftParams:
        return ShiftParams(self.personality_brightness, self.personality_ring_amplitude)

    def relationship(self) -> PlantedRelationship:
        return PlantedRelationship(noise_sigma=self.noise_sigma)


@dataclass
class DatasetBundle:
    config: DataConfig
    emotion_train: EmotionSet
    emotion_test: EmotionSet
    personality_train: PersonalitySet
    personality_test: PersonalitySet

    def splits(self) -> Iterator[tuple[str, object]]:
        yield "emotion_train", self.emotion_train
        yield "emotion_test", self.emotion_test
        yield "personality_train", self.personality_train
        yield "personality_test", self.personality_test


def _split_seeds(seed: int) -> dict[str, int]:
    # distinct seeds per split keep train and test disjoint draws
    return {name: int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
            for i, name in enumerate(("emotion_train", "emotion_test",
                                      "personality_train", "personality_test"))}


def generate_bundle(cfg: DataConfig) -> DatasetBundle:
    cfg.validate()
    rp = RenderParams(size=cfg.image_size)
    seeds = _split_seeds(cfg.seed)
    rel = cfg.relationship()
    emo = [gen_emotion_set(n, seeds[name], cfg.emotion_shift(), rp)
           for name, n in (("emotion_train", cfg.n_emotion_train),
                           ("emotion_test", cfg.n_emotion_test))]
    per = [gen_personality_set(n, cfg.frames_per_video, seeds[name], rel,
                               cfg.personality_shift(), rp, cfg.jitter, cfg.k)
           for name, n in (("personality_train", cfg.n_videos_train),
                           ("personality_test", cfg.n_videos_test))]
    return DatasetBundle(cfg, emo[0], emo[1], per[0], per[1])


def _write_array(path: Path, arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    path.write_bytes(data.tobytes())
    return {"file": path.name, "shape": list(arr.shape), "dtype": "<f8",
            "sha256": hashlib.sha256(data.tobytes()).hexdigest()}


def _read_array(root: Path, entry: dict) -> np.ndarray:
    raw = (root / entry["file"]).read_bytes()
    arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
    return arr.astype(np.float64)


def save_bundle(bundle: DatasetBundle, out_dir: str | Path) -> dict:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    seeds = _split_seeds(bundle.config.seed)
    splits = {}
    for name, ds in bundle.splits():
        if isinstance(ds, EmotionSet):
            arrays = {"images": ds.images, "labels": ds.labels}
        else:
            arrays = {"frames": ds.frames, "frame_emotions": ds.frame_emotions,
                      "latents": ds.latents, "traits": ds.traits}
        splits[name] = {
            "seed": seeds[name],
            "shift": asdict(ds.shift),
            "arrays": {k: _write_array(root / f"{name}.{k}.bin", v) for k, v in arrays.items()},
        }
    rel = bundle.personality_train.relationship
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(bundle.config),
        "relationship": {"matrix": [list(r) for r in rel.matrix], "bias": list(rel.bias),
                         "noise_sigma": rel.noise_sigma},
        "splits": splits,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_bundle(data_dir: str | Path) -> DatasetBundle:
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise ConfigError(f"{root} has no manifest.json")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset format {manifest.get('format_version')}")
    cfg = DataConfig(**manifest["config"])
    r = manifest["relationship"]
    rel = PlantedRelationship(tuple(map(tuple, r["matrix"])), tuple(r["bias"]), r["noise_sigma"])
    sets = {}
    for name, entry in manifest["splits"].items():
        arr = {k: _read_array(root, v) for k, v in entry["arrays"].items()}
        shift = ShiftParams(**entry["shift"])
        if name.startswith("emotion"):
            sets[name] = EmotionSet(arr["images"], arr["labels"], entry["seed"], shift)
        else:
            sets[name] = PersonalitySet(arr["frames"], arr["frame_emotions"], arr["latents"],
                                        arr["traits"], entry["seed"], shift, rel)
    return DatasetBundle(cfg, sets["emotion_train"], sets["emotion_test"],
                         sets["personality_train"], sets["personality_test"])


def manifest_hash(data_dir: str | Path) -> str:
    return hashlib.sha256((Path(data_dir) / "manifest.json").read_bytes()).hexdigest()

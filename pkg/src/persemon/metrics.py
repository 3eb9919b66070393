"""Regression metrics, model evaluation, dataset probing and feature projection."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from . import tensor as T
from .data import EMOTION, PERSONALITY, TRAITS, EmotionSet, PersonalitySet, eval_batch
from .errors import ConfigError, ContractError
from .model import ModelParams, eam_forward, fem_forward, fuse_pam_ram, pam_forward, ram_forward

PATHS = ("pam", "ram", "fused", "emotion")
FUSION_WEIGHTS = (6.0, 1.0)


def _pair(labels, preds) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels, dtype=float)
    p = np.asarray(preds, dtype=float)
    if y.shape != p.shape:
        raise ContractError(f"labels {y.shape} and predictions {p.shape} differ in shape")
    if y.size == 0:
        raise ContractError("metric over empty input")
    return y, p


def mean_accuracy(labels, preds) -> float:
    """One minus the mean absolute error."""
    y, p = _pair(labels, preds)
    return float(1.0 - np.abs(y - p).mean())


def mse(labels, preds) -> float:
    y, p = _pair(labels, preds)
    return float(((y - p) ** 2).mean())


def r_squared(labels, preds) -> float:
    """Coefficient of determination against the label mean.

    NaN (with a warning) when the labels have zero variance.
    """
    y, p = _pair(labels, preds)
    if y.size < 2:
        raise ContractError("r_squared needs at least two samples")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        warnings.warn("r_squared undefined for constant labels", RuntimeWarning, stacklevel=2)
        return math.nan
    return 1.0 - float(((y - p) ** 2).sum()) / ss_tot


@dataclass
class TraitScores:
    mse: dict
    accuracy: dict
    r2: dict
    mse_mean: float
    accuracy_mean: float
    r2_mean: float | None
    r2_undefined: list = field(default_factory=list)


def score_traits(labels: np.ndarray, preds: np.ndarray) -> TraitScores:
    m, a, r, undefined = {}, {}, {}, []
    for j, name in enumerate(TRAITS):
        m[name] = mse(labels[:, j], preds[:, j])
        a[name] = mean_accuracy(labels[:, j], preds[:, j])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            val = r_squared(labels[:, j], preds[:, j])
        if math.isnan(val):
            undefined.append(name)
            r[name] = None
        else:
            r[name] = val
    defined = [v for v in r.values() if v is not None]
    return TraitScores(m, a, r, float(np.mean(list(m.values()))), float(np.mean(list(a.values()))),
                       float(np.mean(defined)) if defined else None, undefined)


@dataclass
class EvalReport:
    personality: dict = field(default_factory=dict)   # path -> TraitScores as dict
    emotion: dict | None = None
    probe_accuracy: float | None = None
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = []
        for path, s in self.personality.items():
            lines.append(f"[{path}] personality")
            lines.append(f"  {'trait':<18}{'mse':>10}{'A':>10}{'R2':>10}")
            for t in TRAITS:
                r2 = s["r2"][t]
                lines.append(f"  {t:<18}{s['mse'][t]:>10.6f}{s['accuracy'][t]:>10.6f}"
                             f"{(f'{r2:.6f}' if r2 is not None else 'undef'):>10}")
            r2m = s["r2_mean"]
            lines.append(f"  {'mean':<18}{s['mse_mean']:>10.6f}{s['accuracy_mean']:>10.6f}"
                         f"{(f'{r2m:.6f}' if r2m is not None else 'undef'):>10}")
        if self.emotion is not None:
            e = self.emotion
            lines.append("[emotion]")
            lines.append(f"  arousal mse {e['arousal_mse']:.6f}  valence mse {e['valence_mse']:.6f}"
                         f"  mean mse {e['mse']:.6f}")
        if self.probe_accuracy is not None:
            lines.append(f"[probe] dataset accuracy {self.probe_accuracy:.6f}")
        return "\n".join(lines)


def _features(params: ModelParams, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([fem_forward(images[i:i + chunk], params).data
                               for i in range(0, len(images), chunk)], axis=0)


def predict_emotions(params: ModelParams, images: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return eam_forward(T.Tensor(_features(params, images)), params).data


def predict_personality(params: ModelParams, videos: PersonalitySet, k: int,
                        seed: int = 12345) -> dict[str, np.ndarray]:
    """PAM, RAM and fused trait predictions for every video from one sparse draw."""
    batch = eval_batch(videos, k, seed)
    feats = _features(params, batch.images()).reshape(len(videos), k, -1)
    with T.no_grad():
        pam, _ = pam_forward(T.Tensor(feats), params)
        emo = eam_forward(T.Tensor(feats.reshape(-1, feats.shape[-1])), params)
        ram = ram_forward(emo.reshape(len(videos), k, 2), params)
    return {"pam": pam.data, "ram": ram.data, "fused": fuse_pam_ram(pam, ram, *FUSION_WEIGHTS)}


def evaluate_model(params: ModelParams, emotion_set: EmotionSet | None = None,
                   personality_set: PersonalitySet | None = None, k: int = 10,
                   paths=PATHS, probe: bool = False, seed: int = 12345) -> EvalReport:
    paths = tuple(paths)
    bad = set(paths) - set(PATHS)
    if bad:
        raise ConfigError(f"unknown evaluation paths {sorted(bad)}")
    want_per = [p for p in paths if p != "emotion"]
    if want_per and personality_set is None:
        raise ConfigError(f"paths {want_per} need a personality evaluation set")
    if "emotion" in paths and emotion_set is None:
        raise ConfigError("emotion path needs an emotion evaluation set")

    report = EvalReport(config={"architecture": params.arch.to_dict(), "k": k, "paths": list(paths),
                                "sample_seed": seed})
    if want_per:
        preds = predict_personality(params, personality_set, k, seed)
        for path in want_per:
            report.personality[path] = asdict(score_traits(personality_set.traits, preds[path]))
        report.counts["videos"] = len(personality_set)
    if "emotion" in paths:
        pred = predict_emotions(params, emotion_set.images)
        y = emotion_set.labels
        report.emotion = {"arousal_mse": mse(y[:, 0], pred[:, 0]),
                          "valence_mse": mse(y[:, 1], pred[:, 1]), "mse": mse(y, pred)}
        report.counts["frames"] = len(emotion_set)
    if probe:
        if emotion_set is None or personality_set is None:
            raise ConfigError("probe needs both evaluation sets")
        report.probe_accuracy = probe_discriminator(params, emotion_set, personality_set, seed=seed)
    return report


def probe_features(params: ModelParams, emotion_set: EmotionSet, personality_set: PersonalitySet,
                   n_per_class: int | None = None, seed: int = 0):
    """Balanced (features, tags) with tag 0 = emotion corpus, 1 = personality corpus."""
    rng = np.random.default_rng(seed)
    per_frames = personality_set.frames.reshape(-1, *personality_set.frames.shape[2:])
    n = min(len(emotion_set), len(per_frames))
    if n_per_class is not None:
        n = min(n, n_per_class)
    e_idx = np.sort(rng.choice(len(emotion_set), n, replace=False))
    p_idx = np.sort(rng.choice(len(per_frames), n, replace=False))
    images = np.concatenate([emotion_set.images[e_idx], per_frames[p_idx]])
    tags = np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])
    return _features(params, images), tags


def linear_probe_accuracy(features: np.ndarray, tags: np.ndarray, seed: int = 0,
                          train_fraction: float = 0.5) -> float:
    """Held-out accuracy of a fresh logistic-regression probe."""
    tags = np.asarray(tags)
    classes = np.unique(tags)
    if len(classes) < 2:
        raise ContractError("probe set must contain both dataset tags")
    rng = np.random.default_rng(seed)
    train = np.zeros(len(tags), dtype=bool)
    for c in classes:
        idx = np.flatnonzero(tags == c)
        train[rng.choice(idx, int(round(train_fraction * len(idx))), replace=False)] = True
    scaler = StandardScaler().fit(features[train])
    clf = LogisticRegression(max_iter=2000)
    clf.fit(scaler.transform(features[train]), tags[train])
    return float(clf.score(scaler.transform(features[~train]), tags[~train]))


def probe_discriminator(params: ModelParams, emotion_set: EmotionSet,
                        personality_set: PersonalitySet, n_per_class: int | None = 300,
                        seed: int = 0) -> float:
    feats, tags = probe_features(params, emotion_set, personality_set, n_per_class, seed)
    return linear_probe_accuracy(feats, tags, seed)


def pca_2d(features: np.ndarray) -> np.ndarray:
    """Project centered rows onto the top two principal axes.

    Each axis is signed so that its largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=float)
    if x.shape[0] < 2:
        raise ContractError("projection needs at least two samples")
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    axes = vt[:2]
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros_like(axes[0])])
    for i in range(2):
        j = np.argmax(np.abs(axes[i]))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    return xc @ axes.T


def projection_csv(coords: np.ndarray, tags) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "tag"])
    for (x, y), t in zip(coords, tags):
        w.writerow([repr(float(x)), repr(float(y)), t])
    return buf.getvalue()


def export_projection(params: ModelParams, emotion_set: EmotionSet, personality_set: PersonalitySet,
                      out_path: str | Path | None = None, n_per_class: int | None = 300,
                      seed: int = 0) -> str:
    feats, tags = probe_features(params, emotion_set, personality_set, n_per_class, seed)
    names = [EMOTION if t == 0 else PERSONALITY for t in tags]
    text = projection_csv(pca_2d(feats), names)
    if out_path is not None:
        Path(out_path).write_text(text)
    return text

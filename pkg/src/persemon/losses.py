"""Objective terms and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import TAG_INDEX, Batch
from .errors import ContractError
from .model import (ModelParams, discriminator_logits, eam_forward, fem_forward, pam_forward,
                    ram_forward)
from .tensor import CONTINUOUS, PAPER_LITERAL, Tensor, smooth_l1_values

TERMS = ("personality", "emotion", "discriminator", "adversarial", "ram")
MEAN = "mean"
SUM = "sum"


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0   # personality
    lambda2: float = 1.0   # emotion
    lambda3: float = 0.1   # dataset classifier
    lambda4: float = 0.1   # adversarial confusion
    lambda5: float = 0.1   # relationship
    margin: float = 0.05
    smooth_l1_variant: str = CONTINUOUS
    reduction: str = MEAN

    def __post_init__(self):
        if min(self.lambdas()) < 0:
            raise ContractError("loss weights must be nonnegative")
        if self.margin <= 0:
            raise ContractError("margin must be positive")
        if self.smooth_l1_variant not in (CONTINUOUS, PAPER_LITERAL):
            raise ContractError(f"unknown smooth-l1 variant {self.smooth_l1_variant!r}")
        if self.reduction not in (MEAN, SUM):
            raise ContractError(f"unknown reduction {self.reduction!r}")

    def lambdas(self) -> tuple[float, ...]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)

    def weight(self, term: str) -> float:
        return self.lambdas()[TERMS.index(term)]


@dataclass(frozen=True)
class AblationFlags:
    disable_personality: bool = False
    disable_emotion: bool = False
    disable_ram: bool = False
    disable_coherence: bool = False
    ram_stop_gradient: bool = False

    def __post_init__(self):
        if self.disable_personality and self.disable_emotion:
            raise ContractError("at least one task must stay enabled")

    @property
    def single_task(self) -> bool:
        return self.disable_personality or self.disable_emotion

    def active(self, term: str) -> bool:
        if term == "personality":
            return not self.disable_personality
        if term == "emotion":
            return not self.disable_emotion
        if term in ("discriminator", "adversarial"):
            # dataset confusion needs frames from both corpora
            return not (self.disable_coherence or self.single_task)
        if term == "ram":
            return not (self.disable_ram or self.disable_personality)
        raise KeyError(term)


def smooth_l1(x: float, m: float = 0.05, variant: str = CONTINUOUS) -> float:
    return float(smooth_l1_values(np.asarray(x, dtype=float), m, variant))


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if per_sample.shape[0] == 0:
        raise ContractError("loss over an empty batch")
    return T.mean(per_sample) if reduction == MEAN else T.sum_(per_sample)


def regression_loss(pred: Tensor, labels, weights: LossWeights) -> Tensor:
    """Smooth-l1 summed over label dimensions, reduced over samples."""
    resid = T.sub(Tensor(labels), pred)
    per_sample = T.sum_(T.smooth_l1(resid, weights.margin, weights.smooth_l1_variant), axis=1)
    return _reduce(per_sample, weights.reduction)


def personality_loss(pred_traits: Tensor, traits, weights: LossWeights) -> Tensor:
    """Loss between consensus trait predictions (V, 5) and video labels."""
    return regression_loss(pred_traits, traits, weights)


def emotion_loss(pred: Tensor, labels, weights: LossWeights) -> Tensor:
    return regression_loss(pred, labels, weights)


def ram_loss(per_frame_emotions: Tensor, traits, params: ModelParams, weights: LossWeights,
             stop_gradient: bool = False) -> Tensor:
    """Relationship-head loss; ``stop_gradient`` keeps it from reaching EAM and FEM."""
    emo = per_frame_emotions.detach() if stop_gradient else per_frame_emotions
    return regression_loss(ram_forward(emo, params), traits, weights)


def _one_hot(tags: np.ndarray) -> np.ndarray:
    return np.eye(2)[np.asarray(tags, dtype=int)]


def discriminator_loss(features: Tensor, tags, params: ModelParams,
                       reduction: str = MEAN) -> Tensor:
    """Negative log-likelihood of each frame's true corpus; features are constants here."""
    logits = discriminator_logits(features.detach(), params)
    return _reduce(T.cross_entropy(logits, _one_hot(tags)), reduction)


def adversarial_confusion_loss(features: Tensor, params: ModelParams,
                               reduction: str = MEAN) -> Tensor:
    """Cross-entropy between the classifier output and the uniform distribution.

    Classifier weights are constants here, so only the features receive gradient.
    """
    logits = discriminator_logits(features, params, frozen=True)
    return _reduce(T.cross_entropy(logits, np.full(2, 0.5)), reduction)


@dataclass
class ForwardPass:
    features: Tensor
    frame_emotions: Tensor          # EAM output for every frame in the batch
    pred_traits: Tensor | None      # PAM consensus, (V, 5)
    n_emotion: int
    n_videos: int
    k: int

    def emotion_rows(self) -> Tensor:
        return self.frame_emotions[: self.n_emotion]

    def video_emotions(self) -> Tensor:
        return self.frame_emotions[self.n_emotion:].reshape(self.n_videos, self.k, 2)


def forward_batch(batch: Batch, params: ModelParams, flags: AblationFlags = AblationFlags()) -> ForwardPass:
    features = fem_forward(batch.images(), params)
    emotions = eam_forward(features, params)
    pred = None
    if batch.n_videos and flags.active("personality"):
        vid = features[batch.n_emotion:].reshape(batch.n_videos, batch.k, -1)
        pred, _ = pam_forward(vid, params)
    return ForwardPass(features, emotions, pred, batch.n_emotion, batch.n_videos, batch.k)


def term_losses(fp: ForwardPass, batch: Batch, params: ModelParams, weights: LossWeights,
                flags: AblationFlags = AblationFlags()) -> dict[str, Tensor]:
    """Every active, unweighted loss term as a graph node."""
    terms: dict[str, Tensor] = {}
    if flags.active("personality") and batch.n_videos:
        terms["personality"] = personality_loss(fp.pred_traits, batch.traits, weights)
    if flags.active("emotion") and batch.n_emotion:
        terms["emotion"] = emotion_loss(fp.emotion_rows(), batch.emotion_labels, weights)
    if flags.active("discriminator") and batch.n_emotion and batch.n_videos:
        terms["discriminator"] = discriminator_loss(fp.features, batch.tags(), params,
                                                    weights.reduction)
        terms["adversarial"] = adversarial_confusion_loss(fp.features, params, weights.reduction)
    if flags.active("ram") and batch.n_videos:
        terms["ram"] = ram_loss(fp.video_emotions(), batch.traits, params, weights,
                                flags.ram_stop_gradient)
    return terms


def weighted_sum(terms: dict[str, Tensor], weights: LossWeights,
                 include=TERMS) -> Tensor:
    total = Tensor(0.0)
    for name in include:
        if name in terms:
            total = T.add(total, T.mul(terms[name], weights.weight(name)))
    return total


def total_loss(batch: Batch, params: ModelParams, weights: LossWeights = LossWeights(),
               flags: AblationFlags = AblationFlags()) -> tuple[Tensor, dict[str, float]]:
    """Weighted objective over all five terms plus a per-term breakdown."""
    fp = forward_batch(batch, params, flags)
    terms = term_losses(fp, batch, params, weights, flags)
    total = weighted_sum(terms, weights)
    breakdown = {name: (terms[name].item() if name in terms else 0.0) for name in TERMS}
    breakdown["total"] = total.item()
    return total, breakdown


__all__ = [
    "AblationFlags", "ForwardPass", "LossWeights", "TERMS", "TAG_INDEX", "adversarial_confusion_loss",
    "discriminator_loss", "emotion_loss", "forward_batch", "personality_loss", "ram_loss",
    "smooth_l1", "term_losses", "total_loss", "weighted_sum",
]

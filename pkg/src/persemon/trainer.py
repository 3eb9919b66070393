"""Two-phase SGD training loop.

Each step first moves the dataset classifier on its own loss with every
other parameter frozen, then moves backbone and heads on the remaining
weighted terms with the classifier frozen.
"""

from __future__ import annotations

import json
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Batch, DatasetBundle, make_batch
from .errors import ConfigError
from .losses import (TERMS, AblationFlags, LossWeights, adversarial_confusion_loss,
                     forward_batch, term_losses, weighted_sum)
from .model import (AVERAGE, GROUPS, MAX, ArchitectureConfig, ModelParams, init_params,
                    load_checkpoint, save_checkpoint)

logger = logging.getLogger(__name__)

MAIN_GROUPS = ("fem", "pam", "eam", "ram")
MAIN_TERMS = ("personality", "emotion", "adversarial", "ram")


class NumericalAbort(RuntimeError):
    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    total_steps: int = 4000
    decay_steps: tuple | None = None     # defaults to 4/7 and 6/7 of total_steps
    decay_factor: float = 0.1
    n_emotion: int = 32
    n_videos: int = 4
    k: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    flags: AblationFlags = field(default_factory=AblationFlags)
    consensus: str = AVERAGE
    seed: int = 0
    init_seed: int | None = None         # defaults to seed
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        ds = self.milestones()
        if any(b <= a for a, b in zip(ds, ds[1:])) or any(s >= self.total_steps or s < 0 for s in ds):
            raise ConfigError(f"decay_steps {ds} must be increasing and < total_steps")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.consensus not in (AVERAGE, MAX):
            raise ConfigError(f"unknown consensus {self.consensus!r}")

    def milestones(self) -> tuple[int, ...]:
        if self.decay_steps is not None:
            return tuple(int(s) for s in self.decay_steps)
        # short runs would otherwise produce repeated or zero milestones
        return tuple(sorted({s for s in (self.total_steps * 4 // 7, self.total_steps * 6 // 7)
                             if 0 < s < self.total_steps}))

    def batch_sizes(self) -> tuple[int, int]:
        """(emotion frames, videos) per batch after single-task switches."""
        n_e = 0 if self.flags.disable_emotion else self.n_emotion
        n_v = 0 if self.flags.disable_personality else self.n_videos
        return n_e, n_v

    @property
    def model_seed(self) -> int:
        return self.seed if self.init_seed is None else self.init_seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_steps"] = list(self.milestones())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["flags"] = AblationFlags(**d.get("flags", {}))
        if d.get("decay_steps") is not None:
            d["decay_steps"] = tuple(d["decay_steps"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, config: TrainConfig) -> float:
    passed = sum(1 for s in config.milestones() if s <= step)
    return config.lr0 * config.decay_factor ** passed


@dataclass
class TrainState:
    params: ModelParams
    velocity: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, arch: ArchitectureConfig, seed: int) -> "TrainState":
        params = init_params(arch, seed)
        return cls(params, {name: np.zeros_like(t.data) for name, t in params.named()})


def _sgd(state: TrainState, groups, lr: float, momentum: float) -> None:
    for g in groups:
        for name, t in state.params[g].items():
            key = f"{g}.{name}"
            v = state.velocity[key]
            v *= momentum
            v += lr * t.grad
            t.data -= v


def _grad_norms(params: ModelParams) -> dict[str, float]:
    return {g: float(np.sqrt(sum(float((t.grad ** 2).sum()) for t in params.tensors(g)
                                 if t.grad is not None))) for g in GROUPS}


def train_step(state: TrainState, batch: Batch, config: TrainConfig) -> dict:
    """One discriminator sub-update then one main sub-update; returns the log record."""
    params, w, flags = state.params, config.weights, config.flags
    lr = lr_at(state.step, config)
    params.zero_grad()
    try:
        fp = forward_batch(batch, params, flags)
        terms = term_losses(fp, batch, params, w, flags)
        record = {"step": state.step, "lr": lr}
        record.update({name: (terms[name].item() if name in terms else 0.0) for name in TERMS})
        record["total"] = float(sum(w.weight(n) * record[n] for n in TERMS))

        # (a) dataset classifier; its loss only sees detached features
        if "discriminator" in terms and w.lambda3 > 0:
            T.mul(terms["discriminator"], w.lambda3).backward()
            _sgd(state, ("discriminator",), lr, config.momentum)
        norms = {"discriminator": _grad_norms(params)["discriminator"]}

        # (b) everything else against the just-updated, frozen classifier
        if "adversarial" in terms:
            terms["adversarial"] = adversarial_confusion_loss(fp.features, params, w.reduction)
        main = weighted_sum(terms, w, include=MAIN_TERMS)
        if main.requires_grad:
            main.backward()
            _sgd(state, MAIN_GROUPS, lr, config.momentum)
        g = _grad_norms(params)
        norms.update({k: g[k] for k in MAIN_GROUPS})
        record["grad_norm"] = norms
    except T.NonFiniteError as exc:
        diag = {"step": state.step, "error": str(exc), "lr": lr,
                "grad_norm": {g: _safe_norm(params, g) for g in GROUPS}}
        raise NumericalAbort(f"non-finite value at step {state.step}: {exc}", diag) from exc
    if not np.isfinite(record["total"]):
        raise NumericalAbort(f"non-finite loss at step {state.step}", dict(record))
    state.step += 1
    return record


def _safe_norm(params: ModelParams, group: str) -> float | None:
    try:
        return _grad_norms(params)[group]
    except Exception:
        return None


def batch_for_step(bundle: DatasetBundle, config: TrainConfig, step: int) -> Batch:
    n_e, n_v = config.batch_sizes()
    return make_batch(bundle.emotion_train if n_e else None,
                      bundle.personality_train if n_v else None,
                      n_e, n_v, config.k, np.random.default_rng([config.seed, step]))


def validate(config: TrainConfig, bundle: DatasetBundle, arch: ArchitectureConfig) -> None:
    n_e, n_v = config.batch_sizes()
    if n_v and config.k > bundle.personality_train.frames_per_video:
        raise ConfigError(f"K={config.k} exceeds frames_per_video="
                          f"{bundle.personality_train.frames_per_video}")
    if n_e > len(bundle.emotion_train):
        raise ConfigError(f"n_emotion={n_e} exceeds emotion pool of {len(bundle.emotion_train)}")
    if n_v > len(bundle.personality_train):
        raise ConfigError(f"n_videos={n_v} exceeds personality pool of "
                          f"{len(bundle.personality_train)}")
    if bundle.emotion_train.images.shape[-1] != arch.input_size:
        raise ConfigError(f"image size {bundle.emotion_train.images.shape[-1]} does not match "
                          f"architecture input {arch.input_size}")


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    return {f"velocity/{k}": v for k, v in state.velocity.items()}


def save_state(state: TrainState, out_dir, config: TrainConfig) -> Path:
    return save_checkpoint(out_dir, state.params, state.step, config.seed,
                           extra_arrays=_state_arrays(state),
                           meta={"train_config": config.to_dict()})


def load_state(ckpt_dir, arch: ArchitectureConfig | None = None) -> tuple[TrainState, dict]:
    params, manifest, extra = load_checkpoint(ckpt_dir, arch)
    velocity = {name: np.zeros_like(t.data) for name, t in params.named()}
    for k, v in extra.items():
        if k.startswith("velocity/"):
            velocity[k[len("velocity/"):]] = v.copy()
    return TrainState(params, velocity, manifest["step"]), manifest


def run_training(config: TrainConfig, bundle: DatasetBundle,
                 arch: ArchitectureConfig | None = None, out_dir=None,
                 resume_from=None, log_every: int = 0) -> tuple[TrainState, list[dict]]:
    """Train from scratch (or a checkpoint) for ``config.total_steps`` steps.

    With ``out_dir`` set, writes ``log.jsonl``, ``manifest.json`` and a final
    ``checkpoint/``; intermediate checkpoints go to ``checkpoint_<step>/``.
    """
    arch = arch or ArchitectureConfig()
    if arch.consensus != config.consensus:
        arch = replace(arch, consensus=config.consensus)
    validate(config, bundle, arch)
    if resume_from is not None:
        state, _ = load_state(resume_from, arch)
    else:
        state = TrainState.fresh(arch, config.model_seed)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "log.jsonl", "a" if resume_from is not None else "w")
    history = []
    started = time.perf_counter()
    try:
        while state.step < config.total_steps:
            batch = batch_for_step(bundle, config, state.step)
            try:
                rec = train_step(state, batch, config)
            except NumericalAbort as exc:
                if out is not None:
                    (out / "abort_diagnostic.json").write_text(json.dumps(exc.diagnostic, indent=2))
                raise
            history.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if log_every and rec["step"] % log_every == 0:
                logger.info("step %d lr %.2g total %.5f", rec["step"], rec["lr"], rec["total"])
            if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0 \
                    and state.step < config.total_steps:
                save_state(state, out / f"checkpoint_{state.step}", config)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save_state(state, out / "checkpoint", config)
        manifest = {
            "train_config": config.to_dict(),
            "architecture": arch.to_dict(),
            "optimizer": {"type": "sgd", "momentum": config.momentum, "weight_decay": 0.0},
            "build": git_describe(),
            "data_config": asdict(bundle.config),
            "steps_run": len(history),
            "final_step": state.step,
            "wall_clock_s": round(time.perf_counter() - started, 3),
        }
        (out / "train_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return state, history

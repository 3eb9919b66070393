"""Shared-backbone network with personality, emotion, relationship and
dataset-classifier heads.

The backbone (FEM) maps a grayscale frame to a feature vector.  On top of it:

* PAM  - FC2 per frame, consensus over a video's K frames, then sigmoid
* EAM  - FC3 per frame, tanh
* RAM  - consensus of a video's EAM outputs -> FC4 -> ReLU -> FC5 -> sigmoid
* dataset classifier - FC6 -> softmax over {emotion, personality}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

GROUPS = ("fem", "pam", "eam", "ram", "discriminator")
AVERAGE = "average"
MAX = "max"

FULL = "full"
MICRO = "micro"


@dataclass(frozen=True)
class ArchitectureConfig:
    preset: str = MICRO
    input_size: int = 32
    widths: tuple = (8, 16, 32, 64)
    residual_units: tuple = (1, 1, 1, 1)
    feature_dim: int = 64
    ram_hidden: int = 128
    activation: str = "prelu"
    consensus: str = AVERAGE
    consensus_post_squash: bool = False

    def __post_init__(self):
        if len(self.widths) != len(self.residual_units):
            raise ConfigError("widths and residual_units must have equal length")
        if self.activation not in ("prelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.consensus not in (AVERAGE, MAX):
            raise ConfigError(f"unknown consensus {self.consensus!r}")
        if self.input_size % (2 ** len(self.widths)):
            raise ConfigError(f"input_size {self.input_size} not divisible by {2 ** len(self.widths)}")

    @classmethod
    def full(cls, **overrides) -> "ArchitectureConfig":
        base = cls(preset=FULL, input_size=112, widths=(64, 128, 256, 512),
                   residual_units=(1, 2, 4, 1), feature_dim=512)
        return replace(base, **overrides)

    @classmethod
    def micro(cls, **overrides) -> "ArchitectureConfig":
        return replace(cls(), **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["residual_units"] = list(self.residual_units)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["residual_units"] = tuple(d["residual_units"])
        return cls(**d)

    @property
    def flat_dim(self) -> int:
        side = self.input_size // 2 ** len(self.widths)
        return self.widths[-1] * side * side


@dataclass
class ModelParams:
    """Trainable tensors split into disjoint named groups."""

    arch: ArchitectureConfig
    groups: dict = field(default_factory=dict)

    def __getitem__(self, group: str) -> dict:
        return self.groups[group]

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for g in GROUPS:
            for name, t in self.groups[g].items():
                yield f"{g}.{name}", t

    def tensors(self, *groups: str) -> list[Tensor]:
        groups = groups or GROUPS
        return [t for g in groups for t in self.groups[g].values()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named():
            if name not in state or state[name].shape != t.shape:
                raise ConfigError(f"checkpoint tensor {name} missing or misshapen")
            t.data[...] = state[name]

    def count(self, group: str | None = None) -> int:
        return sum(t.size for t in (self.tensors(group) if group else self.tensors()))


HEAD_STD = 0.01


def init_params(arch: ArchitectureConfig, seed: int) -> ModelParams:
    """He fan-in weights for hidden layers, small Gaussian output heads, zero biases,
    0.25 PReLU slopes.

    Output heads feed sigmoid, tanh or softmax; with He scaling their inputs
    start deep in saturation and the first updates cannot pull them out.
    """
    rng = np.random.default_rng(seed)

    def conv(cout, cin, name):
        std = np.sqrt(2.0 / (cin * 9))
        return Tensor(rng.normal(0.0, std, (cout, cin, 3, 3)), requires_grad=True, name=name)

    def fc(din, dout, name, std=None):
        std = np.sqrt(2.0 / din) if std is None else std
        w = Tensor(rng.normal(0.0, std, (din, dout)), requires_grad=True, name=f"{name}.w")
        return w, Tensor(np.zeros(dout), requires_grad=True, name=f"{name}.b")

    def slope(c, name):
        return Tensor(np.full(c, 0.25), requires_grad=True, name=name)

    fem: dict[str, Tensor] = {}
    cin = 1
    for b, (width, units) in enumerate(zip(arch.widths, arch.residual_units), start=1):
        fem[f"conv{b}.w"] = conv(width, cin, f"conv{b}.w")
        fem[f"conv{b}.slope"] = slope(width, f"conv{b}.slope")
        for u in range(units):
            for j in (1, 2):
                fem[f"conv{b}.res{u}.w{j}"] = conv(width, width, f"conv{b}.res{u}.w{j}")
                fem[f"conv{b}.res{u}.slope{j}"] = slope(width, f"conv{b}.res{u}.slope{j}")
        cin = width
    fem["fc1.w"], fem["fc1.b"] = fc(arch.flat_dim, arch.feature_dim, "fc1")
    if arch.activation == "relu":
        fem = {k: v for k, v in fem.items() if "slope" not in k}

    pam = dict(zip(("fc2.w", "fc2.b"), fc(arch.feature_dim, 5, "fc2", HEAD_STD)))
    eam = dict(zip(("fc3.w", "fc3.b"), fc(arch.feature_dim, 2, "fc3", HEAD_STD)))
    ram = dict(zip(("fc4.w", "fc4.b"), fc(2, arch.ram_hidden, "fc4")))
    ram.update(zip(("fc5.w", "fc5.b"), fc(arch.ram_hidden, 5, "fc5", HEAD_STD)))
    disc = dict(zip(("fc6.w", "fc6.b"), fc(arch.feature_dim, 2, "fc6", HEAD_STD)))
    return ModelParams(arch, {"fem": fem, "pam": pam, "eam": eam, "ram": ram,
                              "discriminator": disc})


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def fem_forward(images, params: ModelParams) -> Tensor:
    """(N, 1, S, S) frames -> (N, feature_dim) features."""
    arch = params.arch
    x = _as_tensor(images)
    if x.ndim != 4 or x.shape[1:] != (1, arch.input_size, arch.input_size):
        raise T.DimensionError(
            f"expected (N, 1, {arch.input_size}, {arch.input_size}) frames, got {x.shape}")
    fem = params["fem"]
    prelu = arch.activation == "prelu"

    def act(t, key):
        return T.prelu(t, fem[key]) if prelu else T.relu(t)

    h = x
    for b, units in enumerate(arch.residual_units, start=1):
        h = act(T.conv2d(h, fem[f"conv{b}.w"], 2), f"conv{b}.slope")
        for u in range(units):
            pre = f"conv{b}.res{u}"
            h = T.residual_unit(h, fem[f"{pre}.w1"], fem[f"{pre}.w2"],
                                act=lambda t, i, pre=pre: act(t, f"{pre}.slope{i + 1}"))
    return T.fully_connected(T.flatten(h), fem["fc1.w"], fem["fc1.b"])


def consensus(x: Tensor, variant: str = AVERAGE, axis: int = -2) -> Tensor:
    """Aggregate per-frame scores over the frame axis."""
    if x.shape[axis] < 1:
        raise ContractError("consensus over zero frames")
    axis = axis % x.ndim
    if variant == AVERAGE:
        return T.mean(x, axis=axis)
    if variant == MAX:
        return T.max_(x, axis=axis)
    raise ConfigError(f"unknown consensus variant {variant!r}")


def _video_view(x: Tensor) -> tuple[Tensor, bool]:
    # accept (K, D) for one video or (V, K, D) for a batch of videos
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim == 3:
        return x, False
    raise T.DimensionError(f"expected (K, D) or (V, K, D), got {x.shape}")


def pam_frame_logits(features: Tensor, params: ModelParams) -> Tensor:
    flat = features.reshape(-1, features.shape[-1])
    out = T.fully_connected(flat, params["pam"]["fc2.w"], params["pam"]["fc2.b"])
    return out.reshape(*features.shape[:-1], 5)


def pam_forward(features: Tensor, params: ModelParams,
                variant: str | None = None) -> tuple[Tensor, Tensor]:
    """Video-level traits and the per-frame raw scores they were pooled from.

    ``features`` is (K, D) for one video or (V, K, D).
    """
    variant = variant or params.arch.consensus
    feats, single = _video_view(features)
    if feats.shape[1] == 0:
        raise ContractError("pam_forward needs at least one frame")
    logits = pam_frame_logits(feats, params)
    if params.arch.consensus_post_squash:
        traits = consensus(T.sigmoid(logits), variant, axis=1)
    else:
        traits = T.sigmoid(consensus(logits, variant, axis=1))
    if single:
        return traits.reshape(5), logits.reshape(-1, 5)
    return traits, logits


def eam_forward(features: Tensor, params: ModelParams) -> Tensor:
    """Per-frame (arousal, valence) in (-1, 1)."""
    if features.ndim != 2:
        raise T.DimensionError(f"eam_forward expects (N, D), got {features.shape}")
    return T.tanh(T.fully_connected(features, params["eam"]["fc3.w"], params["eam"]["fc3.b"]))


def ram_forward(per_frame_emotions, params: ModelParams, variant: str | None = None) -> Tensor:
    """Traits from a video's per-frame emotion scores, (K, 2) or (V, K, 2)."""
    variant = variant or params.arch.consensus
    emo, single = _video_view(_as_tensor(per_frame_emotions))
    if emo.shape[1] == 0:
        raise ContractError("ram_forward needs at least one frame")
    pooled = consensus(emo, variant, axis=1)
    ram = params["ram"]
    hidden = T.relu(T.fully_connected(pooled, ram["fc4.w"], ram["fc4.b"]))
    traits = T.sigmoid(T.fully_connected(hidden, ram["fc5.w"], ram["fc5.b"]))
    return traits.reshape(5) if single else traits


def discriminator_logits(features: Tensor, params: ModelParams, frozen: bool = False) -> Tensor:
    w, b = params["discriminator"]["fc6.w"], params["discriminator"]["fc6.b"]
    if frozen:
        w, b = w.detach(), b.detach()
    return T.fully_connected(features, w, b)


def discriminator_forward(features: Tensor, params: ModelParams) -> Tensor:
    """Per-frame dataset distribution (column 0 emotion, column 1 personality)."""
    return T.softmax(discriminator_logits(features, params))


def fuse_pam_ram(pam_traits, ram_traits, w_pam: float = 6.0, w_ram: float = 1.0) -> np.ndarray:
    if w_pam <= 0 or w_ram <= 0:
        raise ContractError("fusion weights must be positive")
    pam = np.asarray(pam_traits.data if isinstance(pam_traits, Tensor) else pam_traits)
    ram = np.asarray(ram_traits.data if isinstance(ram_traits, Tensor) else ram_traits)
    return (w_pam * pam + w_ram * ram) / (w_pam + w_ram)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# Same on-disk layout as datasets: manifest.json plus raw little-endian
# float64 C-order files, one per named tensor.

CHECKPOINT_VERSION = 1


def save_checkpoint(out_dir: str | Path, params: ModelParams, step: int, seed: int,
                    extra_arrays: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    arrays = dict(params.state())
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = v
    tensors = {}
    for name, arr in sorted(arrays.items()):
        fname = name.replace("/", "__") + ".bin"
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        (root / fname).write_bytes(raw)
        tensors[name] = {"file": fname, "shape": list(arr.shape), "dtype": "<f8",
                         "sha256": hashlib.sha256(raw).hexdigest()}
    manifest = {"format_version": CHECKPOINT_VERSION, "architecture": params.arch.to_dict(),
                "step": int(step), "seed": int(seed), "tensors": tensors, "meta": meta or {}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_checkpoint(ckpt_dir: str | Path, expect_arch: ArchitectureConfig | None = None):
    """Returns (params, manifest, extra_arrays)."""
    root = Path(ckpt_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise ConfigError(f"{root} is not a checkpoint (no manifest.json)")
    manifest = json.loads(mpath.read_text())
    arch = ArchitectureConfig.from_dict(manifest["architecture"])
    if expect_arch is not None and expect_arch != arch:
        raise ConfigError(f"checkpoint architecture {arch} does not match {expect_arch}")
    arrays = {}
    for name, entry in manifest["tensors"].items():
        raw = (root / entry["file"]).read_bytes()
        arrays[name] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).astype(np.float64)
    params = init_params(arch, 0)
    params.load_state({k: v for k, v in arrays.items() if not k.startswith("extra/")})
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return params, manifest, extra

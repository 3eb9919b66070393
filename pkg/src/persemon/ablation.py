"""Paired-seed ablation suites.

Every variant of a suite trains on the same generated data and from the same
initial weights for a given seed; variants differ only in their training
flags.  Rows are (variant, seed); the summary holds per-metric paired
differences against the suite's reference variant.
"""

from __future__ import annotations

import csv
import json
import logging
import traceback
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import DataConfig, generate_bundle
from .losses import AblationFlags
from .metrics import evaluate_model, probe_discriminator
from .model import AVERAGE, MAX, ArchitectureConfig
from .trainer import TrainConfig, run_training

logger = logging.getLogger(__name__)

METRICS = ("emotion_mse", "pam_mse", "ram_mse", "fused_mse", "pam_accuracy", "pam_r2",
           "ram_r2", "ram_r2_min", "probe_accuracy")


@dataclass(frozen=True)
class Variant:
    name: str
    flags: AblationFlags = AblationFlags()
    consensus: str = AVERAGE
    k: int | None = None


JOINT = Variant("joint")
SUITES: dict[str, tuple[tuple[Variant, ...], str]] = {
    "table4": ((Variant("emotion_only", AblationFlags(disable_personality=True)),
                Variant("personality_only", AblationFlags(disable_emotion=True)),
                Variant("joint_no_ram", AblationFlags(disable_ram=True)),
                JOINT), "joint"),
    "coherence": ((JOINT, Variant("no_coherence", AblationFlags(disable_coherence=True))), "joint"),
    "consensus": ((JOINT, Variant("max_consensus", consensus=MAX)), "joint"),
    "ksweep": ((Variant("k5", k=5), Variant("k10", k=10), Variant("k20", k=20)), "k10"),
}


def variants_for(suite: str) -> tuple[tuple[Variant, ...], str]:
    if "+" in suite:
        seen: dict[str, Variant] = {}
        ref = None
        for part in suite.split("+"):
            vs, r = variants_for(part)
            ref = ref or r
            for v in vs:
                seen.setdefault(v.name, v)
        return tuple(seen.values()), ref
    if suite not in SUITES:
        raise KeyError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    return SUITES[suite]


def member_config(base: TrainConfig, variant: Variant, seed: int) -> TrainConfig:
    return replace(base, seed=seed, init_seed=seed, flags=variant.flags,
                   consensus=variant.consensus, k=variant.k or base.k)


def _eval_row(state, bundle, cfg: TrainConfig, variant: Variant, seed: int, steps_run: int) -> dict:
    flags = cfg.flags
    paths = []
    if not flags.disable_personality:
        paths += ["pam", "ram", "fused"]
    if not flags.disable_emotion:
        paths.append("emotion")
    rep = evaluate_model(state.params, bundle.emotion_test, bundle.personality_test, k=cfg.k,
                         paths=paths)
    row = {"variant": variant.name, "seed": seed, "k": cfg.k, "consensus": cfg.consensus,
           "steps": steps_run}
    row.update({m: None for m in METRICS})
    if rep.emotion is not None:
        row["emotion_mse"] = rep.emotion["mse"]
    if "pam" in rep.personality:
        pam, ram, fused = (rep.personality[p] for p in ("pam", "ram", "fused"))
        row.update(pam_mse=pam["mse_mean"], pam_accuracy=pam["accuracy_mean"], pam_r2=pam["r2_mean"],
                   fused_mse=fused["mse_mean"])
        if not flags.disable_ram:
            r2 = [v for v in ram["r2"].values() if v is not None]
            row.update(ram_mse=ram["mse_mean"], ram_r2=ram["r2_mean"],
                       ram_r2_min=min(r2) if r2 else None)
    row["probe_accuracy"] = probe_discriminator(state.params, bundle.emotion_test,
                                                bundle.personality_test, seed=seed)
    return row


def paired_summary(rows: list[dict], reference: str) -> dict:
    """Mean of each metric per variant plus mean paired difference (variant - reference)."""
    by = {}
    for r in rows:
        by.setdefault(r["variant"], {})[r["seed"]] = r
    summary = {}
    ref = by.get(reference, {})
    for name, per_seed in by.items():
        entry = {"n_seeds": len(per_seed)}
        for m in METRICS:
            vals = [r[m] for r in per_seed.values() if r[m] is not None]
            entry[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            diffs = [per_seed[s][m] - ref[s][m] for s in per_seed
                     if s in ref and per_seed[s][m] is not None and ref[s][m] is not None]
            entry[f"{m}_diff_vs_{reference}"] = float(np.mean(diffs)) if diffs else None
        summary[name] = entry
    return summary


class SuiteFailure(RuntimeError):
    def __init__(self, message, rows):
        super().__init__(message)
        self.rows = rows


def run_suite(suite: str, seeds, data_cfg: DataConfig, train_cfg: TrainConfig,
              arch: ArchitectureConfig | None = None, out_dir=None) -> dict:
    """Train and evaluate every (variant, seed) member; returns rows and summary.

    With ``out_dir`` each member gets its own sub-directory (log, manifest,
    checkpoint) and ``results.csv`` / ``results.json`` hold the table.
    """
    variants, reference = variants_for(suite)
    arch = arch or ArchitectureConfig()
    out = Path(out_dir) if out_dir is not None else None
    rows, failures = [], []
    for seed in seeds:
        dc = replace(data_cfg, seed=int(seed))
        need_frames = max(v.k or train_cfg.k for v in variants)
        if dc.frames_per_video < need_frames:
            dc = replace(dc, frames_per_video=need_frames)
        bundle = generate_bundle(dc)
        for v in variants:
            cfg = member_config(train_cfg, v, int(seed))
            member_dir = out / f"{v.name}_seed{seed}" if out is not None else None
            try:
                state, hist = run_training(cfg, bundle, replace(arch, consensus=cfg.consensus),
                                           out_dir=member_dir)
                row = _eval_row(state, bundle, cfg, v, int(seed), len(hist))
            except Exception as exc:  # keep the other members' results
                logger.error("suite member %s seed %s failed: %s", v.name, seed, exc)
                failures.append({"variant": v.name, "seed": seed, "error": repr(exc),
                                 "traceback": traceback.format_exc()})
                continue
            if member_dir is not None:
                (member_dir / "data_config.json").write_text(
                    json.dumps(dc.__dict__, indent=2, sort_keys=True))
            rows.append(row)
            logger.info("%s", row)
    result = {"suite": suite, "reference": reference, "seeds": [int(s) for s in seeds],
              "rows": rows, "summary": paired_summary(rows, reference), "failures": failures}
    if out is not None:
        write_results(result, out)
    if failures:
        raise SuiteFailure(f"{len(failures)} suite member(s) failed", result)
    return result


def write_results(result: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["variant", "seed", "k", "consensus", "steps", *METRICS]
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in result["rows"]:
            w.writerow({c: ("" if r.get(c) is None else r.get(c)) for c in cols})
    (out / "results.json").write_text(json.dumps(result, indent=2, sort_keys=True))

"""Command-line entry point: ``persemon <verb> [options]``.

Every verb writes one ``run_manifest.json`` under ``--out`` (when an output
directory is given) recording the resolved configuration, inputs, outputs,
dataset hashes, wall-clock time and exit status.

Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
3 numerical abort, 4 ablation suite partially failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import ablation, config as cfgmod
from .data import (RenderParams, gen_emotion_set, gen_personality_set, generate_bundle,
                   load_bundle, make_batch, manifest_hash, save_bundle)
from .errors import ConfigError, ContractError
from .gradcheck import check_model
from .losses import AblationFlags
from .metrics import PATHS, evaluate_model, export_projection, probe_discriminator
from .model import GROUPS, MAX, ArchitectureConfig, init_params, load_checkpoint
from .trainer import NumericalAbort, git_describe, run_training

logger = logging.getLogger("persemon")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_SUITE = 0, 1, 2, 3, 4
GRADCHECK_TOL = 1e-3
# near-zero gradients are compared absolutely
GRADCHECK_ABS_TOL = 1e-6
ABLATE_CHOICES = tuple(f for f in AblationFlags.__dataclass_fields__) + ("max_consensus",)


class Run:
    """Collects the manifest of one command invocation."""

    def __init__(self, command: str, argv, out: Path | None):
        self.out = out
        self.started = time.perf_counter()
        self.record = {"command": command, "argv": list(argv), "build": git_describe(),
                       "config": {}, "inputs": {}, "outputs": {}, "dataset_hashes": {}}

    def data_input(self, name: str, path) -> None:
        self.record["inputs"][name] = str(path)
        mp = Path(path) / "manifest.json"
        if mp.exists():
            self.record["dataset_hashes"][name] = manifest_hash(path)

    def finish(self, status: int, error: str | None = None) -> int:
        self.record["exit_status"] = status
        if error:
            self.record["error"] = error
        self.record["wall_clock_s"] = round(time.perf_counter() - self.started, 3)
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / "run_manifest.json").write_text(
                json.dumps(self.record, indent=2, sort_keys=True, default=str))
        return status


def load_checked(path) -> dict:
    """Parse a config file and reject unknown keys in every section."""
    cfg = cfgmod.load_config(path)
    cfgmod.check_keys(cfg)
    return cfg


def _apply_ablations(tc, names):
    flags = asdict(tc.flags)
    consensus = tc.consensus
    for name in names or ():
        if name == "max_consensus":
            consensus = MAX
        else:
            flags[name] = True
    return replace(tc, flags=AblationFlags(**flags), consensus=consensus)


# -- verbs ------------------------------------------------------------------

def cmd_gen_data(args, run: Run) -> int:
    cfg = load_checked(args.config)
    overrides = {"seed": args.seed} if args.seed is not None else {}
    dc = cfgmod.data_config(cfg, **overrides)
    run.record["config"]["data"] = asdict(dc)
    bundle = generate_bundle(dc)
    save_bundle(bundle, args.out)
    run.record["outputs"]["data"] = str(args.out)
    run.record["dataset_hashes"]["data"] = manifest_hash(args.out)
    print(f"wrote dataset to {args.out} (manifest sha256 {run.record['dataset_hashes']['data']})")
    return EXIT_OK


def cmd_train(args, run: Run) -> int:
    cfg = load_checked(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    tc = _apply_ablations(cfgmod.train_config(cfg, **overrides), args.ablate)
    arch = cfgmod.arch_config(cfg)
    run.data_input("data", args.data)
    bundle = load_bundle(args.data)
    run.record["config"].update(train=tc.to_dict(), architecture=arch.to_dict(),
                                ablate=list(args.ablate or []))
    if args.resume:
        run.record["inputs"]["resume_from"] = str(args.resume)
    try:
        state, hist = run_training(tc, bundle, arch, out_dir=args.out, resume_from=args.resume,
                                   log_every=args.log_every)
    except NumericalAbort as exc:
        diag = Path(args.out) / "abort_diagnostic.json"
        run.record["outputs"]["diagnostic"] = str(diag)
        print(f"numerical abort: {exc}; diagnostic at {diag}", file=sys.stderr)
        raise
    run.record["outputs"].update(checkpoint=str(Path(args.out) / "checkpoint"),
                                 log=str(Path(args.out) / "log.jsonl"))
    if hist:
        run.record["loss"] = {"first_step": hist[0]["step"], "initial_total": hist[0]["total"],
                              "final_step": hist[-1]["step"], "final_total": hist[-1]["total"]}
        print(f"trained steps {hist[0]['step']}..{hist[-1]['step']}: total loss "
              f"{hist[0]['total']:.5f} -> {hist[-1]['total']:.5f}")
    else:
        print(f"nothing to do: checkpoint already at step {state.step}")
    return EXIT_OK


def _load_eval_inputs(args, run: Run):
    cfg = load_checked(args.config)
    expect = cfgmod.arch_config(cfg) if cfg.get("arch") else None
    params, ck_manifest, _ = load_checkpoint(args.checkpoint, expect)
    run.record["inputs"]["checkpoint"] = str(args.checkpoint)
    run.record["config"]["architecture"] = params.arch.to_dict()
    run.data_input("data", args.data)
    bundle = load_bundle(args.data)
    if bundle.config.image_size != params.arch.input_size:
        raise ConfigError(f"data image size {bundle.config.image_size} does not match checkpoint "
                          f"input size {params.arch.input_size}")
    return params, ck_manifest, bundle


def cmd_eval(args, run: Run) -> int:
    params, ck_manifest, bundle = _load_eval_inputs(args, run)
    paths = [p.strip() for p in args.paths.split(",") if p.strip()]
    k = args.k or ck_manifest.get("meta", {}).get("train_config", {}).get("k", 10)
    run.record["config"].update(paths=paths, k=k, probe=args.probe, sample_seed=args.seed)
    per = bundle.personality_test if any(p != "emotion" for p in paths) or args.probe else None
    emo = bundle.emotion_test if "emotion" in paths or args.probe else None
    report = evaluate_model(params, emo, per, k=k, paths=paths, probe=args.probe,
                            seed=args.seed if args.seed is not None else 12345)
    print(report.table())
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(report.to_json())
        run.record["outputs"]["report"] = str(Path(args.out) / "eval.json")
    return EXIT_OK


def cmd_ablate(args, run: Run) -> int:
    cfg = load_checked(args.config)
    suite_cfg = cfg.get("suite", {})
    suite = args.suite or suite_cfg.get("name", "table4")
    seeds = args.seeds if args.seeds is not None else suite_cfg.get("seeds", (0, 1, 2, 3, 4))
    if isinstance(seeds, str):
        seeds = [int(s) for s in seeds.split(",") if s.strip()]
    elif isinstance(seeds, int):
        seeds = [seeds]
    try:
        ablation.variants_for(suite)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    if args.data is not None:
        run.data_input("data", args.data)
        dc = load_bundle(args.data).config
        if cfg.get("data"):
            cfgmod.data_config(cfg)   # key check
            dc = replace(dc, **cfg["data"])
    else:
        dc = cfgmod.data_config(cfg)
    tc = cfgmod.train_config(cfg)
    arch = cfgmod.arch_config(cfg)
    run.record["config"].update(suite=suite, seeds=list(seeds), data=asdict(dc), train=tc.to_dict(),
                                architecture=arch.to_dict())
    try:
        result = ablation.run_suite(suite, seeds, dc, tc, arch, out_dir=args.out)
        status = EXIT_OK
    except ablation.SuiteFailure as exc:
        result = exc.rows
        status = EXIT_SUITE
        print(f"suite partially failed: {exc}", file=sys.stderr)
    run.record["outputs"].update(csv=str(Path(args.out) / "results.csv"),
                                 json=str(Path(args.out) / "results.json"))
    _print_summary(result)
    return status


def _print_summary(result: dict) -> None:
    cols = ("emotion_mse", "pam_mse", "fused_mse", "ram_r2", "probe_accuracy")
    print(f"{'variant':<18}" + "".join(f"{c:>16}" for c in cols))
    for name, entry in result["summary"].items():
        cells = []
        for c in cols:
            v = entry.get(f"{c}_mean")
            cells.append(f"{v:>16.6f}" if v is not None else f"{'-':>16}")
        print(f"{name:<18}" + "".join(cells))


def cmd_grad_check(args, run: Run) -> int:
    cfg = load_checked(args.config)
    arch = cfgmod.arch_config(cfg)
    if arch.widths != ArchitectureConfig.micro().widths:
        logger.warning("gradient check on a non-micro architecture may be slow")
    tc = cfgmod.train_config(cfg)
    seed = args.seed if args.seed is not None else 0
    dc = cfgmod.data_config(cfg)
    rp = RenderParams(size=arch.input_size)
    emo = gen_emotion_set(8, seed, dc.emotion_shift(), rp)
    per = gen_personality_set(4, 6, seed + 1, dc.relationship(), dc.personality_shift(), rp, k=3)
    batch = make_batch(emo, per, 4, 2, 3, seed=seed)
    params = init_params(replace(arch, consensus=tc.consensus), seed)
    report = check_model(params, batch, tc.weights, tc.flags, coords_per_tensor=args.coords,
                         seed=seed)
    rows, ok = {}, True
    print(f"{'group':<15}{'max rel err':>14}{'max abs err':>14}{'coords':>8}  result")
    for g in GROUPS:
        r = report[g]
        passed = bool(r.passed(GRADCHECK_TOL, GRADCHECK_ABS_TOL))
        ok = ok and passed
        rows[g] = {"max_rel_error": float(r.max_rel_error), "max_abs_error": float(r.max_abs_error),
                   "n_checked": int(r.n_checked), "passed": bool(passed)}
        print(f"{g:<15}{r.max_rel_error:>14.3e}{r.max_abs_error:>14.3e}{r.n_checked:>8}  "
              f"{'PASS' if passed else 'FAIL'}")
    run.record["config"].update(architecture=arch.to_dict(), seed=seed, coords=args.coords,
                                tolerance=GRADCHECK_TOL, abs_tolerance=GRADCHECK_ABS_TOL)
    run.record["report"] = rows
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_export_features(args, run: Run) -> int:
    params, _, bundle = _load_eval_inputs(args, run)
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_projection(params, bundle.emotion_test, bundle.personality_test, out / "projection.csv",
                      n_per_class=args.n_per_class, seed=seed)
    acc = probe_discriminator(params, bundle.emotion_test, bundle.personality_test,
                              n_per_class=args.n_per_class, seed=seed)
    run.record["config"].update(seed=seed, n_per_class=args.n_per_class)
    run.record["outputs"]["projection"] = str(out / "projection.csv")
    run.record["probe_accuracy"] = acc
    print(f"wrote {out / 'projection.csv'}; linear-probe dataset accuracy {acc:.4f}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="persemon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=out_required)
        return p

    p = common(sub.add_parser("gen-data", help="generate the synthetic datasets"))
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ablate", action="append", choices=ABLATE_CHOICES,
                   help="switch on an ablation flag (repeatable)")
    p.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    p.add_argument("--steps", type=int, help="override train.total_steps")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint"), out_required=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--paths", default=",".join(PATHS))
    p.add_argument("--k", type=int)
    p.add_argument("--probe", action="store_true", help="also run the linear dataset probe")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("ablate", help="run an ablation suite"))
    p.add_argument("--data", type=Path, help="dataset whose config is the per-seed template")
    p.add_argument("--suite", help=f"one of {sorted(ablation.SUITES)} or a '+' combination")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("grad-check", help="finite-difference check of the objective"),
               out_required=False)
    p.add_argument("--coords", type=int, default=8, help="coordinates sampled per tensor")
    p.set_defaults(func=cmd_grad_check)

    p = common(sub.add_parser("export-features", help="2-D projection of backbone features"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--n-per-class", type=int, default=300)
    p.set_defaults(func=cmd_export_features)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args.command, argv, args.out)
    try:
        return run.finish(args.func(args, run))
    except (ConfigError, ContractError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return run.finish(EXIT_CONFIG, str(exc))
    except NumericalAbort as exc:
        return run.finish(EXIT_NUMERICAL, str(exc))


if __name__ == "__main__":
    sys.exit(main())

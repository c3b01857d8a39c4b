"""The `scenevoice` command.

Subcommands: gen, train, eval, ablate, gradcheck.  Any option of the form
`--section.field value` (or `--section.field=value`) overrides that config
entry; `--seed N` derives every per-purpose seed from one master seed before
overrides apply.  Each command echoes the fully resolved configuration to
`<out>/resolved_config.json` before doing any work.

Exit codes: 0 success, 1 verification failure, 2 configuration or input
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .config import (
    RunConfig,
    apply_master_seed,
    apply_overrides,
    config_from_tree,
    load_config_file,
    default_dict,
    merge_tree,
    write_resolved,
)
from .errors import (
    ConfigError,
    CorruptFile,
    EmptyTape,
    InvalidProportions,
    NonFiniteLoss,
    PrototypeCollapse,
    SceneVoiceError,
    TooFewPairs,
    VersionMismatch,
    ZeroNormVector,
)
from .evaluate import EvalReport, cross_modal_recall, evaluate_model, run_ablation, write_report_csv
from .gradcheck import COMPONENTS, check_gradients, random_instance
from .model import MemoryAligner
from .rng import make_rng
from .synth import (
    generate_dataset,
    load_dataset,
    load_manifest,
    sample_eval_pairs,
    save_dataset,
    save_manifest,
    world_from_manifest,
)
from .train import (
    AdamW,
    EmaShadow,
    fit,
    load_checkpoint,
    restore_model,
    restore_trainer,
    save_checkpoint,
    write_loss_csv,
)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_CONFIG_ERRORS = (
    ConfigError,
    InvalidProportions,
    TooFewPairs,
    VersionMismatch,
    CorruptFile,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
)
_NUMERIC_ERRORS = (NonFiniteLoss, ZeroNormVector, PrototypeCollapse, EmptyTape)


def _collect_overrides(extras: list[str]) -> list[tuple[str, str]]:
    """Turn leftover `--a.b value` / `--a.b=value` tokens into (key, value)."""
    overrides: list[tuple[str, str]] = []
    i = 0
    while i < len(extras):
        tok = extras[i]
        if not (tok.startswith("--") and "." in tok):
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extras):
                raise ConfigError(f"override {tok!r} is missing a value")
            val = extras[i + 1]
            i += 2
        overrides.append((key, val))
    return overrides


def _resolve(args: argparse.Namespace, extras: list[str]) -> tuple[dict, RunConfig]:
    tree = default_dict()
    if args.config is not None:
        merge_tree(tree, load_config_file(args.config))
    if getattr(args, "seed", None) is not None:
        apply_master_seed(tree, args.seed)
    apply_overrides(tree, _collect_overrides(extras))
    return tree, config_from_tree(tree)


def _load_data_dir(data_dir: str):
    pairs = load_dataset(os.path.join(data_dir, "dataset.jsonl"))
    manifest = load_manifest(os.path.join(data_dir, "manifest.json"))
    return world_from_manifest(manifest), pairs


def _dataset(args: argparse.Namespace, cfg: RunConfig):
    """Dataset from --data when given, otherwise generated from the config."""
    if getattr(args, "data", None):
        return _load_data_dir(args.data)
    world, pairs, _ = generate_dataset(
        cfg.world, cfg.data.n_samples, cfg.data.mode_mix, cfg.data.data_seed
    )
    return world, pairs


def cmd_gen(args: argparse.Namespace, extras: list[str]) -> int:
    tree, cfg = _resolve(args, extras)
    write_resolved(tree, args.out)
    world, pairs, manifest = generate_dataset(
        cfg.world, cfg.data.n_samples, cfg.data.mode_mix, cfg.data.data_seed
    )
    data_path = os.path.join(args.out, "dataset.jsonl")
    manifest_path = os.path.join(args.out, "manifest.json")
    save_dataset(data_path, pairs)
    save_manifest(manifest_path, manifest)
    print(f"wrote {len(pairs)} pairs to {data_path}")
    print(f"wrote manifest to {manifest_path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, extras: list[str]) -> int:
    tree, cfg = _resolve(args, extras)
    write_resolved(tree, args.out)
    _, pairs = _dataset(args, cfg)
    dim = pairs[0].v.shape[0]

    start_step = 0
    opt = ema = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model, opt, ema = restore_trainer(ckpt, cfg.train)
        start_step = ckpt.step
        print(f"resumed from {args.resume} at step {start_step}")
    else:
        model = MemoryAligner.create(
            cfg.model.slot_count, dim, make_rng(cfg.model.init_seed),
            cfg.train.temperature, cfg.train.np_dtype(),
        )

    callback = None
    if cfg.train.checkpoint_every > 0:
        result_state: dict = {}

        def callback(step, bd, outputs):
            if (step + 1) % cfg.train.checkpoint_every == 0 and (step + 1) < cfg.train.steps:
                path = os.path.join(args.out, f"step_{step + 1:06d}.ckpt")
                save_checkpoint(path, model, result_state["opt"], result_state["ema"], tree, step + 1)

        if opt is None:
            opt = AdamW.from_config(cfg.train)
            opt.step_count = start_step
        if ema is None:
            ema = EmaShadow.init(model.parameters(), cfg.train.ema_decay)
        result_state["opt"], result_state["ema"] = opt, ema

    result = fit(model, pairs, cfg.train, start_step=start_step, opt=opt, ema=ema,
                 step_callback=callback)
    csv_path = os.path.join(args.out, "loss.csv")
    write_loss_csv(csv_path, result.history, start_step=start_step)
    ckpt_path = os.path.join(args.out, "model.ckpt")
    save_checkpoint(ckpt_path, model, result.optimizer, result.ema, tree, cfg.train.steps)
    if result.history:
        first, last = result.history[0], result.history[-1]
        print(f"trained steps {start_step}..{cfg.train.steps - 1}:"
              f" total {first.total:.6f} -> {last.total:.6f}")
    else:
        print("no steps to run (checkpoint already at or past the configured budget)")
    print(f"wrote {csv_path}")
    print(f"wrote {ckpt_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, extras: list[str]) -> int:
    tree, cfg = _resolve(args, extras)
    write_resolved(tree, args.out)
    ckpt = load_checkpoint(args.ckpt)
    model = restore_model(ckpt)
    used_ema = args.use_ema or cfg.eval.use_ema
    if used_ema:
        decay = float(ckpt.config.get("train", {}).get("ema_decay", cfg.train.ema_decay))
        model = EmaShadow(decay, ckpt.ema).apply_to(model)
    if args.data:
        world = world_from_manifest(load_manifest(os.path.join(args.data, "manifest.json")))
    else:
        from .synth import build_world

        world = build_world(cfg.world)
    eval_pairs = sample_eval_pairs(world, cfg.data.eval_pairs, make_rng(cfg.data.eval_seed))

    if args.oracle:
        # protocol sanity check: score the true auditory embeddings themselves
        pred = np.stack([p.a for p in eval_pairs])
        report = EvalReport(
            kind="oracle",
            slot_count=None,
            recall_at_1=cross_modal_recall(pred, eval_pairs, 1),
            recall_at_5=cross_modal_recall(pred, eval_pairs, 5) if len(eval_pairs) >= 5 else None,
            mean_align_kl=None,
            timbre_margin=None,
            env_margin=None,
            final_loss=None,
        )
    else:
        report = evaluate_model(
            model, eval_pairs, world=world,
            n_probe=cfg.eval.n_probe, probe_seed=cfg.eval.probe_seed,
        )
        report.meta["ema"] = used_ema
    report_path = os.path.join(args.out, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"recall@1 {report.recall_at_1:.4f}"
          + (f"  recall@5 {report.recall_at_5:.4f}" if report.recall_at_5 is not None else ""))
    if report.timbre_margin is not None:
        print(f"timbre margin {report.timbre_margin:.4f}  env margin {report.env_margin:.4f}")
    print(f"wrote {report_path}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, extras: list[str]) -> int:
    tree, cfg = _resolve(args, extras)
    write_resolved(tree, args.out)
    world, pairs = _dataset(args, cfg)
    eval_pairs = sample_eval_pairs(world, cfg.data.eval_pairs, make_rng(cfg.data.eval_seed))
    reports = run_ablation(
        world, pairs, cfg.train, eval_pairs, cfg.ablate.slot_values,
        n_probe=cfg.eval.n_probe, probe_seed=cfg.eval.probe_seed,
        init_seed=cfg.model.init_seed,
    )
    csv_path = os.path.join(args.out, "ablation.csv")
    write_report_csv(csv_path, reports)
    print(f"wrote {len(reports)} rows to {csv_path}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, extras: list[str]) -> int:
    tree, cfg = _resolve(args, extras)
    if args.out:
        write_resolved(tree, args.out)
    modes = {"both": (True, False), "true": (True,), "false": (False,)}[args.detach]
    base = args.seed if args.seed is not None else 0
    all_reports = []
    for i in range(args.seeds):
        model, batch = random_instance(base + i, temperature=cfg.train.temperature)
        for mode in modes:
            reports = check_gradients(
                model, batch, weights=cfg.train.loss_weights,
                detach_teacher=mode, fault=args.fault,
            )
            all_reports.append((base + i, reports))

    failed: list[str] = []
    for seed, reports in all_reports:
        for r in reports:
            if not r.passed:
                failed.append(f"seed {seed}: {r.describe()}")
    # summary per component across every seed and mode
    for comp in COMPONENTS:
        rows = [r for _, reports in all_reports for r in reports if r.component == comp]
        worst_rel = max(r.max_rel_err for r in rows)
        worst_abs = max(r.max_abs_err for r in rows)
        status = "ok" if all(r.passed for r in rows) else "FAIL"
        print(f"{comp:<9} {status}: worst rel {worst_rel:.3e}, worst abs {worst_abs:.3e}")
    if args.out:
        payload = [
            {"seed": seed, **r.__dict__}
            for seed, reports in all_reports
            for r in reports
        ]
        path = os.path.join(args.out, "gradcheck.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {path}")
    if failed:
        for line in failed:
            print(line, file=sys.stderr)
        print(f"gradcheck FAILED on {len(failed)} component checks", file=sys.stderr)
        return EXIT_VERIFY
    n_checks = sum(len(reports) for _, reports in all_reports)
    print(f"gradcheck passed: {args.seeds} seeds x {len(modes)} modes, {n_checks} component checks")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenevoice",
        description="Decoupled memory alignment between visual scenes and sound.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
        p.add_argument("--config", help="JSON config file merged over the defaults")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="master seed deriving every per-purpose seed")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the memory aligner")
    common(p)
    p.add_argument("--data", help="directory from `gen` (default: generate in memory)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file from `train`")
    p.add_argument("--data", help="directory from `gen` (default: rebuild world from config)")
    p.add_argument("--oracle", action="store_true",
                   help="score the true auditory embeddings (protocol sanity check)")
    p.add_argument("--use-ema", action="store_true", help="evaluate the EMA weights")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep slot counts and baselines")
    common(p)
    p.add_argument("--data", help="directory from `gen` (default: generate in memory)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p, out_required=False)
    p.add_argument("--seeds", type=int, default=5, help="number of random instances")
    p.add_argument("--detach", choices=("both", "true", "false"), default="both",
                   help="teacher mode(s) to check")
    p.add_argument("--fault", choices=COMPONENTS, default=None,
                   help="sign-flip the analytic gradient of one component (self-test)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        return args.func(args, extras)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SceneVoiceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main(argv=None))

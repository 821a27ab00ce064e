"""Command-line entry point: data generation, training, estimator checks,
sensitivity sweeps, evaluation, and cross-run reports.

Exit codes: 0 success, 2 usage/config errors, 3 I/O or data-file failures,
4 numeric failures (aborted training, estimator error above threshold).

Every command accepts --seed as the single randomness knob; subcomponents
derive their own streams by labeled hashing. Flags can be preloaded from a
JSON config file (--config) and from environment variables with the COTLAB_
prefix (e.g. COTLAB_STEPS=200); explicit flags win, and the merged effective
configuration is snapshotted into the run manifest.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, datagen, evaluate
from .datagen import DatasetError, NoiseSpec, TaskSpec
from .model import BOS_ID, CheckpointError, ModelConfig, TinyLM, load_checkpoint
from .reweight import ReweightConfig
from .seeding import derive_seed, rng_for
from .trainer import TrainConfig, TrainingAborted, run_training
from .utility import ProbeConfig, descent_direction, exact_utilities, probe_utilities

STRATEGY_NAMES = {"uniform": "uniform", "vcore": "vcore", "dft": "dft",
                  "iw-sft": "iw_sft", "random": "random_mask"}

PROBE_CSV_COLUMNS = ("epsilon", "max_relative_error", "mean_relative_error")
REPORT_COLUMNS = ("run", "strategy", "exact_match", "mean_eval_loss",
                  "spike_metric", "spurious_mass_ratio_final")


class UsageError(Exception):
    """Invalid arguments or inconsistent inputs; maps to exit code 2."""


class ThresholdFailure(Exception):
    """A requested numeric threshold was not met; maps to exit code 4."""


def _env_default(dest: str, fallback):
    return os.environ.get("COTLAB_" + dest.upper(), fallback)


def _opt(parser, *names, dest=None, type=str, default=None, **kwargs):
    """Add an option whose default can come from a COTLAB_* env var."""
    if dest is None:
        dest = names[0].lstrip("-").replace("-", "_")
    raw = _env_default(dest, None)
    if raw is not None:
        default = type(raw) if type is not None else raw
    parser.add_argument(*names, dest=dest, type=type, default=default, **kwargs)


def _write_manifest(out_dir: Path, command: str, config: dict, dataset_digest: str,
                    artifacts: dict[str, str], t0: float) -> Path:
    for name, rel in artifacts.items():
        if not (out_dir / rel).exists():
            raise OSError(f"artifact {name} missing at {out_dir / rel}")
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": config,
        "dataset_digest": dataset_digest,
        "artifacts": artifacts,
        "duration_seconds": round(time.monotonic() - t0, 3),
    }
    path = out_dir / "run_manifest.json"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(manifest, sort_keys=True) + "\n")
    return path


def _load_rows(data_dir, context_len: int | None):
    task, train_ex, eval_ex = datagen.load_dataset_dir(data_dir)
    train_rows = [datagen.encode_example(ex) for ex in train_ex]
    eval_rows = [datagen.encode_example(ex) for ex in eval_ex]
    max_len = max(r.length for r in train_rows + eval_rows)
    if context_len is None:
        context_len = max_len
    elif context_len < max_len:
        raise UsageError(f"--context-len {context_len} is below the longest "
                         f"encoded example ({max_len})")
    return task, train_rows, eval_rows, context_len


# ---- gen-data ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    t0 = time.monotonic()
    out_dir = Path(args.out)
    task = TaskSpec(modulus=args.modulus, chain_length=args.chain,
                    operator_set=tuple(args.operators.split(",")))
    noise = NoiseSpec(spurious_rate=args.spurious,
                      modes=tuple(args.noise_modes.split(",")),
                      seed=derive_seed(args.seed, "noise"))
    train_path, eval_path = datagen.build_dataset(
        task, args.train, args.eval, noise, args.seed, out_dir)
    digest = datagen.dataset_digest(out_dir)
    config = {"modulus": args.modulus, "chain": args.chain, "train": args.train,
              "eval": args.eval, "spurious": args.spurious,
              "operators": args.operators, "noise_modes": args.noise_modes,
              "seed": args.seed}
    _write_manifest(out_dir, "gen-data", config, digest,
                    {"train": train_path.name, "eval": eval_path.name,
                     "task": datagen.TASK_FILE}, t0)
    print(f"wrote {args.train} train / {args.eval} eval examples to {out_dir}")
    print(f"dataset digest {digest}")
    return 0


# ---- train -------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "strategy": "uniform", "steps": 500, "batch_size": 8, "lr": 0.5,
    "seed": 0, "tau_eff": None, "kl_budget": None, "epsilon": None,
    "alpha_mode": "off", "alpha_clamp_lo": 0.01, "alpha_clamp_hi": 1.0,
    "ema_decay": 0.9, "optimizer": "sgd", "momentum_beta": 0.9,
    "log_every": 1, "checkpoint_every": 0, "eval_every": 0,
    "probe_disjoint": False, "d_model": 32, "n_layers": 1, "n_heads": 2,
    "context_len": None,
}


def _merged_train_options(args) -> dict:
    opts = dict(TRAIN_DEFAULTS)
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise OSError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(loaded) - set(opts)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        opts.update(loaded)
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def build_train_config(opts: dict, context_len: int) -> TrainConfig:
    strategy = STRATEGY_NAMES.get(opts["strategy"], opts["strategy"])
    if strategy == "vcore" and opts["epsilon"] is None:
        raise UsageError("--strategy vcore requires --epsilon")
    if opts["tau_eff"] is not None and opts["kl_budget"] is not None:
        raise UsageError("set --tau-eff or --kl-budget, not both")
    model_cfg = ModelConfig(
        vocab_size=datagen.vocab_size(), context_len=context_len,
        d_model=opts["d_model"], n_layers=opts["n_layers"],
        n_heads=opts["n_heads"], init_seed=derive_seed(opts["seed"], "init"))
    rcfg = ReweightConfig(
        strategy=strategy, tau_eff=opts["tau_eff"], kl_budget=opts["kl_budget"],
        alpha_mode=opts["alpha_mode"],
        alpha_clamp=(opts["alpha_clamp_lo"], opts["alpha_clamp_hi"]),
        ema_decay=opts["ema_decay"])
    probe = ProbeConfig(epsilon=opts["epsilon"] if opts["epsilon"] is not None else 1e-4)
    return TrainConfig(
        model=model_cfg, learning_rate=opts["lr"], steps=opts["steps"],
        batch_size=opts["batch_size"], reweight=rcfg, probe=probe,
        optimizer=opts["optimizer"], momentum_beta=opts["momentum_beta"],
        seed=opts["seed"], log_every=opts["log_every"],
        checkpoint_every=opts["checkpoint_every"], eval_every=opts["eval_every"],
        probe_disjoint=bool(opts["probe_disjoint"]))


def cmd_train(args) -> int:
    t0 = time.monotonic()
    opts = _merged_train_options(args)
    _task, train_rows, eval_rows, context_len = _load_rows(args.data, opts["context_len"])
    opts["context_len"] = context_len
    cfg = build_train_config(opts, context_len)
    out_dir = Path(args.out)
    result = run_training(cfg, train_rows, eval_rows, out_dir, resume_from=args.resume)
    digest = datagen.dataset_digest(args.data)
    config = {**opts, "strategy": cfg.reweight.strategy, "data": str(args.data),
              "calibrated_tau_eff": result.calibrated_tau_eff}
    _write_manifest(out_dir, "train", config, digest,
                    {"metrics": result.metrics_path.name,
                     "checkpoint": result.checkpoint_path.name,
                     "eval_report": "eval_report.json"}, t0)
    print(f"trained {cfg.steps} steps with strategy {cfg.reweight.strategy}")
    print(f"final eval: exact_match={result.eval_report.exact_match:.4f} "
          f"mean_loss={result.eval_report.mean_eval_loss:.4f}")
    print(f"artifacts in {out_dir}")
    return 0


# ---- probe-check ---------------------------------------------------------------


def _builtin_probe_case(seed: int):
    """The reference estimator-fidelity setup: tiny model, one 32-token sequence."""
    cfg = ModelConfig(vocab_size=16, context_len=32, d_model=16, n_layers=1,
                      n_heads=2, init_seed=derive_seed(seed, "probe-model"))
    model = TinyLM(cfg)
    rng = rng_for(seed, "probe-data")
    ids = rng.integers(4, cfg.vocab_size, size=32)
    ids[0] = BOS_ID
    loss = np.zeros(32, dtype=bool)
    loss[1:] = True
    answer = np.zeros(32, dtype=bool)
    answer[-1] = True
    row = datagen.EncodedRow(ids.astype(np.int64), loss, answer,
                             np.zeros(32, dtype=bool))
    return model, model.init_params(), datagen.to_batch([row])


def probe_error_rows(model, params, batch, epsilons, direction_kind: str):
    if direction_kind == "zero":
        direction = np.zeros_like(params)
    else:
        direction = descent_direction(model, params, batch)
    exact = np.concatenate(exact_utilities(model, direction, params, batch))
    scale = np.max(np.abs(exact)) + 1e-12
    rows = []
    for eps in epsilons:
        approx = np.concatenate(probe_utilities(
            model, params, direction, batch, ProbeConfig(epsilon=eps)))
        err = np.abs(approx - exact) / scale
        rows.append({"epsilon": eps, "max_relative_error": float(err.max()),
                     "mean_relative_error": float(err.mean())})
    return rows


def cmd_probe_check(args) -> int:
    t0 = time.monotonic()
    epsilons = [float(e) for e in args.epsilons.split(",")]
    if not epsilons:
        raise UsageError("--epsilons must list at least one value")
    if args.data is not None:
        task, train_rows, _eval_rows, context_len = _load_rows(args.data, None)
        cfg = ModelConfig(vocab_size=datagen.vocab_size(), context_len=context_len,
                          d_model=16, n_layers=1, n_heads=2,
                          init_seed=derive_seed(args.seed, "probe-model"))
        model = TinyLM(cfg)
        params = model.init_params()
        batch = datagen.to_batch(train_rows[:2])
        digest = datagen.dataset_digest(args.data)
    else:
        model, params, batch = _builtin_probe_case(args.seed)
        digest = "builtin-toy-case"
    rows = probe_error_rows(model, params, batch, epsilons, args.direction)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "probe_check.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=PROBE_CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    for row in rows:
        print(f"epsilon={row['epsilon']:g} max_rel={row['max_relative_error']:.3e} "
              f"mean_rel={row['mean_relative_error']:.3e}")
    config = {"epsilons": args.epsilons, "direction": args.direction,
              "fail_above": args.fail_above, "seed": args.seed,
              "data": str(args.data) if args.data else None}
    _write_manifest(out_dir, "probe-check", config, digest,
                    {"csv": csv_path.name}, t0)
    if args.fail_above is not None:
        worst = max(row["max_relative_error"] for row in rows)
        if worst > args.fail_above:
            raise ThresholdFailure(
                f"max relative error {worst:.3e} exceeds --fail-above {args.fail_above:g}")
    return 0


# ---- sweep ---------------------------------------------------------------------


def cmd_sweep(args) -> int:
    t0 = time.monotonic()
    opts = _merged_train_options(args)
    opts["strategy"] = "vcore"
    tau_effs = [float(v) for v in args.tau_effs.split(",")]
    epsilons = [float(v) for v in args.epsilons.split(",")]
    if not tau_effs or not epsilons:
        raise UsageError("--tau-effs and --epsilons must list at least one value each")
    opts["epsilon"] = epsilons[0]
    opts["tau_eff"] = tau_effs[0]
    _task, train_rows, eval_rows, context_len = _load_rows(args.data, opts["context_len"])
    opts["context_len"] = context_len
    base_cfg = build_train_config(opts, context_len)
    out_dir = Path(args.out)
    rows = evaluate.sweep(tau_effs, epsilons, base_cfg, train_rows, eval_rows,
                          out_dir, jobs=args.jobs)
    digest = datagen.dataset_digest(args.data)
    config = {**opts, "tau_effs": args.tau_effs, "epsilons": args.epsilons,
              "jobs": args.jobs, "data": str(args.data)}
    _write_manifest(out_dir, "sweep", config, digest, {"csv": "sweep.csv"}, t0)
    for row in rows:
        print(f"tau_eff={row['tau_eff']:g} epsilon={row['epsilon']:g} "
              f"exact_match={row['exact_match']} status={row['status']}")
    return 0


# ---- eval ----------------------------------------------------------------------


def cmd_eval(args) -> int:
    t0 = time.monotonic()
    cfg, params, _extra, _arrays = load_checkpoint(args.checkpoint)
    model = TinyLM(cfg)
    _task, _train_rows, eval_rows, _ctx = _load_rows(args.data, cfg.context_len)
    report = evaluate.eval_accuracy(model, params, eval_rows)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval_report.json", "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(report.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
    digest = datagen.dataset_digest(args.data)
    config = {"checkpoint": str(args.checkpoint), "data": str(args.data)}
    _write_manifest(out_dir, "eval", config, digest,
                    {"eval_report": "eval_report.json"}, t0)
    print(f"exact_match={report.exact_match:.4f} mean_eval_loss="
          f"{report.mean_eval_loss:.4f} n={report.n_examples}")
    return 0


# ---- report --------------------------------------------------------------------


def _read_run(run_dir: Path) -> dict:
    try:
        manifest = json.loads((run_dir / "run_manifest.json").read_text(encoding="utf-8"))
        report = json.loads((run_dir / "eval_report.json").read_text(encoding="utf-8"))
        metrics = [json.loads(line) for line in
                   (run_dir / "metrics.jsonl").read_text(encoding="utf-8").splitlines()
                   if line.strip()]
    except OSError as exc:
        raise OSError(f"run directory {run_dir} is incomplete: {exc}") from exc
    return {"dir": run_dir, "manifest": manifest, "report": report, "metrics": metrics}


def cmd_report(args) -> int:
    t0 = time.monotonic()
    runs = [_read_run(Path(r)) for r in args.runs]
    digests = {r["manifest"]["dataset_digest"] for r in runs}
    if len(digests) != 1:
        raise UsageError("runs were trained on different datasets "
                         f"(digests: {sorted(digests)}); refusing to compare")
    rows = []
    for r in runs:
        losses = [m["mean_loss"] for m in r["metrics"]]
        spike = evaluate.loss_spike_metric(losses) if len(losses) >= 10 else ""
        ratios = [m["spurious_mass_ratio"] for m in r["metrics"]
                  if m.get("spurious_mass_ratio") is not None]
        tail = ratios[len(ratios) - math.ceil(0.2 * len(ratios)):] if ratios else []
        rows.append({
            "run": r["dir"].name,
            "strategy": r["manifest"]["config"].get("strategy", "?"),
            "exact_match": r["report"]["exact_match"],
            "mean_eval_loss": r["report"]["mean_eval_loss"],
            "spike_metric": spike,
            "spurious_mass_ratio_final": float(np.median(tail)) if tail else "",
        })
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    header = " | ".join(REPORT_COLUMNS)
    print(header)
    for row in rows:
        print(" | ".join(str(row[c]) for c in REPORT_COLUMNS))
    _write_manifest(out_dir, "report", {"runs": [str(r) for r in args.runs]},
                    digests.pop(), {"csv": csv_path.name}, t0)
    return 0


# ---- parser --------------------------------------------------------------------


def _add_train_like_options(p: argparse.ArgumentParser, with_strategy: bool) -> None:
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="output directory for artifacts")
    _opt(p, "--config", type=str, help="JSON config file; flags override it")
    if with_strategy:
        _opt(p, "--strategy", type=str, choices=sorted(STRATEGY_NAMES),
             help="token weighting strategy")
        _opt(p, "--tau-eff", type=float, help="effective temperature for vcore")
        _opt(p, "--kl-budget", type=float, help="solve the temperature from this KL budget")
    _opt(p, "--epsilon", type=float, help="probing scale (required for vcore)")
    _opt(p, "--steps", type=int)
    _opt(p, "--batch-size", type=int)
    _opt(p, "--lr", type=float, help="SGD learning rate")
    _opt(p, "--seed", type=int)
    _opt(p, "--alpha-mode", type=str, choices=["off", "per_batch", "ema"])
    _opt(p, "--alpha-clamp-lo", type=float)
    _opt(p, "--alpha-clamp-hi", type=float)
    _opt(p, "--ema-decay", type=float)
    _opt(p, "--optimizer", type=str, choices=["sgd", "sgd_momentum"])
    _opt(p, "--momentum-beta", type=float)
    _opt(p, "--log-every", type=int)
    _opt(p, "--checkpoint-every", type=int)
    _opt(p, "--eval-every", type=int)
    _opt(p, "--d-model", type=int)
    _opt(p, "--n-layers", type=int)
    _opt(p, "--n-heads", type=int)
    _opt(p, "--context-len", type=int)
    p.add_argument("--probe-disjoint", action=argparse.BooleanOptionalAction,
                   default=None, help="forbid overlap between batch and probe batch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cotlab",
        description="Token-reweighting laboratory: synthetic chain-of-thought "
                    "data, weighted-SFT training, estimator checks, and reports.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--modulus", type=int, required=True, help="arithmetic modulus")
    _opt(p, "--chain", type=int, default=4, help="operations per problem")
    _opt(p, "--train", type=int, default=512)
    _opt(p, "--eval", type=int, default=128)
    _opt(p, "--spurious", type=float, default=0.0,
         help="target fraction of spurious rationale tokens")
    _opt(p, "--operators", type=str, default="add,sub,mul")
    _opt(p, "--noise-modes", type=str, default="distractor_step,corrupted_value")
    _opt(p, "--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one run with a weighting strategy")
    _add_train_like_options(p, with_strategy=True)
    _opt(p, "--resume", type=str, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train, resume=None)

    p = sub.add_parser("probe-check", help="estimator error vs the exact oracle")
    _opt(p, "--epsilons", type=str, default="1e-3,1e-4,1e-5")
    _opt(p, "--fail-above", type=float,
         help="exit 4 if any max relative error exceeds this")
    _opt(p, "--direction", type=str, default="uniform", choices=["uniform", "zero"])
    _opt(p, "--seed", type=int, default=0)
    _opt(p, "--data", type=str, help="optional dataset dir; default is a builtin toy case")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe_check)

    p = sub.add_parser("sweep", help="grid of vcore runs over (tau_eff, epsilon)")
    _add_train_like_options(p, with_strategy=False)
    _opt(p, "--tau-effs", type=str, default="0.5,0.8")
    _opt(p, "--epsilons", type=str, default="1e-4,1e-5")
    _opt(p, "--jobs", type=int, default=1, help="parallel cells")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's eval split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare finished runs on one dataset")
    p.add_argument("--runs", nargs="+", required=True, help="train output directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (TrainingAborted, ThresholdFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

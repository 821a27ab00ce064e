"""SGD training loop over weighted token losses, with seeded reproducibility.

Each step: sample a batch (and, for the adaptive strategy, an independent
probe batch), compute the uniform descent direction on the probe batch,
estimate per-token utilities by probing, form the strategy's weights and the
variance-control factor alpha, and apply theta <- theta - lr * alpha * g where
g is the batch-mean weighted gradient. All randomness is drawn from per-step
derived streams, so a run resumed from a checkpoint is bit-identical to an
uninterrupted one, and different strategies see identical batch sequences.

A step that produces non-finite values aborts the run: instability is a
measured outcome here, not something to clip away silently.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import EncodedRow, to_batch
from .evaluate import EvalReport, eval_accuracy, weight_diagnostics
from .model import (CheckpointError, ModelConfig, SequenceBatch, TinyLM, axpy,
                    load_checkpoint, save_checkpoint)
from .reweight import (ReweightConfig, VarianceStats, solve_temperature,
                       strategy_weights, with_tau_eff)
from .seeding import rng_for
from .utility import ProbeConfig, descent_direction, probe_utilities

OPTIMIZERS = ("sgd", "sgd_momentum")

# KL(q||u) level the first-batch temperature calibration targets
_CALIBRATION_KL = 0.5


class TrainingAborted(Exception):
    """A step produced non-finite values; the run stops with diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    learning_rate: float
    steps: int
    batch_size: int
    reweight: ReweightConfig = field(default_factory=ReweightConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    optimizer: str = "sgd"
    momentum_beta: float = 0.9
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0   # 0: final checkpoint only
    eval_every: int = 0         # 0: final eval only
    probe_disjoint: bool = False

    def __post_init__(self) -> None:
        # lr = 0 is allowed as a degenerate no-op step (useful in tests)
        if not 0.0 <= self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in [0, 1]")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.momentum_beta < 1.0:
            raise ValueError("momentum_beta must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepLog:
    step: int
    mean_loss: float
    alpha: float
    grad_norm: float
    kl_q_u: float | None = None
    weight_entropy: float | None = None
    spurious_mass_ratio: float | None = None
    v_u: float | None = None
    v_q: float | None = None

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


@dataclass
class TrainState:
    params: np.ndarray
    step: int = 0
    momentum: np.ndarray | None = None
    var_stats: VarianceStats = field(default_factory=VarianceStats)
    reference_params: np.ndarray | None = None
    tau_eff: float | None = None   # set by first-batch calibration when needed


@dataclass
class TrainResult:
    params: np.ndarray
    step_logs: list[StepLog]
    eval_report: EvalReport
    metrics_path: Path
    checkpoint_path: Path
    calibrated_tau_eff: float | None


def _calibrate_tau_eff(utilities: list[np.ndarray]) -> float:
    """Median per-sequence temperature putting KL(q||u) at the target level."""
    taus = [solve_temperature(s, _CALIBRATION_KL).tau for s in utilities]
    return float(np.median(taus))


def train_step(model: TinyLM, state: TrainState, batch: SequenceBatch,
               probe_batch: SequenceBatch | None, cfg: TrainConfig) -> StepLog:
    """One update on `batch`; mutates state in place and returns diagnostics."""
    step = state.step + 1
    rcfg = cfg.reweight
    params = state.params

    base_losses = model.token_losses(params, batch)
    n_sup = batch.n_supervised()
    per_seq = np.nansum(np.where(batch.loss_mask, base_losses, 0.0), axis=1) / n_sup
    mean_loss = float(per_seq.mean())

    utilities = None
    if rcfg.strategy == "vcore":
        if probe_batch is None or probe_batch.n_seqs == 0:
            raise ValueError("vcore needs a nonempty probe batch")
        direction = descent_direction(model, params, probe_batch)
        utilities = probe_utilities(model, params, direction, batch, cfg.probe,
                                    base_losses=base_losses)
        if rcfg.tau_eff is None and rcfg.kl_budget is None:
            if state.tau_eff is None:
                state.tau_eff = _calibrate_tau_eff(utilities)
            rcfg = with_tau_eff(rcfg, state.tau_eff)

    rng_mask = rng_for(cfg.seed, "mask", step) if rcfg.strategy == "random_mask" else None
    weights, alpha = strategy_weights(
        model, params, batch, rcfg,
        utilities=utilities, rng=rng_mask,
        reference_params=state.reference_params,
        stats=state.var_stats, base_losses=base_losses)

    grad = model.grad_weighted(params, batch, weights.weights) / batch.n_seqs
    g = alpha * grad
    if not np.all(np.isfinite(g)):
        raise TrainingAborted(f"non-finite gradient at step {step} "
                              f"(strategy={rcfg.strategy}, alpha={alpha})")
    try:
        if cfg.optimizer == "sgd_momentum":
            if state.momentum is None:
                state.momentum = np.zeros_like(params)
            state.momentum = cfg.momentum_beta * state.momentum + g
            state.params = axpy(params, state.momentum, -cfg.learning_rate)
        else:
            state.params = axpy(params, g, -cfg.learning_rate)
    except FloatingPointError as exc:
        raise TrainingAborted(f"non-finite parameters at step {step}: {exc}") from exc
    state.step = step

    log = StepLog(step=step, mean_loss=mean_loss, alpha=float(alpha),
                  grad_norm=float(np.linalg.norm(g)))
    if weights.is_distribution:
        diag = weight_diagnostics(weights, batch)
        log.kl_q_u = diag.mean_kl_q_u
        log.weight_entropy = diag.mean_entropy
        log.spurious_mass_ratio = diag.spurious_mass_ratio
    if rcfg.strategy == "vcore" and rcfg.alpha_mode != "off":
        log.v_u = state.var_stats.v_u
        log.v_q = state.var_stats.v_q
    return log


def _fresh_state(model: TinyLM, cfg: TrainConfig) -> TrainState:
    params = model.init_params()
    state = TrainState(params=params)
    if cfg.reweight.strategy == "iw_sft":
        state.reference_params = params.copy()
    return state


def _checkpoint_extra(state: TrainState, cfg: TrainConfig) -> dict:
    return {"step": state.step, "tau_eff": state.tau_eff,
            "variance_stats": state.var_stats.to_dict(), "seed": cfg.seed}


def _write_checkpoint(path: Path, state: TrainState, cfg: TrainConfig) -> None:
    arrays = {}
    if state.momentum is not None:
        arrays["momentum"] = state.momentum
    save_checkpoint(path, cfg.model, state.params,
                    extra_header=_checkpoint_extra(state, cfg),
                    extra_arrays=arrays)


def resume(checkpoint_path, cfg: TrainConfig) -> TrainState:
    """Rebuild TrainState from a checkpoint; continuation is bit-identical."""
    stored_cfg, params, extra, arrays = load_checkpoint(checkpoint_path)
    if stored_cfg != cfg.model:
        raise CheckpointError(
            f"checkpoint model config {stored_cfg} does not match {cfg.model}")
    state = TrainState(params=params, step=int(extra.get("step", 0)))
    state.tau_eff = extra.get("tau_eff")
    if "variance_stats" in extra:
        state.var_stats = VarianceStats.from_dict(extra["variance_stats"])
    if cfg.optimizer == "sgd_momentum":
        if "momentum" not in arrays:
            raise CheckpointError("checkpoint has no momentum buffer but the "
                                  "optimizer is sgd_momentum")
        state.momentum = arrays["momentum"]
    if cfg.reweight.strategy == "iw_sft":
        model = TinyLM(cfg.model)
        state.reference_params = model.init_params()
    return state


def _sample_batches(cfg: TrainConfig, n_train: int, step: int):
    rng_b = rng_for(cfg.seed, "batch", step)
    idx = rng_b.integers(0, n_train, size=cfg.batch_size)
    pidx = None
    if cfg.reweight.strategy == "vcore":
        rng_p = rng_for(cfg.seed, "probe", step)
        if cfg.probe_disjoint:
            pool = np.setdiff1d(np.arange(n_train), idx)
            if len(pool) == 0:
                raise ValueError("probe_disjoint impossible: batch covers the whole train set")
            pidx = pool[rng_p.integers(0, len(pool), size=cfg.batch_size)]
        else:
            pidx = rng_p.integers(0, n_train, size=cfg.batch_size)
    return idx, pidx


def run_training(cfg: TrainConfig, train_rows: list[EncodedRow],
                 eval_rows: list[EncodedRow], out_dir,
                 resume_from=None) -> TrainResult:
    """Execute cfg.steps updates; write metrics, checkpoints, and a final eval.

    Fully deterministic given (cfg, dataset rows): batches are drawn with
    replacement from per-step derived streams and every artifact is
    byte-stable across identical invocations.
    """
    if not train_rows:
        raise ValueError("training set is empty")
    model = TinyLM(cfg.model)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    state = resume(resume_from, cfg) if resume_from is not None else _fresh_state(model, cfg)
    if state.step >= cfg.steps:
        raise ValueError(f"checkpoint already at step {state.step} >= steps {cfg.steps}")

    n_train = len(train_rows)
    metrics_path = out_dir / "metrics.jsonl"
    eval_history_path = out_dir / "eval_history.jsonl"
    checkpoint_path = out_dir / f"checkpoint_{cfg.steps:06d}.ckpt"
    step_logs: list[StepLog] = []

    with open(metrics_path, "w", encoding="utf-8", newline="\n") as metrics_f, \
         open(eval_history_path, "w", encoding="utf-8", newline="\n") as eval_f:
        for step in range(state.step + 1, cfg.steps + 1):
            idx, pidx = _sample_batches(cfg, n_train, step)
            batch = to_batch([train_rows[i] for i in idx])
            probe_batch = to_batch([train_rows[i] for i in pidx]) if pidx is not None else None
            log = train_step(model, state, batch, probe_batch, cfg)
            step_logs.append(log)
            if step % cfg.log_every == 0 or step == cfg.steps:
                metrics_f.write(log.to_json_line() + "\n")
            if cfg.eval_every > 0 and (step % cfg.eval_every == 0 or step == cfg.steps):
                report = eval_accuracy(model, state.params, eval_rows)
                record = {"step": step, **report.to_dict()}
                eval_f.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
            if (cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0) \
                    or step == cfg.steps:
                _write_checkpoint(out_dir / f"checkpoint_{step:06d}.ckpt", state, cfg)

    final_report = eval_accuracy(model, state.params, eval_rows) if eval_rows \
        else EvalReport(0.0, float("nan"), 0)
    with open(out_dir / "eval_report.json", "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(final_report.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
    return TrainResult(params=state.params, step_logs=step_logs,
                       eval_report=final_report, metrics_path=metrics_path,
                       checkpoint_path=checkpoint_path,
                       calibrated_tau_eff=state.tau_eff)

"""Evaluation: greedy-decode answer accuracy, weight diagnostics, stability
metrics, and the (tau_eff, epsilon) sensitivity sweep.

Exact match compares only the tokens strictly inside the answer markers of
the greedy continuation against the reference answer span; a continuation
with no well-formed marker pair counts as a miss.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .datagen import ANSWER_CLOSE_ID, ANSWER_OPEN_ID, EncodedRow, to_batch
from .model import TinyLM
from .reweight import TokenWeights, kl_to_uniform, with_tau_eff
from .utility import ProbeConfig

SWEEP_COLUMNS = ("tau_eff", "epsilon", "exact_match", "mean_eval_loss",
                 "mean_kl_q_u", "spike_metric", "status")


@dataclass(frozen=True)
class EvalReport:
    exact_match: float
    mean_eval_loss: float
    n_examples: int

    def to_dict(self) -> dict:
        return {"exact_match": self.exact_match, "mean_eval_loss": self.mean_eval_loss,
                "n_examples": self.n_examples}


@dataclass(frozen=True)
class WeightDiagnostics:
    mean_kl_q_u: float
    mean_entropy: float
    spurious_mass_ratio: float | None  # None when no sequence has spurious tokens


def _extract_answer_span(continuation: np.ndarray) -> np.ndarray | None:
    """Tokens strictly between the first marker pair, or None if malformed."""
    opens = np.flatnonzero(continuation == ANSWER_OPEN_ID)
    if len(opens) == 0:
        return None
    start = opens[0] + 1
    closes = np.flatnonzero(continuation[start:] == ANSWER_CLOSE_ID)
    if len(closes) == 0:
        return None
    return continuation[start:start + closes[0]]


def eval_accuracy(model: TinyLM, params: np.ndarray, rows: list[EncodedRow]) -> EvalReport:
    """Greedy-decode each prompt; exact_match counts answer-span token equality."""
    if not rows:
        raise ValueError("eval set is empty")
    by_len: dict[int, list[int]] = {}
    for i, row in enumerate(rows):
        by_len.setdefault(row.prompt_length, []).append(i)

    hits = 0
    for plen, indices in sorted(by_len.items()):
        prompts = [rows[i].token_ids[:plen] for i in indices]
        max_new = model.cfg.context_len - plen
        conts = model.decode_greedy_batch(params, prompts, max_new)
        for i, cont in zip(indices, conts):
            got = _extract_answer_span(cont)
            ref = rows[i].token_ids[rows[i].answer_mask]
            if got is not None and len(got) == len(ref) and np.array_equal(got, ref):
                hits += 1

    batch = to_batch(rows)
    losses = model.token_losses(params, batch)
    per_seq = np.nansum(np.where(batch.loss_mask, losses, 0.0), axis=1) / batch.n_supervised()
    return EvalReport(exact_match=hits / len(rows),
                      mean_eval_loss=float(per_seq.mean()),
                      n_examples=len(rows))


def weight_diagnostics(weights: TokenWeights, batch) -> WeightDiagnostics:
    """Mean KL-to-uniform, mean entropy, and where supervision mass lands on
    spurious positions (mean spurious weight / uniform weight, averaged over
    sequences that have spurious tokens)."""
    if not weights.is_distribution:
        raise ValueError("weight diagnostics need per-sequence distributions")
    kls, ents, ratios = [], [], []
    for b in range(batch.n_seqs):
        mask = batch.loss_mask[b]
        q = weights.weights[b, mask]
        kls.append(kl_to_uniform(q))
        pos = q > 0
        ents.append(float(-(q[pos] * np.log(q[pos])).sum()))
        spur = batch.spurious_mask[b, mask]
        if spur.any():
            ratios.append(float(q[spur].mean() * mask.sum()))
    return WeightDiagnostics(
        mean_kl_q_u=float(np.mean(kls)),
        mean_entropy=float(np.mean(ents)),
        spurious_mass_ratio=float(np.mean(ratios)) if ratios else None,
    )


def loss_spike_metric(series, early_fraction: float = 0.2) -> float:
    """Max loss over the first early_fraction of steps / median of the last 20%."""
    values = np.asarray(series, dtype=np.float64)
    if values.ndim != 1 or len(values) < 10:
        raise ValueError("loss series must be 1-D with at least 10 entries")
    n = len(values)
    head = values[:math.ceil(early_fraction * n)]
    tail = values[n - math.ceil(0.2 * n):]
    return float(head.max() / np.median(tail))


# ---- sensitivity sweep -------------------------------------------------------


def _run_sweep_cell(packed):
    """One full training run per grid cell (module-level for process pools)."""
    from .trainer import TrainingAborted, run_training

    tau_eff, epsilon, base_cfg, train_rows, eval_rows, cell_dir = packed
    cfg = replace(
        base_cfg,
        reweight=with_tau_eff(base_cfg.reweight, tau_eff),
        probe=ProbeConfig(epsilon=epsilon,
                          normalize_by_epsilon=base_cfg.probe.normalize_by_epsilon),
    )
    row = {"tau_eff": tau_eff, "epsilon": epsilon, "exact_match": "",
           "mean_eval_loss": "", "mean_kl_q_u": "", "spike_metric": "", "status": "ok"}
    try:
        result = run_training(cfg, train_rows, eval_rows, cell_dir)
    except TrainingAborted:
        row["status"] = "failed"
        return row
    row["exact_match"] = result.eval_report.exact_match
    row["mean_eval_loss"] = result.eval_report.mean_eval_loss
    kls = [r.kl_q_u for r in result.step_logs if r.kl_q_u is not None]
    row["mean_kl_q_u"] = float(np.mean(kls)) if kls else ""
    losses = [r.mean_loss for r in result.step_logs]
    row["spike_metric"] = loss_spike_metric(losses) if len(losses) >= 10 else ""
    return row


def sweep(tau_effs, epsilons, base_cfg, train_rows, eval_rows, out_dir,
          jobs: int = 1) -> list[dict]:
    """Train one fresh run per (tau_eff, epsilon) cell; write a fixed-column CSV.

    A cell whose run aborts is recorded with status=failed and the sweep
    continues. Rows come back sorted by (tau_eff, epsilon) regardless of
    execution order.
    """
    if not tau_effs or not epsilons:
        raise ValueError("sweep grid must be nonempty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = []
    for tau in sorted(tau_effs):
        for eps in sorted(epsilons):
            cell_dir = out_dir / f"cell_tau{tau:g}_eps{eps:g}"
            cells.append((tau, eps, base_cfg, train_rows, eval_rows, cell_dir))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_sweep_cell, cells))
    else:
        rows = [_run_sweep_cell(c) for c in cells]
    rows.sort(key=lambda r: (r["tau_eff"], r["epsilon"]))

    with open(out_dir / "sweep.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return rows

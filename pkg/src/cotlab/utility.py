"""Per-token gradient utilities: exact inner-product oracle and probing estimator.

The utility of supervising token t is the inner product between a global
descent direction and the gradient of that token's loss. The oracle computes
it with one backward pass per token; the estimator recovers all of them from
a single extra forward pass at perturbed parameters:

    s_hat_t = (loss_t(theta) - loss_t(theta - eps * direction)) / eps

which converges to the exact utility as eps -> 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SequenceBatch, TinyLM, axpy


@dataclass(frozen=True)
class ProbeConfig:
    epsilon: float = 1e-4
    normalize_by_epsilon: bool = True

    def __post_init__(self) -> None:
        if not 1e-8 <= self.epsilon <= 1e-1:
            raise ValueError("epsilon must lie in [1e-8, 1e-1]")


def descent_direction(model: TinyLM, params: np.ndarray,
                      probe_batch: SequenceBatch) -> np.ndarray:
    """Gradient of the probe-batch loss under uniform per-token weights 1/|y|,
    averaged over sequences."""
    if probe_batch.n_seqs == 0:
        raise ValueError("probe batch is empty")
    n_sup = np.maximum(probe_batch.n_supervised(), 1)
    weights = np.where(probe_batch.loss_mask, 1.0 / n_sup[:, None], 0.0)
    return model.grad_weighted(params, probe_batch, weights) / probe_batch.n_seqs


def exact_utilities(model: TinyLM, direction: np.ndarray, params: np.ndarray,
                    batch: SequenceBatch) -> list[np.ndarray]:
    """<direction, grad loss_t> for every supervised t, one backward per token.

    Oracle-grade and deliberately slow; used to verify the probing estimator.
    """
    if direction.shape != params.shape:
        raise ValueError("direction length must match params")
    out = []
    for b in range(batch.n_seqs):
        positions = batch.supervised_positions(b)
        s = np.empty(len(positions))
        for j, t in enumerate(positions):
            s[j] = direction @ model.grad_token(params, batch, b, int(t))
        out.append(s)
    return out


def probe_utilities(model: TinyLM, params: np.ndarray, direction: np.ndarray,
                    batch: SequenceBatch, cfg: ProbeConfig,
                    base_losses: np.ndarray | None = None) -> list[np.ndarray]:
    """Finite-difference utilities from two forward passes and zero backwards.

    When base_losses (the losses at the unperturbed params) are passed in from
    the step's bookkeeping, only the perturbed forward pass runs. Returns the
    quotient delta/eps, or the raw loss difference when normalize_by_epsilon
    is false.
    """
    if direction.shape != params.shape:
        raise ValueError("direction length must match params")
    if base_losses is None:
        base_losses = model.token_losses(params, batch)
    shifted = axpy(params, direction, -cfg.epsilon)
    perturbed = model.token_losses(shifted, batch)
    if not np.all(np.isfinite(perturbed[batch.loss_mask])):
        raise FloatingPointError(
            "perturbed losses are non-finite; probing scale epsilon is too large")
    delta = base_losses - perturbed
    out = []
    for b in range(batch.n_seqs):
        row = delta[b, batch.loss_mask[b]]
        out.append(row / cfg.epsilon if cfg.normalize_by_epsilon else row.copy())
    return out

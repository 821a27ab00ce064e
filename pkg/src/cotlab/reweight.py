"""Supervision-weight strategies: Gibbs tilting, temperature solving, variance
control, and the baselines (uniform, dft, iw_sft, random_mask).

The adaptive path turns per-token gradient utilities into a per-sequence
distribution q(t) proportional to exp(tau * s_t) -- the closed-form maximizer
of expected first-order descent subject to a KL-to-uniform budget -- and then
rescales the update by alpha = sqrt(V_u / V_q) so the reweighted step's
cross-sequence variance matches uniform weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .model import SequenceBatch, TinyLM

STRATEGIES = ("uniform", "vcore", "dft", "iw_sft", "random_mask")
ALPHA_MODES = ("off", "per_batch", "ema")

# fraction of supervision tokens the random_mask baseline keeps
RANDOM_KEEP_FRACTION = 0.20
# probability-ratio clip for iw_sft
IW_CLIP_LO, IW_CLIP_HI = 0.2, 5.0

TAU_MAX = 1e12
_KL_TOL = 1e-8
_TAU_INTERVAL_TOL = 1e-12


@dataclass
class TokenWeights:
    """Per-position supervision weights; zero off the supervised mask."""

    weights: np.ndarray  # (B, T) float64
    is_distribution: bool


@dataclass(frozen=True)
class ReweightConfig:
    strategy: str = "uniform"
    tau_eff: float | None = None       # effective temperature on normalized utilities
    kl_budget: float | None = None     # alternative: solve tau from KL(q||u) = budget
    alpha_mode: str = "off"
    alpha_clamp: tuple[float, float] = (0.01, 1.0)
    ema_decay: float = 0.9

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.tau_eff is not None and self.tau_eff < 0:
            raise ValueError("tau_eff must be >= 0")
        if self.kl_budget is not None and self.kl_budget < 0:
            raise ValueError("kl_budget must be >= 0")
        if self.tau_eff is not None and self.kl_budget is not None:
            raise ValueError("set tau_eff or kl_budget, not both")
        lo, hi = self.alpha_clamp
        if not (0 < lo <= 1 <= hi):
            raise ValueError("alpha_clamp must satisfy 0 < lo <= 1 <= hi")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")


@dataclass
class VarianceStats:
    """Cross-sequence variance of weighted vs uniform utility sums."""

    v_u: float = 0.0
    v_q: float = 0.0
    sample_count: int = 0      # sequences contributing to the latest batch estimate
    ema_v_u: float = 0.0
    ema_v_q: float = 0.0
    ema_ready: bool = False

    def to_dict(self) -> dict:
        return {"v_u": self.v_u, "v_q": self.v_q, "sample_count": self.sample_count,
                "ema_v_u": self.ema_v_u, "ema_v_q": self.ema_v_q,
                "ema_ready": self.ema_ready}

    @classmethod
    def from_dict(cls, d: dict) -> "VarianceStats":
        return cls(**d)


class TemperatureSolution(NamedTuple):
    tau: float
    kl: float
    saturated: bool


def gibbs_weights(utilities: np.ndarray, tau: float) -> np.ndarray:
    """q(t) = exp(tau * s_t) / sum_j exp(tau * s_j), overflow-safe.

    tau = 0 or constant utilities give exactly the uniform distribution.
    """
    u = np.asarray(utilities, dtype=np.float64)
    if u.ndim != 1 or u.size == 0:
        raise ValueError("utilities must be a nonempty 1-D array")
    if not np.all(np.isfinite(u)):
        raise ValueError("utilities must be finite")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    z = tau * u
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def kl_to_uniform(weights: np.ndarray) -> float:
    """KL(q || uniform) = sum_t q_t ln(q_t * n), with 0 ln 0 = 0."""
    q = np.asarray(weights, dtype=np.float64)
    if q.ndim != 1 or q.size == 0:
        raise ValueError("weights must be a nonempty 1-D array")
    if np.any(q < 0) or not np.isclose(q.sum(), 1.0, atol=1e-9):
        raise ValueError("weights must be a probability distribution")
    n = q.size
    pos = q > 0
    return float(np.sum(q[pos] * np.log(q[pos] * n)))


def _kl_at_tau(utilities: np.ndarray, tau: float) -> float:
    return kl_to_uniform(gibbs_weights(utilities, tau))


def solve_temperature(utilities: np.ndarray, delta: float) -> TemperatureSolution:
    """Find tau with KL(q_tau || u) = delta by bisection.

    KL is nondecreasing in tau for fixed utilities, with supremum
    ln(n / k) where k is the multiplicity of the maximum utility. A budget at
    or beyond that supremum cannot bind; we return TAU_MAX flagged saturated.
    """
    u = np.asarray(utilities, dtype=np.float64)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if u.ndim != 1 or u.size == 0:
        raise ValueError("utilities must be a nonempty 1-D array")
    if delta == 0.0:
        return TemperatureSolution(0.0, 0.0, False)
    n = u.size
    k = int(np.sum(u == u.max()))
    kl_sup = math.log(n / k)
    if delta >= kl_sup - 1e-12:
        return TemperatureSolution(TAU_MAX, _kl_at_tau(u, TAU_MAX), True)

    lo, hi = 0.0, 1.0
    while _kl_at_tau(u, hi) < delta:
        hi *= 2.0
        if hi > TAU_MAX:
            return TemperatureSolution(TAU_MAX, _kl_at_tau(u, TAU_MAX), True)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        kl = _kl_at_tau(u, mid)
        if abs(kl - delta) <= _KL_TOL or (hi - lo) < _TAU_INTERVAL_TOL:
            return TemperatureSolution(mid, kl, False)
        if kl < delta:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    return TemperatureSolution(mid, _kl_at_tau(u, mid), False)


def update_variance_stats(stats: VarianceStats, utilities: list[np.ndarray],
                          weights: list[np.ndarray], ema_decay: float = 0.9) -> VarianceStats:
    """Refresh v_q / v_u from one batch's per-sequence weighted utility sums.

    a_i = sum_t q_t s_t and b_i = sum_t s_t / |y_i|; sample variances are taken
    across sequences. The EMA is seeded with the first batch's values.
    """
    if len(utilities) == 0 or len(utilities) != len(weights):
        raise ValueError("need matching, nonempty utility and weight lists")
    a = np.array([float(q @ s) for q, s in zip(weights, utilities)])
    b = np.array([float(s.mean()) for s in utilities])
    m = len(a)
    v_q = float(np.var(a, ddof=1)) if m >= 2 else 0.0
    v_u = float(np.var(b, ddof=1)) if m >= 2 else 0.0
    stats.v_q = v_q
    stats.v_u = v_u
    stats.sample_count = m
    if m >= 2:
        if stats.ema_ready:
            stats.ema_v_q = ema_decay * stats.ema_v_q + (1.0 - ema_decay) * v_q
            stats.ema_v_u = ema_decay * stats.ema_v_u + (1.0 - ema_decay) * v_u
        else:
            stats.ema_v_q = v_q
            stats.ema_v_u = v_u
            stats.ema_ready = True
    return stats


def variance_alpha(stats: VarianceStats, cfg: ReweightConfig) -> float:
    """alpha = sqrt(V_u / V_q), clamped; degenerate estimates fall back to 1."""
    if cfg.alpha_mode == "off":
        raise ValueError("variance_alpha called with alpha_mode off")
    if cfg.alpha_mode == "per_batch":
        v_u, v_q = stats.v_u, stats.v_q
        usable = stats.sample_count >= 2 and v_q > 0.0
    else:
        v_u, v_q = stats.ema_v_u, stats.ema_v_q
        usable = stats.ema_ready and v_q > 0.0
    if not usable:
        return 1.0
    lo, hi = cfg.alpha_clamp
    return float(np.clip(math.sqrt(v_u / v_q), lo, hi))


def _scatter_rows(batch: SequenceBatch, rows: list[np.ndarray]) -> np.ndarray:
    out = np.zeros(batch.token_ids.shape)
    for b, row in enumerate(rows):
        out[b, batch.loss_mask[b]] = row
    return out


def strategy_weights(model: TinyLM, params: np.ndarray, batch: SequenceBatch,
                     cfg: ReweightConfig, *,
                     utilities: list[np.ndarray] | None = None,
                     rng: np.random.Generator | None = None,
                     reference_params: np.ndarray | None = None,
                     stats: VarianceStats | None = None,
                     base_losses: np.ndarray | None = None) -> tuple[TokenWeights, float]:
    """Dispatch the configured strategy to (TokenWeights, alpha).

    vcore needs `utilities` (normalized, one array per sequence); iw_sft needs
    `reference_params`; random_mask needs `rng`. `base_losses` lets dft/iw_sft
    reuse the step's forward pass instead of recomputing probabilities.
    """
    n_sup = batch.n_supervised()

    if cfg.strategy == "uniform":
        w = np.where(batch.loss_mask, 1.0 / n_sup[:, None], 0.0)
        return TokenWeights(w, is_distribution=True), 1.0

    if cfg.strategy == "vcore":
        if utilities is None:
            raise ValueError("vcore requires utilities")
        if len(utilities) != batch.n_seqs:
            raise ValueError("one utility vector per sequence required")
        rows = []
        for s in utilities:
            if cfg.kl_budget is not None:
                sol = solve_temperature(s, cfg.kl_budget)
                rows.append(gibbs_weights(s, sol.tau))
            else:
                if cfg.tau_eff is None:
                    raise ValueError("vcore requires tau_eff or kl_budget")
                rows.append(gibbs_weights(s, cfg.tau_eff))
        alpha = 1.0
        if cfg.alpha_mode != "off":
            if stats is None:
                raise ValueError("alpha_mode needs a VarianceStats record")
            update_variance_stats(stats, utilities, rows, ema_decay=cfg.ema_decay)
            alpha = variance_alpha(stats, cfg)
        return TokenWeights(_scatter_rows(batch, rows), is_distribution=True), alpha

    if cfg.strategy == "dft":
        probs = np.exp(-base_losses) if base_losses is not None \
            else model.token_probs(params, batch)
        w = np.where(batch.loss_mask, probs / n_sup[:, None], 0.0)
        return TokenWeights(w, is_distribution=False), 1.0

    if cfg.strategy == "iw_sft":
        if reference_params is None:
            raise ValueError("iw_sft requires reference_params")
        probs = np.exp(-base_losses) if base_losses is not None \
            else model.token_probs(params, batch)
        ref_probs = model.token_probs(reference_params, batch)
        ratio = np.clip(probs / ref_probs, IW_CLIP_LO, IW_CLIP_HI)
        w = np.where(batch.loss_mask, ratio / n_sup[:, None], 0.0)
        return TokenWeights(w, is_distribution=False), 1.0

    if cfg.strategy == "random_mask":
        if rng is None:
            raise ValueError("random_mask requires an rng")
        w = np.zeros(batch.token_ids.shape)
        for b in range(batch.n_seqs):
            sup = batch.supervised_positions(b)
            answers = np.flatnonzero(batch.answer_mask[b])
            keep = max(int(round(RANDOM_KEEP_FRACTION * len(sup))), len(answers))
            extra_pool = np.setdiff1d(sup, answers)
            n_extra = min(keep - len(answers), len(extra_pool))
            chosen = rng.choice(extra_pool, size=n_extra, replace=False) \
                if n_extra > 0 else np.empty(0, dtype=np.int64)
            retained = np.concatenate([answers, chosen]).astype(np.int64)
            w[b, retained] = 1.0 / len(retained)
        return TokenWeights(w, is_distribution=True), 1.0

    raise ValueError(f"unknown strategy {cfg.strategy!r}")


def with_tau_eff(cfg: ReweightConfig, tau_eff: float) -> ReweightConfig:
    """Copy of cfg with tau_eff pinned (used by the first-batch calibration)."""
    return replace(cfg, tau_eff=tau_eff, kl_budget=None)

"""Tiny autoregressive transformer in float64 numpy with handwritten backprop.

Parameters live in a single flat vector with a fixed layout derived from the
config, so updates, checkpoints, and gradient inner products are plain array
arithmetic. The forward pass and the reverse-mode gradient of an arbitrarily
token-weighted loss are exact and deterministic. A module-level counter
records how many forward/backward sweeps run; the training loop and tests use
it to enforce per-step pass budgets.

Architecture: token embedding + learned positions, then 0-2 pre-norm blocks
(multi-head causal attention, then a GELU MLP), a final layernorm (only when
there are blocks), and an untied output projection. Token ids 0-3 are
reserved for pad/bos/sep/eos.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

PAD_ID = 0
BOS_ID = 1
SEP_ID = 2
EOS_ID = 3

LN_EPS = 1e-5
INIT_STD = 0.02

_CKPT_MAGIC = b"TLM1"
CHECKPOINT_FORMAT_VERSION = 1

# tanh-based GELU constants (smooth, so finite-difference checks stay clean)
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class CheckpointError(Exception):
    """Checkpoint file is missing, malformed, or inconsistent with the config."""


class PassCounters:
    """Counts full forward and backward sweeps through the network."""

    def __init__(self) -> None:
        self.forward = 0
        self.backward = 0

    def reset(self) -> None:
        self.forward = 0
        self.backward = 0


counters = PassCounters()


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_len: int
    d_model: int
    n_layers: int
    n_heads: int
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4 (ids 0-3 are reserved)")
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2")
        if not 0 <= self.n_layers <= 2:
            raise ValueError("n_layers must be 0, 1, or 2")
        if self.d_model < 1 or self.n_heads < 1:
            raise ValueError("d_model and n_heads must be positive")
        if self.n_layers > 0 and self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class SequenceBatch:
    """Encoded sequences with supervision, answer, and spurious masks.

    loss_mask marks the supervised target positions (prompt excluded);
    answer_mask and spurious_mask are subsets of it. Positions at or past
    seq_lengths are padding and carry no masks.
    """

    token_ids: np.ndarray      # (B, T) int64
    loss_mask: np.ndarray      # (B, T) bool
    answer_mask: np.ndarray    # (B, T) bool
    spurious_mask: np.ndarray  # (B, T) bool
    seq_lengths: np.ndarray    # (B,) int64

    def __post_init__(self) -> None:
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        self.answer_mask = np.asarray(self.answer_mask, dtype=bool)
        self.spurious_mask = np.asarray(self.spurious_mask, dtype=bool)
        self.seq_lengths = np.asarray(self.seq_lengths, dtype=np.int64)

    @property
    def n_seqs(self) -> int:
        return self.token_ids.shape[0]

    @property
    def n_positions(self) -> int:
        return self.token_ids.shape[1]

    def n_supervised(self) -> np.ndarray:
        """Supervised-position count |y| per sequence."""
        return self.loss_mask.sum(axis=1)

    def supervised_positions(self, seq: int) -> np.ndarray:
        return np.flatnonzero(self.loss_mask[seq])

    def validate(self, vocab_size: int) -> None:
        b, t = self.token_ids.shape
        if self.loss_mask.shape != (b, t) or self.answer_mask.shape != (b, t) \
                or self.spurious_mask.shape != (b, t) or self.seq_lengths.shape != (b,):
            raise ValueError("batch arrays have inconsistent shapes")
        if self.token_ids.min() < 0 or self.token_ids.max() >= vocab_size:
            raise ValueError("token id out of range for vocab")
        if np.any(self.answer_mask & ~self.loss_mask):
            raise ValueError("answer_mask must be a subset of loss_mask")
        if np.any(self.spurious_mask & ~self.loss_mask):
            raise ValueError("spurious_mask must be a subset of loss_mask")
        if np.any(self.loss_mask[:, 0]):
            raise ValueError("position 0 has no context and cannot be supervised")
        if np.any(self.seq_lengths < 1) or np.any(self.seq_lengths > t):
            raise ValueError("seq_lengths out of range")
        pos = np.arange(t)[None, :]
        if np.any(self.loss_mask & (pos >= self.seq_lengths[:, None])):
            raise ValueError("loss_mask set on padding positions")

    def require_supervision(self) -> None:
        """Training-data invariant: every row supervises and answers something."""
        if np.any(self.loss_mask.sum(axis=1) < 1):
            raise ValueError("every sequence needs at least one supervised position")
        if np.any(self.answer_mask.sum(axis=1) < 1):
            raise ValueError("every sequence needs at least one answer position")


def _layout_entries(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    v, c, d = cfg.vocab_size, cfg.context_len, cfg.d_model
    entries: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (v, d)),
        ("pos_emb", (c, d)),
    ]
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        entries += [
            (p + "ln1.scale", (d,)),
            (p + "ln1.bias", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)),
            (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)),
            (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)),
            (p + "attn.bo", (d,)),
            (p + "ln2.scale", (d,)),
            (p + "ln2.bias", (d,)),
            (p + "mlp.w1", (d, 4 * d)),
            (p + "mlp.b1", (4 * d,)),
            (p + "mlp.w2", (4 * d, d)),
            (p + "mlp.b2", (d,)),
        ]
    if cfg.n_layers > 0:
        entries += [("ln_f.scale", (d,)), ("ln_f.bias", (d,))]
    entries += [("out.w", (d, v)), ("out.b", (v,))]
    return entries


def _ln_fwd(x: np.ndarray, scale: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * scale + bias, (xhat, inv)


def _ln_bwd(dy: np.ndarray, cache, scale: np.ndarray):
    xhat, inv = cache
    dscale = (dy * xhat).sum(axis=(0, 1))
    dbias = dy.sum(axis=(0, 1))
    dxhat = dy * scale
    dx = inv * (dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dscale, dbias


def _gelu_fwd(u: np.ndarray):
    t = np.tanh(_GELU_C * (u + _GELU_A * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u: np.ndarray, t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * u * u)


class TinyLM:
    """Parameter layout plus exact forward/backward for one ModelConfig."""

    def __init__(self, cfg: ModelConfig) -> None:
        self.cfg = cfg
        self._entries = _layout_entries(cfg)
        self._slices: dict[str, tuple[slice, tuple[int, ...]]] = {}
        off = 0
        for name, shape in self._entries:
            size = int(np.prod(shape))
            self._slices[name] = (slice(off, off + size), shape)
            off += size
        self.n_params = off

    # ---- parameter plumbing -------------------------------------------------

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        """Named zero-copy views into a flat parameter (or gradient) vector."""
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected flat vector of length {self.n_params}, got {flat.shape}")
        return {name: flat[sl].reshape(shape) for name, (sl, shape) in self._slices.items()}

    def init_params(self) -> np.ndarray:
        """Scaled-Gaussian weights, zero biases/offsets, unit norm scales."""
        rng = np.random.default_rng(self.cfg.init_seed)
        flat = np.zeros(self.n_params, dtype=np.float64)
        v = self.views(flat)
        zero_suffixes = (".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")
        for name, shape in self._entries:
            if name.endswith(".scale"):
                v[name][...] = 1.0
            elif name.endswith(zero_suffixes) or name == "out.b":
                pass  # zeros
            else:
                v[name][...] = rng.normal(0.0, INIT_STD, size=shape)
        return flat

    # ---- forward / backward -------------------------------------------------

    def _forward(self, params: np.ndarray, token_ids: np.ndarray):
        cfg = self.cfg
        b, t = token_ids.shape
        if t > cfg.context_len:
            raise ValueError(f"sequence length {t} exceeds context_len {cfg.context_len}")
        if token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size:
            raise ValueError("token id out of range")
        p = self.views(params)
        d = cfg.d_model
        x = p["tok_emb"][token_ids] + p["pos_emb"][:t]

        layer_caches = []
        causal = np.triu(np.full((t, t), -np.inf), k=1)
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            h1, ln1_cache = _ln_fwd(x, p[pre + "ln1.scale"], p[pre + "ln1.bias"])
            q = h1 @ p[pre + "attn.wq"] + p[pre + "attn.bq"]
            k = h1 @ p[pre + "attn.wk"] + p[pre + "attn.bk"]
            v = h1 @ p[pre + "attn.wv"] + p[pre + "attn.bv"]
            nh, dh = cfg.n_heads, d // cfg.n_heads
            qh = q.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            kh = k.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            vh = v.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh) + causal
            m = scores.max(axis=-1, keepdims=True)
            e = np.exp(scores - m)
            attn = e / e.sum(axis=-1, keepdims=True)
            zh = attn @ vh
            z = zh.transpose(0, 2, 1, 3).reshape(b, t, d)
            x_attn = x + (z @ p[pre + "attn.wo"] + p[pre + "attn.bo"])

            h2, ln2_cache = _ln_fwd(x_attn, p[pre + "ln2.scale"], p[pre + "ln2.bias"])
            u = h2 @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]
            act, gelu_t = _gelu_fwd(u)
            x = x_attn + (act @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"])

            layer_caches.append({
                "ln1": ln1_cache, "h1": h1, "qh": qh, "kh": kh, "vh": vh,
                "attn": attn, "z": z, "ln2": ln2_cache, "h2": h2,
                "u": u, "gelu_t": gelu_t, "act": act,
            })

        if cfg.n_layers > 0:
            xf, lnf_cache = _ln_fwd(x, p["ln_f.scale"], p["ln_f.bias"])
        else:
            xf, lnf_cache = x, None
        logits = xf @ p["out.w"] + p["out.b"]
        counters.forward += 1
        cache = {"ids": token_ids, "layers": layer_caches, "lnf": lnf_cache, "xf": xf}
        return logits, cache

    def _backward(self, params: np.ndarray, cache: dict, dlogits: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        token_ids = cache["ids"]
        b, t = token_ids.shape
        d = cfg.d_model
        p = self.views(params)
        gflat = np.zeros(self.n_params, dtype=np.float64)
        g = self.views(gflat)

        xf = cache["xf"]
        g["out.w"] += np.einsum("btd,btv->dv", xf, dlogits)
        g["out.b"] += dlogits.sum(axis=(0, 1))
        dx = dlogits @ p["out.w"].T
        if cfg.n_layers > 0:
            dx, ds, db = _ln_bwd(dx, cache["lnf"], p["ln_f.scale"])
            g["ln_f.scale"] += ds
            g["ln_f.bias"] += db

        for i in reversed(range(cfg.n_layers)):
            pre = f"layer{i}."
            lc = cache["layers"][i]
            nh, dh = cfg.n_heads, d // cfg.n_heads

            # MLP branch (dx currently holds the gradient at the block output)
            dmo = dx
            g[pre + "mlp.w2"] += np.einsum("btm,btd->md", lc["act"], dmo)
            g[pre + "mlp.b2"] += dmo.sum(axis=(0, 1))
            dact = dmo @ p[pre + "mlp.w2"].T
            du = dact * _gelu_grad(lc["u"], lc["gelu_t"])
            g[pre + "mlp.w1"] += np.einsum("btd,btm->dm", lc["h2"], du)
            g[pre + "mlp.b1"] += du.sum(axis=(0, 1))
            dh2 = du @ p[pre + "mlp.w1"].T
            dln2, ds, db = _ln_bwd(dh2, lc["ln2"], p[pre + "ln2.scale"])
            g[pre + "ln2.scale"] += ds
            g[pre + "ln2.bias"] += db
            dx = dx + dln2

            # attention branch
            dao = dx
            g[pre + "attn.wo"] += np.einsum("btd,bte->de", lc["z"], dao)
            g[pre + "attn.bo"] += dao.sum(axis=(0, 1))
            dz = dao @ p[pre + "attn.wo"].T
            dzh = dz.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            attn, qh, kh, vh = lc["attn"], lc["qh"], lc["kh"], lc["vh"]
            dattn = dzh @ vh.transpose(0, 1, 3, 2)
            dvh = attn.transpose(0, 1, 3, 2) @ dzh
            dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            dscores /= math.sqrt(dh)
            dqh = dscores @ kh
            dkh = dscores.transpose(0, 1, 3, 2) @ qh
            dq = dqh.transpose(0, 2, 1, 3).reshape(b, t, d)
            dk = dkh.transpose(0, 2, 1, 3).reshape(b, t, d)
            dv = dvh.transpose(0, 2, 1, 3).reshape(b, t, d)
            h1 = lc["h1"]
            g[pre + "attn.wq"] += np.einsum("btd,bte->de", h1, dq)
            g[pre + "attn.bq"] += dq.sum(axis=(0, 1))
            g[pre + "attn.wk"] += np.einsum("btd,bte->de", h1, dk)
            g[pre + "attn.bk"] += dk.sum(axis=(0, 1))
            g[pre + "attn.wv"] += np.einsum("btd,bte->de", h1, dv)
            g[pre + "attn.bv"] += dv.sum(axis=(0, 1))
            dh1 = dq @ p[pre + "attn.wq"].T + dk @ p[pre + "attn.wk"].T + dv @ p[pre + "attn.wv"].T
            dln1, ds, db = _ln_bwd(dh1, lc["ln1"], p[pre + "ln1.scale"])
            g[pre + "ln1.scale"] += ds
            g[pre + "ln1.bias"] += db
            dx = dx + dln1

        g["pos_emb"][:t] += dx.sum(axis=0)
        np.add.at(g["tok_emb"], token_ids, dx)
        counters.backward += 1
        return gflat

    # ---- public operations --------------------------------------------------

    def logits(self, params: np.ndarray, token_ids: np.ndarray) -> np.ndarray:
        """Next-token logits for a (B, T) id matrix."""
        out, _ = self._forward(params, np.asarray(token_ids, dtype=np.int64))
        return out

    def token_losses(self, params: np.ndarray, batch: SequenceBatch) -> np.ndarray:
        """-log p(token_t | tokens_<t) at every supervised position, NaN elsewhere."""
        batch.validate(self.cfg.vocab_size)
        logits, _ = self._forward(params, batch.token_ids)
        m = logits.max(axis=-1, keepdims=True)
        lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]
        b, t = batch.token_ids.shape
        losses = np.full((b, t), np.nan)
        if t > 1:
            rows = np.arange(b)[:, None]
            cols = np.arange(t - 1)[None, :]
            picked = logits[rows, cols, batch.token_ids[:, 1:]]
            full = lse[:, :-1] - picked
            losses[:, 1:] = np.where(batch.loss_mask[:, 1:], full, np.nan)
        return losses

    def token_probs(self, params: np.ndarray, batch: SequenceBatch) -> np.ndarray:
        """p(token_t | tokens_<t) = exp(-loss) at supervised positions, NaN elsewhere."""
        return np.exp(-self.token_losses(params, batch))

    def grad_weighted(self, params: np.ndarray, batch: SequenceBatch,
                      weights: np.ndarray) -> np.ndarray:
        """Exact gradient of sum over sequences and positions of w_t * loss_t."""
        batch.validate(self.cfg.vocab_size)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != batch.token_ids.shape:
            raise ValueError("weights must align with the batch id matrix")
        if not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite")
        if np.any(weights[~batch.loss_mask] != 0.0):
            raise ValueError("nonzero weight on an unsupervised position")
        logits, cache = self._forward(params, batch.token_ids)
        m = logits.max(axis=-1, keepdims=True)
        e = np.exp(logits - m)
        probs = e / e.sum(axis=-1, keepdims=True)
        b, t = batch.token_ids.shape
        wshift = np.zeros((b, t))
        wshift[:, :-1] = weights[:, 1:]
        dlogits = probs * wshift[..., None]
        rows = np.arange(b)[:, None]
        cols = np.arange(t - 1)[None, :]
        dlogits[rows, cols, batch.token_ids[:, 1:]] -= weights[:, 1:]
        return self._backward(params, cache, dlogits)

    def grad_token(self, params: np.ndarray, batch: SequenceBatch,
                   seq: int, pos: int) -> np.ndarray:
        """Gradient of the single token loss at (seq, pos); test oracle."""
        if not batch.loss_mask[seq, pos]:
            raise ValueError(f"position ({seq}, {pos}) is not supervised")
        w = np.zeros(batch.token_ids.shape)
        w[seq, pos] = 1.0
        return self.grad_weighted(params, batch, w)

    def decode_greedy(self, params: np.ndarray, prompt: np.ndarray,
                      max_new: int) -> np.ndarray:
        """Greedy continuation of one prompt; stops at eos or max_new tokens."""
        return self.decode_greedy_batch(params, [np.asarray(prompt, dtype=np.int64)],
                                        max_new)[0]

    def decode_greedy_batch(self, params: np.ndarray, prompts: list[np.ndarray],
                            max_new: int) -> list[np.ndarray]:
        """Greedy-decode equal-length prompts together. Ties pick the lowest id."""
        if not prompts:
            return []
        lens = {len(pr) for pr in prompts}
        if len(lens) != 1:
            raise ValueError("batched decode requires equal-length prompts")
        plen = lens.pop()
        if plen < 1:
            raise ValueError("prompt must be nonempty")
        if plen + max_new > self.cfg.context_len:
            raise ValueError("prompt length + max_new exceeds context_len")
        ids = np.stack([np.asarray(pr, dtype=np.int64) for pr in prompts])
        n = ids.shape[0]
        done = np.zeros(n, dtype=bool)
        outs: list[list[int]] = [[] for _ in range(n)]
        for _ in range(max_new):
            logits, _ = self._forward(params, ids)
            nxt = np.argmax(logits[:, -1, :], axis=-1)
            for j in range(n):
                if not done[j]:
                    outs[j].append(int(nxt[j]))
                    if nxt[j] == EOS_ID:
                        done[j] = True
            if done.all():
                break
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
        return [np.asarray(o, dtype=np.int64) for o in outs]


def axpy(params: np.ndarray, direction: np.ndarray, scale: float) -> np.ndarray:
    """params + scale * direction, with a finiteness check on the result."""
    if params.shape != direction.shape:
        raise ValueError("length mismatch between params and direction")
    out = params + scale * direction
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("axpy produced non-finite values")
    return out


# ---- checkpoint io ---------------------------------------------------------


def save_checkpoint(path, cfg: ModelConfig, params: np.ndarray,
                    extra_header: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write header (version + config [+ training extras]) then little-endian f64 arrays."""
    arrays: list[tuple[str, np.ndarray]] = [("params", np.asarray(params, dtype=np.float64))]
    for name, arr in (extra_arrays or {}).items():
        arrays.append((name, np.asarray(arr, dtype=np.float64)))
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": cfg.to_dict(),
        "arrays": [[name, int(a.size)] for name, a in arrays],
    }
    if extra_header:
        header["extra"] = extra_header
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (config, params, extra_header, extra_arrays)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if len(raw) < 8 or raw[:4] != _CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    cfg = ModelConfig.from_dict(header["model_config"])
    off = 8 + hlen
    out: dict[str, np.ndarray] = {}
    for name, size in header["arrays"]:
        nbytes = int(size) * 8
        if len(raw) < off + nbytes:
            raise CheckpointError(f"truncated checkpoint: array {name!r} incomplete")
        out[name] = np.frombuffer(raw[off:off + nbytes], dtype="<f8").astype(np.float64)
        off += nbytes
    if off != len(raw):
        raise CheckpointError("trailing bytes after checkpoint arrays")
    params = out.pop("params", None)
    if params is None:
        raise CheckpointError("checkpoint missing parameter array")
    if params.size != TinyLM(cfg).n_params:
        raise CheckpointError("parameter count does not match the stored config")
    return cfg, params, header.get("extra", {}), out

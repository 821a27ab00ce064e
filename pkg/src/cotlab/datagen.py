"""Synthetic modular-arithmetic chain-of-thought corpus with labeled noise.

Each example is a left-to-right chain like ``3+4*2-5=?`` evaluated mod m,
with a rationale of one intermediate equation per step (``3+4=7;7*2=1;...``)
and the final value wrapped in answer markers. Because every example is
machine-checkable, spurious rationale content can be injected with exact
position labels: distractor steps (well-formed but irrelevant equations) and
corrupted values (a repeat of a step's computation with a wrong result that
the chain then ignores). Deleting all spurious tokens always leaves a valid
derivation of the stored answer.

Tokenization is symbol-level: digits, operators, punctuation, and the two
answer markers, on top of the four reserved ids.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import BOS_ID, EOS_ID, PAD_ID, SEP_ID, SequenceBatch
from .seeding import rng_for

OP_SYMBOLS = {"add": "+", "sub": "-", "mul": "*"}

ANSWER_OPEN = "<ans>"
ANSWER_CLOSE = "</ans>"

_SYMBOLS = tuple("0123456789") + ("+", "-", "*", "=", "?", ";", ANSWER_OPEN, ANSWER_CLOSE)

VOCAB: dict[str, int] = {sym: 4 + i for i, sym in enumerate(_SYMBOLS)}
ID_TO_SYMBOL: dict[int, str] = {i: s for s, i in VOCAB.items()}
ANSWER_OPEN_ID = VOCAB[ANSWER_OPEN]
ANSWER_CLOSE_ID = VOCAB[ANSWER_CLOSE]

TRAIN_FILE = "train.jsonl"
EVAL_FILE = "eval.jsonl"
TASK_FILE = "task.json"


class DatasetError(Exception):
    """Dataset files are missing, malformed, or impossible to build."""


def vocab_size() -> int:
    return 4 + len(_SYMBOLS)


def tokenize(text: str) -> list[str]:
    """Split a record string into vocabulary symbols (markers are multi-char)."""
    out = []
    i = 0
    while i < len(text):
        if text.startswith(ANSWER_OPEN, i):
            out.append(ANSWER_OPEN)
            i += len(ANSWER_OPEN)
        elif text.startswith(ANSWER_CLOSE, i):
            out.append(ANSWER_CLOSE)
            i += len(ANSWER_CLOSE)
        else:
            ch = text[i]
            if ch not in VOCAB:
                raise DatasetError(f"unknown symbol {ch!r} in record text")
            out.append(ch)
            i += 1
    return out


def detokenize(symbols) -> str:
    return "".join(symbols)


@dataclass(frozen=True)
class TaskSpec:
    modulus: int = 13
    chain_length: int = 4
    operator_set: tuple[str, ...] = ("add", "sub", "mul")

    def __post_init__(self) -> None:
        if self.modulus < 2:
            raise ValueError("modulus must be >= 2")
        if self.chain_length < 1:
            raise ValueError("chain_length must be >= 1")
        if not self.operator_set or any(o not in OP_SYMBOLS for o in self.operator_set):
            raise ValueError(f"operator_set must be a nonempty subset of {sorted(OP_SYMBOLS)}")

    def to_dict(self) -> dict:
        return {"modulus": self.modulus, "chain_length": self.chain_length,
                "operator_set": list(self.operator_set)}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(modulus=d["modulus"], chain_length=d["chain_length"],
                   operator_set=tuple(d["operator_set"]))


@dataclass(frozen=True)
class NoiseSpec:
    spurious_rate: float = 0.0
    modes: tuple[str, ...] = ("distractor_step", "corrupted_value")
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.spurious_rate <= 0.9:
            raise ValueError("spurious_rate must lie in [0, 0.9]")
        valid = {"distractor_step", "corrupted_value"}
        if self.spurious_rate > 0 and (not self.modes or any(m not in valid for m in self.modes)):
            raise ValueError(f"modes must be a nonempty subset of {sorted(valid)}")

    def to_dict(self) -> dict:
        return {"spurious_rate": self.spurious_rate, "modes": list(self.modes),
                "seed": self.seed}


@dataclass
class CotExample:
    prompt: tuple[str, ...]
    rationale: tuple[str, ...]
    answer: tuple[str, ...]          # includes the markers
    spurious_positions: tuple[int, ...] = ()

    def prompt_key(self) -> str:
        return detokenize(self.prompt)


def _apply(op: str, a: int, b: int, modulus: int) -> int:
    if op == "add":
        return (a + b) % modulus
    if op == "sub":
        return (a - b) % modulus
    if op == "mul":
        return (a * b) % modulus
    raise ValueError(f"unknown operator {op!r}")


def _digits(value: int) -> list[str]:
    return list(str(value))


def generate_example(spec: TaskSpec, rng: np.random.Generator) -> CotExample:
    """One arithmetically correct chain problem with per-step rationale."""
    operands = [int(v) for v in rng.integers(0, spec.modulus, size=spec.chain_length + 1)]
    ops = [spec.operator_set[int(i)]
           for i in rng.integers(0, len(spec.operator_set), size=spec.chain_length)]
    prompt: list[str] = _digits(operands[0])
    for op, val in zip(ops, operands[1:]):
        prompt.append(OP_SYMBOLS[op])
        prompt.extend(_digits(val))
    prompt += ["=", "?"]

    rationale: list[str] = []
    cur = operands[0]
    for op, val in zip(ops, operands[1:]):
        nxt = _apply(op, cur, val, spec.modulus)
        rationale.extend(_digits(cur))
        rationale.append(OP_SYMBOLS[op])
        rationale.extend(_digits(val))
        rationale.append("=")
        rationale.extend(_digits(nxt))
        rationale.append(";")
        cur = nxt
    answer = [ANSWER_OPEN] + _digits(cur) + [ANSWER_CLOSE]
    return CotExample(tuple(prompt), tuple(rationale), tuple(answer))


# ---- spurious injection -----------------------------------------------------


def _digit_length_options(modulus: int) -> list[int]:
    return sorted({len(str(v)) for v in range(modulus)})


def _piece_lengths(modulus: int) -> list[int]:
    opts = _digit_length_options(modulus)
    return sorted({dx + dy + dz + 3 for dx in opts for dy in opts for dz in opts})


def _compose_lengths(target: int, pieces: list[int]) -> list[int]:
    """Piece lengths summing as close to target as possible (unbounded knapsack)."""
    if target <= 0:
        return []
    limit = target + max(pieces)
    reachable = [False] * (limit + 1)
    parent = [0] * (limit + 1)
    reachable[0] = True
    for s in range(1, limit + 1):
        for p in pieces:
            if p <= s and reachable[s - p]:
                reachable[s] = True
                parent[s] = p
                break
    best = min((s for s in range(limit + 1) if reachable[s]),
               key=lambda s: (abs(s - target), s))
    out = []
    while best > 0:
        out.append(parent[best])
        best -= parent[best]
    return out


def _sample_value(rng: np.random.Generator, n_digits: int, modulus: int) -> int:
    lo = 0 if n_digits == 1 else 10 ** (n_digits - 1)
    hi = min(modulus, 10 ** n_digits)
    if lo >= hi:
        raise DatasetError(f"no {n_digits}-digit values below modulus {modulus}")
    return int(rng.integers(lo, hi))


def _equation_tokens(x: int, op: str, z: int, y: int) -> list[str]:
    return _digits(x) + [OP_SYMBOLS[op]] + _digits(y) + ["="] + _digits(z) + [";"]


def _make_piece(length: int, mode: str, spec: TaskSpec,
                rng: np.random.Generator) -> list[str]:
    """A well-formed spurious equation of exactly `length` tokens."""
    opts = _digit_length_options(spec.modulus)
    triples = [(dx, dy, dz) for dx in opts for dy in opts for dz in opts
               if dx + dy + dz + 3 == length]
    if not triples:
        raise DatasetError(f"no spurious piece of length {length} exists")
    dx, dy, dz = triples[int(rng.integers(0, len(triples)))]
    for _ in range(2000):
        op = spec.operator_set[int(rng.integers(0, len(spec.operator_set)))]
        x = _sample_value(rng, dx, spec.modulus)
        y = _sample_value(rng, dy, spec.modulus)
        true_z = _apply(op, x, y, spec.modulus)
        if mode == "distractor_step":
            if len(str(true_z)) == dz:
                return _equation_tokens(x, op, true_z, y)
        else:  # corrupted_value: right shape, wrong result
            wrong = _sample_value(rng, dz, spec.modulus)
            if wrong != true_z:
                return _equation_tokens(x, op, wrong, y)
    raise DatasetError("could not sample a spurious equation with the requested shape")


def _parse_steps(rationale: tuple[str, ...]) -> list[list[str]]:
    steps, cur = [], []
    for sym in rationale:
        cur.append(sym)
        if sym == ";":
            steps.append(cur)
            cur = []
    if cur:
        raise DatasetError("rationale does not end with a step terminator")
    return steps


def inject_spurious(example: CotExample, noise: NoiseSpec, spec: TaskSpec,
                    rng: np.random.Generator) -> CotExample:
    """Insert labeled distractor equations; the true chain and answer are untouched.

    The injected token count targets spurious_rate as a fraction of the final
    rationale; whole well-formed equations are the injection unit, so the
    count lands on the closest achievable composition (within one token for
    ordinary rates and rationale lengths).
    """
    if noise.spurious_rate == 0.0:
        return CotExample(example.prompt, example.rationale, example.answer, ())
    n_clean = len(example.rationale)
    target = int(round(noise.spurious_rate / (1.0 - noise.spurious_rate) * n_clean))
    lengths = _compose_lengths(target, _piece_lengths(spec.modulus))
    steps = _parse_steps(example.rationale)
    n_slots = len(steps) + 1  # before each step and after the last

    inserts: dict[int, list[list[str]]] = {}
    for length in lengths:
        mode = noise.modes[int(rng.integers(0, len(noise.modes)))]
        piece = _make_piece(length, mode, spec, rng)
        slot = int(rng.integers(0, n_slots))
        inserts.setdefault(slot, []).append(piece)

    out: list[str] = []
    spurious: list[int] = []
    for slot in range(n_slots):
        for piece in inserts.get(slot, []):
            spurious.extend(range(len(out), len(out) + len(piece)))
            out.extend(piece)
        if slot < len(steps):
            out.extend(steps[slot])
    return CotExample(example.prompt, tuple(out), example.answer, tuple(spurious))


# ---- verification ----------------------------------------------------------


def _parse_number(symbols: list[str], i: int) -> tuple[int, int]:
    j = i
    while j < len(symbols) and symbols[j].isdigit():
        j += 1
    if j == i:
        raise DatasetError(f"expected digits at position {i}")
    return int("".join(symbols[i:j])), j


_SYMBOL_TO_OP = {v: k for k, v in OP_SYMBOLS.items()}


def _parse_prompt(prompt: tuple[str, ...]) -> tuple[list[int], list[str]]:
    symbols = list(prompt)
    operands, ops = [], []
    val, i = _parse_number(symbols, 0)
    operands.append(val)
    while i < len(symbols) and symbols[i] in _SYMBOL_TO_OP:
        ops.append(_SYMBOL_TO_OP[symbols[i]])
        val, i = _parse_number(symbols, i + 1)
        operands.append(val)
    if symbols[i:] != ["=", "?"]:
        raise DatasetError("malformed prompt tail")
    return operands, ops


def verify_example(example: CotExample, spec: TaskSpec) -> bool:
    """Recompute the chain from the prompt; check the clean rationale and answer.

    Spurious-labeled tokens are deleted first, so a correctly labeled noisy
    example verifies exactly like its clean original.
    """
    operands, ops = _parse_prompt(example.prompt)
    spurious = set(example.spurious_positions)
    clean = tuple(s for i, s in enumerate(example.rationale) if i not in spurious)
    steps = _parse_steps(clean)
    if len(steps) != len(ops):
        return False
    cur = operands[0]
    for step, op, operand in zip(steps, ops, operands[1:]):
        try:
            lhs, i = _parse_number(step, 0)
            if step[i] != OP_SYMBOLS[op]:
                return False
            rhs, i = _parse_number(step, i + 1)
            if step[i] != "=":
                return False
            res, i = _parse_number(step, i + 1)
            if step[i:] != [";"]:
                return False
        except DatasetError:
            return False
        if lhs != cur or rhs != operand or res != _apply(op, cur, operand, spec.modulus):
            return False
        cur = res
    expect = [ANSWER_OPEN] + _digits(cur) + [ANSWER_CLOSE]
    return list(example.answer) == expect


# ---- encoding ---------------------------------------------------------------


@dataclass
class EncodedRow:
    token_ids: np.ndarray
    loss_mask: np.ndarray
    answer_mask: np.ndarray
    spurious_mask: np.ndarray

    @property
    def length(self) -> int:
        return len(self.token_ids)

    @property
    def prompt_length(self) -> int:
        """Tokens before the first supervised position (bos + prompt + sep)."""
        return int(np.flatnonzero(self.loss_mask)[0])


def encode_example(example: CotExample, context_len: int | None = None) -> EncodedRow:
    """bos + prompt + sep + rationale + answer + eos, with supervision masks.

    Prompt tokens (and the separator) are excluded from the loss; rationale,
    answer span, and the closing eos are supervised.
    """
    if len(example.rationale) == 0:
        raise DatasetError("example has an empty rationale; nothing to supervise")
    ids = [BOS_ID] + [VOCAB[s] for s in example.prompt] + [SEP_ID]
    base = len(ids)
    ids += [VOCAB[s] for s in example.rationale]
    ans_start = len(ids)
    ids += [VOCAB[s] for s in example.answer]
    ids.append(EOS_ID)
    n = len(ids)
    if context_len is not None and n > context_len:
        raise DatasetError(f"encoded length {n} exceeds context_len {context_len}")
    loss = np.zeros(n, dtype=bool)
    loss[base:] = True
    answer = np.zeros(n, dtype=bool)
    answer[ans_start + 1:ans_start + len(example.answer) - 1] = True
    spurious = np.zeros(n, dtype=bool)
    for p in example.spurious_positions:
        spurious[base + p] = True
    return EncodedRow(np.array(ids, dtype=np.int64), loss, answer, spurious)


def decode_row(row: EncodedRow) -> list[str]:
    """Symbols of a row, dropping the reserved framing ids."""
    out = []
    for i in row.token_ids:
        i = int(i)
        if i in (PAD_ID, BOS_ID, SEP_ID, EOS_ID):
            continue
        out.append(ID_TO_SYMBOL[i])
    return out


def to_batch(rows: list[EncodedRow], pad_to: int | None = None) -> SequenceBatch:
    if not rows:
        raise ValueError("cannot build a batch from zero rows")
    t = pad_to if pad_to is not None else max(r.length for r in rows)
    if any(r.length > t for r in rows):
        raise ValueError("row longer than the padded batch width")
    b = len(rows)
    ids = np.full((b, t), PAD_ID, dtype=np.int64)
    loss = np.zeros((b, t), dtype=bool)
    answer = np.zeros((b, t), dtype=bool)
    spurious = np.zeros((b, t), dtype=bool)
    lengths = np.zeros(b, dtype=np.int64)
    for i, r in enumerate(rows):
        n = r.length
        ids[i, :n] = r.token_ids
        loss[i, :n] = r.loss_mask
        answer[i, :n] = r.answer_mask
        spurious[i, :n] = r.spurious_mask
        lengths[i] = n
    batch = SequenceBatch(ids, loss, answer, spurious, lengths)
    batch.require_supervision()
    return batch


# ---- dataset files ----------------------------------------------------------


def _record_line(example: CotExample, index: int, spec: TaskSpec) -> str:
    record = {
        "prompt": detokenize(example.prompt),
        "rationale": detokenize(example.rationale),
        "answer": detokenize(example.answer),
        "spurious_positions": list(example.spurious_positions),
        "meta": {"index": index, "modulus": spec.modulus,
                 "chain_length": spec.chain_length},
    }
    return json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"


def _example_from_record(record: dict) -> CotExample:
    return CotExample(
        prompt=tuple(tokenize(record["prompt"])),
        rationale=tuple(tokenize(record["rationale"])),
        answer=tuple(tokenize(record["answer"])),
        spurious_positions=tuple(int(p) for p in record["spurious_positions"]),
    )


def build_dataset(spec: TaskSpec, n_train: int, n_eval: int, noise: NoiseSpec,
                  seed: int, out_dir) -> tuple[Path, Path]:
    """Write disjoint train/eval JSONL files; byte-identical for identical args.

    Noise applies to the train split only; eval stays clean. Prompts never
    repeat across (or within) the splits.
    """
    if n_train < 1 or n_eval < 1:
        raise ValueError("n_train and n_eval must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    needed = n_train + n_eval
    examples: list[CotExample] = []
    seen: set[str] = set()
    attempt = 0
    max_attempts = 200 * needed + 1000
    while len(examples) < needed:
        if attempt >= max_attempts:
            raise DatasetError(
                f"could not draw {needed} distinct prompts after {attempt} attempts; "
                "the task instance space is too small")
        ex = generate_example(spec, rng_for(seed, "example", attempt))
        attempt += 1
        key = ex.prompt_key()
        if key in seen:
            continue
        seen.add(key)
        examples.append(ex)

    train = examples[:n_train]
    if noise.spurious_rate > 0:
        train = [inject_spurious(ex, noise, spec, rng_for(noise.seed, "noise", i))
                 for i, ex in enumerate(train)]
    eval_split = examples[n_train:]

    train_path = out_dir / TRAIN_FILE
    eval_path = out_dir / EVAL_FILE
    with open(train_path, "w", encoding="utf-8", newline="\n") as f:
        for i, ex in enumerate(train):
            f.write(_record_line(ex, i, spec))
    with open(eval_path, "w", encoding="utf-8", newline="\n") as f:
        for i, ex in enumerate(eval_split):
            f.write(_record_line(ex, n_train + i, spec))
    task_meta = {"task": spec.to_dict(), "noise": noise.to_dict(),
                 "n_train": n_train, "n_eval": n_eval, "seed": seed,
                 "vocab_size": vocab_size()}
    with open(out_dir / TASK_FILE, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(task_meta, sort_keys=True, separators=(",", ":")) + "\n")
    return train_path, eval_path


def load_examples(path) -> list[CotExample]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset file: {exc}") from exc
    out = []
    for ln in lines:
        ln = ln.strip()
        if not ln:
            continue
        try:
            out.append(_example_from_record(json.loads(ln)))
        except (json.JSONDecodeError, KeyError) as exc:
            raise DatasetError(f"malformed dataset record: {exc}") from exc
    return out


def load_dataset_dir(data_dir) -> tuple[TaskSpec, list[CotExample], list[CotExample]]:
    data_dir = Path(data_dir)
    try:
        meta = json.loads((data_dir / TASK_FILE).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetError(f"cannot read {TASK_FILE}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed {TASK_FILE}: {exc}") from exc
    spec = TaskSpec.from_dict(meta["task"])
    return spec, load_examples(data_dir / TRAIN_FILE), load_examples(data_dir / EVAL_FILE)


def dataset_digest(data_dir) -> str:
    """sha256 over the dataset's canonical file bytes."""
    data_dir = Path(data_dir)
    h = hashlib.sha256()
    for name in (TASK_FILE, TRAIN_FILE, EVAL_FILE):
        p = data_dir / name
        if not p.exists():
            raise DatasetError(f"dataset dir is missing {name}")
        h.update(p.read_bytes())
    return h.hexdigest()

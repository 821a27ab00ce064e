import numpy as np
import pytest

from cotlab.model import BOS_ID, ModelConfig, SequenceBatch, TinyLM


def make_batch(rng, n_seqs, length, vocab_size, prompt_len=2, pad_tail=0):
    """Hand-built batch: a bos-led prompt, supervised tail, answer at the end."""
    t = length + pad_tail
    ids = np.zeros((n_seqs, t), dtype=np.int64)
    ids[:, :length] = rng.integers(4, vocab_size, size=(n_seqs, length))
    ids[:, 0] = BOS_ID
    loss = np.zeros((n_seqs, t), dtype=bool)
    loss[:, prompt_len:length] = True
    answer = np.zeros((n_seqs, t), dtype=bool)
    answer[:, length - 1] = True
    spurious = np.zeros((n_seqs, t), dtype=bool)
    lengths = np.full(n_seqs, length, dtype=np.int64)
    return SequenceBatch(ids, loss, answer, spurious, lengths)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=12, context_len=16, d_model=8,
                       n_layers=1, n_heads=2, init_seed=7)


@pytest.fixture
def tiny_model(tiny_cfg):
    return TinyLM(tiny_cfg)


@pytest.fixture
def tiny_params(tiny_model):
    # nudge off the symmetric init so layernorm/attention aren't at special points
    rng = np.random.default_rng(11)
    return tiny_model.init_params() + 0.05 * rng.standard_normal(tiny_model.n_params)


@pytest.fixture
def tiny_batch(tiny_cfg):
    rng = np.random.default_rng(5)
    return make_batch(rng, n_seqs=3, length=10, vocab_size=tiny_cfg.vocab_size)

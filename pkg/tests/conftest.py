import numpy as np
import pytest

from permgen.corpus import NUM_RESERVED, Paragraph
from permgen.model import Inference, ModelConfig, Seq2Seq


def tiny_model(vocab_size=40, seed=0, d_model=16, n_heads=2, layers=2, d_ff=32, dtype=np.float64,
               dropout_rate=0.0, lmax=64):
    cfg = ModelConfig(vocab_size=vocab_size, d_model=d_model, n_heads=n_heads, n_enc_layers=layers,
                      n_dec_layers=layers, d_ff=d_ff, lmax=lmax, max_source_len=32, dropout_rate=dropout_rate)
    return Seq2Seq(cfg, rng=np.random.default_rng(seed), dtype=dtype)


def random_paragraph(rng, vocab_size=40, T=None, max_len=4, src_len=3):
    T = int(rng.integers(1, 5)) if T is None else T
    words = lambda n: [int(x) for x in rng.integers(NUM_RESERVED, vocab_size, size=n)]  # noqa: E731
    return Paragraph(words(src_len), [words(int(rng.integers(1, max_len + 1))) for _ in range(T)])


class ScriptedInference(Inference):
    """Stand-in decoder whose next-token logits come from ``policy(prefix_tokens)``."""

    def __init__(self, vocab_size, policy):
        self.cfg = ModelConfig(vocab_size=vocab_size, d_model=2, n_heads=1, n_enc_layers=1,
                               n_dec_layers=1, d_ff=2)
        self.policy = policy

    def encode(self, source):
        return None

    def empty_cache(self):
        return ()

    def step(self, enc, cache, token, g, l):
        prefix = cache + (token,)
        return np.asarray(self.policy(prefix), dtype=np.float64), prefix


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)

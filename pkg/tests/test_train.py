import math

import numpy as np
import pytest
from conftest import random_paragraph, tiny_model

from permgen import tensor as tt
from permgen.corpus import Paragraph
from permgen.model import Seq2Seq
from permgen.sequence import Permutation, build_decoder_sequence, enumerate_orders
from permgen.tensor import Tensor
from permgen.train import (SGD, Adam, TrainConfig, Trainer, TrainingError, clip_gradients, evaluate_nll,
                           exact_log_likelihood, jensen_bound, learning_rate, left_to_right_nll,
                           likelihood_diagnostics, order_logprobs, permuted_nll, pi_sgd_step)


class TargetOracle(Seq2Seq):
    """Puts (almost) all probability on the next token of each sequence."""

    def forward_batch(self, sources, seqs, rng=None):
        L = max(len(s) for s in seqs)
        logits = np.full((len(seqs), L, self.cfg.vocab_size), -60.0)
        pad = np.ones((len(seqs), L), dtype=bool)
        for b, s in enumerate(seqs):
            pad[b, :len(s)] = False
            for i, tok in enumerate(s.tokens[1:]):
                logits[b, i, tok] = 60.0
        return Tensor(logits), pad


def paragraphs(n, seed=0, T=None, vocab_size=40):
    rng = np.random.default_rng(seed)
    return [random_paragraph(rng, vocab_size, T=T) for _ in range(n)]


# -- schedule and optimisers -------------------------------------------------


def test_learning_rate_schedule_shape():
    cfg = TrainConfig(lr=1.0, warmup_steps=4, max_steps=10)
    lrs = [learning_rate(cfg, s) for s in range(1, 11)]
    assert lrs[:4] == [0.25, 0.5, 0.75, 1.0]
    assert lrs[4] == 1.0 and lrs[-1] == pytest.approx(1 / 6)
    assert all(a > b for a, b in zip(lrs[4:], lrs[5:]))
    assert all(x > 0 for x in lrs)
    assert learning_rate(TrainConfig(lr=0.5, warmup_steps=0, max_steps=3), 1) == 0.5


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=10, max_steps=5)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_sgd_arithmetic():
    theta = {"w": Tensor(np.array([1.0, 2.0]))}
    SGD(TrainConfig(optimizer="sgd")).update(theta, {"w": np.array([0.5, -0.5])}, 0.1)
    np.testing.assert_allclose(theta["w"].data, [0.95, 2.05], rtol=0, atol=1e-15)


def test_zero_gradient_leaves_parameters_unchanged():
    for opt in (SGD(TrainConfig(optimizer="sgd")), Adam(TrainConfig(weight_decay=0.0))):
        theta = {"w": Tensor(np.array([[1.0, -2.0]])), "b": Tensor(np.array([3.0]))}
        opt.update(theta, {"w": np.zeros((1, 2)), "b": np.zeros(1)}, 0.1)
        np.testing.assert_array_equal(theta["w"].data, [[1.0, -2.0]])
        np.testing.assert_array_equal(theta["b"].data, [3.0])


def test_adam_first_step_is_signed_lr_and_decay_skips_vectors():
    theta = {"w": Tensor(np.array([[1.0, -1.0]])), "b": Tensor(np.array([1.0]))}
    Adam(TrainConfig(weight_decay=0.1, eps=0.0)).update(theta, {"w": np.array([[2.0, -3.0]]), "b": np.array([4.0])},
                                                         0.01)
    np.testing.assert_allclose(theta["w"].data, [[1.0 - 0.01 * (1 + 0.1), -1.0 + 0.01 * (1 + 0.1)]], rtol=1e-12)
    np.testing.assert_allclose(theta["b"].data, [0.99], rtol=1e-12)


def test_clip_gradients():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(grads, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8], rtol=1e-10)
    small = {"a": np.array([0.1])}
    clip_gradients(small, 1.0)
    assert small["a"][0] == 0.1


# -- objective ---------------------------------------------------------------


def test_forced_model_has_zero_loss():
    model = TargetOracle(tiny_model().cfg)
    ps = paragraphs(3)
    orders = [Permutation.identity(p.T) for p in ps]
    assert permuted_nll(model, ps, orders).item() == pytest.approx(0.0, abs=1e-40)


def test_uniform_model_has_log_v_loss():
    model = tiny_model()
    model.params["tok_emb"].data[:] = 0.0
    ps = paragraphs(4)
    loss = permuted_nll(model, ps, [Permutation.identity(p.T) for p in ps]).item()
    assert loss == pytest.approx(math.log(model.cfg.vocab_size), rel=1e-14)


def test_permuted_nll_matches_per_sequence_logprob_path():
    model = tiny_model(seed=1)
    rng = np.random.default_rng(2)
    ps = paragraphs(5, seed=3)
    orders = [Permutation(tuple(rng.permutation(p.T) + 1)) for p in ps]
    loss = permuted_nll(model, ps, orders).item()
    ref = []
    for p, o in zip(ps, orders):
        seq = build_decoder_sequence(p, o)
        lp = model.sequence_logprob(model.encode(p.source_tokens), seq)
        ref.append(-sum(lp) / len(lp))
    assert loss == pytest.approx(float(np.mean(ref)), abs=1e-9)


def test_identity_order_equals_left_to_right_reference():
    model = tiny_model(seed=4)
    for p in paragraphs(5, seed=5):
        assert permuted_nll(model, [p], [Permutation.identity(p.T)]).item() == pytest.approx(
            left_to_right_nll(model, p), abs=1e-9)


def test_order_logprobs_match_sequence_logprob():
    model = tiny_model(seed=6)
    (p,) = paragraphs(1, seed=7, T=3)
    terms = order_logprobs(model, p)
    for o, term in zip(enumerate_orders(3), terms):
        seq = build_decoder_sequence(p, o)
        assert term == pytest.approx(sum(model.sequence_logprob(model.encode(p.source_tokens), seq)), abs=1e-9)


# -- exact likelihood and the Jensen bound -----------------------------------


def test_single_sentence_bound_equals_exact_equals_sequence_logprob():
    model = tiny_model(seed=8)
    (p,) = paragraphs(1, seed=9, T=1)
    seq = build_decoder_sequence(p, [1])
    lp = sum(model.sequence_logprob(model.encode(p.source_tokens), seq))
    assert exact_log_likelihood(model, p) == pytest.approx(lp, abs=1e-12)
    assert jensen_bound(model, p) == pytest.approx(lp, abs=1e-12)


def test_degenerate_equal_terms_model():
    model = tiny_model()
    model.params["tok_emb"].data[:] = 0.0
    (p,) = paragraphs(1, seed=10, T=3)
    terms = order_logprobs(model, p)
    np.testing.assert_allclose(terms, terms[0], rtol=1e-14)
    exact = exact_log_likelihood(model, p)
    assert exact == pytest.approx(terms[0] + math.log(6), abs=1e-10)
    assert jensen_bound(model, p) == pytest.approx(exact, abs=1e-10)


@pytest.mark.parametrize("T", [2, 3, 4])
def test_jensen_bound_never_exceeds_exact(T):
    for seed in range(5):
        model = tiny_model(seed=100 + seed)
        (p,) = paragraphs(1, seed=seed, T=T)
        d = likelihood_diagnostics(model, p)
        assert d["jensen_bound"] <= d["exact"] + 1e-9
        assert d["gap"] >= -1e-9
        assert d["exact_mean_weighted"] == pytest.approx(d["exact"] - math.log(math.factorial(T)))
        assert len(d["per_order"]) == math.factorial(T)


def test_enumeration_budget():
    (p,) = paragraphs(1, T=6)
    with pytest.raises(ValueError, match="budget"):
        exact_log_likelihood(tiny_model(), p)


# -- gradients of the full loss ----------------------------------------------


def test_loss_gradient_spot_check():
    model = tiny_model(seed=11, layers=1)
    ps = paragraphs(2, seed=12, T=2)
    orders = [Permutation((2, 1)), Permutation((1, 2))]
    model.zero_grad()
    with tt.Tape() as tape:
        loss = permuted_nll(model, ps, orders)
    tape.backward(loss)
    rng = np.random.default_rng(0)
    h = 1e-5
    for name in ("tok_emb", "dec_global_emb", "dec_local_emb", "enc.0.self_attn.wq", "dec.0.cross_attn.wv",
                 "dec.0.ffn.b1", "dec.ln_f.g"):
        p = model.params[name]
        for _ in range(3):
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            old = p.data[idx]
            p.data[idx] = old + h
            up = permuted_nll(model, ps, orders).item()
            p.data[idx] = old - h
            down = permuted_nll(model, ps, orders).item()
            p.data[idx] = old
            num = (up - down) / (2 * h)
            assert abs(num - p.grad[idx]) <= 1e-3 * max(abs(num), abs(p.grad[idx])) + 1e-8, name


# -- steps and the trainer ---------------------------------------------------


def test_pi_sgd_step_reduces_loss_on_fixed_batch():
    model = tiny_model(seed=13, dtype=np.float64)
    ps = paragraphs(4, seed=14)
    cfg = TrainConfig(lr=1e-2, warmup_steps=0, max_steps=50, batch_size=4)
    opt = Adam(cfg)
    orders = [Permutation.identity(p.T) for p in ps]
    before = permuted_nll(model, ps, orders).item()
    for step in range(1, 21):
        m = pi_sgd_step(model, opt, ps, np.random.default_rng(step), cfg, step, orders)
        assert m.lr == learning_rate(cfg, step) and m.grad_norm > 0
    assert permuted_nll(model, ps, orders).item() < 0.8 * before


def test_non_finite_step_reports_batch():
    model = tiny_model()
    model.params["dec.ln_f.g"].data[:] = 1e300
    model.params["tok_emb"].data *= 1e12
    p = Paragraph([30, 31], [[25, 26]], line=7)
    cfg = TrainConfig(warmup_steps=0, max_steps=2)
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="line=7") as info:
        pi_sgd_step(model, Adam(cfg), [p], np.random.default_rng(0), cfg, 1)
    assert "order=[1]" in str(info.value)


def test_trainer_draws_one_order_per_example_and_is_deterministic():
    data = paragraphs(6, seed=15)
    cfg = TrainConfig(batch_size=3, warmup_steps=2, max_steps=4, seed=5)
    runs = []
    for _ in range(2):
        trainer = Trainer(tiny_model(seed=0, dtype=np.float32), data, cfg)
        metrics = trainer.run()
        runs.append((trainer, metrics))
    (t1, m1), (t2, m2) = runs
    assert [m.loss for m in m1] == [m.loss for m in m2]
    assert [m.orders for m in m1] == [m.orders for m in m2]
    for name in t1.model.params:
        np.testing.assert_array_equal(t1.model.params[name].data, t2.model.params[name].data)
    assert all(len(o) == 3 for o in (m.orders for m in m1))
    assert t1.step_count == 4


def test_evaluate_nll_does_not_touch_the_training_stream():
    data = paragraphs(4, seed=16)
    cfg = TrainConfig(batch_size=2, warmup_steps=0, max_steps=3)
    trainer = Trainer(tiny_model(), data, cfg)
    state = trainer.rng.bit_generator.state
    a = evaluate_nll(trainer.model, data, seed=1)
    assert trainer.rng.bit_generator.state == state
    assert a == evaluate_nll(trainer.model, data, seed=1)


def test_trainer_rejects_empty_data():
    with pytest.raises(ValueError):
        Trainer(tiny_model(), [], TrainConfig())

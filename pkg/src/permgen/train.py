"""Permutation-sampled training and exact-likelihood diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .corpus import Paragraph
from .model import Inference, Seq2Seq
from .sequence import (DecoderSequence, Permutation, build_decoder_sequence, enumerate_orders, num_orders,
                       sample_order)

log = logging.getLogger(__name__)

MAX_ENUMERATION_T = 5


class TrainingError(RuntimeError):
    """Non-finite loss or gradients; the message carries the offending batch."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 3e-3
    warmup_steps: int = 200
    max_steps: int = 5000
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("batch_size and max_steps must be positive")
        if not 0 <= self.warmup_steps <= self.max_steps:
            raise ValueError(f"warmup_steps={self.warmup_steps} must lie in [0, max_steps={self.max_steps}]")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``cfg.lr`` then linear decay; positive for steps 1..max_steps."""
    if step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    remaining = max(cfg.max_steps - cfg.warmup_steps, 1)
    return cfg.lr * max(cfg.max_steps - step + 1, 1) / remaining


# ---------------------------------------------------------------------------
# objective


def permuted_nll(model: Seq2Seq, batch: Sequence[Paragraph], orders: Sequence[Permutation | Sequence[int]],
                 rng: np.random.Generator | None = None) -> tt.Tensor:
    """Batch mean of the per-example token-mean NLL of the permuted sequences.

    Every position after ``<BOS>`` is a target, special tokens included.
    """
    if len(batch) != len(orders):
        raise ValueError(f"{len(batch)} paragraphs but {len(orders)} orders")
    seqs = [build_decoder_sequence(p, o) for p, o in zip(batch, orders)]
    return sequences_nll(model, [p.source_tokens for p in batch], seqs, rng)


def sequences_nll(model: Seq2Seq, sources, seqs: Sequence[DecoderSequence], rng=None) -> tt.Tensor:
    logits, pad = model.forward_batch(sources, seqs, rng)
    B, L, V = logits.shape
    targets = np.zeros((B, L), dtype=np.int64)
    weights = np.zeros((B, L))
    for b, s in enumerate(seqs):
        n = len(s) - 1
        targets[b, :n] = s.tokens[1:]
        weights[b, :n] = 1.0 / (n * B)
    return tt.cross_entropy(tt.reshape(logits, (B * L, V)), targets.reshape(-1), weights=weights.reshape(-1))


def token_nll(model: Seq2Seq, p: Paragraph, order) -> float:
    """Per-token NLL of one paragraph under one order (eval mode)."""
    return permuted_nll(model, [p], [order]).item()


def order_logprobs(model: Seq2Seq, p: Paragraph, orders: Sequence[Permutation] | None = None) -> np.ndarray:
    """Total sequence log-probability for each order (all of ``Z_T`` by default)."""
    orders = enumerate_orders(p.T) if orders is None else orders
    seqs = [build_decoder_sequence(p, o) for o in orders]
    logits, _ = model.forward_batch([p.source_tokens] * len(seqs), seqs)
    logp = tt.log_softmax_array(logits.data.astype(np.float64), axis=-1)
    out = np.empty(len(seqs))
    for b, s in enumerate(seqs):
        idx = np.arange(len(s) - 1)
        out[b] = logp[b, idx, np.asarray(s.tokens[1:])].sum()
    return out


def _check_budget(p: Paragraph) -> None:
    if p.T > MAX_ENUMERATION_T:
        raise ValueError(f"T={p.T} needs {num_orders(p.T)} orders; enumeration budget is "
                         f"T <= {MAX_ENUMERATION_T} ({num_orders(MAX_ENUMERATION_T)} orders)")


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def exact_log_likelihood(model: Seq2Seq, p: Paragraph) -> float:
    """``log sum_pi p(Y | X, pi)``, summed over every order without 1/T! weighting."""
    _check_budget(p)
    return _logsumexp(order_logprobs(model, p))


def jensen_bound(model: Seq2Seq, p: Paragraph) -> float:
    """``log T! + mean_pi log p(Y | X, pi)``; never exceeds :func:`exact_log_likelihood`."""
    _check_budget(p)
    terms = order_logprobs(model, p)
    return math.log(len(terms)) + float(terms.mean())


def likelihood_diagnostics(model: Seq2Seq, p: Paragraph) -> dict:
    _check_budget(p)
    terms = order_logprobs(model, p)
    exact = _logsumexp(terms)
    log_n = math.log(len(terms))
    bound = log_n + float(terms.mean())
    return {
        "T": p.T,
        "exact": exact,
        "exact_mean_weighted": exact - log_n,
        "jensen_bound": bound,
        "gap": exact - bound,
        "per_order": terms.tolist(),
    }


def left_to_right_nll(model: Seq2Seq, p: Paragraph) -> float:
    """Token-mean NLL of the natural sentence order, accumulated sentence by sentence.

    Uses the cached numpy decoder so it shares no code with :func:`permuted_nll`.
    """
    inf = Inference(model)
    enc = inf.encode(p.source_tokens)
    seq = build_decoder_sequence(p, Permutation.identity(p.T))
    cache = inf.empty_cache()
    total, count = 0.0, 0
    logits, cache = inf.step(enc, cache, seq.tokens[0], seq.global_pos[0], seq.local_pos[0])
    for (t, start, end) in seq.segment_spans + [(None, len(seq) - 1, len(seq))]:
        for i in range(start, end):
            lp = tt.log_softmax_array(logits.astype(np.float64))
            total -= lp[seq.tokens[i]]
            count += 1
            logits, cache = inf.step(enc, cache, seq.tokens[i], seq.global_pos[i], seq.local_pos[i])
    return total / count


# ---------------------------------------------------------------------------
# optimisers


class SGD:
    kind = "sgd"

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0

    def update(self, params: dict[str, tt.Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        for name, p in params.items():
            g = grads.get(name)
            if g is not None:
                p.data = p.data - p.dtype.type(lr) * g.astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = t


class Adam:
    """Adam with decoupled weight decay on matrices."""

    kind = "adam"

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, params: dict[str, tt.Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            dt = p.dtype.type
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = dt(cfg.beta1) * m + dt(1 - cfg.beta1) * g
            v = dt(cfg.beta2) * v + dt(1 - cfg.beta2) * g * g
            self.m[name], self.v[name] = m, v
            step = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(cfg.eps))
            if cfg.weight_decay and p.data.ndim >= 2:
                step = step + dt(cfg.weight_decay) * p.data
            p.data = p.data - dt(lr) * step

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = t
        self.m = {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v for k, v in arrays.items() if k.startswith("adam.v.")}


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg) if cfg.optimizer == "adam" else SGD(cfg)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(factor)
    return norm


# ---------------------------------------------------------------------------
# pi-SGD


@dataclass
class StepMetrics:
    step: int
    loss: float
    lr: float
    grad_norm: float
    orders: list[list[int]] = field(default_factory=list)


def pi_sgd_step(model: Seq2Seq, optimizer, batch: Sequence[Paragraph], rng: np.random.Generator,
                cfg: TrainConfig, step: int, orders: Sequence[Permutation] | None = None) -> StepMetrics:
    """One update: sample an order per example, descend the permuted NLL."""
    if orders is None:
        orders = [sample_order(p.T, rng) for p in batch]
    model.zero_grad()
    try:
        with tt.Tape() as tape:
            loss = permuted_nll(model, batch, orders, rng)
        tape.backward(loss)
        grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise tt.NonFiniteError(f"non-finite gradient for {name}")
    except tt.NonFiniteError as exc:
        detail = "; ".join(f"line={p.line} source={p.source_tokens} order={list(o)}" for p, o in zip(batch, orders))
        raise TrainingError(f"step {step}: {exc}; batch: {detail}") from exc
    grad_norm = clip_gradients(grads, cfg.clip_norm)
    lr = learning_rate(cfg, step)
    optimizer.update(model.params, grads, lr)
    return StepMetrics(step, loss.item(), lr, grad_norm, [list(o) for o in orders])


class Trainer:
    """Owns the model, optimiser, data and the single RNG stream of a run."""

    def __init__(self, model: Seq2Seq, data: Sequence[Paragraph], cfg: TrainConfig,
                 rng: np.random.Generator | None = None, optimizer=None, step: int = 0):
        if not data:
            raise ValueError("no training data")
        self.model = model
        self.data = list(data)
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.optimizer = optimizer if optimizer is not None else make_optimizer(cfg)
        self.step_count = step

    def draw_batch(self) -> tuple[list[Paragraph], list[Permutation]]:
        idx = self.rng.integers(0, len(self.data), size=self.cfg.batch_size)
        batch = [self.data[i] for i in idx]
        return batch, [sample_order(p.T, self.rng) for p in batch]

    def step(self) -> StepMetrics:
        batch, orders = self.draw_batch()
        self.step_count += 1
        return pi_sgd_step(self.model, self.optimizer, batch, self.rng, self.cfg, self.step_count, orders)

    def run(self, until: int | None = None, callback: Callable[[StepMetrics], None] | None = None) -> list[StepMetrics]:
        until = self.cfg.max_steps if until is None else min(until, self.cfg.max_steps)
        out = []
        while self.step_count < until:
            m = self.step()
            out.append(m)
            if callback is not None:
                callback(m)
        return out


def evaluate_nll(model: Seq2Seq, data: Sequence[Paragraph], seed: int = 0, batch_size: int = 32) -> float:
    """Mean permuted NLL with orders drawn from a fixed, private RNG."""
    rng = np.random.default_rng(seed)
    total, n = 0.0, 0
    for i in range(0, len(data), batch_size):
        chunk = data[i:i + batch_size]
        orders = [sample_order(p.T, rng) for p in chunk]
        total += permuted_nll(model, chunk, orders).item() * len(chunk)
        n += len(chunk)
    return total / n


def snapshot(trainer: Trainer, vocab_hash: str, run_config: dict | None = None,
             config_hash: str | None = None):
    """Checkpoint holding everything needed to resume ``trainer`` bit-exactly."""
    from .checkpoint import Checkpoint

    return Checkpoint.from_model(
        trainer.model, vocab_hash,
        step=trainer.step_count,
        optimizer_kind=trainer.optimizer.kind,
        optimizer_step=trainer.optimizer.t,
        optimizer_state={k: v.astype(np.float32) for k, v in trainer.optimizer.state_arrays().items()},
        rng_state=trainer.rng.bit_generator.state,
        run_config=run_config,
        config_hash=config_hash,
    )


def resume(ckpt, data: Sequence[Paragraph], cfg: TrainConfig) -> Trainer:
    if ckpt.optimizer_kind != cfg.optimizer:
        raise ValueError(f"checkpoint optimizer {ckpt.optimizer_kind!r} differs from config {cfg.optimizer!r}")
    model = ckpt.model()
    rng = np.random.default_rng()
    if ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state
    optimizer = make_optimizer(cfg)
    optimizer.load_state(ckpt.optimizer_step, {k: v.copy() for k, v in ckpt.optimizer_state.items()})
    return Trainer(model, data, cfg, rng=rng, optimizer=optimizer, step=ckpt.step)

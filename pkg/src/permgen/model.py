"""Encoder-decoder transformer with hierarchical decoder positions.

Two forward implementations share one parameter registry:

* the taped path (:meth:`Seq2Seq.encode_batch` / :meth:`Seq2Seq.decode_batch`)
  built from :mod:`permgen.tensor` ops, used for training and gradients;
* :class:`Inference`, a plain-numpy path with a key/value cache for
  token-by-token decoding.

Both are pre-LayerNorm transformers with ReLU feed-forward blocks and an
output projection tied to the token embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as tt
from .corpus import LMAX, PAD_ID, TMAX
from .sequence import DecoderSequence
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 256
    tmax: int = TMAX
    lmax: int = LMAX
    max_source_len: int = 512
    dropout_rate: float = 0.1

    def __post_init__(self):
        for key in ("vocab_size", "d_model", "n_heads", "d_ff", "tmax", "lmax", "max_source_len"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        if self.n_enc_layers < 1 or self.n_dec_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)


def _layer_names(prefix: str, cross: bool) -> list[str]:
    names = []
    blocks = ["self_attn", "cross_attn"] if cross else ["self_attn"]
    for i, block in enumerate(blocks, 1):
        names += [f"{prefix}.ln{i}.g", f"{prefix}.ln{i}.b"]
        names += [f"{prefix}.{block}.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
    n = len(blocks) + 1
    names += [f"{prefix}.ln{n}.g", f"{prefix}.ln{n}.b"]
    names += [f"{prefix}.ffn.{w}" for w in ("w1", "b1", "w2", "b2")]
    return names


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "enc_pos_emb": (cfg.max_source_len, d),
        "dec_global_emb": (cfg.tmax + 2, d),
        "dec_local_emb": (cfg.lmax + 1, d),
    }
    for i in range(cfg.n_enc_layers):
        for name in _layer_names(f"enc.{i}", cross=False):
            shapes[name] = _shape_for(name, d, f)
    shapes["enc.ln_f.g"] = (d,)
    shapes["enc.ln_f.b"] = (d,)
    for i in range(cfg.n_dec_layers):
        for name in _layer_names(f"dec.{i}", cross=True):
            shapes[name] = _shape_for(name, d, f)
    shapes["dec.ln_f.g"] = (d,)
    shapes["dec.ln_f.b"] = (d,)
    return shapes


def _shape_for(name: str, d: int, f: int) -> tuple[int, ...]:
    leaf = name.rsplit(".", 1)[1]
    if leaf in ("wq", "wk", "wv", "wo"):
        return (d, d)
    if leaf == "w1":
        return (d, f)
    if leaf == "w2":
        return (f, d)
    if leaf == "b1":
        return (f,)
    return (d,)


def init_parameters(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            arr = np.zeros(shape)
        elif name.endswith("_emb"):
            arr = rng.normal(0.0, 0.02, shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


def _pad(rows: Sequence[Sequence[int]], fill: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=np.int64)
    pad = np.ones((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
        pad[i, : len(r)] = False
    return out, pad


class Seq2Seq:
    """Parameter registry plus the taped forward pass."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.cfg = cfg
        if params is None:
            params = init_parameters(cfg, rng if rng is not None else np.random.default_rng(0), dtype)
        expected = parameter_shapes(cfg)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise KeyError(f"parameter registry mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params = params

    # -- registry -----------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "Seq2Seq":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return Seq2Seq(self.cfg, params)

    def copy(self) -> "Seq2Seq":
        return self.astype(self.dtype)

    # -- building blocks ----------------------------------------------------

    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        return tt.add(tt.matmul(x, self.params[w]), self.params[b])

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return tt.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray) -> Tensor:
        B, Lq, d = xq.shape
        Lk = xkv.shape[1]
        H = self.cfg.n_heads
        dh = d // H

        def heads(x: Tensor, L: int) -> Tensor:
            return tt.transpose(tt.reshape(x, (B, L, H, dh)), (0, 2, 1, 3))

        q = heads(self._linear(xq, prefix + ".wq", prefix + ".bq"), Lq)
        k = heads(self._linear(xkv, prefix + ".wk", prefix + ".bk"), Lk)
        v = heads(self._linear(xkv, prefix + ".wv", prefix + ".bv"), Lk)
        scores = tt.scale(tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        weights = tt.softmax(tt.masked_fill(scores, mask), axis=-1)
        ctx = tt.reshape(tt.transpose(tt.matmul(weights, v), (0, 2, 1, 3)), (B, Lq, d))
        return self._linear(ctx, prefix + ".wo", prefix + ".bo")

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        h = tt.relu(self._linear(x, prefix + ".w1", prefix + ".b1"))
        return self._linear(h, prefix + ".w2", prefix + ".b2")

    def _drop(self, x: Tensor, rng) -> Tensor:
        return tt.dropout(x, self.cfg.dropout_rate, rng)

    # -- forward ------------------------------------------------------------

    def encode_batch(self, src: np.ndarray, src_pad: np.ndarray, rng=None) -> Tensor:
        """``src``: ``[B, n]`` ids. Returns memory ``[B, n, d]``."""
        B, n = src.shape
        if n > self.cfg.max_source_len:
            raise ValueError(f"source length {n} exceeds the maximum of {self.cfg.max_source_len}")
        x = tt.add(tt.embedding(self.params["tok_emb"], src),
                   tt.embedding(self.params["enc_pos_emb"], np.arange(n)))
        x = self._drop(x, rng)
        key_mask = src_pad[:, None, None, :]
        for i in range(self.cfg.n_enc_layers):
            p = f"enc.{i}"
            h = self._ln(x, p + ".ln1")
            x = tt.add(x, self._drop(self._attention(p + ".self_attn", h, h, key_mask), rng))
            x = tt.add(x, self._drop(self._ffn(self._ln(x, p + ".ln2"), p + ".ffn"), rng))
        return self._ln(x, "enc.ln_f")

    def decode_batch(self, memory: Tensor, src_pad: np.ndarray, tokens: np.ndarray,
                     global_pos: np.ndarray, local_pos: np.ndarray, rng=None) -> Tensor:
        """Logits ``[B, L, V]``; row ``i`` scores the token after position ``i``."""
        B, L = tokens.shape
        if global_pos.size and (global_pos.max() > self.cfg.tmax + 1 or global_pos.min() < 0):
            raise IndexError(f"global position outside [0, {self.cfg.tmax + 1}]")
        if local_pos.size and (local_pos.max() > self.cfg.lmax or local_pos.min() < 0):
            raise IndexError(f"local position outside [0, {self.cfg.lmax}]")
        y = tt.add(tt.add(tt.embedding(self.params["tok_emb"], tokens),
                          tt.embedding(self.params["dec_global_emb"], global_pos)),
                   tt.embedding(self.params["dec_local_emb"], local_pos))
        y = self._drop(y, rng)
        causal = np.triu(np.ones((L, L), dtype=bool), k=1)[None, None]
        cross_mask = src_pad[:, None, None, :]
        for i in range(self.cfg.n_dec_layers):
            p = f"dec.{i}"
            h = self._ln(y, p + ".ln1")
            y = tt.add(y, self._drop(self._attention(p + ".self_attn", h, h, causal), rng))
            h = self._ln(y, p + ".ln2")
            y = tt.add(y, self._drop(self._attention(p + ".cross_attn", h, memory, cross_mask), rng))
            y = tt.add(y, self._drop(self._ffn(self._ln(y, p + ".ln3"), p + ".ffn"), rng))
        y = self._ln(y, "dec.ln_f")
        return tt.matmul(y, tt.transpose(self.params["tok_emb"], (1, 0)))

    def forward_batch(self, sources: Sequence[Sequence[int]], seqs: Sequence[DecoderSequence], rng=None):
        """Logits for a batch of decoder sequences plus the decoder padding mask."""
        src, src_pad = _pad(sources)
        tok, dec_pad = _pad([s.tokens for s in seqs])
        gpos, _ = _pad([s.global_pos for s in seqs], fill=0)
        lpos, _ = _pad([s.local_pos for s in seqs], fill=0)
        memory = self.encode_batch(src, src_pad, rng)
        return self.decode_batch(memory, src_pad, tok, gpos, lpos, rng), dec_pad

    # -- single-example conveniences ---------------------------------------

    def encode(self, source: Sequence[int]) -> Tensor:
        if len(source) == 0:
            raise ValueError("empty source")
        src = np.asarray([list(source)], dtype=np.int64)
        return tt.reshape(self.encode_batch(src, np.zeros_like(src, dtype=bool)), (len(source), self.cfg.d_model))

    def decode_step_logits(self, memory: Tensor, seq: DecoderSequence) -> Tensor:
        """``[len(seq), V]`` logits for the prefix ``seq`` given encoded ``memory``."""
        n = memory.shape[0]
        mem = tt.reshape(memory, (1, n, self.cfg.d_model))
        row = lambda xs: np.asarray([list(xs)], dtype=np.int64)  # noqa: E731
        logits = self.decode_batch(mem, np.zeros((1, n), dtype=bool), row(seq.tokens),
                                   row(seq.global_pos), row(seq.local_pos))
        return tt.reshape(logits, (len(seq), self.cfg.vocab_size))

    def sequence_logprob(self, memory: Tensor, seq: DecoderSequence) -> list[float]:
        """``log p(token_i | tokens_<i, X)`` for every position after ``<BOS>``."""
        logits = self.decode_step_logits(memory, seq).data
        logp = tt.log_softmax_array(logits[:-1].astype(np.float64), axis=-1)
        return [float(logp[i, seq.tokens[i + 1]]) for i in range(len(seq) - 1)]


# ---------------------------------------------------------------------------
# numpy inference path


def _ln_np(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * g + b


def _softmax_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Encoded:
    memory: np.ndarray                       # [n, d]
    cross_kv: list[tuple[np.ndarray, np.ndarray]]  # per layer, each [H, n, dh]


@dataclass
class Cache:
    """Self-attention keys/values per decoder layer. Never mutated in place."""
    kv: list[tuple[np.ndarray, np.ndarray]]  # per layer, each [H, t, dh]
    length: int = 0


class Inference:
    """Read-only numpy forward pass over a model's parameters."""

    def __init__(self, model: Seq2Seq):
        self.cfg = model.cfg
        self.p = {k: v.data for k, v in model.params.items()}
        self.H = self.cfg.n_heads
        self.dh = self.cfg.d_model // self.H

    def _heads(self, x):  # [L, d] -> [H, L, dh]
        return x.reshape(x.shape[0], self.H, self.dh).transpose(1, 0, 2)

    def _proj(self, x, pre, w):
        return x @ self.p[f"{pre}.w{w}"] + self.p[f"{pre}.b{w}"]

    def _attend(self, pre, q, k, v, mask=None):
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(self.dh)
        if mask is not None:
            scores = np.where(mask, tt.NEG_FILL, scores)
        ctx = _softmax_np(scores) @ v  # [H, Lq, dh]
        ctx = ctx.transpose(1, 0, 2).reshape(q.shape[1], self.cfg.d_model)
        return ctx @ self.p[f"{pre}.wo"] + self.p[f"{pre}.bo"]

    def _ffn(self, x, pre):
        h = np.maximum(x @ self.p[f"{pre}.w1"] + self.p[f"{pre}.b1"], 0)
        return h @ self.p[f"{pre}.w2"] + self.p[f"{pre}.b2"]

    def encode(self, source: Sequence[int]) -> Encoded:
        n = len(source)
        if n == 0:
            raise ValueError("empty source")
        if n > self.cfg.max_source_len:
            raise ValueError(f"source length {n} exceeds the maximum of {self.cfg.max_source_len}")
        p = self.p
        x = p["tok_emb"][np.asarray(source)] + p["enc_pos_emb"][:n]
        for i in range(self.cfg.n_enc_layers):
            pre = f"enc.{i}"
            h = _ln_np(x, p[pre + ".ln1.g"], p[pre + ".ln1.b"])
            a = pre + ".self_attn"
            x = x + self._attend(a, self._heads(self._proj(h, a, "q")), self._heads(self._proj(h, a, "k")),
                                 self._heads(self._proj(h, a, "v")))
            x = x + self._ffn(_ln_np(x, p[pre + ".ln2.g"], p[pre + ".ln2.b"]), pre + ".ffn")
        memory = _ln_np(x, p["enc.ln_f.g"], p["enc.ln_f.b"])
        cross = []
        for i in range(self.cfg.n_dec_layers):
            a = f"dec.{i}.cross_attn"
            cross.append((self._heads(self._proj(memory, a, "k")), self._heads(self._proj(memory, a, "v"))))
        return Encoded(memory, cross)

    def empty_cache(self) -> Cache:
        z = np.zeros((self.H, 0, self.dh), dtype=self.p["tok_emb"].dtype)
        return Cache([(z, z) for _ in range(self.cfg.n_dec_layers)], 0)

    def _embed(self, tokens, gpos, lpos):
        gpos, lpos = np.asarray(gpos), np.asarray(lpos)
        if gpos.max() > self.cfg.tmax + 1 or lpos.max() > self.cfg.lmax or gpos.min() < 0 or lpos.min() < 0:
            raise IndexError("decoder position outside the embedding tables")
        p = self.p
        return p["tok_emb"][np.asarray(tokens)] + p["dec_global_emb"][gpos] + p["dec_local_emb"][lpos]

    def _decoder(self, enc: Encoded, y, cache: Cache | None):
        """Run decoder layers on new rows ``y`` ([L, d]) appended after ``cache``."""
        p = self.p
        L = y.shape[0]
        start = cache.length if cache is not None else 0
        new_kv = []
        for i in range(self.cfg.n_dec_layers):
            pre = f"dec.{i}"
            h = _ln_np(y, p[pre + ".ln1.g"], p[pre + ".ln1.b"])
            a = pre + ".self_attn"
            k, v = self._heads(self._proj(h, a, "k")), self._heads(self._proj(h, a, "v"))
            if cache is not None:
                k = np.concatenate([cache.kv[i][0], k], axis=1)
                v = np.concatenate([cache.kv[i][1], v], axis=1)
            new_kv.append((k, v))
            mask = None
            if L > 1:
                q_pos = np.arange(start, start + L)[:, None]
                mask = np.arange(k.shape[1])[None, :] > q_pos
            y = y + self._attend(a, self._heads(self._proj(h, a, "q")), k, v, mask)
            h = _ln_np(y, p[pre + ".ln2.g"], p[pre + ".ln2.b"])
            c = pre + ".cross_attn"
            ck, cv = enc.cross_kv[i]
            y = y + self._attend(c, self._heads(self._proj(h, c, "q")), ck, cv)
            y = y + self._ffn(_ln_np(y, p[pre + ".ln3.g"], p[pre + ".ln3.b"]), pre + ".ffn")
        y = _ln_np(y, p["dec.ln_f.g"], p["dec.ln_f.b"])
        return y @ p["tok_emb"].T, Cache(new_kv, start + L)

    def logits(self, enc: Encoded, tokens, gpos, lpos) -> np.ndarray:
        """Full-prefix logits ``[L, V]`` without a cache."""
        out, _ = self._decoder(enc, self._embed(tokens, gpos, lpos), None)
        return out

    def step(self, enc: Encoded, cache: Cache, token: int, g: int, l: int) -> tuple[np.ndarray, Cache]:
        """Logits ``[V]`` for the position after ``token`` and the extended cache."""
        out, cache = self._decoder(enc, self._embed([token], [g], [l]), cache)
        return out[0], cache

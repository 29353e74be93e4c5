"""Run configuration: one flat mapping of dotted keys, JSON on disk."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .corpus import LMAX, TMAX
from .decode import DecodeConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "model.d_model": 64,
    "model.n_heads": 2,
    "model.n_enc_layers": 2,
    "model.n_dec_layers": 2,
    "model.d_ff": 256,
    "model.dropout_rate": 0.1,
    "model.max_source_len": 512,
    "train.batch_size": 8,
    "train.lr": 3e-3,
    "train.warmup_steps": 200,
    "train.max_steps": 5000,
    "train.optimizer": "adam",
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.weight_decay": 0.01,
    "train.clip_norm": 1.0,
    "train.eval_every": 250,
    "train.save_every": 1000,
    "train.min_freq": 1,
    "decode.strategy": "beam",
    "decode.beam_width": 3,
    "decode.top_k": 10,
    "decode.top_p": 0.9,
    "decode.k": 3,
    "decode.max_sentence_tokens": LMAX - 2,
    "decode.max_sentences": TMAX,
    "decode.temperature": 1.0,
    "decode.uniform_first": False,
    "decode.force_order": None,
    "eval.self_bleu_mode": "pairwise",
    "paths.train": None,
    "paths.dev": None,
    "paths.out": None,
    "seed": 0,
    "threads": 1,
}


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if value is None:
        return None
    if key == "decode.force_order":
        if isinstance(value, str):
            value = [int(v) for v in value.split(",") if v.strip()]
        if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{key} must be a list of sentence indices")
        return value
    if isinstance(default, bool):
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        try:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be a number, got {value!r}") from None
    return str(value)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        self.update(values or {})

    def update(self, values: dict) -> "RunConfig":
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in values.items():
            self.values[k] = _coerce(k, v)
        return self

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls(data)

    def __getitem__(self, key: str):
        return self.values[key]

    def to_dict(self) -> dict:
        return dict(self.values)

    @property
    def hash(self) -> str:
        """Identity of the run: every setting except where its files are written."""
        values = {k: v for k, v in self.values.items() if k != "paths.out"}
        blob = json.dumps(values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def model_config(self, vocab_size: int) -> ModelConfig:
        v = self.values
        try:
            return ModelConfig(vocab_size=vocab_size, d_model=v["model.d_model"], n_heads=v["model.n_heads"],
                               n_enc_layers=v["model.n_enc_layers"], n_dec_layers=v["model.n_dec_layers"],
                               d_ff=v["model.d_ff"], dropout_rate=v["model.dropout_rate"],
                               max_source_len=v["model.max_source_len"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(batch_size=v["train.batch_size"], lr=v["train.lr"],
                               warmup_steps=v["train.warmup_steps"], max_steps=v["train.max_steps"],
                               optimizer=v["train.optimizer"], beta1=v["train.beta1"], beta2=v["train.beta2"],
                               eps=v["train.eps"], weight_decay=v["train.weight_decay"],
                               clip_norm=v["train.clip_norm"], seed=v["seed"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def decode_config(self) -> DecodeConfig:
        v = self.values
        order = v["decode.force_order"]
        try:
            return DecodeConfig(strategy=v["decode.strategy"], beam_width=v["decode.beam_width"],
                                top_k=v["decode.top_k"], top_p=v["decode.top_p"], num_candidates=v["decode.k"],
                                max_sentence_tokens=v["decode.max_sentence_tokens"],
                                max_sentences=v["decode.max_sentences"], seed=v["seed"],
                                temperature=v["decode.temperature"], uniform_first=v["decode.uniform_first"],
                                force_order=tuple(order) if order else None, threads=v["threads"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

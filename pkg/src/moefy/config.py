"""Run configuration (flat key=value files) and corpus handling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .numerics import Rng


class ConfigError(Exception):
    """Bad configuration: unknown key, wrong type, or invalid value."""


@dataclass
class RunConfig:
    # model
    vocab_size: int = 256
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    d_ffn: int = 512
    max_seq_len: int = 256
    ffn_kind: str = "two_matmul"
    activation: str = "gelu_tanh"
    expert_size: int = 16
    tie_embeddings: bool = False
    # optimization
    lr: float = 3e-4
    batch_size: int = 8
    seq_len: int = 64
    warmup_ratio: float = 0.06
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    base_steps: int = 2000
    stage1_steps: int = 400
    stage2_steps: int = 200
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    # router objective
    eta: float = 1.0
    lam: float = 0.5
    tau: float = 0.5
    denom_guard: float = 1e-3
    # run
    corpus: str = ""
    seed: int = 0
    out_dir: str = "runs/out"
    eval_windows: int = 16
    group_method: str = "kmeans"

    @classmethod
    def key_types(cls) -> dict[str, type]:
        return {f.name: f.type if isinstance(f.type, type) else type(f.default) for f in fields(cls)}


def _coerce(key: str, raw: str, typ: type):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from exc


def parse_config_file(path: str) -> dict:
    """key=value per line; # comments; unknown keys rejected."""
    types = RunConfig.key_types()
    out: dict = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
            out[key] = _coerce(key, raw, types[key])
    return out


def build_config(file_path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Precedence: explicit override > config file > default."""
    values: dict = {}
    if file_path:
        values.update(parse_config_file(file_path))
    if overrides:
        types = RunConfig.key_types()
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = val
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.d_model % cfg.n_heads != 0:
        raise ConfigError("d_model must be divisible by n_heads")
    if cfg.d_ffn % cfg.expert_size != 0:
        raise ConfigError("d_ffn must be divisible by expert_size")
    if not 0.0 < cfg.tau < 1.0:
        raise ConfigError("tau must be in (0, 1)")
    if cfg.eta < 0 or cfg.lam < 0:
        raise ConfigError("eta and lam must be >= 0")
    if cfg.seq_len + 1 > cfg.max_seq_len + 1:
        raise ConfigError("seq_len must be <= max_seq_len")
    if cfg.group_method not in ("kmeans", "random"):
        raise ConfigError(f"unknown group_method {cfg.group_method!r}")


@dataclass
class Corpus:
    data: np.ndarray  # uint8 bytes
    sha256: str

    @property
    def train(self) -> np.ndarray:
        return self.data[: self._split]

    @property
    def val(self) -> np.ndarray:
        return self.data[self._split :]

    @property
    def _split(self) -> int:
        return int(0.95 * self.data.shape[0])


def load_corpus(path: str) -> Corpus:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise ConfigError(f"corpus {path} is empty")
    data = np.frombuffer(raw, dtype=np.uint8)
    c = Corpus(data=data, sha256=hashlib.sha256(raw).hexdigest())
    if c.val.shape[0] < 2:
        raise ConfigError(f"corpus {path} too small for a validation slice")
    return c


_WORDS = (
    "time year way day thing man world life hand part child eye woman place work week "
    "case point government company number group problem fact be have do say get make go "
    "know take see come think look want give use find tell ask work seem feel try leave "
    "call good new first last long great little own other old right big high different "
    "small large next early young important few public bad same able to of in for on "
    "with at by from up about into over after beneath under above the and a that I it "
    "not he as you this but his they her she or an will my one all would there their "
    "river mountain stone tower window garden winter summer silver shadow morning "
    "evening thunder whisper journey harbor lantern meadow"
).split()


def make_synthetic_corpus(path: str, n_bytes: int = 1_000_000, seed: int = 7) -> str:
    """Deterministic synthetic text with enough byte-level structure to train on:
    a few hundred word types, occasional numbers, casing, and punctuation."""
    rng = Rng(seed)
    chunks: list[str] = []
    size = 0
    while size < n_bytes:
        k = int(rng.integers(5, 14))
        words = [_WORDS[int(i)] for i in rng.integers(0, len(_WORDS), size=k)]
        if rng.integers(0, 6) == 0:
            words.insert(int(rng.integers(0, k)), str(int(rng.integers(0, 2000))))
        s = " ".join(words)
        if rng.integers(0, 3) == 0:
            s = s.capitalize()
        s += [". ", "? ", "! ", ",\n"][int(rng.integers(0, 4))]
        chunks.append(s)
        size += len(s)
    text = "".join(chunks)[:n_bytes]
    with open(path, "w") as fh:
        fh.write(text)
    return path

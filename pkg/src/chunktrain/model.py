"""Toy decoder-only transformer: configuration, parameters, Adam, and file formats."""

from __future__ import annotations

import configparser
import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from chunktrain.errors import ConfigError
from chunktrain.tensor_ops import DTYPES, dtype_for

ATTENTION_MODES = ("dense", "topk", "local")
LAYER_MATRICES = ("Wq", "Wk", "Wv", "Wo", "Wup", "Wdown")
LAYER_GAINS = ("g_attn", "g_mlp")

Params = dict[str, np.ndarray]


@dataclass
class ModelConfig:
    """Model shape plus the chunking, paging and retrieval knobs.

    Defaults describe a tiny model with production-sized chunk/page/budget
    values (4096 / 128 / 8192 tokens); :func:`desk_config` scales those down.
    """

    n_layers: int = 2
    d_model: int = 64
    n_q_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 16
    d_ff: int = 128
    vocab_size: int = 256
    chunk_size: int = 4096
    page_size: int = 128
    attention_mode: list[str] | str = "dense"  # one mode, or one per layer
    retrieval_budget: int = 8192
    local_window: int = 2
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    score_scale: bool = False
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.attention_mode, str):
            self.attention_mode = [self.attention_mode] * self.n_layers
        else:
            self.attention_mode = list(self.attention_mode)
        self.validate()

    @property
    def group(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    @property
    def budget_pages(self) -> int:
        return self.retrieval_budget // self.page_size

    @property
    def pages_per_chunk(self) -> int:
        return self.chunk_size // self.page_size

    @property
    def dtype(self) -> type:
        return dtype_for(self.precision)

    def validate(self) -> None:
        positive = ("n_layers", "d_model", "n_q_heads", "n_kv_heads", "head_dim", "d_ff", "chunk_size", "page_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_q_heads % self.n_kv_heads:
            raise ConfigError(f"n_q_heads={self.n_q_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for rotary embedding, got {self.head_dim}")
        if self.chunk_size % self.page_size:
            raise ConfigError(f"chunk_size={self.chunk_size} not divisible by page_size={self.page_size}")
        if self.retrieval_budget < 0 or self.retrieval_budget % self.page_size:
            raise ConfigError(f"retrieval_budget={self.retrieval_budget} not a multiple of page_size={self.page_size}")
        if self.local_window < 0:
            raise ConfigError("local_window must be >= 0")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if len(self.attention_mode) != self.n_layers:
            raise ConfigError(f"{len(self.attention_mode)} attention modes for {self.n_layers} layers")
        for mode in self.attention_mode:
            if mode not in ATTENTION_MODES:
                raise ConfigError(f"unknown attention mode {mode!r}")
        if self.precision not in DTYPES:
            raise ConfigError(f"unknown precision {self.precision!r}")

    def replace(self, **changes) -> "ModelConfig":
        if "attention_mode" in changes and isinstance(changes["attention_mode"], str):
            changes["attention_mode"] = [changes["attention_mode"]] * changes.get("n_layers", self.n_layers)
        return dataclasses.replace(self, **changes)


def desk_config(**overrides) -> ModelConfig:
    """The small configuration used by the tests and default CLI runs."""
    base = dict(chunk_size=64, page_size=16, retrieval_budget=32, local_window=2)
    base.update(overrides)
    return ModelConfig(**base)


# -- config file ------------------------------------------------------------

_FLOAT_KEYS = {"rope_base", "norm_eps"}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into config overrides."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[model]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    out: dict = {}
    for key, raw in cp["model"].items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        raw = raw.strip()
        try:
            if key == "attention_mode":
                out[key] = [m.strip() for m in raw.split(",") if m.strip()]
            elif key == "score_scale":
                out[key] = raw.lower() in ("1", "true", "yes", "on")
            elif key in _FLOAT_KEYS:
                out[key] = float(raw)
            elif key == "precision":
                out[key] = raw
            else:
                out[key] = int(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    if "attention_mode" in out and len(out["attention_mode"]) == 1:
        out["attention_mode"] = out["attention_mode"] * out.get("n_layers", ModelConfig.n_layers)
    return out


def load_config(path: str | Path, **overrides) -> ModelConfig:
    values = parse_config_text(Path(path).read_text())
    values.update(overrides)
    return desk_config(**values)


# -- parameters -------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config
    shapes: dict[str, tuple[int, ...]] = {"emb": (c.vocab_size, c.d_model)}
    for l in range(c.n_layers):
        p = f"layers.{l}."
        shapes[p + "g_attn"] = (c.d_model,)
        shapes[p + "Wq"] = (c.d_model, c.n_q_heads * c.head_dim)
        shapes[p + "Wk"] = (c.d_model, c.n_kv_heads * c.head_dim)
        shapes[p + "Wv"] = (c.d_model, c.n_kv_heads * c.head_dim)
        shapes[p + "Wo"] = (c.n_q_heads * c.head_dim, c.d_model)
        shapes[p + "g_mlp"] = (c.d_model,)
        shapes[p + "Wup"] = (c.d_model, c.d_ff)
        shapes[p + "Wdown"] = (c.d_ff, c.d_model)
    shapes["g_final"] = (c.d_model,)
    shapes["unemb"] = (c.d_model, c.vocab_size)
    return shapes


def param_count(config: ModelConfig) -> int:
    c = config
    per_layer = (
        2 * c.d_model
        + c.d_model * c.head_dim * (2 * c.n_q_heads + 2 * c.n_kv_heads)
        + 2 * c.d_model * c.d_ff
    )
    return 2 * c.vocab_size * c.d_model + c.d_model + c.n_layers * per_layer


def init_params(config: ModelConfig, seed: int | None = None) -> Params:
    """Normal(0, d_model^-0.5) matrices, unit norm gains; deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    std = config.d_model ** -0.5
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.ones(shape, dtype=config.dtype)
        else:
            params[name] = (rng.standard_normal(shape) * std).astype(config.dtype)
    return params


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def cast_params(params: Params, precision: str) -> Params:
    dt = dtype_for(precision)
    return {k: v.astype(dt) for k, v in params.items()}


# -- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    m: Params
    v: Params
    t: int = 0

    @classmethod
    def for_params(cls, params: Params) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params))


def adam_step(
    params: Params,
    grads: Params,
    state: AdamState,
    lr: float = 5e-5,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. ``grads`` is not modified."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# -- checkpoint -------------------------------------------------------------

CHECKPOINT_MAGIC = b"OOMB"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: Params) -> None:
    """Flat binary: magic, u32 version, then per tensor
    (u32 name length, name, u32 rank, u64 dims, f32 data), all little-endian."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> Params:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    params: Params = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        count = int(np.prod(dims, dtype=np.int64))
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    return params

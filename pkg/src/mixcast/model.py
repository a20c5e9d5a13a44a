"""Stochastic encoder-decoder attention forecaster.

One forward pass embeds the input window (value + time-feature + positional
embeddings, subject token prepended), runs attention blocks with a
Conv1d/ELU/MaxPool reduction between encoder blocks, and decodes a mean and
log-variance per prediction step in a single non-autoregressive pass.
Dropout masks drawn from a seeded generator act as the latent noise, so each
seed yields one draw of sufficient statistics and repeated seeded passes
build up a mixture forecast.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .autodiff import (
    InvalidValueError, Tensor, add, concat_cols, concat_rows, constant, conv1d,
    dropout, elu, layer_norm, matmul, maxpool1d, reshape_vector, scale,
    slice_cols, slice_rows, softmax_columns, transpose,
)
from .dist import BaseKind, MixtureSample, SufficientStats


class NumericError(RuntimeError):
    """A forward pass produced NaN; the message names the failing layer."""


@dataclass
class ModelConfig:
    d: int = 32
    heads: int = 4
    d_k: int = 8
    d_v: int = 8
    enc_blocks: int = 2
    dec_blocks: int = 1
    ff: int = 64
    dropout_p: float = 0.3
    t_enc: int = 4
    t_pred: int = 2
    d_t: int = 0
    n_subjects: int = 1
    base: BaseKind = BaseKind.GAUSSIAN

    def __post_init__(self):
        if isinstance(self.base, str):
            self.base = BaseKind(self.base)
        self.validate()

    def validate(self):
        # heads concatenate to heads*d_v and project back to d, so d need not
        # equal heads*d_v (e.g. d=512 with 12 heads)
        if self.t_enc < 1 or self.t_pred < 1:
            raise ValueError("t_enc and t_pred must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if min(self.d, self.heads, self.d_k, self.d_v, self.ff,
               self.enc_blocks, self.dec_blocks, self.n_subjects) < 1:
            raise ValueError("all model dimensions must be >= 1")

    @property
    def start_len(self) -> int:
        """Decoder start-token length: last ceil(t_enc/4) encoder values."""
        return max(1, math.ceil(self.t_enc / 4))


@dataclass
class WindowSample:
    """One training/evaluation instance.

    Values are on the normalized scale; ``y_raw`` keeps the original units
    for metric reporting.  Future time features belong to the placeholder
    positions the decoder fills in.
    """

    window_id: str
    x: np.ndarray
    timefeat: np.ndarray
    timefeat_future: np.ndarray
    subject: int
    y: np.ndarray
    y_raw: np.ndarray = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.timefeat = np.asarray(self.timefeat, dtype=np.float64).reshape(len(self.x), -1)
        self.timefeat_future = np.asarray(self.timefeat_future, dtype=np.float64).reshape(len(self.y), -1)
        if self.y_raw is None:
            self.y_raw = self.y.copy()
        self.y_raw = np.asarray(self.y_raw, dtype=np.float64)


@lru_cache(maxsize=32)
def _positional_cached(t: int, d: int) -> np.ndarray:
    table = np.zeros((t, d))
    pos = np.arange(t, dtype=np.float64)[:, None]
    pair = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, pair / d)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    table.setflags(write=False)
    return table


def positional_table(t: int, d: int) -> np.ndarray:
    """Sine/cosine positional table: p[i, 2j] = sin(i / 10000^(2j/d)),
    p[i, 2j+1] = cos of the same angle."""
    return _positional_cached(t, d)


class ModelParams:
    """Named parameter tensors; creation order is fixed so a seed fully
    determines the initialization."""

    def __init__(self, config: ModelConfig, seed: int = 0, _empty: bool = False):
        self.config = config
        self.tensors: dict[str, Tensor] = {}
        if _empty:
            return
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1417]))
        c = config
        self._weight(rng, "embed.value", (1, c.d), fan_in=1)
        if c.d_t > 0:
            self._weight(rng, "embed.time", (c.d_t, c.d), fan_in=c.d_t)
        self._weight(rng, "embed.subject", (c.n_subjects, c.d), fan_in=c.d)
        for b in range(c.enc_blocks):
            self._block(rng, f"enc{b}")
            if b < c.enc_blocks - 1:
                self._weight(rng, f"distill{b}.kernel", (3, c.d, c.d), fan_in=3 * c.d)
        for b in range(c.dec_blocks):
            self._block(rng, f"dec{b}")
        self._block(rng, "cross")
        self._weight(rng, "head.w", (c.d, 2), fan_in=c.d)
        self._zeros("head.b", (2,))

    def _block(self, rng, prefix: str):
        c = self.config
        for i in range(c.heads):
            self._weight(rng, f"{prefix}.h{i}.wq", (c.d, c.d_k), fan_in=c.d)
            self._weight(rng, f"{prefix}.h{i}.wk", (c.d, c.d_k), fan_in=c.d)
            self._weight(rng, f"{prefix}.h{i}.wv", (c.d, c.d_v), fan_in=c.d)
        self._weight(rng, f"{prefix}.wo", (c.heads * c.d_v, c.d), fan_in=c.heads * c.d_v)
        self._ones(f"{prefix}.ln_attn.gamma", (c.d,))
        self._zeros(f"{prefix}.ln_attn.beta", (c.d,))
        self._weight(rng, f"{prefix}.ff.w1", (c.d, c.ff), fan_in=c.d)
        self._zeros(f"{prefix}.ff.b1", (c.ff,))
        self._weight(rng, f"{prefix}.ff.w2", (c.ff, c.d), fan_in=c.ff)
        self._zeros(f"{prefix}.ff.b2", (c.d,))
        self._ones(f"{prefix}.ln_ff.gamma", (c.d,))
        self._zeros(f"{prefix}.ln_ff.beta", (c.d,))

    def _weight(self, rng, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        self._add(name, rng.uniform(-bound, bound, size=shape))

    def _zeros(self, name, shape):
        self._add(name, np.zeros(shape))

    def _ones(self, name, shape):
        self._add(name, np.ones(shape))

    def _add(self, name, data):
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name}")
        self.tensors[name] = Tensor(data, requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        clone = ModelParams(self.config, _empty=True)
        for name, t in self.tensors.items():
            clone.tensors[name] = Tensor(t.data.copy(), requires_grad=True)
        return clone

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()


# ---------------------------------------------------------------------------
# forward pieces


def attention(x_emb: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Single-head scaled dot-product self-attention."""
    return attention_kv(x_emb, x_emb, wq, wk, wv)


def attention_kv(x_q: Tensor, x_kv: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Attention with separate query and key/value sources.

    Scores are key-by-query so the column-wise softmax normalizes over keys;
    each output row is then a convex combination of value rows.
    """
    q = matmul(x_q, wq)
    k = matmul(x_kv, wk)
    v = matmul(x_kv, wv)
    d_k = q.shape[1]
    scores = scale(matmul(k, transpose(q)), 1.0 / math.sqrt(d_k))
    weights = softmax_columns(scores)
    return matmul(transpose(weights), v)


def multi_head(x_emb: Tensor, head_weights, wo: Tensor, x_kv: Tensor = None) -> Tensor:
    """Concatenation of per-head attention outputs projected by wo."""
    if x_kv is None:
        x_kv = x_emb
    heads = [attention_kv(x_emb, x_kv, wq, wk, wv) for wq, wk, wv in head_weights]
    return matmul(concat_cols(heads), wo)


def conv_distill(x: Tensor, kernel: Tensor) -> Tensor:
    """Conv1d -> ELU -> MaxPool reduction, halving the time dimension."""
    return maxpool1d(elu(conv1d(x, kernel)))


def embed(params: ModelParams, config: ModelConfig, values: np.ndarray,
          timefeat: np.ndarray, subject: int) -> Tensor:
    """Embed an encoder window: value + time + positional terms, then the
    subject row prepended as token 0 (no positional term on the subject)."""
    if not 0 <= subject < config.n_subjects:
        raise LookupError(f"subject index {subject} out of range 0..{config.n_subjects - 1}")
    e = _embed_sequence(params, config, values, timefeat)
    srow = slice_rows(params["embed.subject"], subject, subject + 1)
    return concat_rows([srow, e])


def _embed_sequence(params, config, values, timefeat) -> Tensor:
    values = np.asarray(values, dtype=np.float64)
    t = values.shape[0]
    e = matmul(constant(values.reshape(-1, 1)), params["embed.value"])
    if config.d_t > 0:
        e = add(e, matmul(constant(np.asarray(timefeat, dtype=np.float64)),
                          params["embed.time"]))
    return add(e, constant(positional_table(t, config.d)))


def _head_weights(params, prefix, n_heads):
    return [(params[f"{prefix}.h{i}.wq"], params[f"{prefix}.h{i}.wk"],
             params[f"{prefix}.h{i}.wv"]) for i in range(n_heads)]


def _maybe_dropout(x, config, rng):
    if rng is None or config.dropout_p == 0.0:
        return x
    return dropout(x, config.dropout_p, rng)


def _attn_block(params, config, prefix, x, rng, x_kv=None):
    attn = multi_head(x, _head_weights(params, prefix, config.heads),
                      params[f"{prefix}.wo"], x_kv=x_kv)
    x = layer_norm(add(x, _maybe_dropout(attn, config, rng)),
                   params[f"{prefix}.ln_attn.gamma"], params[f"{prefix}.ln_attn.beta"])
    hidden = elu(add(matmul(x, params[f"{prefix}.ff.w1"]), params[f"{prefix}.ff.b1"]))
    ff = add(matmul(hidden, params[f"{prefix}.ff.w2"]), params[f"{prefix}.ff.b2"])
    return layer_norm(add(x, _maybe_dropout(ff, config, rng)),
                      params[f"{prefix}.ln_ff.gamma"], params[f"{prefix}.ln_ff.beta"])


def _check_finite(tensor: Tensor, layer: str):
    if not np.all(np.isfinite(tensor.data)):
        raise NumericError(f"non-finite values after {layer}")


@contextmanager
def _named_layer(layer: str):
    """Convert op-level NaN rejections into a failure naming the layer."""
    try:
        yield
    except InvalidValueError as exc:
        raise NumericError(f"non-finite values in {layer}: {exc}") from exc


def forward_stats(params: ModelParams, config: ModelConfig, window: WindowSample,
                  rng: np.random.Generator = None) -> tuple[Tensor, Tensor]:
    """One full encoder-decoder pass.

    Returns (mean, log_scale) tensors of length t_pred.  ``rng`` supplies the
    dropout masks; None runs a deterministic pass.
    """
    c = config
    if window.x.shape != (c.t_enc,) or window.y.shape != (c.t_pred,):
        raise ValueError(f"window lengths {window.x.shape}/{window.y.shape} "
                         f"do not match config {c.t_enc}/{c.t_pred}")
    with _named_layer("encoder"):
        x = embed(params, c, window.x, window.timefeat, window.subject)
        x = _maybe_dropout(x, c, rng)
        for b in range(c.enc_blocks):
            x = _attn_block(params, c, f"enc{b}", x, rng)
            if b < c.enc_blocks - 1:
                x = conv_distill(x, params[f"distill{b}.kernel"])
        _check_finite(x, "encoder")
    memory = x

    with _named_layer("decoder"):
        n_start = c.start_len
        dec_values = np.concatenate([window.x[c.t_enc - n_start:], np.zeros(c.t_pred)])
        dec_time = np.concatenate([window.timefeat[c.t_enc - n_start:],
                                   window.timefeat_future], axis=0)
        z = _embed_sequence(params, c, dec_values, dec_time)
        z = _maybe_dropout(z, c, rng)
        for b in range(c.dec_blocks):
            z = _attn_block(params, c, f"dec{b}", z, rng)
        z = _attn_block(params, c, "cross", z, rng, x_kv=memory)
        _check_finite(z, "decoder")

    with _named_layer("output head"):
        out = add(matmul(slice_rows(z, n_start, n_start + c.t_pred), params["head.w"]),
                  params["head.b"])
        _check_finite(out, "output head")
    mean = reshape_vector(slice_cols(out, 0, 1))
    log_scale = reshape_vector(slice_cols(out, 1, 2))
    return mean, log_scale


def draw_rng(seed: int, index: int) -> np.random.Generator:
    """Deterministic generator for draw ``index`` of a pass seeded by ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def stochastic_forward(params: ModelParams, config: ModelConfig, window: WindowSample,
                       seed: int, stochastic: bool = True) -> SufficientStats:
    """One seeded stochastic pass; the same seed gives bitwise-identical output."""
    rng = draw_rng(seed, 0) if (stochastic and config.dropout_p > 0.0) else None
    mean, log_scale = forward_stats(params, config, window, rng)
    return SufficientStats(mean=mean.data.copy(), log_scale=log_scale.data.copy())


def predict_distribution(params: ModelParams, config: ModelConfig, window: WindowSample,
                         k: int, seed: int, stochastic: bool = True) -> MixtureSample:
    """k stochastic passes with seeds derived from (seed, draw index)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    draws = []
    for j in range(k):
        rng = draw_rng(seed, j) if (stochastic and config.dropout_p > 0.0) else None
        mean, log_scale = forward_stats(params, config, window, rng)
        draws.append(SufficientStats(mean=mean.data.copy(), log_scale=log_scale.data.copy()))
    return MixtureSample(draws=draws)


# ---------------------------------------------------------------------------
# checkpoint io: text manifest (name, shape, byte offset) + raw <f8 data


def save_checkpoint(params: ModelParams, path):
    lines = [f"tensors {len(params.tensors)}"]
    blobs = []
    offset = 0
    for name, t in params.tensors.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name} {shape} {offset}")
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    lines.append("data")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, config: ModelConfig, seed: int = 0) -> ModelParams:
    """Load a checkpoint, validating names and shapes against the config."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.index(b"\n")
    first = raw[:nl].decode("ascii").split()
    if len(first) != 2 or first[0] != "tensors":
        raise ValueError("malformed checkpoint header")
    count = int(first[1])
    pos = nl + 1
    entries = []
    for _ in range(count):
        nl = raw.index(b"\n", pos)
        name, shape, offset = raw[pos:nl].decode("ascii").split()
        dims = tuple(int(s) for s in shape.split(","))
        entries.append((name, dims, int(offset)))
        pos = nl + 1
    nl = raw.index(b"\n", pos)
    if raw[pos:nl] != b"data":
        raise ValueError("malformed checkpoint manifest")
    base = nl + 1

    skeleton = ModelParams(config, seed=seed)
    loaded = {name: (dims, offset) for name, dims, offset in entries}
    if set(loaded) != set(skeleton.tensors):
        missing = set(skeleton.tensors) - set(loaded)
        extra = set(loaded) - set(skeleton.tensors)
        raise ValueError(f"checkpoint does not match config (missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)})")
    for name, t in skeleton.tensors.items():
        dims, offset = loaded[name]
        if dims != t.data.shape:
            raise ValueError(f"shape mismatch for {name}: checkpoint {dims}, config {t.data.shape}")
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=base + offset)
        t.data = arr.reshape(dims).astype(np.float64)
    return skeleton

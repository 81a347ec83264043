"""Post-LN encoder-decoder transformer over the numerics substrate.

Forward passes can append per-sublayer records to a trace list; attribution
reads those records back to decompose attention sublayers token by token.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3
NEG_INF = -1e9

MAGIC = b"HGCKPT\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ffn: int = 256
    dropout_rate: float = 0.1
    max_len: int = 32
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size <= N_SPECIAL:
            raise ValueError("vocab must hold PAD/BOS/EOS plus at least one symbol")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._pe = sinusoidal_positions(config.max_len, config.d_model)

    @classmethod
    def init(cls, config: ModelConfig, rng: Rng) -> "TransformerModel":
        d = config.d_model
        shapes = param_shapes(config)
        params = {}
        for name, shape in shapes.items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("g",):
                arr = np.ones(shape)
            elif leaf.startswith("b"):
                arr = np.zeros(shape)
            elif name.endswith("embed"):
                arr = rng.normal(shape, d**-0.5)
            else:
                arr = rng.normal(shape, math.sqrt(2.0 / sum(shape)))
            params[name] = Tensor(arr, requires_grad=True)
        return cls(config, params)

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def copy(self) -> "TransformerModel":
        return TransformerModel(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.params.items()},
        )

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def check_tokens(self, tokens, what: str) -> np.ndarray:
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= self.config.vocab_size):
            raise InputError(f"{what}: out-of-vocabulary token id")
        if arr.shape[-1] > self.config.max_len:
            raise InputError(
                f"{what}: length {arr.shape[-1]} exceeds max_len {self.config.max_len}"
            )
        return arr


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    d, f, v = config.d_model, config.d_ffn, config.vocab_size
    shapes: dict[str, tuple] = {"src_embed": (v, d), "tgt_embed": (v, d)}

    def attn(prefix):
        for n in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{n}"] = (d, d)
        for n in ("bq", "bk", "bv", "bo"):
            shapes[f"{prefix}.{n}"] = (d,)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for l in range(config.n_enc_layers):
        attn(f"enc.{l}.self")
        ln(f"enc.{l}.ln1")
        ffn(f"enc.{l}.ffn")
        ln(f"enc.{l}.ln2")
    for l in range(config.n_dec_layers):
        attn(f"dec.{l}.self")
        ln(f"dec.{l}.ln1")
        attn(f"dec.{l}.cross")
        ln(f"dec.{l}.ln2")
        ffn(f"dec.{l}.ffn")
        ln(f"dec.{l}.ln3")
    shapes["out.w"] = (d, v)
    shapes["out.b"] = (v,)
    return shapes


# --------------------------------------------------------------------------
# dropout

class NoDropout:
    def __call__(self, site: str, x: Tensor) -> Tensor:
        return x


class TrainDropout:
    """Fresh independent masks for every call (training)."""

    def __init__(self, rng: Rng, rate: float):
        self.rng = rng
        self.rate = rate

    def __call__(self, site: str, x: Tensor) -> Tensor:
        if self.rate <= 0:
            return x
        return x * self.rng.dropout_mask(x.shape, self.rate)


class DropoutPlan:
    """Inference-time dropout keyed by (site, absolute position).

    Masks are shared across the batch rows, so a beam and a teacher-forced
    rescoring of the same tokens see identical masks under the same Rng.
    """

    def __init__(self, rng: Rng, rate: float, max_len: int):
        self.rng = rng
        self.rate = rate
        self.max_len = max_len
        self._bank: dict[str, np.ndarray] = {}

    def __call__(self, site: str, x: Tensor) -> Tensor:
        if self.rate <= 0:
            return x
        bank = self._bank.get(site)
        if bank is None:
            bank = self.rng.child(site).dropout_mask((self.max_len, x.shape[-1]), self.rate)
            self._bank[site] = bank
        return x * bank[: x.shape[-2]]


# --------------------------------------------------------------------------
# forward pass

def _attention(p, prefix, x_q, x_kv, mask_add, n_heads, trace, kind, layer):
    B, T, d = x_q.shape
    S = x_kv.shape[1]
    dh = d // n_heads
    q = (x_q @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]).reshape(B, T, n_heads, dh)
    k = (x_kv @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]).reshape(x_kv.shape[0], S, n_heads, dh)
    v = (x_kv @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]).reshape(x_kv.shape[0], S, n_heads, dh)
    scores = (q.transpose(0, 2, 1, 3) @ k.transpose(0, 2, 3, 1)) * (1.0 / math.sqrt(dh))
    if mask_add is not None:
        scores = scores + mask_add
    alpha = nx.softmax(scores, axis=-1)
    ctx = (alpha @ v.transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3).reshape(B, T, d)
    out = ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]
    if trace is not None:
        trace.append(
            {"kind": kind, "layer": layer, "prefix": prefix, "x": x_q.data, "kv": x_kv.data,
             "alpha": alpha.data, "attn_out": out.data}
        )
    return out


def _ln(p, prefix, x, eps, trace):
    out = nx.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"], eps)
    if trace is not None:
        trace[-1].update(
            {"ln": prefix, "ln_mean": out.meta["mean"], "ln_var": out.meta["var"],
             "ln_eps": eps, "y": out.data}
        )
    return out


def _ffn(p, prefix, x, dropout, site):
    h = nx.relu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    h = dropout(site + ".hidden", h)
    return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def _embed(model, table, ids):
    cfg = model.config
    e = nx.embedding(model.params[table], ids) * math.sqrt(cfg.d_model)
    return e + model._pe[: ids.shape[-1]]


def encoder_forward(model, src, src_pad, dropout, trace=None):
    """src: (B, S) ids; src_pad: (B, S) bool mask of padding positions."""
    p, cfg = model.params, model.config
    mask = None
    if src_pad is not None and src_pad.any():
        mask = np.where(src_pad, NEG_INF, 0.0)[:, None, None, :]
    x = dropout("enc.embed", _embed(model, "src_embed", src))
    if trace is not None:
        trace.append({"kind": "enc_input", "x": x.data})
    for l in range(cfg.n_enc_layers):
        a = _attention(p, f"enc.{l}.self", x, x, mask, cfg.n_heads, trace, "enc_self", l)
        x = _ln(p, f"enc.{l}.ln1", x + dropout(f"enc.{l}.self", a), cfg.ln_eps, trace)
        f = _ffn(p, f"enc.{l}.ffn", x, dropout, f"enc.{l}.ffn")
        x = nx.layer_norm(x + dropout(f"enc.{l}.ffn", f), p[f"enc.{l}.ln2.g"], p[f"enc.{l}.ln2.b"], cfg.ln_eps)
    return x


def decoder_forward(model, enc, src_pad, tgt_in, dropout, trace=None):
    """Logits (B, T, V) for decoder inputs tgt_in (B, T) given encoder states."""
    p, cfg = model.params, model.config
    T = tgt_in.shape[1]
    causal = np.triu(np.full((T, T), NEG_INF), 1)[None, None]
    cross_mask = None
    if src_pad is not None and src_pad.any():
        cross_mask = np.where(src_pad, NEG_INF, 0.0)[:, None, None, :]
    x = dropout("dec.embed", _embed(model, "tgt_embed", tgt_in))
    if trace is not None:
        trace.append({"kind": "dec_input", "x": x.data})
    for l in range(cfg.n_dec_layers):
        a = _attention(p, f"dec.{l}.self", x, x, causal, cfg.n_heads, trace, "dec_self", l)
        x = _ln(p, f"dec.{l}.ln1", x + dropout(f"dec.{l}.self", a), cfg.ln_eps, trace)
        c = _attention(p, f"dec.{l}.cross", x, enc, cross_mask, cfg.n_heads, trace, "dec_cross", l)
        x = _ln(p, f"dec.{l}.ln2", x + dropout(f"dec.{l}.cross", c), cfg.ln_eps, trace)
        f = _ffn(p, f"dec.{l}.ffn", x, dropout, f"dec.{l}.ffn")
        x = nx.layer_norm(x + dropout(f"dec.{l}.ffn", f), p[f"dec.{l}.ln3.g"], p[f"dec.{l}.ln3.b"], cfg.ln_eps)
    return x @ p["out.w"] + p["out.b"]


def _inference_dropout(model, dropout_rng, dropout_rate):
    if dropout_rng is None:
        return NoDropout()
    rate = model.config.dropout_rate if dropout_rate is None else dropout_rate
    return DropoutPlan(dropout_rng, rate, model.config.max_len)


def encode(model, source_tokens, dropout_rng: Rng | None = None, dropout_rate=None):
    """Encoder states (S, d_model) and the trace list for one sentence."""
    src = model.check_tokens(source_tokens, "source")
    if src.ndim != 1 or src.size == 0:
        raise InputError("source must be a non-empty 1-D token sequence")
    trace: list = []
    with nx.no_grad():
        states = encoder_forward(
            model, src[None], None, _inference_dropout(model, dropout_rng, dropout_rate), trace
        )
    return states.data[0], trace


def decode_logprobs(
    model, source_tokens, target_tokens, dropout_rng: Rng | None = None, dropout_rate=None
):
    """log P(y_k | y_<k, x) for every position after the leading BOS.

    ``target_tokens`` starts with BOS and normally ends with EOS. Returns the
    per-position log-probabilities and the full (encoder + decoder) trace.
    """
    src = model.check_tokens(source_tokens, "source")
    tgt = model.check_tokens(target_tokens, "target")
    if tgt.ndim != 1 or tgt.size < 2 or tgt[0] != BOS:
        raise InputError("target must start with BOS and contain at least one token")
    dropout = _inference_dropout(model, dropout_rng, dropout_rate)
    trace: list = []
    with nx.no_grad():
        enc = encoder_forward(model, src[None], None, dropout, trace)
        logits = decoder_forward(model, enc, None, tgt[None, :-1], dropout, trace)
    logp = nx.log_softmax_array(logits.data[0], -1)
    return logp[np.arange(tgt.size - 1), tgt[1:]], trace


class IncrementalDecoder:
    """Step-by-step scorer for one source: encodes once, then recomputes the
    decoder over the growing prefix (no KV cache)."""

    def __init__(self, model, source_tokens, dropout_rng: Rng | None = None, dropout_rate=None):
        self.model = model
        src = model.check_tokens(source_tokens, "source")
        self.source = src
        self.dropout = _inference_dropout(model, dropout_rng, dropout_rate)
        with nx.no_grad():
            self.enc = encoder_forward(model, src[None], None, self.dropout)

    def step(self, prefixes: np.ndarray) -> np.ndarray:
        """Log-probs (B, V) of the next token for each prefix row (B, t)."""
        prefixes = np.asarray(prefixes, dtype=np.int64)
        with nx.no_grad():
            logits = decoder_forward(self.model, self.enc, None, prefixes, self.dropout)
        return nx.log_softmax_array(logits.data[:, -1], -1)


# --------------------------------------------------------------------------
# checkpoints

def save_params(path, kind: str, config: dict, params: dict[str, np.ndarray]) -> None:
    names = sorted(params)
    header = {
        "kind": kind,
        "config": config,
        "params": [[n, list(params[n].shape)] for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<I", FORMAT_VERSION)
    body += struct.pack("<Q", len(hbytes))
    body += hbytes
    for n in names:
        body += np.ascontiguousarray(params[n], dtype="<f8").tobytes()
    body += hashlib.sha256(bytes(body)).digest()
    Path(path).write_bytes(bytes(body))


def load_params(path, expect_kind: str | None = None):
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or truncated)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: corrupt checkpoint (checksum mismatch)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", body, off + 4)
    off += 12
    header = json.loads(body[off : off + hlen].decode("utf-8"))
    off += hlen
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(f"{path}: expected a {expect_kind} checkpoint, got {header['kind']}")
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(np.float64)
        params[name] = arr.reshape(shape)
        off += 8 * n
    if off != len(body):
        raise CheckpointError(f"{path}: corrupt checkpoint (trailing bytes)")
    return header, params


def save_checkpoint(model: TransformerModel, path) -> None:
    save_params(path, "transformer", asdict(model.config), model.named_arrays())


def load_checkpoint(path) -> TransformerModel:
    header, params = load_params(path, "transformer")
    config = ModelConfig(**header["config"])
    expected = param_shapes(config)
    if set(expected) != set(params):
        raise CheckpointError(f"{path}: parameter set does not match config")
    return TransformerModel(config, {k: Tensor(v, requires_grad=True) for k, v in params.items()})

"""Training loops: the translator (label-smoothed cross-entropy, Adam) and the
dual-encoder similarity model (bidirectional additive-margin softmax)."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import AdamState, Rng, Tensor, adam_step
from .transformer import (
    BOS,
    EOS,
    PAD,
    NoDropout,
    TrainDropout,
    TransformerModel,
    decoder_forward,
    encoder_forward,
    load_params,
    save_checkpoint,
    save_params,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainSpec:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 300
    label_smoothing: float = 0.1
    detach_noise: float = 0.1
    seed: int = 0
    eval_every: int = 250
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.warmup > max(self.steps, 1) and self.steps > 0:
            raise ValueError("warmup must not exceed steps")
        if not 0.0 <= self.label_smoothing <= 0.3:
            raise ValueError("label_smoothing must be in [0, 0.3]")
        if not 0.0 <= self.detach_noise < 1.0:
            raise ValueError("detach_noise must be in [0, 1)")


def learning_rate(spec: TrainSpec, step: int) -> float:
    """Linear warmup to ``spec.lr`` then inverse-sqrt decay (step is 1-based)."""
    w = max(spec.warmup, 1)
    return spec.lr * min(step / w, math.sqrt(w / step))


def pad_batch(seqs, pad=PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batch(pairs):
    src = pad_batch([s for s, _ in pairs])
    tgt = pad_batch([[BOS, *r, EOS] for _, r in pairs])
    return src, src == PAD, tgt[:, :-1], tgt[:, 1:]


def batch_loss(model, pairs, label_smoothing=0.0, dropout=None) -> Tensor:
    """Mean per-token (label-smoothed) negative log-likelihood over the batch."""
    dropout = dropout or NoDropout()
    src, src_pad, tgt_in, tgt_out = make_batch(pairs)
    enc = encoder_forward(model, src, src_pad, dropout)
    logits = decoder_forward(model, enc, src_pad, tgt_in, dropout)
    logp = nx.log_softmax(logits, axis=-1)
    mask = (tgt_out != PAD).astype(np.float64)
    nll = -nx.pick(logp, tgt_out)
    if label_smoothing > 0:
        smooth = -logp.mean(axis=-1)
        nll = nll * (1.0 - label_smoothing) + smooth * label_smoothing
    return (nll * mask).sum() * (1.0 / mask.sum())


def dev_loss(model, pairs, batch_size=100) -> float:
    total, count = 0.0, 0
    with nx.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i : i + batch_size]
            n = sum(len(r) + 1 for _, r in chunk)
            total += batch_loss(model, chunk).data.item() * n
            count += n
    return total / max(count, 1)


def sample_batch(pairs, spec: TrainSpec, rng: Rng) -> list:
    """Uniform batch; with probability ``detach_noise`` a pair's target is
    swapped for another pair's reference (misaligned-data noise)."""
    idx = rng.integers(0, len(pairs), spec.batch_size)
    batch = [pairs[i] for i in idx]
    if spec.detach_noise > 0:
        noisy = rng.uniform(spec.batch_size) < spec.detach_noise
        donors = rng.integers(0, len(pairs), spec.batch_size)
        batch = [(s, pairs[d][1]) if z else (s, r) for (s, r), z, d in zip(batch, noisy, donors)]
    return batch


def train_translator(
    model: TransformerModel,
    train_pairs,
    spec: TrainSpec,
    dev_pairs=None,
    checkpoint_dir=None,
):
    """Train in place. Returns (model, curve) where curve rows are
    (step, train_loss, dev_loss); dev_loss is NaN between evaluations."""
    spec.validate()
    if not train_pairs:
        raise ValueError("training corpus is empty")
    rng = Rng(spec.seed).child("train")
    dropout = TrainDropout(rng.child("dropout"), model.config.dropout_rate)
    batch_rng = rng.child("batches")
    dev_pairs = dev_pairs or []
    state = AdamState()
    curve = []
    if dev_pairs:
        curve.append((0, float("nan"), dev_loss(model, dev_pairs)))
    for step in range(1, spec.steps + 1):
        batch = sample_batch(train_pairs, spec, batch_rng)
        model.zero_grad()
        try:
            loss = batch_loss(model, batch, spec.label_smoothing, dropout)
            loss.backward()
            grads = {k: t.grad for k, t in model.params.items()}
            adam_step(model.named_arrays(), grads, state, learning_rate(spec, step))
        except nx.NonFiniteError as exc:
            raise TrainingDiverged(f"training diverged at step {step}: {exc}") from exc
        value = loss.data.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"training diverged at step {step}: loss={value}")
        last = step == spec.steps
        dl = float("nan")
        if dev_pairs and (last or (spec.eval_every and step % spec.eval_every == 0)):
            dl = dev_loss(model, dev_pairs)
            log.info("step %d train %.4f dev %.4f", step, value, dl)
        curve.append((step, value, dl))
        if checkpoint_dir and spec.checkpoint_every and (step % spec.checkpoint_every == 0 or last):
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, Path(checkpoint_dir) / f"model-step{step}.ckpt")
    model.zero_grad()
    return model, curve


def write_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss", "dev_loss"])
        for step, tl, dl in curve:
            w.writerow([step, "" if math.isnan(tl) else repr(tl), "" if math.isnan(dl) else repr(dl)])


# --------------------------------------------------------------------------
# dual encoder

@dataclass(frozen=True)
class DualEncoderConfig:
    vocab_size: int = 64
    dim: int = 64
    margin: float = 0.3
    temperature: float = 0.05
    shared: bool = False


@dataclass
class DualEncoderSpec:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 2e-3
    warmup: int = 100
    seed: int = 0


class DualEncoder:
    """Per-language embeddings, one shared single-head self-attention layer
    with residual, mean pooling, then L2 normalization."""

    def __init__(self, config: DualEncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: DualEncoderConfig, rng: Rng) -> "DualEncoder":
        d, v = config.dim, config.vocab_size
        p = {"src_embed": rng.normal((v, d), d**-0.5)}
        if not config.shared:
            p["tgt_embed"] = rng.normal((v, d), d**-0.5)
        for n in ("wq", "wk", "wv", "wo"):
            p[n] = rng.normal((d, d), math.sqrt(1.0 / d))
        return cls(config, {k: Tensor(a, requires_grad=True) for k, a in p.items()})

    def table(self, side: str) -> str:
        return "src_embed" if side == "src" or self.config.shared else "tgt_embed"

    def embed(self, seqs, side: str) -> Tensor:
        """Unit-norm sentence embeddings (B, dim) for a list of token lists."""
        if any(len(s) == 0 for s in seqs):
            raise ValueError("cannot embed an empty sentence")
        p = self.params
        ids = pad_batch(seqs)
        keep = (ids != PAD).astype(np.float64)
        x = nx.embedding(p[self.table(side)], ids)
        d = self.config.dim
        scores = (x @ p["wq"]) @ (x @ p["wk"]).transpose(0, 2, 1) * (1.0 / math.sqrt(d))
        scores = scores + np.where(keep[:, None, :] > 0, 0.0, -1e9)
        h = x + (nx.softmax(scores, -1) @ (x @ p["wv"])) @ p["wo"]
        weights = keep / keep.sum(axis=1, keepdims=True)
        pooled = (Tensor(weights[:, None, :]) @ h).reshape(len(seqs), d)
        sq = (pooled * pooled).sum(axis=-1, keepdims=True)
        if (sq.data <= 0).any():
            raise ValueError("zero-norm sentence embedding")
        return pooled * (sq ** -0.5)

    def cosine(self, source, output) -> float:
        with nx.no_grad():
            a = self.embed([list(source)], "src").data[0]
            b = self.embed([list(output)], "tgt").data[0]
        return float(np.clip(a @ b, -1.0, 1.0))


def additive_margin_loss(src_emb: Tensor, tgt_emb: Tensor, margin: float, temperature: float) -> Tensor:
    """Bidirectional in-batch ranking loss with the margin taken off positives."""
    B = src_emb.shape[0]
    sim = src_emb @ tgt_emb.transpose(1, 0)
    logits = (sim - np.eye(B) * margin) * (1.0 / temperature)
    diag = np.arange(B)
    fwd = -nx.pick(nx.log_softmax(logits, -1), diag).mean()
    bwd = -nx.pick(nx.log_softmax(logits.transpose(1, 0), -1), diag).mean()
    return (fwd + bwd) * 0.5


def train_dual_encoder(pairs, spec: DualEncoderSpec, config: DualEncoderConfig | None = None):
    """Returns (encoder, curve) with curve rows (step, loss)."""
    if not pairs:
        raise ValueError("no parallel pairs to train on")
    config = config or DualEncoderConfig()
    rng = Rng(spec.seed).child("dual_encoder")
    enc = DualEncoder.init(config, rng.child("init"))
    batch_rng = rng.child("batches")
    state = AdamState()
    sched = TrainSpec(steps=spec.steps, lr=spec.lr, warmup=min(spec.warmup, max(spec.steps, 1)))
    curve = []
    for step in range(1, spec.steps + 1):
        idx = batch_rng.choice(len(pairs), size=min(spec.batch_size, len(pairs)), replace=False)
        for t in enc.params.values():
            t.grad = None
        batch = [pairs[i] for i in idx]
        try:
            loss = additive_margin_loss(
                enc.embed([s for s, _ in batch], "src"),
                enc.embed([r for _, r in batch], "tgt"),
                config.margin,
                config.temperature,
            )
            loss.backward()
            adam_step(
                {k: t.data for k, t in enc.params.items()},
                {k: t.grad for k, t in enc.params.items()},
                state,
                learning_rate(sched, step),
            )
        except nx.NonFiniteError as exc:
            raise TrainingDiverged(f"dual encoder diverged at step {step}: {exc}") from exc
        curve.append((step, loss.data.item()))
    for t in enc.params.values():
        t.grad = None
    return enc, curve


def save_dual_encoder(enc: DualEncoder, path) -> None:
    save_params(path, "dual_encoder", asdict(enc.config), {k: t.data for k, t in enc.params.items()})


def load_dual_encoder(path) -> DualEncoder:
    header, params = load_params(path, "dual_encoder")
    return DualEncoder(
        DualEncoderConfig(**header["config"]),
        {k: Tensor(v, requires_grad=True) for k, v in params.items()},
    )

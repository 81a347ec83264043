"""Source/target contribution by aggregating layer-wise token attributions.

Each attention sublayer output (after its post-LN, linearized with the
recorded statistics) is split into one additive term per input token. A
token's contribution is how much closer the output gets by including its term:
``max(0, |y| - |y - term|)``, row-normalized. Encoder matrices are composed by
matrix product; the decoder alternates self-attention mixing with a
cross-attention split between encoder states and the residual stream.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .transformer import BOS, EOS, decode_logprobs

log = logging.getLogger(__name__)

RECONSTRUCTION_TOL = 1e-6
STOCHASTIC_TOL = 1e-6


class AttributionError(RuntimeError):
    pass


@dataclass
class SublayerContribution:
    matrix: np.ndarray  # (T, n_inputs), row-stochastic
    residual: float  # max |reconstruction - actual output|
    kind: str
    layer: int


@dataclass
class AttributionResult:
    source_share: np.ndarray  # per target token, in [0, 1]
    relevance: np.ndarray  # (T, S + T): columns [source tokens | target prefix]
    n_source: int

    @property
    def target_share(self) -> np.ndarray:
        return self.relevance[:, self.n_source :].sum(axis=1)

    @property
    def aggregate(self) -> float:
        return float(self.source_share.mean())


def _norm(x: np.ndarray, p: int) -> np.ndarray:
    if p == 1:
        return np.abs(x).sum(axis=-1)
    if p == 2:
        return np.sqrt((x * x).sum(axis=-1))
    raise ValueError("norm must be 1 or 2")


def _normalize_rows(raw: np.ndarray, allowed: np.ndarray, what: str) -> np.ndarray:
    """Row-normalize; an all-zero row becomes uniform over ``allowed``."""
    totals = raw.sum(axis=1, keepdims=True)
    zero = totals[:, 0] <= 0
    if zero.any():
        log.warning("%s: %d all-zero contribution row(s); using uniform fallback", what, zero.sum())
        fallback = allowed / allowed.sum(axis=1, keepdims=True)
        raw = np.where(zero[:, None], fallback, raw)
        totals = np.where(zero[:, None], 1.0, totals)
    return raw / totals


def sublayer_contributions(record: dict, params: dict, norm: int = 1,
                           tol: float = RECONSTRUCTION_TOL) -> SublayerContribution:
    """Contribution matrix for one attention sublayer from a trace record.

    Self-attention: (T, T), the residual stream folded into the diagonal.
    Cross-attention: (T, S + T), encoder states first, then the residual
    stream on the diagonal of the trailing block.
    """
    kind = record["kind"]
    prefix = record["prefix"]
    x = record["x"][0]  # residual stream input (T, d)
    kv = record["kv"][0]  # (S, d)
    alpha = record["alpha"][0]  # (H, T, S)
    y = record["y"][0]
    H, T, S = alpha.shape
    d = x.shape[-1]
    dh = d // H
    wv, bv = params[f"{prefix}.wv"], params[f"{prefix}.bv"]
    wo, bo = params[f"{prefix}.wo"], params[f"{prefix}.bo"]
    gain, beta = params[f"{record['ln']}.g"], params[f"{record['ln']}.b"]

    v = (kv @ wv + bv).reshape(S, H, dh).transpose(1, 0, 2)  # (H, S, dh)
    u = np.einsum("hsk,hkd->hsd", v, wo.reshape(H, dh, d))  # per-head W_O projection
    terms = np.einsum("hts,hsd->tsd", alpha, u)  # (T, S, d)

    if kind == "dec_cross":
        terms = np.concatenate([terms, np.zeros((T, T, d))], axis=1)
        terms[np.arange(T), S + np.arange(T)] = x
        allowed = np.concatenate([np.ones((T, S)), np.eye(T)], axis=1)
    else:
        if S != T:
            raise AttributionError(f"{prefix}: self-attention with mismatched query/key length")
        terms[np.arange(T), np.arange(T)] += x
        allowed = np.tril(np.ones((T, T))) if kind == "dec_self" else np.ones((T, T))

    scale = 1.0 / np.sqrt(record["ln_var"][0] + record["ln_eps"])  # (T,)

    def linear(z):  # layer norm with frozen per-position statistics, minus its offset
        return gain * (z - z.mean(axis=-1, keepdims=True)) * scale[:, None, None]

    tt = linear(terms)
    const = gain * (bo - bo.mean()) * scale[:, None] + beta
    residual = float(np.abs(tt.sum(axis=1) + const - y).max())
    if residual > tol:
        raise AttributionError(
            f"{prefix}: reconstruction residual {residual:.3g} exceeds {tol:g} (trace/model mismatch)"
        )
    raw = np.maximum(0.0, _norm(y, norm)[:, None] - _norm(y[:, None, :] - tt, norm))
    raw = raw * allowed
    # the fallback skips inputs whose transformed vector is exactly zero, so a
    # silenced value path can never receive mass
    carrying = allowed * (np.abs(tt).max(axis=-1) > 0)
    carrying = np.where(carrying.sum(axis=1, keepdims=True) > 0, carrying, allowed)
    matrix = _normalize_rows(raw, carrying, prefix)
    return SublayerContribution(matrix, residual, kind, int(record["layer"]))


def encoder_rollout(mats) -> np.ndarray:
    """E = C_L @ ... @ C_1 for layer-ordered square row-stochastic matrices."""
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    if not mats:
        raise ValueError("no encoder matrices")
    n = mats[0].shape[0]
    E = np.eye(n)
    for m in mats:
        if m.shape != (n, n):
            raise ValueError(f"contribution matrix shape {m.shape} does not match ({n}, {n})")
        E = m @ E
    return E


def decoder_source_attribution(self_mats, cross_mats, E) -> AttributionResult:
    """Relevance recursion over decoder layers (self-attention, then cross)."""
    if len(self_mats) != len(cross_mats):
        raise ValueError("need one self and one cross matrix per decoder layer")
    E = np.asarray(E, dtype=np.float64)
    S = E.shape[0]
    T = np.asarray(self_mats[0]).shape[0]
    R = np.concatenate([np.zeros((T, S)), np.eye(T)], axis=1)
    E_pad = np.concatenate([E, np.zeros((S, T))], axis=1)
    for C_self, C_cross in zip(self_mats, cross_mats):
        C_cross = np.asarray(C_cross)
        if C_cross.shape != (T, S + T):
            raise ValueError("cross-attention matrix must be (T, S + T)")
        R_mid = np.asarray(C_self) @ R
        c_res = np.diagonal(C_cross[:, S:])
        R = C_cross[:, :S] @ E_pad + c_res[:, None] * R_mid
    if np.abs(R.sum(axis=1) - 1.0).max() > STOCHASTIC_TOL:
        raise AttributionError("relevance rows are not stochastic")
    share = np.clip(R[:, :S].sum(axis=1), 0.0, 1.0)
    return AttributionResult(share, R, S)


def trace_contributions(trace, params, norm: int = 1):
    enc, dec_self, dec_cross = [], [], []
    for rec in trace:
        kind = rec.get("kind")
        if kind not in ("enc_self", "dec_self", "dec_cross"):
            continue
        c = sublayer_contributions(rec, params, norm)
        {"enc_self": enc, "dec_self": dec_self, "dec_cross": dec_cross}[kind].append(c)
    return enc, dec_self, dec_cross


def attribute(model, source, output, norm: int = 1) -> AttributionResult:
    """Attribution of every output token (EOS included) for a forced decode."""
    target = [BOS, *output, EOS]
    _, trace = decode_logprobs(model, source, target)
    enc, ds, dc = trace_contributions(trace, model.named_arrays(), norm)
    E = encoder_rollout([c.matrix for c in enc])
    return decoder_source_attribution([c.matrix for c in ds], [c.matrix for c in dc], E)


def write_attribution_csv(result: AttributionResult, path, source, output) -> None:
    cols = [f"src{j}:{t}" for j, t in enumerate(source)]
    cols += [f"tgt{j}:{t}" for j, t in enumerate([BOS, *output])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["position", "token", "source_share", *cols])
        for t, tok in enumerate([*output, EOS]):
            w.writerow([t, tok, repr(float(result.source_share[t])),
                        *[repr(float(v)) for v in result.relevance[t]]])

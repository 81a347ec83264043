"""Hypothesis generation: beam, sampling, nucleus, diverse beam search, diverse
decoding and MC dropout, all on top of :class:`IncrementalDecoder`."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import Rng
from .transformer import BOS, EOS, PAD, IncrementalDecoder

STRATEGIES = ("default", "beam", "sampling", "nucleus", "dbs", "ddec", "mc_greedy", "mc_beam")


@dataclass
class Hypothesis:
    tokens: list  # generated tokens, EOS included when finished
    logprob: float
    token_logprobs: list
    strategy: str
    seed: int | None = None
    dropout: bool = False
    truncated: bool = False

    @property
    def output(self) -> list:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else list(self.tokens)

    @property
    def normalized(self) -> float:
        return self.logprob / max(len(self.tokens), 1)

    def to_json(self, record_id=None) -> dict:
        row = {"strategy": self.strategy, "seed": self.seed, "tokens": [int(t) for t in self.tokens],
               "logprob": self.logprob, "dropout": self.dropout, "truncated": self.truncated}
        if record_id is not None:
            row["id"] = record_id
        return row


@dataclass
class GenSpec:
    strategy: str = "mc_beam"
    n: int = 10
    beam_size: int = 10
    p: float = 0.8
    groups: int | None = None
    diversity: float = 0.5
    rate: float = 1.0
    dropout_rate: float | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 < self.p <= 1.0:
            raise ValueError("nucleus p must be in (0, 1]")
        if self.rate < 0:
            raise ValueError("diversity rate must be >= 0")


def max_steps(model, source) -> int:
    """Generation cap: 2 * source length + 4, bounded by the model's max_len."""
    return min(2 * len(source) + 4, model.config.max_len - 1)


def _finalize(hyps, n_best):
    hyps = sorted(hyps, key=lambda h: (-h.normalized, h.tokens))
    return hyps[:n_best]


def _beam_core(dec, beam_size, groups, diversity, sibling_rate, steps, strategy,
               seed=None, dropout=False):
    """Grouped beam search; returns per-group finished hypotheses (unsorted).

    Search scores carry the diversity penalties; stored log-probs do not.
    Candidates are ranked by (-search score, parent tokens, token id).
    """
    if beam_size % groups:
        raise ValueError("beam_size must be divisible by groups")
    width = beam_size // groups
    alive = [[([], 0.0, [], 0.0)] for _ in range(groups)]
    finished = [[] for _ in range(groups)]
    for step in range(steps):
        rows = [b for g in alive for b in g]
        if not rows:
            break
        logp = dec.step(np.array([[BOS, *b[0]] for b in rows], dtype=np.int64))
        logp[:, PAD] = -np.inf
        logp[:, BOS] = -np.inf
        V = logp.shape[1]
        emitted = np.zeros(V)
        last = step == steps - 1
        k = 0
        for g in range(groups):
            beams = alive[g]
            if not beams:
                continue
            lp = logp[k : k + len(beams)]
            k += len(beams)
            search = np.array([b[3] for b in beams])[:, None] + lp
            if sibling_rate:
                ranks = np.empty_like(lp)
                for i in range(len(beams)):
                    order = np.lexsort((np.arange(V), -lp[i]))
                    ranks[i, order] = np.arange(V)
                search = search - sibling_rate * ranks
            if diversity and g:
                search = search - diversity * emitted[None, :]
            parent_rank = np.empty(len(beams), dtype=np.int64)
            parent_rank[sorted(range(len(beams)), key=lambda i: beams[i][0])] = np.arange(len(beams))
            flat = search.reshape(-1)
            par = np.repeat(parent_rank, V)
            tok = np.tile(np.arange(V), len(beams))
            order = np.lexsort((tok, par, -flat))
            order = [i for i in order[:width] if np.isfinite(flat[i])]
            new_alive = []
            for idx in order:
                bi, t = divmod(int(idx), V)
                toks, total, lps, _ = beams[bi]
                lpt = float(lp[bi, t])
                nb = (toks + [t], total + lpt, lps + [lpt], float(flat[idx]))
                emitted[t] += 1
                if t == EOS or last:
                    finished[g].append(
                        Hypothesis(nb[0], math.fsum(nb[2]), nb[2], strategy, seed, dropout, t != EOS)
                    )
                else:
                    new_alive.append(nb)
            alive[g] = new_alive if len(finished[g]) < width else []
    return finished, width


def beam_search(model, source, beam_size=5, n_best=1, *, steps=None, dropout_rng=None,
                dropout_rate=None, strategy="beam", seed=None):
    """Top ``n_best`` hypotheses by length-normalized log-prob."""
    if not beam_size >= n_best >= 1:
        raise ValueError("need beam_size >= n_best >= 1")
    dec = IncrementalDecoder(model, source, dropout_rng, dropout_rate)
    steps = max_steps(model, source) if steps is None else steps
    finished, _ = _beam_core(dec, beam_size, 1, 0.0, 0.0, steps, strategy, seed,
                             dropout_rng is not None)
    return _finalize(finished[0], n_best)


def greedy(model, source, **kw):
    return beam_search(model, source, 1, 1, **kw)[0]


def default_translation(model, source) -> Hypothesis:
    """Beam 5, top candidate only."""
    return beam_search(model, source, 5, 1, strategy="default")[0]


def diverse_beam_search(model, source, beam_size, groups, diversity, *, steps=None):
    """Hamming-diversity grouped beam search; each group keeps its own top
    beam_size/groups finished hypotheses, pooled and sorted."""
    dec = IncrementalDecoder(model, source)
    steps = max_steps(model, source) if steps is None else steps
    finished, width = _beam_core(dec, beam_size, groups, diversity, 0.0, steps, "dbs")
    pooled = [h for g in finished for h in _finalize(g, width)]
    return _finalize(pooled, len(pooled))


def diverse_decoding(model, source, beam_size, rate, n_best=None, *, steps=None):
    """Beam search where the k-th best child of each parent (k from 0) loses
    ``rate * k`` from its search score."""
    if rate < 0:
        raise ValueError("diversity rate must be >= 0")
    dec = IncrementalDecoder(model, source)
    steps = max_steps(model, source) if steps is None else steps
    finished, _ = _beam_core(dec, beam_size, 1, 0.0, rate, steps, "ddec")
    return _finalize(finished[0], n_best or beam_size)


def nucleus_index(probs: np.ndarray, u: float, p: float = 1.0) -> int:
    """Inverse-CDF draw from the smallest probability-sorted prefix whose mass
    reaches ``p`` (ties in probability broken by token id)."""
    order = np.lexsort((np.arange(probs.size), -probs))
    cum = np.cumsum(probs[order])
    k = cum.size
    if p < 1.0:
        k = min(int(np.searchsorted(cum, p * cum[-1], side="left")) + 1, cum.size)
    idx = int(np.searchsorted(cum[:k], u * cum[k - 1], side="right"))
    return int(order[min(idx, k - 1)])


def nucleus_sample(model, source, n, p, rng: Rng, *, steps=None, strategy="nucleus"):
    if not 0.0 < p <= 1.0:
        raise ValueError("nucleus p must be in (0, 1]")
    dec = IncrementalDecoder(model, source)
    steps = max_steps(model, source) if steps is None else steps
    seqs = [[] for _ in range(n)]
    lps = [[] for _ in range(n)]
    alive = list(range(n))
    for step in range(steps):
        if not alive:
            break
        logp = dec.step(np.array([[BOS, *seqs[i]] for i in alive], dtype=np.int64))
        us = rng.uniform(len(alive))
        still = []
        for row, i in enumerate(alive):
            probs = np.exp(logp[row])
            probs[PAD] = probs[BOS] = 0.0
            t = nucleus_index(probs, float(us[row]), p)
            seqs[i].append(t)
            lps[i].append(float(logp[row, t]))
            if t != EOS:
                still.append(i)
        alive = still
    return [
        Hypothesis(seqs[i], math.fsum(lps[i]), lps[i], strategy, rng.seed, False,
                   not seqs[i] or seqs[i][-1] != EOS)
        for i in range(n)
    ]


def sample(model, source, n, rng: Rng, **kw):
    """Ancestral sampling from the full distribution."""
    return nucleus_sample(model, source, n, 1.0, rng, strategy="sampling", **kw)


def mc_dropout_generate(model, source, n, mode="beam", beam_size=10, seed=0,
                        dropout_rate=None, *, steps=None):
    """``n`` decodes, the i-th under dropout masks drawn from Rng(seed + i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    width = 1 if mode == "greedy" else beam_size
    if mode not in ("greedy", "beam"):
        raise ValueError("mode must be 'greedy' or 'beam'")
    for i in range(n):
        h = beam_search(model, source, width, 1, steps=steps, dropout_rng=Rng(seed + i),
                        dropout_rate=dropout_rate, strategy=f"mc_{mode}", seed=seed + i)[0]
        out.append(h)
    return out


def generate(model, source, spec: GenSpec, seed: int | None = None) -> list:
    """Dispatch on ``spec.strategy``; returns ``spec.n`` hypotheses (1 for default)."""
    spec.validate()
    seed = spec.seed if seed is None else seed
    s = spec.strategy
    if s == "default":
        return [default_translation(model, source)]
    if s == "beam":
        return beam_search(model, source, spec.n, spec.n)
    if s == "sampling":
        return sample(model, source, spec.n, Rng(seed))
    if s == "nucleus":
        return nucleus_sample(model, source, spec.n, spec.p, Rng(seed))
    if s == "dbs":
        return diverse_beam_search(model, source, spec.n, spec.groups or spec.n, spec.diversity)
    if s == "ddec":
        return diverse_decoding(model, source, spec.n, spec.rate)
    if s == "mc_greedy":
        return mc_dropout_generate(model, source, spec.n, "greedy", seed=seed,
                                   dropout_rate=spec.dropout_rate)
    return mc_dropout_generate(model, source, spec.n, "beam", spec.beam_size, seed,
                               spec.dropout_rate)


def write_hypotheses(path, items) -> None:
    """``items``: iterable of (record_id, Hypothesis)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rid, h in items:
            fh.write(json.dumps(h.to_json(rid), sort_keys=True) + "\n")


def genspec_dict(spec: GenSpec) -> dict:
    return asdict(spec)


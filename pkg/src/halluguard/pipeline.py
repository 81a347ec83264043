"""Detect-then-rewrite: flag risky translations, generate alternatives, rerank."""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .corpus import HALLUCINATIONS, PathologyLabel, TranslationRecord, auto_label
from .decoding import GenSpec, generate
from .detectors import ORACLE_DETECTORS, Detector

log = logging.getLogger(__name__)


class PipelineError(ValueError):
    pass


@dataclass
class PipelineSpec:
    detector: str = "alti"
    fraction: float | None = 0.1
    threshold: float | None = None
    gen: GenSpec = field(default_factory=GenSpec)
    reranker: str = "alti"
    seed: int = 0
    mode: str = "flag"  # "flag" or "sample" (stratified sample, detector ignored)
    sample_per_label: int = 0
    allow_oracle: bool = False

    def validate(self) -> None:
        if (self.fraction is None) == (self.threshold is None):
            raise PipelineError("specify exactly one of fraction or threshold")
        if self.fraction is not None and not 0.0 <= self.fraction <= 1.0:
            raise PipelineError("fraction must be in [0, 1]")
        if self.reranker in ORACLE_DETECTORS and not self.allow_oracle:
            raise PipelineError(f"reranker {self.reranker!r} needs the reference; refusing")
        if self.mode not in ("flag", "sample"):
            raise PipelineError(f"unknown mode {self.mode!r}")
        self.gen.validate()


def record_seed(global_seed: int, record_id: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{record_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def flag(records, detector: str, fraction: float | None = None,
         threshold: float | None = None) -> list:
    """Records to rewrite, by top-k risk (k = ceil(fraction * N), ties by id)
    or by risk >= threshold. Uses the risk stored in ``record.scores``."""
    if (fraction is None) == (threshold is None):
        raise PipelineError("specify exactly one of fraction or threshold")
    for r in records:
        if detector not in r.scores:
            raise PipelineError(f"record {r.id!r} has no {detector!r} score")
    if threshold is not None:
        return [r for r in records if r.scores[detector] >= threshold]
    k = math.ceil(fraction * len(records) - 1e-12)
    ranked = sorted(records, key=lambda r: (-r.scores[detector], r.id))
    return ranked[:k]


@dataclass
class Rewrite:
    record_id: str
    output: list
    chosen_index: int
    candidates: list  # dicts: tokens, risk, strategy, seed, default
    fallback: bool = False


def rewrite(record: TranslationRecord, model, gen_spec: GenSpec, reranker: Detector,
            seed: int | None = None, allow_oracle: bool = False) -> Rewrite:
    """Pick the minimum-risk candidate among the current output and fresh
    hypotheses. Ties go to the current output, then to the smaller token list."""
    if not reranker.reference_free and not allow_oracle:
        raise PipelineError(f"reranker {reranker.name!r} is not reference-free")
    seed = gen_spec.seed if seed is None else seed
    hyps = generate(model, record.source_tokens, gen_spec, seed)
    default = list(record.output_tokens)
    cands = [{"tokens": default, "strategy": "default", "seed": None, "default": True}]
    seen = {tuple(default)}
    for h in hyps:
        out = h.output
        if not out or tuple(out) in seen:
            continue
        seen.add(tuple(out))
        cands.append({"tokens": out, "strategy": h.strategy, "seed": h.seed, "default": False})
    fallback = len(cands) == 1
    if fallback:
        log.info("record %s: no new non-empty candidates; keeping default", record.id)
    for c in cands:
        c["risk"] = reranker.score_output(record, c["tokens"]).risk
    best = min(range(len(cands)), key=lambda i: (cands[i]["risk"], not cands[i]["default"], cands[i]["tokens"]))
    return Rewrite(record.id, list(cands[best]["tokens"]), best, cands, fallback)


def label_counts(labels) -> dict:
    counts = {lab.value: 0 for lab in PathologyLabel}
    for lab in labels:
        counts[lab.value] += 1
    return counts


def hallucination_rate(labels) -> float:
    labels = list(labels)
    return sum(l in HALLUCINATIONS for l in labels) / max(len(labels), 1)


@dataclass
class MitigationResult:
    records: list  # final records (output replaced where rewritten)
    rewrites: dict  # id -> Rewrite
    before: list  # auto labels of the incoming outputs
    after: list

    def summary(self) -> dict:
        return {
            "n": len(self.records),
            "rewritten": len(self.rewrites),
            "before": label_counts(self.before),
            "after": label_counts(self.after),
            "hallucination_rate_before": hallucination_rate(self.before),
            "hallucination_rate_after": hallucination_rate(self.after),
        }


def _stratified_sample(records, per_label, seed):
    from .numerics import Rng

    rng = Rng(seed).child("stratified")
    chosen = []
    by_label: dict = {}
    for r in records:
        by_label.setdefault(auto_label(r.output_tokens, r.reference_tokens), []).append(r)
    for lab in PathologyLabel:
        group = sorted(by_label.get(lab, []), key=lambda r: r.id)
        if not group:
            continue
        idx = rng.permutation(len(group))[:per_label]
        chosen.extend(group[i] for i in sorted(idx))
    return chosen


def mitigate_corpus(records, spec: PipelineSpec, model, reranker: Detector,
                    threads: int = 1) -> MitigationResult:
    """Rewrite the flagged (or sampled) records; others pass through untouched."""
    spec.validate()
    if spec.mode == "flag":
        selected = flag(records, spec.detector, spec.fraction, spec.threshold)
    else:
        selected = _stratified_sample(records, spec.sample_per_label, spec.seed)
    ids = {r.id for r in selected}
    todo = [r for r in records if r.id in ids]

    def work(r):
        return rewrite(r, model, spec.gen, reranker, record_seed(spec.seed, r.id), spec.allow_oracle)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            done = list(pool.map(work, todo))
    else:
        done = [work(r) for r in todo]
    rewrites = {rw.record_id: rw for rw in done}
    final = []
    for r in records:
        out = rewrites[r.id].output if r.id in rewrites else list(r.output_tokens)
        final.append(TranslationRecord(r.id, r.source_tokens, r.reference_tokens, out, r.label))
    before = [auto_label(r.output_tokens, r.reference_tokens) for r in records]
    after = [auto_label(r.output_tokens, r.reference_tokens) for r in final]
    return MitigationResult(final, rewrites, before, after)

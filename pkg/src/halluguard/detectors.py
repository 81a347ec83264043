"""Hallucination detectors behind one interface, all mapped to a common risk
orientation (higher risk = more likely hallucinated)."""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attribution import attribute
from .corpus import detokenize
from .transformer import BOS, EOS, decode_logprobs

ORIENTATIONS = {
    "negate": lambda raw: -raw,
    "one_minus": lambda raw: 1.0 - raw,
    "identity": lambda raw: raw,
}

ORACLE_DETECTORS = frozenset({"chrf_pp"})


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class DetectionScore:
    detector: str
    raw: float
    orientation: str

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise DetectorError(f"unknown orientation {self.orientation!r}")
        if not math.isfinite(self.raw):
            raise DetectorError(f"{self.detector}: non-finite score")

    @property
    def risk(self) -> float:
        return ORIENTATIONS[self.orientation](self.raw)


# --------------------------------------------------------------------------
# internal signals

def seq_logprob(model, source, output) -> DetectionScore:
    """Mean per-token log-probability of ``output`` (EOS included), no dropout."""
    if len(output) == 0:
        raise DetectorError("seq_logprob needs a non-empty output")
    lp, _ = decode_logprobs(model, source, [BOS, *output, EOS])
    return DetectionScore("seq_logprob", float(lp.mean()), "negate")


def alti_risk(model, source, output, norm: int = 1) -> DetectionScore:
    if len(output) == 0:
        raise DetectorError("alti needs a non-empty output")
    res = attribute(model, source, output, norm)
    return DetectionScore("alti", res.aggregate, "one_minus")


# --------------------------------------------------------------------------
# external signals

def cosine_similarity_risk(encoder, source, output) -> DetectionScore:
    if len(source) == 0 or len(output) == 0:
        raise DetectorError("dual_cos needs non-empty source and output")
    try:
        cos = encoder.cosine(source, output)
    except ValueError as exc:
        raise DetectorError(str(exc)) from exc
    return DetectionScore("dual_cos", cos, "negate")


def bidirectional_product_risk(forward_score: float, backward_score: float) -> DetectionScore:
    """Product of forward and backward entailment-style probabilities."""
    for v in (forward_score, backward_score):
        if not 0.0 <= v <= 1.0:
            raise DetectorError(f"entailment probability {v} outside [0, 1]")
    return DetectionScore("bidir_product", forward_score * backward_score, "one_minus")


# --------------------------------------------------------------------------
# chrF++

def _char_ngrams(text: str, n: int) -> Counter:
    s = "".join(text.split())
    return Counter(s[i : i + n] for i in range(len(s) - n + 1))


def _word_ngrams(text: str, n: int) -> Counter:
    w = text.split()
    return Counter(tuple(w[i : i + n]) for i in range(len(w) - n + 1))


def chrf_statistics(hypothesis: str, reference: str, char_order=6, word_order=2) -> list:
    """Per-order (hyp count, ref count, matches), char orders then word orders."""
    stats = []
    for n in range(1, char_order + 1):
        h, r = _char_ngrams(hypothesis, n), _char_ngrams(reference, n)
        stats.append((sum(h.values()), sum(r.values()), sum((h & r).values())))
    for n in range(1, word_order + 1):
        h, r = _word_ngrams(hypothesis, n), _word_ngrams(reference, n)
        stats.append((sum(h.values()), sum(r.values()), sum((h & r).values())))
    return stats


def chrf_from_statistics(stats, beta: float = 2.0) -> float:
    prec = rec = 0.0
    eff = 0
    for n_hyp, n_ref, n_match in stats:
        if n_hyp > 0 and n_ref > 0:
            prec += n_match / n_hyp
            rec += n_match / n_ref
            eff += 1
    if eff == 0:
        return 0.0
    prec /= eff
    rec /= eff
    if prec + rec == 0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * prec * rec / (b2 * prec + rec)


def chrf_pp(output_text: str, reference_text: str, beta: float = 2.0) -> float:
    """Sentence chrF++ in [0, 100]: char 1..6-grams plus word 1..2-grams."""
    if not reference_text.strip():
        raise DetectorError("chrF++ needs a non-empty reference")
    return chrf_from_statistics(chrf_statistics(output_text, reference_text), beta)


def corpus_chrf_pp(outputs, references, beta: float = 2.0) -> float:
    totals = None
    for o, r in zip(outputs, references):
        st = np.array(chrf_statistics(o, r), dtype=np.int64)
        totals = st if totals is None else totals + st
    if totals is None:
        raise DetectorError("empty corpus")
    return chrf_from_statistics([tuple(int(v) for v in row) for row in totals], beta)


def chrf_score(output, reference, vocab) -> DetectionScore:
    return DetectionScore(
        "chrf_pp", chrf_pp(detokenize(output, vocab), detokenize(reference, vocab)), "negate"
    )


# --------------------------------------------------------------------------
# score files

SCORE_HEADER = ["id", "detector", "raw", "orientation"]


def export_scores(path, scores: dict) -> None:
    """``scores``: id -> list of DetectionScore. Floats written with repr()."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for rid in sorted(scores):
            for s in sorted(scores[rid], key=lambda s: s.detector):
                w.writerow([rid, s.detector, repr(s.raw), s.orientation])


def import_scores(path, known_ids=None, prefix: str = "") -> dict:
    """TSV -> {id: {detector: DetectionScore}}. Detector names gain ``prefix``."""
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise DetectorError(f"{path}: header must be {' '.join(SCORE_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 4:
                raise DetectorError(f"{path}:{lineno}: malformed row (expected 4 fields)")
            rid, det, raw, orient = row
            if known_ids is not None and rid not in known_ids:
                raise DetectorError(f"{path}:{lineno}: unknown id {rid!r}")
            try:
                value = float(raw)
            except ValueError:
                raise DetectorError(f"{path}:{lineno}: malformed raw value {raw!r}") from None
            name = prefix + det
            if name in out.get(rid, {}):
                raise DetectorError(f"{path}:{lineno}: duplicate score for id {rid!r}, detector {det!r}")
            try:
                out.setdefault(rid, {})[name] = DetectionScore(name, value, orient)
            except DetectorError as exc:
                raise DetectorError(f"{path}:{lineno}: {exc}") from None
    return out


# --------------------------------------------------------------------------
# registry

@dataclass
class Detector:
    """Uniform wrapper: ``fn(record) -> DetectionScore``."""

    name: str
    fn: Callable
    reference_free: bool = True

    def __call__(self, record) -> DetectionScore:
        return self.fn(record)

    def score_output(self, record, output) -> DetectionScore:
        """Score an alternative output for the same source."""
        return self.fn(_with_output(record, output))


def _with_output(record, output):
    from .corpus import TranslationRecord

    return TranslationRecord(
        record.id, record.source_tokens, record.reference_tokens, list(output), record.label
    )


def make_detector(name: str, model=None, encoder=None, vocab=None, bidir_backend=None,
                  imported=None, norm: int = 1) -> Detector:
    """Build a detector from its registry name.

    ``bidir_backend(source, output) -> (forward, backward)``; ``imported`` maps
    id -> {detector: DetectionScore} for ``imported:<name>`` detectors.
    """
    def need(obj, what):
        if obj is None:
            raise DetectorError(f"detector {name!r} requires {what}")
        return obj

    if name == "seq_logprob":
        m = need(model, "a translation model")
        return Detector(name, lambda r: seq_logprob(m, r.source_tokens, r.output_tokens))
    if name == "alti":
        m = need(model, "a translation model")
        return Detector(name, lambda r: alti_risk(m, r.source_tokens, r.output_tokens, norm))
    if name == "dual_cos":
        e = need(encoder, "a dual encoder")
        return Detector(name, lambda r: cosine_similarity_risk(e, r.source_tokens, r.output_tokens))
    if name == "bidir_product":
        b = need(bidir_backend, "an entailment backend")
        return Detector(name, lambda r: bidirectional_product_risk(*b(r.source_tokens, r.output_tokens)))
    if name == "chrf_pp":
        v = need(vocab, "a vocabulary")
        return Detector(name, lambda r: chrf_score(r.output_tokens, r.reference_tokens, v), False)
    if name.startswith("imported:"):
        table = need(imported, "an imported score table")

        def lookup(r):
            try:
                return table[r.id][name]
            except KeyError:
                raise DetectorError(f"no {name} score for record {r.id!r}") from None

        return Detector(name, lookup)
    raise DetectorError(f"unknown detector {name!r}")

"""Synthetic cipher corpora and induced, auto-labelled translation pathologies.

Reference = bijective token substitution of the source, then each block of
``window`` consecutive tokens reversed (window 2 swaps adjacent pairs).
"""
from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng
from .transformer import N_SPECIAL


class PathologyLabel(enum.Enum):
    Correct = "Correct"
    Error = "Error"
    Undertranslation = "Undertranslation"
    StronglyDetached = "StronglyDetached"
    Oscillatory = "Oscillatory"
    FullyDetached = "FullyDetached"

    @property
    def severity(self) -> int:
        return _SEVERITY[self]

    @property
    def is_hallucination(self) -> bool:
        return self in HALLUCINATIONS


_SEVERITY = {
    PathologyLabel.Correct: 0,
    PathologyLabel.Error: 1,
    PathologyLabel.Undertranslation: 2,
    PathologyLabel.StronglyDetached: 3,
    PathologyLabel.Oscillatory: 3,
    PathologyLabel.FullyDetached: 4,
}
HALLUCINATIONS = frozenset(
    {PathologyLabel.FullyDetached, PathologyLabel.StronglyDetached, PathologyLabel.Oscillatory}
)


class CorpusError(ValueError):
    pass


@dataclass
class TranslationRecord:
    id: str
    source_tokens: list
    reference_tokens: list
    output_tokens: list
    label: PathologyLabel = PathologyLabel.Correct
    scores: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        row = {
            "id": self.id,
            "src": [int(t) for t in self.source_tokens],
            "ref": [int(t) for t in self.reference_tokens],
            "out": [int(t) for t in self.output_tokens],
            "label": self.label.value,
        }
        if self.scores:
            row["scores"] = {k: float(v) for k, v in sorted(self.scores.items())}
        return row

    @classmethod
    def from_json(cls, row: dict) -> "TranslationRecord":
        try:
            return cls(
                id=str(row["id"]),
                source_tokens=list(row["src"]),
                reference_tokens=list(row["ref"]),
                output_tokens=list(row["out"]),
                label=PathologyLabel(row.get("label", "Correct")),
                scores={k: float(v) for k, v in row.get("scores", {}).items()},
            )
        except (KeyError, ValueError) as exc:
            raise CorpusError(f"record {row.get('id', '?')}: {exc}") from exc


@dataclass
class CorpusSpec:
    vocab_size: int = 64
    min_len: int = 5
    max_len: int = 12
    window: int = 2
    branching: int = 3
    n_train: int = 5000
    n_dev: int = 200
    n_eval: int = 1000
    mix: dict = field(
        default_factory=lambda: {
            "Correct": 0.5,
            "Error": 0.1,
            "Undertranslation": 0.1,
            "StronglyDetached": 0.1,
            "Oscillatory": 0.1,
            "FullyDetached": 0.1,
        }
    )
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size - N_SPECIAL < 2:
            raise CorpusError("vocab too small for a substitution bijection")
        if self.branching < 0 or self.branching > self.vocab_size - N_SPECIAL:
            raise CorpusError("branching must be in [0, number of content tokens]")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusError("invalid sentence length range")
        if abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise CorpusError("pathology mix proportions must sum to 1")
        for name in self.mix:
            PathologyLabel(name)


@dataclass
class Cipher:
    table: np.ndarray  # table[src_id] = tgt_id over the full vocab; specials fixed
    window: int

    def translate(self, source) -> list:
        mapped = [int(self.table[t]) for t in source]
        return reorder(mapped, self.window)

    def invert(self, reference) -> list:
        inv = np.empty_like(self.table)
        inv[self.table] = np.arange(self.table.size)
        return [int(inv[t]) for t in reorder(list(reference), self.window)]


def reorder(tokens: list, window: int) -> list:
    """Reverse consecutive blocks of ``window`` tokens; an involution."""
    if window <= 1:
        return list(tokens)
    out = []
    for i in range(0, len(tokens), window):
        out.extend(reversed(tokens[i : i + window]))
    return out


def make_cipher(spec: CorpusSpec, rng: Rng, identity: bool = False) -> Cipher:
    table = np.arange(spec.vocab_size)
    if not identity:
        table[N_SPECIAL:] = N_SPECIAL + rng.permutation(spec.vocab_size - N_SPECIAL)
    return Cipher(table, spec.window)


def source_chain(spec: CorpusSpec, rng: Rng):
    """First-order Markov chain over content tokens: each token has
    ``branching`` successors with Dirichlet(1) weights. ``None`` means i.i.d.
    uniform tokens (branching 0)."""
    n = spec.vocab_size - N_SPECIAL
    if spec.branching == 0:
        return None
    succ = np.stack([rng.permutation(n)[: spec.branching] for _ in range(n)])
    weights = rng.dirichlet(np.ones(spec.branching), size=n)
    return succ + N_SPECIAL, weights


def sample_source(chain, length: int, rng: Rng, vocab_size: int) -> list:
    if chain is None:
        return [int(t) for t in rng.integers(N_SPECIAL, vocab_size, length)]
    succ, weights = chain
    cum = np.cumsum(weights, axis=1)
    tok = int(rng.integers(0, succ.shape[0]))
    out = [tok + N_SPECIAL]
    while len(out) < length:
        k = min(int(np.searchsorted(cum[tok], rng.uniform(), side="right")), succ.shape[1] - 1)
        tok = int(succ[tok, k]) - N_SPECIAL
        out.append(tok + N_SPECIAL)
    return out


@dataclass
class Corpus:
    spec: CorpusSpec
    cipher: Cipher
    train: list
    dev: list
    eval: list


def generate_corpus(spec: CorpusSpec, identity: bool = False) -> Corpus:
    """Disjoint train/dev/eval splits of (source, reference) pairs."""
    spec.validate()
    rng = Rng(spec.seed).child("corpus")
    cipher = make_cipher(spec, rng.child("cipher"), identity)
    total = spec.n_train + spec.n_dev + spec.n_eval
    n_content = spec.vocab_size - N_SPECIAL
    capacity = sum(n_content**L for L in range(spec.min_len, spec.max_len + 1))
    if capacity < total:
        raise CorpusError("vocabulary/length range too small for disjoint splits")
    chain = source_chain(spec, rng.child("chain"))
    sent_rng = rng.child("sentences")
    seen: set = set()
    pairs = []
    while len(pairs) < total:
        L = int(sent_rng.integers(spec.min_len, spec.max_len + 1))
        src = tuple(sample_source(chain, L, sent_rng, spec.vocab_size))
        if src in seen:
            continue
        seen.add(src)
        pairs.append((list(src), cipher.translate(src)))
    a, b = spec.n_train, spec.n_train + spec.n_dev
    return Corpus(spec, cipher, pairs[:a], pairs[a:b], pairs[b:])


# --------------------------------------------------------------------------
# pathologies

def _top_ngram_count(tokens: list) -> int:
    best = 0
    for n in (2, 3):
        counts = Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
        if counts:
            best = max(best, max(counts.values()))
    return best


def token_overlap(output: list, reference: list) -> float:
    """Multiset overlap normalized by the longer sequence."""
    if not output and not reference:
        return 1.0
    common = sum((Counter(output) & Counter(reference)).values())
    return common / max(len(output), len(reference))


def edit_distance(a: list, b: list) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _unrelated_tokens(reference: list, vocab_size: int) -> np.ndarray:
    used = set(reference)
    return np.array([t for t in range(N_SPECIAL, vocab_size) if t not in used])


def induce_pathology(
    record: TranslationRecord,
    label: PathologyLabel,
    rng: Rng,
    donors: list | None = None,
    vocab_size: int = 64,
) -> list:
    """Perturbed output tokens exhibiting ``label`` relative to the reference.

    ``donors`` is a pool of other references; FullyDetached needs one with no
    token in common with this reference.
    """
    ref = list(record.reference_tokens)
    if not ref:
        raise CorpusError(f"record {record.id}: empty reference")
    L = len(ref)
    if label is PathologyLabel.Correct:
        return ref
    if label is PathologyLabel.Error:
        out = list(ref)
        k = 1 + int(rng.integers(0, 2)) if L > 1 else 1
        for pos in rng.choice(L, size=min(k, L), replace=False):
            choices = [t for t in range(N_SPECIAL, vocab_size) if t != ref[pos]]
            out[pos] = int(rng.choice(choices))
        return out
    if label is PathologyLabel.Undertranslation:
        keep = max(1, int(rng.integers(1, L // 2 + 1))) if L >= 2 else 1
        return ref[:keep]
    if label is PathologyLabel.Oscillatory:
        n = int(rng.integers(2, 4))
        n = min(n, L)
        start = int(rng.integers(0, L - n + 1))
        gram = ref[start : start + n]
        out = ref[:start]
        target = max(int(np.ceil(1.5 * L)), start + 3 * n)
        while len(out) < target:
            out.extend(gram)
        return out
    if label is PathologyLabel.StronglyDetached:
        pool = _unrelated_tokens(ref, vocab_size)
        if pool.size == 0:
            raise CorpusError(f"record {record.id}: no unrelated tokens available")
        lo = int(np.ceil(0.5 * L))
        hi = max(lo, L - max(1, int(np.ceil(0.1 * L))))
        span = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, L - span + 1))
        filler = [int(t) for t in rng.choice(pool, size=span)]
        return ref[:start] + filler + ref[start + span :]
    if label is PathologyLabel.FullyDetached:
        used = set(ref)
        candidates = [d for d in (donors or []) if d and not used.intersection(d)]
        if not candidates:
            raise CorpusError(f"record {record.id}: no unrelated donor sentence in corpus")
        return list(candidates[int(rng.integers(0, len(candidates)))])
    raise CorpusError(f"unknown label {label}")


def auto_label(output: list, reference: list) -> PathologyLabel:
    """Oracle labeller for synthetic data (repetition, truncation, edit distance,
    then bag-of-token overlap)."""
    output, reference = list(output), list(reference)
    if output == reference:
        return PathologyLabel.Correct
    L = max(len(reference), 1)
    ratio = len(output) / L
    if ratio >= 1.5 and _top_ngram_count(output) >= 3:
        return PathologyLabel.Oscillatory
    if output and ratio <= 0.5 and reference[: len(output)] == output:
        return PathologyLabel.Undertranslation
    if edit_distance(output, reference) <= 2:
        return PathologyLabel.Error
    overlap = token_overlap(output, reference)
    if overlap < 0.1:
        return PathologyLabel.FullyDetached
    if overlap <= 0.5:
        return PathologyLabel.StronglyDetached
    return PathologyLabel.Error


def build_eval_records(
    corpus: Corpus,
    mix: dict | None = None,
    n: int | None = None,
    seed: int | None = None,
    stratified: dict | None = None,
) -> list:
    """Eval pairs turned into records with induced outputs.

    Either ``stratified`` (label name -> count) or ``mix`` proportions over the
    first ``n`` eval pairs. Labels are assigned in a seeded shuffled order.
    """
    spec = corpus.spec
    seed = spec.seed if seed is None else seed
    rng = Rng(seed).child("pathology")
    pairs = corpus.eval
    if stratified is not None:
        labels = [PathologyLabel(k) for k, c in stratified.items() for _ in range(c)]
    else:
        mix = spec.mix if mix is None else mix
        n = len(pairs) if n is None else n
        counts = {k: int(round(v * n)) for k, v in mix.items()}
        drift = n - sum(counts.values())
        first = next(iter(counts))
        counts[first] += drift
        labels = [PathologyLabel(k) for k, c in counts.items() for _ in range(c)]
    if len(labels) > len(pairs):
        raise CorpusError("not enough eval pairs for the requested records")
    order = rng.permutation(len(labels))
    labels = [labels[i] for i in order]
    donors = [ref for _, ref in pairs]
    records = []
    for i, label in enumerate(labels):
        src, ref = pairs[i]
        rec = TranslationRecord(f"eval-{i:05d}", src, ref, list(ref), label)
        rec.output_tokens = induce_pathology(
            rec, label, rng.child("induce", i), donors, spec.vocab_size
        )
        records.append(rec)
    return records


# --------------------------------------------------------------------------
# files

_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]


def vocab_strings(vocab_size: int) -> list:
    """Printable word for every id; used for chrF++ and human inspection."""
    words = ["<pad>", "<s>", "</s>"]
    for i in range(vocab_size - N_SPECIAL):
        a = _SYLLABLES[i % len(_SYLLABLES)]
        b = _SYLLABLES[(i * 7 + 3) % len(_SYLLABLES)]
        words.append(a + b if i < len(_SYLLABLES) else a + b + str(i // len(_SYLLABLES)))
    return words


def detokenize(tokens, vocab: list) -> str:
    return " ".join(vocab[t] for t in tokens)


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            row = rec.to_json() if isinstance(rec, TranslationRecord) else rec
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_records(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            records.append(TranslationRecord.from_json(row))
    return records


def pairs_to_records(pairs, prefix: str) -> list:
    return [
        TranslationRecord(f"{prefix}-{i:05d}", s, r, list(r)) for i, (s, r) in enumerate(pairs)
    ]


def records_to_pairs(records) -> list:
    return [(r.source_tokens, r.reference_tokens) for r in records]


def write_corpus(corpus: Corpus, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for split in ("train", "dev", "eval"):
        path = out / f"{split}.jsonl"
        write_jsonl(path, pairs_to_records(getattr(corpus, split), split))
        files[split] = path.name
    vocab = {
        "vocab_size": corpus.spec.vocab_size,
        "words": vocab_strings(corpus.spec.vocab_size),
        "substitution": [int(t) for t in corpus.cipher.table],
        "window": corpus.cipher.window,
        "spec": asdict(corpus.spec),
    }
    (out / "vocab.json").write_text(json.dumps(vocab, indent=1, sort_keys=True) + "\n")
    files["vocab"] = "vocab.json"
    return files


def load_vocab(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)

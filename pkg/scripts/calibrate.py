"""Train the default translator on the default corpus and report eval quality.

    python scripts/calibrate.py [--out model.ckpt] [--detach-noise 0.1]
"""
import argparse
import logging
import time

from halluguard.corpus import CorpusSpec, detokenize, generate_corpus, vocab_strings
from halluguard.decoding import default_translation
from halluguard.detectors import corpus_chrf_pp
from halluguard.numerics import Rng
from halluguard.trainer import TrainSpec, train_translator
from halluguard.transformer import ModelConfig, TransformerModel, save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="model.ckpt")
    ap.add_argument("--detach-noise", type=float, default=TrainSpec.detach_noise)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    corpus = generate_corpus(CorpusSpec(seed=args.seed))
    model = TransformerModel.init(ModelConfig(), Rng(args.seed).child("init"))
    t0 = time.perf_counter()
    model, _ = train_translator(model, corpus.train,
                                TrainSpec(detach_noise=args.detach_noise, seed=args.seed), corpus.dev)
    minutes = (time.perf_counter() - t0) / 60
    save_checkpoint(model, args.out)

    vocab = vocab_strings(corpus.spec.vocab_size)
    hyps = [detokenize(default_translation(model, s).output, vocab) for s, _ in corpus.eval]
    refs = [detokenize(r, vocab) for _, r in corpus.eval]
    exact = sum(default_translation(model, s).output == r for s, r in corpus.eval[:200]) / 200
    print(f"training {minutes:.1f} min; eval chrF++ {corpus_chrf_pp(hyps, refs):.2f}; "
          f"exact match (first 200) {exact:.3f}")


if __name__ == "__main__":
    main()

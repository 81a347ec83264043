import math

import numpy as np
import pytest

from halluguard.corpus import CorpusSpec, generate_corpus
from halluguard.numerics import Rng, Tensor, check_gradients
from halluguard.trainer import (
    DualEncoder,
    DualEncoderConfig,
    DualEncoderSpec,
    TrainSpec,
    TrainingDiverged,
    additive_margin_loss,
    batch_loss,
    learning_rate,
    sample_batch,
    train_dual_encoder,
    train_translator,
    write_curve,
)
from halluguard.transformer import BOS, EOS, ModelConfig, TransformerModel, decode_logprobs

from conftest import TOY, random_model

TINY_PAIRS = [([3, 4, 5], [5, 6, 3]), ([6, 3], [4, 4, 5]), ([5, 5, 6, 4], [3, 6])]


def test_spec_validation():
    with pytest.raises(ValueError):
        TrainSpec(steps=10, warmup=20).validate()
    with pytest.raises(ValueError):
        TrainSpec(label_smoothing=0.4).validate()
    TrainSpec(steps=0).validate()


def test_schedule_warmup_then_inverse_sqrt():
    spec = TrainSpec(lr=1.0, warmup=100)
    assert learning_rate(spec, 50) == pytest.approx(0.5)
    assert learning_rate(spec, 100) == pytest.approx(1.0)
    assert learning_rate(spec, 400) == pytest.approx(0.5)


def test_zero_steps_leaves_model_unchanged(toy_model):
    before = {k: t.data.copy() for k, t in toy_model.params.items()}
    _, curve = train_translator(toy_model, TINY_PAIRS, TrainSpec(steps=0, warmup=0))
    assert curve == []
    assert all(np.array_equal(before[k], t.data) for k, t in toy_model.params.items())


def test_empty_corpus_rejected(toy_model):
    with pytest.raises(ValueError):
        train_translator(toy_model, [], TrainSpec(steps=1, warmup=1))


def test_unsmoothed_loss_is_mean_negative_logprob(toy_model):
    loss = batch_loss(toy_model, TINY_PAIRS).data.item()
    lps = np.concatenate([decode_logprobs(toy_model, s, [BOS, *r, EOS])[0] for s, r in TINY_PAIRS])
    assert loss == pytest.approx(-lps.mean(), abs=1e-9)


def test_loss_gradients_at_random_init():
    cfg = ModelConfig(vocab_size=7, d_model=4, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                      d_ffn=4, dropout_rate=0.0, max_len=8)
    model = random_model(cfg, 5)
    names = sorted(model.params)

    def fn(*tensors):
        return batch_loss(TransformerModel(cfg, dict(zip(names, tensors))), TINY_PAIRS, 0.1)

    rep = check_gradients(fn, [model.params[n].data for n in names])
    assert rep.max_rel_error < 1e-4


def test_detach_noise_swaps_targets():
    pairs = [([3 + i], [10 + i]) for i in range(20)]
    batch = sample_batch(pairs, TrainSpec(batch_size=2000, detach_noise=0.25), Rng(0))
    swapped = np.mean([r[0] - 10 != s[0] - 3 for s, r in batch])
    assert 0.2 < swapped < 0.27  # a donor can be the pair itself
    clean = sample_batch(pairs, TrainSpec(batch_size=200, detach_noise=0.0), Rng(0))
    assert all(r[0] - 10 == s[0] - 3 for s, r in clean)


def test_training_is_deterministic_and_lowers_dev_loss(toy_model):
    spec = TrainSpec(steps=30, warmup=5, batch_size=4, eval_every=10, lr=5e-3)
    a = random_model(TOY, 3)
    _, ca = train_translator(a, TINY_PAIRS, spec, TINY_PAIRS)
    _, cb = train_translator(toy_model, TINY_PAIRS, spec, TINY_PAIRS)
    assert all(a.params[k].data.tobytes() == toy_model.params[k].data.tobytes() for k in a.params)
    assert ca[-1][2] < ca[0][2]


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergence_is_reported():
    model = random_model(TOY, 0, scale=1e200)
    with pytest.raises(TrainingDiverged, match="step 1"):
        train_translator(model, TINY_PAIRS, TrainSpec(steps=2, warmup=1))


def test_overfits_ten_pairs():
    spec = CorpusSpec(vocab_size=16, n_train=10, n_dev=0, n_eval=0, min_len=4, max_len=6)
    pairs = generate_corpus(spec).train
    cfg = ModelConfig(vocab_size=16, d_model=32, n_heads=4, n_enc_layers=2, n_dec_layers=2,
                      d_ffn=64, dropout_rate=0.0, max_len=16)
    model = TransformerModel.init(cfg, Rng(0))
    train_translator(model, pairs, TrainSpec(steps=300, warmup=30, batch_size=10, lr=3e-3,
                                             label_smoothing=0.0, detach_noise=0.0))
    per_token = np.concatenate([decode_logprobs(model, s, [BOS, *r, EOS])[0] for s, r in pairs])
    assert per_token.mean() > -0.05


def test_curve_csv(tmp_path):
    write_curve([(0, float("nan"), 2.5), (1, 2.0, float("nan"))], tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == ["step,train_loss,dev_loss", "0,,2.5", "1,2.0,"]


class TestDualEncoder:
    def test_single_pair_batch_has_zero_loss(self):
        enc = DualEncoder.init(DualEncoderConfig(vocab_size=8, dim=4), Rng(0))
        loss = additive_margin_loss(enc.embed([[3, 4]], "src"), enc.embed([[5]], "tgt"), 0.0, 0.05)
        assert loss.data.item() == 0.0

    def test_identical_sentences_shared_table(self):
        enc = DualEncoder.init(DualEncoderConfig(vocab_size=8, dim=4, shared=True), Rng(0))
        assert enc.cosine([3, 4, 5], [3, 4, 5]) == pytest.approx(1.0, abs=1e-12)

    def test_empty_sentence_rejected(self):
        enc = DualEncoder.init(DualEncoderConfig(vocab_size=8, dim=4), Rng(0))
        with pytest.raises(ValueError):
            enc.cosine([], [3])

    def test_margin_strictly_increases_loss(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.normal(size=(4, 3))
            b = rng.normal(size=(4, 3))
            a /= np.linalg.norm(a, axis=1, keepdims=True)
            b /= np.linalg.norm(b, axis=1, keepdims=True)
            base = additive_margin_loss(Tensor(a), Tensor(b), 0.0, 0.5).data.item()
            for m in (0.05, 0.3):
                assert additive_margin_loss(Tensor(a), Tensor(b), m, 0.5).data.item() > base

    def test_loss_gradients(self):
        cfg = DualEncoderConfig(vocab_size=8, dim=4)
        enc = DualEncoder.init(cfg, Rng(1))
        names = sorted(enc.params)
        src = [[3, 4, 5], [6, 7], [3, 3, 7, 5]]
        tgt = [[5, 4], [7, 6, 3], [4, 4, 6]]

        def fn(*tensors):
            e = DualEncoder(cfg, dict(zip(names, tensors)))
            return additive_margin_loss(e.embed(src, "src"), e.embed(tgt, "tgt"), 0.3, 0.5)

        assert check_gradients(fn, [enc.params[n].data for n in names]).max_rel_error < 1e-4

    def test_trained_encoder_ranks_translations(self, corpus):
        enc, curve = train_dual_encoder(corpus.train, DualEncoderSpec(steps=300))
        assert np.mean([l for _, l in curve[-20:]]) < np.mean([l for _, l in curve[:20]])
        rng = np.random.default_rng(0)
        wins = 0
        for _ in range(200):
            i, j = rng.choice(len(corpus.eval), 2, replace=False)
            s, r = corpus.eval[i]
            wins += enc.cosine(s, r) > enc.cosine(s, corpus.eval[j][1])
        assert wins / 200 >= 0.95

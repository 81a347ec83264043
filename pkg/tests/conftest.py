import time

import numpy as np
import pytest
from hypothesis import settings

from halluguard.corpus import CorpusSpec, generate_corpus
from halluguard.numerics import Rng, Tensor
from halluguard.trainer import DualEncoderSpec, TrainSpec, train_dual_encoder, train_translator
from halluguard.transformer import ModelConfig, TransformerModel, param_shapes

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_model(config: ModelConfig, seed: int = 0, scale: float = 0.5) -> TransformerModel:
    """Every parameter (biases and LN gains included) drawn at random."""
    rng = Rng(seed).child("random_model")
    params = {}
    for name, shape in sorted(param_shapes(config).items()):
        arr = rng.normal(shape, scale)
        if name.endswith(".g"):
            arr = 1.0 + arr * 0.3
        params[name] = Tensor(arr, requires_grad=True)
    return TransformerModel(config, params)


TOY = ModelConfig(vocab_size=7, d_model=4, n_heads=2, n_enc_layers=2, n_dec_layers=2,
                  d_ffn=8, dropout_rate=0.2, max_len=12)


@pytest.fixture
def toy_model():
    return random_model(TOY, 3)


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(CorpusSpec())


@pytest.fixture(scope="session")
def calibrated(corpus):
    """The default-spec model trained on the default corpus (shared, ~3 min)."""
    t0 = time.perf_counter()
    model = TransformerModel.init(ModelConfig(), Rng(0).child("init"))
    model, curve = train_translator(model, corpus.train, TrainSpec(), corpus.dev)
    return {"model": model, "curve": curve, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def dual_encoder(corpus):
    enc, curve = train_dual_encoder(corpus.train, DualEncoderSpec())
    return enc


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from verdicts import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from halluguard.attribution import (
    AttributionError,
    attribute,
    decoder_source_attribution,
    encoder_rollout,
    sublayer_contributions,
    trace_contributions,
)
from halluguard.corpus import PathologyLabel, build_eval_records
from halluguard.transformer import BOS, EOS, ModelConfig, decode_logprobs, encode

from conftest import TOY, random_model
from oracles import alti_toy_matrix, unrolled_source_share


def stochastic(rng, rows, cols):
    m = rng.random((rows, cols))
    return m / m.sum(axis=1, keepdims=True)


def _toy_check(model, kind, src, tgt):
    _, trace = decode_logprobs(model, src, tgt)
    p = model.named_arrays()
    rec = next(r for r in trace if r["kind"] == kind)
    got = sublayer_contributions(rec, p).matrix
    pre, ln = rec["prefix"], rec["ln"]
    want = alti_toy_matrix(
        rec["x"][0].tolist(), rec["kv"][0].tolist(), rec["alpha"][0].tolist(),
        p[pre + ".wv"].tolist(), p[pre + ".bv"].tolist(), p[pre + ".wo"].tolist(),
        p[pre + ".bo"].tolist(), p[ln + ".g"].tolist(), p[ln + ".b"].tolist(),
        rec["ln_eps"], self_attention=kind != "dec_cross", causal=kind == "dec_self",
    )
    np.testing.assert_allclose(got, want, atol=1e-10)


class TestSublayer:
    TOY2 = ModelConfig(vocab_size=6, d_model=2, n_heads=1, n_enc_layers=1, n_dec_layers=1,
                       d_ffn=3, dropout_rate=0.0, max_len=8)

    def test_single_token_is_identity(self, toy_model):
        _, trace = encode(toy_model, [4])
        for rec in trace:
            if rec["kind"] == "enc_self":
                assert sublayer_contributions(rec, toy_model.named_arrays()).matrix.tolist() == [[1.0]]

    @pytest.mark.parametrize("seed", [0, 1, 2])
    @pytest.mark.parametrize("kind", ["enc_self", "dec_cross"])
    def test_matches_hand_unrolled_toy(self, seed, kind):
        _toy_check(random_model(self.TOY2, seed), kind, [3, 5, 4], [BOS, 4, 5, EOS])

    def test_two_head_model_matches_oracle(self, toy_model):
        for kind in ("enc_self", "dec_self", "dec_cross"):
            _toy_check(toy_model, kind, [3, 5, 4, 6], [BOS, 4, 5, 3, EOS])

    def test_zero_value_projection_leaves_only_residual(self, toy_model):
        for n in ("dec.0.cross.wv", "dec.0.cross.bv"):
            toy_model.params[n].data[:] = 0.0
        _, trace = decode_logprobs(toy_model, [3, 4, 5], [BOS, 6, 3, EOS])
        rec = next(r for r in trace if r["kind"] == "dec_cross" and r["layer"] == 0)
        m = sublayer_contributions(rec, toy_model.named_arrays()).matrix
        assert np.all(m[:, :3] == 0.0)
        np.testing.assert_allclose(m[:, 3:], np.eye(3), atol=1e-12)

    def test_mismatched_trace_is_rejected(self, toy_model):
        _, trace = decode_logprobs(toy_model, [3, 4], [BOS, 5, EOS])
        other = random_model(TOY, 99).named_arrays()
        with pytest.raises(AttributionError, match="reconstruction"):
            trace_contributions(trace, other)

    def test_causal_and_stochastic(self, toy_model):
        _, trace = decode_logprobs(toy_model, [3, 4, 5], [BOS, 6, 3, 4, EOS])
        for c in sum(trace_contributions(trace, toy_model.named_arrays()), []):
            np.testing.assert_allclose(c.matrix.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(c.matrix >= 0) and c.residual < 1e-6
            if c.kind == "dec_self":
                assert np.all(np.triu(c.matrix, 1) == 0)

    def test_l2_switch(self, toy_model):
        _, trace = decode_logprobs(toy_model, [3, 4, 5], [BOS, 6, EOS])
        rec = next(r for r in trace if r["kind"] == "enc_self")
        a = sublayer_contributions(rec, toy_model.named_arrays(), norm=1).matrix
        b = sublayer_contributions(rec, toy_model.named_arrays(), norm=2).matrix
        np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-12)
        assert not np.allclose(a, b)


class TestRollout:
    def test_identity_layers(self):
        assert encoder_rollout([np.eye(3)] * 3).tolist() == np.eye(3).tolist()

    def test_single_layer(self):
        m = stochastic(np.random.default_rng(0), 3, 3)
        np.testing.assert_array_equal(encoder_rollout([m]), m)

    def test_two_layers_match_brute_force(self):
        rng = np.random.default_rng(1)
        a, b = stochastic(rng, 3, 3), stochastic(rng, 3, 3)
        brute = [[sum(b[i][k] * a[k][j] for k in range(3)) for j in range(3)] for i in range(3)]
        out = encoder_rollout([a, b])
        np.testing.assert_allclose(out, brute, atol=1e-15)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            encoder_rollout([np.eye(3), np.eye(2)])


class TestDecoderRecursion:
    def test_fully_source_attributed_layer(self):
        rng = np.random.default_rng(0)
        S, T = 3, 2
        cross = np.concatenate([stochastic(rng, T, S), np.zeros((T, T))], axis=1)
        res = decoder_source_attribution([np.tril(np.ones((T, T))) / [[1], [2]]], [cross], np.eye(S))
        np.testing.assert_allclose(res.source_share, 1.0)

    @given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
    def test_matches_unrolled_recursion(self, seed, S, T, layers):
        rng = np.random.default_rng(seed)
        selfs = [np.tril(rng.random((T, T))) for _ in range(layers)]
        selfs = [m / m.sum(axis=1, keepdims=True) for m in selfs]
        crosses = []
        for _ in range(layers):
            w = np.concatenate([rng.random((T, S)), np.diag(rng.random(T))], axis=1)
            crosses.append(w / w.sum(axis=1, keepdims=True))
        E = stochastic(rng, S, S)
        res = decoder_source_attribution(selfs, crosses, E)
        want = unrolled_source_share([m.tolist() for m in selfs], [m.tolist() for m in crosses], E.tolist())
        np.testing.assert_allclose(res.source_share, want, atol=1e-12)
        np.testing.assert_allclose(res.source_share + res.target_share, 1.0, atol=1e-9)
        assert res.aggregate == pytest.approx(np.mean(res.source_share))

    def test_non_stochastic_rejected(self):
        bad = np.array([[0.5, 0.2]])
        with pytest.raises(AttributionError):
            decoder_source_attribution([np.eye(1)], [bad], np.eye(1))


class TestEndToEnd:
    def test_zero_cross_ablation_is_exactly_zero(self, toy_model):
        for l in range(TOY.n_dec_layers):
            toy_model.params[f"dec.{l}.cross.wv"].data[:] = 0.0
            toy_model.params[f"dec.{l}.cross.bv"].data[:] = 0.0
        res = attribute(toy_model, [3, 4, 5], [6, 3])
        assert res.aggregate == 0.0 and np.all(res.source_share == 0.0)

    @given(st.integers(0, 500), st.lists(st.integers(3, 6), min_size=1, max_size=6),
           st.lists(st.integers(3, 6), min_size=0, max_size=6))
    def test_random_models_are_stochastic(self, seed, src, out):
        res = attribute(random_model(TOY, seed), src, out)
        assert np.all((res.source_share >= 0) & (res.source_share <= 1))
        np.testing.assert_allclose(res.relevance.sum(axis=1), 1.0, atol=1e-6)
        assert res.relevance.shape == (len(out) + 1, len(src) + len(out) + 1)

    def test_monotone_value_scaling(self, calibrated, corpus):
        model = calibrated["model"]
        probes = corpus.eval[:100]
        originals = {n: t.data.copy() for n, t in model.params.items() if ".cross.wv" in n or ".cross.bv" in n}
        means = []
        try:
            for lam in (0.0, 0.5, 1.0):
                for n, arr in originals.items():
                    model.params[n].data[:] = arr * lam
                means.append(np.mean([attribute(model, s, r).aggregate for s, r in probes]))
        finally:
            for n, arr in originals.items():
                model.params[n].data[:] = arr
        assert means[0] == 0.0
        assert means[0] <= means[1] <= means[2]

    def test_detached_outputs_draw_less_on_source(self, calibrated, corpus):
        recs = build_eval_records(corpus, stratified={"FullyDetached": 60, "Correct": 60}, seed=3)
        share = {PathologyLabel.FullyDetached: [], PathologyLabel.Correct: []}
        for r in recs:
            share[r.label].append(attribute(calibrated["model"], r.source_tokens, r.output_tokens).aggregate)
        assert np.mean(share[PathologyLabel.FullyDetached]) < np.mean(share[PathologyLabel.Correct])

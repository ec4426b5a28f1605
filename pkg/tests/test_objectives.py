import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_grads, micro_model
from tweetgeo import tensor as F
from tweetgeo.errors import ConfigError, ContractError, DataError
from tweetgeo.fusion import FusionConfig, init_fusion
from tweetgeo.objectives import (
    HardNegativeSpec,
    SimilarityMatrix,
    TLCConfig,
    build_candidates,
    init_head,
    mine_hard_negatives,
    smoothed_targets,
    tlc_loss,
    tlc_probabilities,
    tlm_loss,
    total_loss,
)
from tweetgeo.tensor import Tape, Tensor
from tweetgeo.trainer import batch_loss


def sim_from_cosine(cos, tau):
    """SimilarityMatrix built directly from a cosine matrix."""
    cos = Tensor(cos)
    return SimilarityMatrix(F.softmax(F.mul(cos, 1.0 / tau)), cos)


class TestTLCProbabilities:
    def test_equal_similarities_uniform(self):
        t = Tensor(np.ones((3, 4)))
        l = Tensor(np.ones((5, 4)))
        np.testing.assert_allclose(tlc_probabilities(t, l, TLCConfig()).probs.data, 0.2, atol=1e-15)

    def test_two_location_scalar(self):
        t = Tensor([[1.0, 0.0]])
        l = Tensor([[1.0, 0.0], [0.0, 1.0]])
        p = tlc_probabilities(t, l, TLCConfig(temperature=1.0)).probs.data
        e = math.e
        np.testing.assert_allclose(p, [[e / (e + 1), 1 / (e + 1)]], atol=1e-15)
        np.testing.assert_allclose(p, [[0.7311, 0.2689]], atol=1e-4)

    def test_lower_temperature_sharpens(self):
        rng = np.random.default_rng(0)
        t, l = Tensor(rng.normal(size=(6, 5))), Tensor(rng.normal(size=(7, 5)))
        hot = tlc_probabilities(t, l, TLCConfig(temperature=1.0)).probs.data.max(axis=1)
        cold = tlc_probabilities(t, l, TLCConfig(temperature=0.05)).probs.data.max(axis=1)
        assert np.all(cold > hot)

    def test_normalized_over_locations_only(self):
        rng = np.random.default_rng(1)
        p = tlc_probabilities(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(6, 4))),
                              TLCConfig()).probs.data
        assert p.shape == (3, 6)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    @given(st.sampled_from([0.01, 0.03, 0.05, 0.07, 0.1, 0.3]), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_one(self, tau, seed):
        rng = np.random.default_rng(seed)
        p = tlc_probabilities(Tensor(rng.normal(size=(8, 6))), Tensor(rng.normal(size=(9, 6))),
                              TLCConfig(temperature=tau))
        np.testing.assert_allclose(p.probs.data.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.abs(p.cosine.data) <= 1.0 + 1e-12)

    @given(st.floats(0.01, 100.0), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_scale_invariance(self, scale, seed):
        rng = np.random.default_rng(seed)
        t, l = rng.normal(size=(4, 5)), rng.normal(size=(6, 5))
        a = tlc_probabilities(Tensor(t), Tensor(l), TLCConfig()).probs.data
        b = tlc_probabilities(Tensor(t * scale), Tensor(l * scale), TLCConfig()).probs.data
        np.testing.assert_allclose(a, b, atol=1e-9)
        np.testing.assert_array_equal(a.argmax(axis=1), b.argmax(axis=1))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TLCConfig(temperature=0.0)
        with pytest.raises(ConfigError):
            TLCConfig(smoothing=1.0)


class TestTLCLoss:
    def test_perfect_rows(self):
        sim = SimilarityMatrix(Tensor(np.eye(3)), Tensor(np.eye(3)))
        assert abs(tlc_loss(sim, [0, 1, 2], TLCConfig(smoothing=0.0)).item()) < 1e-9

    def test_uniform_rows(self):
        sim = SimilarityMatrix(Tensor(np.full((2, 4), 0.25)), Tensor(np.zeros((2, 4))))
        assert tlc_loss(sim, [0, 3], TLCConfig(smoothing=0.0)).item() == pytest.approx(math.log(4), abs=1e-10)

    def test_smoothed_target_entropy(self):
        y = smoothed_targets([2], 4, 0.1)
        np.testing.assert_allclose(y, [[0.025, 0.025, 0.925, 0.025]], atol=1e-15)
        sim = SimilarityMatrix(Tensor(y), Tensor(np.zeros((1, 4))))
        entropy = -sum(v * math.log(v) for v in y[0])
        assert tlc_loss(sim, [2], TLCConfig(smoothing=0.1)).item() == pytest.approx(entropy, abs=1e-10)

    def test_smoothing_off_is_plain_cross_entropy(self):
        rng = np.random.default_rng(2)
        sim = sim_from_cosine(np.tanh(rng.normal(size=(5, 6))), 0.05)
        labels = np.array([0, 5, 2, 2, 1])
        plain = F.cross_entropy(sim.probs, np.eye(6)[labels]).item()
        assert abs(tlc_loss(sim, labels, TLCConfig(use_smoothing=False)).item() - plain) < 1e-12
        assert abs(tlc_loss(sim, labels, TLCConfig(smoothing=0.0)).item() - plain) < 1e-12

    def test_label_out_of_range(self):
        sim = SimilarityMatrix(Tensor(np.full((1, 3), 1 / 3)), Tensor(np.zeros((1, 3))))
        with pytest.raises(DataError):
            tlc_loss(sim, [3], TLCConfig())


class TestMining:
    def test_top_example(self):
        out = mine_hard_negatives([0.9, 0.5, 0.8, 0.1], 0, HardNegativeSpec(count=2, policy="top"))
        assert out.tolist() == [2, 1]

    def test_top_ties_lower_index(self):
        out = mine_hard_negatives([0.2, 0.2, 0.2, 0.4], 3, HardNegativeSpec(count=2, policy="top"))
        assert out.tolist() == [0, 1]

    @pytest.mark.parametrize("policy", ["top", "multinomial"])
    @pytest.mark.parametrize("truth", [0, 1])
    def test_two_locations_forced(self, policy, truth):
        rng = np.random.default_rng(0)
        for _ in range(20):
            out = mine_hard_negatives(rng.dirichlet([1, 1]), truth, HardNegativeSpec(1, policy), rng)
            assert out.tolist() == [1 - truth]

    def test_too_many_negatives(self):
        with pytest.raises(ConfigError):
            mine_hard_negatives([0.5, 0.3, 0.2], 0, HardNegativeSpec(count=3))

    def test_multinomial_frequencies(self):
        # truth mass 0.5 masked out leaves weights [0.7, 0.2, 0.1]
        row = [0.5, 0.35, 0.1, 0.05]
        rng = np.random.default_rng(42)
        spec = HardNegativeSpec(count=1, policy="multinomial")
        draws = np.array([mine_hard_negatives(row, 0, spec, rng)[0] for _ in range(100_000)])
        freq = np.bincount(draws, minlength=4)[1:] / draws.size
        np.testing.assert_allclose(freq, [0.7, 0.2, 0.1], atol=0.01)

    def test_multinomial_needs_rng(self):
        with pytest.raises(ContractError):
            mine_hard_negatives([0.5, 0.5], 0, HardNegativeSpec(1, "multinomial"))

    def test_multinomial_zero_mass_tail(self):
        out = mine_hard_negatives([0.5, 0.5, 0.0, 0.0], 0, HardNegativeSpec(3, "multinomial"),
                                  np.random.default_rng(0))
        assert out.tolist() == [1, 2, 3]

    @given(st.integers(2, 12), st.integers(0, 10_000), st.sampled_from(["top", "multinomial"]),
           st.data())
    @settings(max_examples=100, deadline=None)
    def test_distinct_and_never_truth(self, K, seed, policy, data):
        rng = np.random.default_rng(seed)
        truth = data.draw(st.integers(0, K - 1))
        M = data.draw(st.integers(1, K - 1))
        row = rng.dirichlet(np.ones(K))
        out = mine_hard_negatives(row, truth, HardNegativeSpec(M, policy), rng)
        assert len(out) == M == len(set(out.tolist()))
        assert truth not in out
        assert all(0 <= i < K for i in out)

    def test_candidates_truth_first(self):
        probs = np.random.default_rng(1).dirichlet(np.ones(6), size=4)
        labels = np.array([0, 5, 3, 3])
        cand = build_candidates(probs, labels, HardNegativeSpec(count=3))
        assert cand.shape == (4, 4)
        np.testing.assert_array_equal(cand[:, 0], labels)


def tlm_setup(K=5, M=4, seed=0, fusion=("sum", "mlp")):
    rng = np.random.default_rng(seed)
    cfg = FusionConfig(fusion_type=fusion[0], encoder_kind=fusion[1], heads=2)
    params = init_fusion(cfg, 4, rng)
    params.update(init_head(4, rng))
    for v in params.values():
        v += rng.normal(0.0, 0.3, v.shape)
    t, l = rng.normal(size=(3, 4)), rng.normal(size=(K, 4))
    return cfg, params, t, l, HardNegativeSpec(count=M)


class TestTLM:
    def test_equal_scores_give_log_m_plus_one(self):
        cfg, params, t, l, spec = tlm_setup()
        params["head.w"][:] = 0.0
        sim = tlc_probabilities(Tensor(t), Tensor(l), TLCConfig())
        loss, match = tlm_loss(Tensor(t), Tensor(l), [0, 1, 4], spec, cfg, params, sim=sim)
        assert loss.item() == pytest.approx(math.log(5), abs=1e-10)
        np.testing.assert_allclose(match.probs.data, 0.2, atol=1e-15)

    def test_target_has_truth_first(self):
        cfg, params, t, l, _ = tlm_setup(K=10)
        spec = HardNegativeSpec(count=7)
        sim = tlc_probabilities(Tensor(t), Tensor(l), TLCConfig())
        _, match = tlm_loss(Tensor(t), Tensor(l), [2, 9, 0], spec, cfg, params, sim=sim)
        np.testing.assert_array_equal(match.targets, np.tile([1, 0, 0, 0, 0, 0, 0, 0], (3, 1)))
        np.testing.assert_array_equal(match.candidates[:, 0], [2, 9, 0])
        np.testing.assert_allclose(match.probs.data.sum(axis=1), 1.0, atol=1e-12)

    def test_negatives_are_top_probability(self):
        cfg, params, t, l, spec = tlm_setup(M=2)
        sim = tlc_probabilities(Tensor(t), Tensor(l), TLCConfig())
        _, match = tlm_loss(Tensor(t), Tensor(l), [0, 1, 2], spec, cfg, params, sim=sim)
        for i, row in enumerate(sim.probs.data):
            masked = row.copy()
            masked[match.candidates[i, 0]] = -np.inf
            assert match.candidates[i, 1:].tolist() == np.argsort(-masked, kind="stable")[:2].tolist()

    def test_candidates_must_lead_with_truth(self):
        cfg, params, t, l, spec = tlm_setup(M=1)
        with pytest.raises(ContractError):
            tlm_loss(Tensor(t), Tensor(l), [0, 1, 2], spec, cfg, params,
                     candidates=np.array([[1, 0], [1, 0], [2, 0]]))

    def test_mining_detached_from_gradient(self):
        # fixing the candidates the mining produced leaves the gradient unchanged
        cfg, params, t, l, spec = tlm_setup()
        labels = [0, 1, 4]

        def grads(fixed):
            tape = Tape()
            leaves = tape.watch_all(params)
            tt, ll = tape.watch(t, "t"), tape.watch(l, "l")
            sim = tlc_probabilities(tt, ll, TLCConfig())
            loss, match = tlm_loss(tt, ll, labels, spec, cfg, leaves, sim=sim, candidates=fixed)
            return tape.gradients(loss, {**leaves, "t": tt, "l": ll}), match.candidates

        mined, cand = grads(None)
        fixed, _ = grads(cand)
        for k in mined:
            np.testing.assert_array_equal(mined[k], fixed[k])


class TestTotalLoss:
    def test_examples(self):
        assert total_loss(Tensor(0.0), Tensor(0.0)).item() == 0.0
        assert total_loss(Tensor(1.5), Tensor(2.5)).item() == 4.0

    def test_tlc_only(self):
        assert total_loss(Tensor(1.25), None).item() == 1.25

    def test_gradient_is_sum_of_parts(self):
        model, ids, labels = micro_model()
        cfg = model.config

        def run(part):
            tape = Tape()
            leaves = tape.watch_all(model.params)
            tweets = model.tweet_embeddings(leaves, ids)
            locs = model.location_embeddings(leaves)
            sim = tlc_probabilities(tweets, locs, cfg.tlc_config())
            tlc = tlc_loss(sim, labels, cfg.tlc_config())
            tlm, _ = tlm_loss(tweets, locs, labels, cfg.negative_spec(), cfg.fusion_config(), leaves,
                              sim=sim)
            loss = {"tlc": tlc, "tlm": tlm, "total": total_loss(tlc, tlm)}[part]
            return tape.gradients(loss, leaves)

        g_tlc, g_tlm, g_total = run("tlc"), run("tlm"), run("total")
        for k in g_total:
            np.testing.assert_allclose(g_total[k], g_tlc[k] + g_tlm[k], rtol=1e-10, atol=1e-15)
        assert not np.any(g_tlc["head.w"])
        assert np.any(g_tlm["encoder.tok_emb"])


class TestLossGradients:
    """Full-objective gradients against finite differences on a micro-batch.

    The tolerance allows, besides the 1e-4 relative error, an absolute slack
    of a few units of the oracle's own resolution: one ulp of the loss
    divided by 2h.  Parameters whose exact gradient is zero (biases that
    shift every candidate's matching score equally, for instance) otherwise
    fail on rounding noise in the loss alone.
    """

    @staticmethod
    def compare(model, ids, labels):
        tape = Tape()
        leaves = tape.watch_all(model.params)
        loss, parts = batch_loss(model, leaves, ids, labels, rng=np.random.default_rng(0))
        analytic = tape.gradients(loss, leaves)
        cand = parts.get("candidates")
        value = lambda p: batch_loss(model, p, ids, labels, candidates=cand)[0].item()
        resolution = 8 * np.spacing(abs(loss.item())) / (2 * 1e-5)
        failures = check_grads(value, model.params, analytic)
        return [f for f in failures if abs(f[2] - f[3]) > 1e-4 * max(abs(f[2]), abs(f[3])) + resolution]

    def test_three_locations(self):
        model, ids, labels = micro_model(num_locations=3, negatives=2, layers=1)
        labels = np.array([1, 2])
        assert self.compare(model, ids, labels) == []

    @pytest.mark.parametrize("fusion", [("ca", "mlp"), ("concat", "mha"), ("concat", "te"),
                                        ("sum", "bna")])
    def test_fusion_variants(self, fusion):
        model, ids, labels = micro_model(fusion_type=fusion[0], fusion_encoder=fusion[1], layers=1)
        assert self.compare(model, ids, labels) == []

    @pytest.mark.parametrize("variant", ["dual-encoder", "no-label-smoothing", "no-tlm"])
    def test_variants(self, variant):
        model, ids, labels = micro_model(variant=variant, layers=1)
        assert self.compare(model, ids, labels) == []

    def test_multinomial_policy(self):
        model, ids, labels = micro_model(negative_policy="multinomial", pooling="avg", layers=1)
        assert self.compare(model, ids, labels) == []

import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import (
    ALL_KINDS,
    MIXED_FEATURES,
    finite_difference_errors,
    jitter_biases,
    numeric_features,
    random_batch,
    small_model,
)
from m3tn.data import ColumnSpec, Dataset, DatasetSchema
from m3tn.errors import ConfigError, DataError, StateError
from m3tn.models import (
    FeatureEncoder,
    ModelConfig,
    ModelKind,
    build_model,
    linear_mmd2,
    load_checkpoint,
    predict_uplift,
    save_checkpoint,
)

DATA = Path(__file__).parent / "data"


def zero_params(model):
    for _, p in model.named_parameters():
        p[...] = 0.0


class TestEncodeFeatures:
    def test_numeric_only_is_identity(self, rng):
        enc = FeatureEncoder(numeric_features(3), rng)
        x = rng.standard_normal((4, 3))
        out, _ = enc.forward(x)
        assert out is x or np.array_equal(out, x)

    def test_lookup_row_zero(self, rng):
        feats = (ColumnSpec("a", "numeric"), ColumnSpec("c", "categorical", cardinality=4, embedding_dim=2))
        enc = FeatureEncoder(feats, rng)
        out, _ = enc.forward(np.array([[1.5, 0.0]]))
        assert out.shape == (1, 3)
        assert out[0, 0] == 1.5
        assert np.array_equal(out[0, 1:], enc.tables[1].vectors[0])

    def test_dimension_arithmetic(self, rng):
        feats = (
            ColumnSpec("n1", "numeric"),
            ColumnSpec("c1", "categorical", cardinality=5, embedding_dim=2),
            ColumnSpec("n2", "numeric"),
            ColumnSpec("c2", "categorical", cardinality=7, embedding_dim=3),
            ColumnSpec("n3", "numeric"),
            ColumnSpec("n4", "numeric"),
        )
        assert FeatureEncoder(feats, rng).out_dim == 9

    def test_out_of_range_category(self, rng):
        enc = FeatureEncoder(MIXED_FEATURES, rng)
        with pytest.raises(DataError, match=r"'c'.*3"):
            enc.forward(np.array([[0.0, 3.0, 0.0, 0.0]]))

    def test_default_embedding_dim(self, rng):
        enc = FeatureEncoder((ColumnSpec("c", "categorical", cardinality=40),), rng)
        assert enc.out_dim == 8
        enc = FeatureEncoder((ColumnSpec("c", "categorical", cardinality=3),), rng)
        assert enc.out_dim == 2


class TestMMoE:
    def test_single_expert(self, rng):
        m = small_model("M3TN", features=numeric_features(3), num_experts=1)
        x = rng.standard_normal((5, 3))
        phis, _ = m.representation.forward(x)
        f1, _ = m.representation.experts[0].forward(x)
        for g in m.representation.gate_weights(x):
            assert np.all(g == 1.0)
        for phi in phis:
            np.testing.assert_array_equal(phi, f1)

    def test_identical_experts(self, rng):
        m = small_model("M3TN", features=numeric_features(3), num_experts=3)
        rep = m.representation
        for e in rep.experts[1:]:
            for (_, p), (_, q) in zip(e.named_parameters(), rep.experts[0].named_parameters()):
                p[...] = q
        x = rng.standard_normal((5, 3))
        f, _ = rep.experts[0].forward(x)
        for phi in rep.forward(x)[0]:
            np.testing.assert_allclose(phi, f, rtol=1e-14)

    def test_two_expert_hand_calculation(self):
        feats = numeric_features(2)
        m = build_model(ModelConfig(kind="M3TN", num_treatments=2, features=feats, num_experts=2,
                                    expert_hidden=(2,), head_hidden=(1,), seed=0))
        rep = m.representation
        # experts: identity and doubling maps (inputs positive so ReLU is inert)
        rep.experts[0].layers[0].weight[...] = np.eye(2)
        rep.experts[0].layers[0].bias[...] = 0
        rep.experts[1].layers[0].weight[...] = 2 * np.eye(2)
        rep.experts[1].layers[0].bias[...] = 0
        rep.gates[0].weight[...] = [[0, 0], [0, 0]]
        rep.gates[1].weight[...] = [[1, 0], [0, 0]]
        rep.gates[2].weight[...] = [[0, 0], [0, 1]]
        x = np.array([[1.0, 2.0]])
        phis, _ = rep.forward(x)
        # gate 0: logits (0, 0) -> (1/2, 1/2); phi = 0.5*(1,2) + 0.5*(2,4) = (1.5, 3)
        np.testing.assert_allclose(phis[0][0], [1.5, 3.0], rtol=1e-14)
        # gate 1: logits (1, 0)
        w = math.exp(1) / (math.exp(1) + 1)
        np.testing.assert_allclose(phis[1][0], [w * 1 + (1 - w) * 2, w * 2 + (1 - w) * 4], rtol=1e-14)
        # gate 2: logits (0, 2)
        w = 1 / (1 + math.exp(2))
        np.testing.assert_allclose(phis[2][0], [w * 1 + (1 - w) * 2, w * 2 + (1 - w) * 4], rtol=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (7, 4), elements=st.floats(-20, 20)))
    def test_gates_are_probability_vectors(self, x):
        m = small_model("M3TN", features=numeric_features(4), num_experts=3, seed=1)
        for g in m.representation.gate_weights(x):
            assert g.shape == (7, 3)
            assert np.all(g >= 0)
            np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)


class TestM3TNForward:
    def test_zero_heads(self, rng):
        m = small_model("M3TN")
        for h in m.heads:
            for _, p in h.named_parameters():
                p[...] = 0
        x, _, _ = random_batch(rng)
        pred = m.predict(x)
        assert not pred.mu0.any() and not pred.tau.any()

    def test_constant_uplift_head(self, rng):
        m = small_model("M3TN", K=3)
        h = m.heads[2]
        for _, p in h.named_parameters():
            p[...] = 0
        h.layers[-1].bias[...] = 0.75
        x, _, _ = random_batch(rng, n=10)
        assert np.all(m.predict(x).tau[:, 1] == 0.75)

    def test_hand_trace(self):
        feats = numeric_features(2)
        m = build_model(ModelConfig(kind="M3TN", num_treatments=2, features=feats, num_experts=2,
                                    expert_hidden=(1,), head_hidden=(1,), seed=0))
        rep = m.representation
        rep.experts[0].layers[0].weight[...] = [[0.5, -0.25]]
        rep.experts[0].layers[0].bias[...] = [0.1]
        rep.experts[1].layers[0].weight[...] = [[1.0, 1.0]]
        rep.experts[1].layers[0].bias[...] = [-0.2]
        gate_w = [[[0.3, 0.0], [0.0, 0.3]], [[1.0, -1.0], [0.0, 0.0]], [[0.0, 0.0], [0.5, 0.5]]]
        for g, w in zip(rep.gates, gate_w):
            g.weight[...] = w
        head_p = [(0.8, 0.05, 1.5, -0.1), (-2.0, 0.3, 0.4, 0.2), (1.2, 0.0, -0.7, 0.05)]
        for h, (w1, b1, w2, b2) in zip(m.heads, head_p):
            h.layers[0].weight[...] = w1
            h.layers[0].bias[...] = b1
            h.layers[1].weight[...] = w2
            h.layers[1].bias[...] = b2

        x1, x2 = 1.2, -0.4
        f = [max(0.0, 0.5 * x1 - 0.25 * x2 + 0.1), max(0.0, x1 + x2 - 0.2)]
        outs = []
        for w, (w1, b1, w2, b2) in zip(gate_w, head_p):
            l0 = w[0][0] * x1 + w[0][1] * x2
            l1 = w[1][0] * x1 + w[1][1] * x2
            g0 = math.exp(l0) / (math.exp(l0) + math.exp(l1))
            phi = g0 * f[0] + (1 - g0) * f[1]
            outs.append(w2 * max(0.0, w1 * phi + b1) + b2)
        pred = m.predict(np.array([[x1, x2]]))
        assert pred.mu0[0] == pytest.approx(outs[0], rel=1e-13)
        assert pred.tau[0].tolist() == pytest.approx(outs[1:], rel=1e-13)
        assert pred.mu(2)[0] == pytest.approx(outs[0] + outs[2], rel=1e-13)


class TestLoss:
    def test_single_control_sample(self):
        m = small_model("M3TN", features=numeric_features(2), l2_lambda=0.0)
        zero_params(m)
        m.heads[0].layers[-1].bias[...] = 0.5
        assert m.forward_loss(np.zeros((1, 2)), [0], [1.0]) == 0.25

    def test_masking_zero_gradients(self, rng):
        m = small_model("M3TN", features=numeric_features(3), K=4, l2_lambda=0.0)
        jitter_biases(m, rng)
        _, grads = m.loss_and_grad(rng.standard_normal((1, 3)), [2], [1.3])
        for k in (1, 3, 4):
            for name, _ in m.heads[k].named_parameters():
                assert not grads[name].any(), name
        assert any(grads[n].any() for n, _ in m.heads[2].named_parameters())

    @pytest.mark.parametrize("squared,expected", [(True, 0.4), (False, 0.2)])
    def test_regularizer_convention(self, squared, expected):
        m = small_model("M3TN", features=numeric_features(2), l2_lambda=0.1, l2_squared=squared)
        zero_params(m)
        # with every expert zeroed, a gate weight moves no prediction
        m.representation.gates[1].weight[0, 0] = 2.0
        loss = m.forward_loss(np.ones((3, 2)), [0, 1, 2], [0.0, 0.0, 0.0])
        assert loss == pytest.approx(expected, rel=1e-15)

    def test_bad_treatment_label(self, rng):
        m = small_model("M3TN")
        x, _, y = random_batch(rng, n=2)
        with pytest.raises(DataError, match="3"):
            m.forward_loss(x, [0, 3], y)

    def test_zero_loss_zero_gradients(self, rng):
        m = small_model("M3TN", l2_lambda=0.0)
        zero_params(m)
        x, t, _ = random_batch(rng)
        loss, grads = m.loss_and_grad(x, t, np.zeros(len(t)))
        assert loss == 0.0
        assert all(not g.any() for g in grads.values())

    def test_backward_requires_forward(self):
        m = small_model("M3TN")
        with pytest.raises(StateError):
            m.backward()

    def test_backward_consumes_tape(self, rng):
        m = small_model("TLearner")
        m.loss_and_grad(*random_batch(rng))
        with pytest.raises(StateError):
            m.backward()

    def test_head_perturbation_only_moves_its_arm(self, rng):
        K = 3
        m = small_model("M3TN", features=numeric_features(3), K=K, l2_lambda=0.0)
        jitter_biases(m, rng)
        x = rng.standard_normal((40, 3))
        t = np.resize(np.arange(K + 1), 40)
        y = rng.standard_normal(40)
        j = 2
        mine, other = t == j, t != j
        before_other = m.forward_loss(x[other], t[other], y[other])
        before_mine = m.forward_loss(x[mine], t[mine], y[mine])
        for _, p in m.heads[j].named_parameters():
            p += 0.3
        assert m.forward_loss(x[other], t[other], y[other]) == before_other
        assert m.forward_loss(x[mine], t[mine], y[mine]) != before_mine


@pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.value)
def test_gradients_match_finite_differences(kind, rng):
    m = small_model(kind, seed=3)
    jitter_biases(m, rng)
    x, t, y = random_batch(rng)
    failures, checked = finite_difference_errors(m, x, t, y)
    assert checked == m.param_count()
    assert failures == []


class TestVariants:
    def test_slearner_without_treatment_weights(self, rng):
        m = small_model("SLearner", K=3)
        d_enc = m.encoder.out_dim
        m.net.layers[0].weight[:, d_enc:] = 0.0
        x, _, _ = random_batch(rng, n=6)
        assert not m.predict(x).tau.any()

    def test_tlearner_identical_nets(self, rng):
        m = small_model("TLearner", K=3)
        src_b = dict(m.representation.bottoms[0].named_parameters())
        src_h = dict(m.heads[0].named_parameters())
        for k in range(1, 4):
            for name, p in m.representation.bottoms[k].named_parameters():
                p[...] = src_b[name.replace(f"bottoms.{k}", "bottoms.0")]
            for name, p in m.heads[k].named_parameters():
                p[...] = src_h[name.replace(f"heads.{k}", "heads.0")]
        x, _, _ = random_batch(rng, n=6)
        assert not m.predict(x).tau.any()

    def test_mmd(self, rng):
        a = rng.standard_normal((5, 3))
        assert linear_mmd2(a, a.copy()) == 0.0
        assert linear_mmd2(np.array([[1.0]]), np.array([[0.0]])) == 1.0

    def test_mmd_only_in_mmd_kind(self, rng):
        x, t, y = random_batch(rng)
        plain = small_model("SharedBottomMultiHead", seed=4, l2_lambda=0.0)
        mmd = small_model("SharedBottomMultiHead_MMD", seed=4, l2_lambda=0.0, mmd_alpha=0.5)
        assert plain.param_count() == mmd.param_count()
        phi, _ = plain.representation.bottom.forward(plain.encoder.forward(x)[0])
        expected = 0.5 * sum(linear_mmd2(phi[t == k], phi[t == 0]) for k in (1, 2))
        assert mmd.forward_loss(x, t, y) - plain.forward_loss(x, t, y) == pytest.approx(expected, rel=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="unknown model kind"):
            small_model("Dragonnet")

    @pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.value)
    def test_prediction_shape(self, kind, rng):
        m = small_model(kind, K=3)
        x, _, _ = random_batch(rng, n=11)
        pred = m.predict(x)
        assert pred.mu0.shape == (11,) and pred.tau.shape == (11, 3)


class TestAdditivity:
    def test_reparameterized_heads(self, rng):
        m = small_model("M3TN", K=3)
        jitter_biases(m, rng, 1.0)
        x, _, _ = random_batch(rng, n=500, K=3)
        pred = m.predict(x)
        out, _, _ = m._heads_forward(m.encoder.forward(x)[0])
        assert np.array_equal(pred.mu0, out[:, 0])
        assert np.array_equal(pred.tau, out[:, 1:])
        for k in range(1, 4):
            assert np.all(pred.mu(k) - (pred.mu0 + pred.tau[:, k - 1]) == 0.0)

    def test_response_heads_are_not_structurally_additive(self, rng):
        m = small_model("M3TN_NoRM", K=3)
        jitter_biases(m, rng, 1.0)
        x, _, _ = random_batch(rng, n=2000, K=3)
        pred = m.predict(x)
        out, _, _ = m._heads_forward(m.encoder.forward(x)[0])
        # tau is a difference of two responses; adding it back can round away from the response head
        assert np.any(pred.mu(1) != out[:, 1])


class TestParamEconomy:
    @staticmethod
    def mlp_count(dims):
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))

    @pytest.mark.parametrize("N,K,d", [(1, 2, 3), (2, 3, 5), (4, 3, 10), (8, 5, 6)])
    def test_closed_form_tallies(self, N, K, d):
        feats = numeric_features(d)
        eh, hh = (7, 5), (4,)
        cfg = dict(num_treatments=K, features=feats, num_experts=N, expert_hidden=eh, head_hidden=hh)
        bottom = self.mlp_count([d, *eh])
        head = self.mlp_count([eh[-1], *hh, 1])
        gate = N * d
        m3tn = build_model(ModelConfig(kind="M3TN", **cfg))
        assert m3tn.param_count() == N * bottom + (K + 1) * gate + (K + 1) * head
        assert sum(p.size for n, p in m3tn.named_parameters() if n.startswith("gates.")) == (K + 1) * N * d
        assert build_model(ModelConfig(kind="SharedBottomMultiHead", **cfg)).param_count() == bottom + (K + 1) * head
        assert build_model(ModelConfig(kind="TLearner", **cfg)).param_count() == (K + 1) * (bottom + head)
        assert build_model(ModelConfig(kind="M3TN_NoMMoE", **cfg)).param_count() == bottom + (K + 1) * head
        assert build_model(ModelConfig(kind="SLearner", **cfg)).param_count() == self.mlp_count(
            [d + K + 1, *eh, *hh, 1]
        )

    def test_one_more_arm(self):
        feats = numeric_features(4)
        a = build_model(ModelConfig(kind="M3TN", num_treatments=2, features=feats, num_experts=3))
        b = build_model(ModelConfig(kind="M3TN", num_treatments=3, features=feats, num_experts=3))
        head = sum(p.size for _, p in a.heads[1].named_parameters())
        assert b.param_count() - a.param_count() == head + 3 * 4

    def test_embeddings_counted(self):
        m = small_model("M3TN")
        assert "embeddings.c.vectors" in m.parameters()
        assert m.param_count() == sum(p.size for _, p in m.named_parameters())


def _dataset(x, t, features=MIXED_FEATURES, K=2):
    schema = DatasetSchema(tuple(features) + (ColumnSpec("t", "treatment"), ColumnSpec("y", "response")))
    return Dataset(x, t, np.zeros(len(t)), schema, num_treatments=K)


class TestPredictUplift:
    def test_repeatable_and_pure(self, rng):
        m = small_model("M3TN")
        before = m.state_dict()
        x, t, _ = random_batch(rng, n=30)
        ds = _dataset(x, t)
        a = predict_uplift(m, ds)
        b = predict_uplift(m, ds)
        assert a.tau.tobytes() == b.tau.tobytes() and a.mu0.tobytes() == b.mu0.tobytes()
        assert all(before[k].tobytes() == v.tobytes() for k, v in m.named_parameters())

    def test_permutation_equivariance(self, rng):
        m = small_model("M3TN_NoRM")
        x, t, _ = random_batch(rng, n=30)
        perm = rng.permutation(30)
        a = predict_uplift(m, _dataset(x, t))
        b = predict_uplift(m, _dataset(x[perm], t[perm]))
        np.testing.assert_array_equal(a.tau[perm], b.tau)

    def test_feature_dim_mismatch(self, rng):
        m = small_model("M3TN", features=numeric_features(3))
        x, t, _ = random_batch(rng, features=numeric_features(4), n=5)
        with pytest.raises(DataError, match="4 feature columns"):
            predict_uplift(m, _dataset(x, t, numeric_features(4)))

    def test_golden_snapshot(self):
        sys.path.insert(0, str(DATA))
        try:
            from make_golden import golden_inputs, golden_model
        finally:
            sys.path.pop(0)
        golden = json.loads((DATA / "golden_untrained.json").read_text())
        pred = golden_model().predict(golden_inputs())
        np.testing.assert_allclose(pred.mu0, golden["mu0"], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(pred.tau, golden["tau"], rtol=1e-12, atol=1e-15)

    def test_reproducible_across_processes(self):
        code = (
            "import sys; sys.path.insert(0, %r)\n"
            "from make_golden import golden_inputs, golden_model\n"
            "p = golden_model().predict(golden_inputs())\n"
            "print(p.mu0.tobytes().hex() + p.tau.tobytes().hex())\n"
        ) % str(DATA)
        runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
                for _ in range(2)]
        assert runs[0] == runs[1] and runs[0]


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.value)
    def test_round_trip_bit_identical(self, kind, rng, tmp_path):
        m = small_model(kind, seed=5)
        jitter_biases(m, rng)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, m, {"note": "x"})
        loaded, pre = load_checkpoint(path)
        assert pre == {"note": "x"}
        assert loaded.kind is m.kind
        for (n1, p), (n2, q) in zip(m.named_parameters(), loaded.named_parameters()):
            assert n1 == n2 and p.tobytes() == q.tobytes()
        x, _, _ = random_batch(rng, n=9)
        a, b = m.predict(x), loaded.predict(x)
        assert a.tau.tobytes() == b.tau.tobytes()
        save_checkpoint(tmp_path / "again.json", loaded, {"note": "x"})
        assert (tmp_path / "again.json").read_bytes() == path.read_bytes()

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text("{}")
        with pytest.raises(DataError):
            load_checkpoint(p)


class TestConfig:
    def test_k_at_least_two(self):
        with pytest.raises(ConfigError, match="num_treatments"):
            ModelConfig(num_treatments=1, features=numeric_features(2))

    def test_experts_positive(self):
        with pytest.raises(ConfigError, match="num_experts"):
            ModelConfig(num_experts=0, features=numeric_features(2))

    def test_lambda_nonnegative(self):
        with pytest.raises(ConfigError, match="l2_lambda"):
            ModelConfig(l2_lambda=-1.0, features=numeric_features(2))

    def test_dict_round_trip(self):
        cfg = ModelConfig(kind=ModelKind.TLearner, num_treatments=3, features=MIXED_FEATURES, seed=9)
        assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

import numpy as np
import pytest

from sllab import lora as L
from sllab import model as M
from sllab import tensor as T
from sllab.errors import ConfigError
from sllab.experiment import Adam
from sllab.model import ModelConfig

DEFAULT = ModelConfig(seed=17)


def train_steps(adapted, text, steps, lr=1e-2):
    ids = M.tokenize(text)
    opt = Adam(adapted.trainable_parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        with T.Graph() as g:
            total, n = M.sequence_loss(adapted.base, ids, adapted.overrides())
            loss = T.scale(total, 1.0 / n)
        T.backward(g, loss)
        opt.step()


class TestAttach:
    def test_identity_start(self):
        model = M.init_model(DEFAULT)
        texts = ["identity", "Q: start?\nA: yes.", "\x00\xff bytes"]
        base_logits = [M.forward_ids(model, M.tokenize(t)).data.copy()
                       for t in texts]
        adapted = L.attach(model, rank=4, alpha=8.0, seed=17)
        for t, expected in zip(texts, base_logits):
            got = adapted.forward_ids(M.tokenize(t)).data
            assert np.max(np.abs(got - expected)) < 1e-12

    def test_default_trainable_count(self):
        adapted = L.attach(M.init_model(DEFAULT), rank=4, alpha=8.0)
        # sum of r*(d_in + d_out): 2 layers x 2 targets x 4*(64 + 64)
        assert adapted.trainable_count() == 2 * 2 * (4 * (64 + 64))
        assert adapted.trainable_count() == 2048
        assert len(adapted.trainable_parameters()) == 8

    def test_count_formula(self):
        for rank, targets in [(1, ("w_q",)), (3, ("w_q", "w_v")), (8, ("w_v",))]:
            adapted = L.attach(M.init_model(DEFAULT), rank, 2.0, targets=targets)
            d = DEFAULT.d_model
            expected = DEFAULT.n_layers * len(targets) * rank * (d + d)
            assert adapted.trainable_count() == expected

    def test_trainable_fraction_small(self):
        model = M.init_model(DEFAULT)
        adapted = L.attach(model, rank=4, alpha=8.0)
        assert adapted.trainable_count() / model.parameter_count() < 0.05

    def test_base_frozen_after_attach(self):
        model = M.init_model(DEFAULT)
        L.attach(model, rank=4, alpha=8.0)
        assert all(not t.requires_grad for _, t in model.parameters())

    def test_rank_bounds(self):
        with pytest.raises(ConfigError):
            L.attach(M.init_model(DEFAULT), rank=65, alpha=1.0)
        with pytest.raises(ConfigError):
            L.attach(M.init_model(DEFAULT), rank=0, alpha=1.0)

    def test_duplicate_target_rejected(self):
        with pytest.raises(ConfigError):
            L.attach(M.init_model(DEFAULT), rank=2, alpha=1.0,
                     targets=("w_q", "w_q"))

    def test_unknown_target_rejected(self):
        with pytest.raises(ConfigError):
            L.attach(M.init_model(DEFAULT), rank=2, alpha=1.0, targets=("w_k",))

    def test_b_starts_zero_a_seeded(self):
        a1 = L.attach(M.init_model(DEFAULT), rank=4, alpha=8.0, seed=5)
        a2 = L.attach(M.init_model(DEFAULT), rank=4, alpha=8.0, seed=5)
        for ad1, ad2 in zip(a1.adapters, a2.adapters):
            assert np.all(ad1.b.data == 0.0)
            assert np.array_equal(ad1.a.data, ad2.a.data)

    def test_adapter_order_deterministic(self):
        adapted = L.attach(M.init_model(DEFAULT), rank=2, alpha=4.0)
        assert [ad.key for ad in adapted.adapters] == [
            (0, "w_q"), (0, "w_v"), (1, "w_q"), (1, "w_v")]


class TestEffectiveWeight:
    def test_zero_b_returns_w_exactly(self):
        rng = np.random.default_rng(4)
        w = T.Tensor(rng.normal(size=(6, 6)))
        ad = L.LoraAdapter(0, "w_q", 2, 4.0,
                           a=T.Tensor(rng.normal(size=(2, 6))),
                           b=T.Tensor(np.zeros((6, 2))))
        assert np.array_equal(L.effective_weight(w, ad).data, w.data)

    def test_rank_one_unit_update(self):
        w = T.Tensor(np.zeros((4, 4)))
        a = T.Tensor(np.eye(1, 4))        # e1 row
        b = T.Tensor(np.eye(4, 1))        # e1 column
        ad = L.LoraAdapter(0, "w_q", 1, 1.0, a=a, b=b)
        expected = np.zeros((4, 4))
        expected[0, 0] = 1.0
        assert np.array_equal(L.effective_weight(w, ad).data, expected)

    def test_alpha_linearity(self):
        # Doubling alpha doubles the correction term exactly (power-of-two
        # scaling commutes with rounding); compare against W = 0 so the
        # reconstruction is the correction itself.
        rng = np.random.default_rng(5)
        w = T.Tensor(np.zeros((5, 5)))
        a = T.Tensor(rng.normal(size=(2, 5)))
        b = T.Tensor(rng.normal(size=(5, 2)))
        d1 = L.effective_weight(w, L.LoraAdapter(0, "w_q", 2, 3.0, a, b)).data
        d2 = L.effective_weight(w, L.LoraAdapter(0, "w_q", 2, 6.0, a, b)).data
        assert np.array_equal(d2, 2 * d1)
        # and with a nonzero W the identity holds to rounding error
        w2 = T.Tensor(rng.normal(size=(5, 5)))
        e1 = L.effective_weight(w2, L.LoraAdapter(0, "w_q", 2, 3.0, a, b)).data - w2.data
        e2 = L.effective_weight(w2, L.LoraAdapter(0, "w_q", 2, 6.0, a, b)).data - w2.data
        assert np.allclose(e2, 2 * e1, rtol=1e-12, atol=1e-14)

    def test_shape_mismatch(self):
        w = T.Tensor(np.zeros((4, 4)))
        ad = L.LoraAdapter(0, "w_q", 2, 1.0,
                           a=T.Tensor(np.zeros((2, 5))),
                           b=T.Tensor(np.zeros((4, 2))))
        with pytest.raises(T.ShapeError):
            L.effective_weight(w, ad)

    def test_base_never_modified_in_place(self):
        model = M.init_model(DEFAULT)
        frozen = {n: t.data.copy() for n, t in model.parameters()}
        adapted = L.attach(model, rank=4, alpha=8.0, seed=17)
        train_steps(adapted, "Q: move?\nA: adapters only.", steps=20)
        for name, t in model.parameters():
            assert np.array_equal(t.data, frozen[name]), name


class TestMerge:
    def test_merge_right_after_attach_is_base(self):
        model = M.init_model(DEFAULT)
        adapted = L.attach(model, rank=4, alpha=8.0, seed=17)
        merged = L.merge(adapted)
        for (_, a), (_, b) in zip(model.parameters(), merged.parameters()):
            assert np.array_equal(a.data, b.data)

    def test_merge_after_training_forward_equivalent(self):
        model = M.init_model(DEFAULT)
        adapted = L.attach(model, rank=4, alpha=8.0, seed=17)
        train_steps(adapted, "Q: merge?\nA: equivalence.", steps=100)
        merged = L.merge(adapted)
        rng = np.random.default_rng(9)
        for _ in range(20):
            ids = rng.integers(0, 258, size=24).tolist()
            unmerged = adapted.forward_ids(ids).data
            plain = M.forward_ids(merged, ids).data
            assert np.max(np.abs(unmerged - plain)) < 1e-9

    def test_merge_without_adapters_is_noop(self):
        model = M.init_model(DEFAULT)
        adapted = L.AdaptedModel(model, [])
        merged = L.merge(adapted)
        for (_, a), (_, b) in zip(model.parameters(), merged.parameters()):
            assert np.array_equal(a.data, b.data)


class TestFrozenBaseHash:
    def test_hash_stable_under_training(self):
        model = M.init_model(DEFAULT)
        adapted = L.attach(model, rank=4, alpha=8.0, seed=17)
        before = L.base_hash(model)
        train_steps(adapted, "Q: hash?\nA: untouched base.", steps=50)
        assert L.base_hash(model) == before

    def test_adapters_actually_move(self):
        model = M.init_model(DEFAULT)
        adapted = L.attach(model, rank=4, alpha=8.0, seed=17)
        b0 = [ad.b.data.copy() for ad in adapted.adapters]
        train_steps(adapted, "Q: move?\nA: yes indeed.", steps=5)
        assert any(not np.array_equal(ad.b.data, old)
                   for ad, old in zip(adapted.adapters, b0))

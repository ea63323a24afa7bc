"""Block-level tests: attention, relationship units, MMIL pooling."""
from __future__ import annotations

import numpy as np
import pytest

from ear import tensor as T
from ear.errors import ConfigError
from ear.gradcheck import max_relative_error
from ear.nn import EncoderBlock, ErmUnit, Linear, MmilPool, MultiHeadAttention
from ear.tensor import Tensor

from oracles import mha_oracle, mmil_oracle

TOL = 1e-4


def make_block(dim=8, heads=4, seed=0) -> EncoderBlock:
    return EncoderBlock(dim, heads, np.random.default_rng(seed))


class TestSelfAttention:
    def test_dim_not_divisible_by_heads(self):
        with pytest.raises(ConfigError):
            MultiHeadAttention(10, 4, np.random.default_rng(0))

    def test_single_token_weight_is_one(self):
        block = make_block().eval()
        x = Tensor(np.random.default_rng(1).normal(size=(1, 8)))
        out = block(x)
        assert out.shape == (1, 8)
        assert np.allclose(block.attn.last_weights, 1.0)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        block = make_block(seed=3).eval()
        x = rng.normal(size=(5, 8))
        perm = rng.permutation(5)
        out = block(Tensor(x)).data
        out_perm = block(Tensor(x[perm])).data
        assert np.allclose(out[perm], out_perm, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        block = make_block(seed=5).eval()
        x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        params = [x] + block.parameters()
        assert max_relative_error(lambda: T.tsum(block(x)), params) <= TOL

    def test_attention_weights_are_distributions(self):
        rng = np.random.default_rng(6)
        block = make_block(seed=7).eval()
        block(Tensor(rng.normal(scale=10, size=(6, 8))))
        w = block.attn.last_weights
        assert (w >= 0).all()
        assert np.abs(w.sum(axis=2) - 1.0).max() < 1e-10


class TestCrossAttention:
    def test_kv_equal_query_reduces_to_self_attention(self):
        rng = np.random.default_rng(8)
        block = make_block(seed=9).eval()
        x = Tensor(rng.normal(size=(4, 8)))
        self_out = block(x).data
        cross_out = block(x, keyvalue=x).data
        assert np.array_equal(self_out, cross_out)

    def test_identical_value_rows_give_constant_output(self):
        rng = np.random.default_rng(10)
        attn = MultiHeadAttention(8, 4, np.random.default_rng(11))
        attn.eval()
        q = Tensor(rng.normal(size=(5, 8)))
        kv = Tensor(np.tile(rng.normal(size=(1, 8)), (3, 1)))
        out = attn(q, kv).data
        assert np.abs(out - out[0]).max() < 1e-12

    def test_against_per_head_loop_oracle(self):
        rng = np.random.default_rng(12)
        attn = MultiHeadAttention(8, 4, np.random.default_rng(13))
        attn.eval()
        q = rng.normal(size=(4, 8))
        kv = rng.normal(size=(6, 8))
        got = attn(Tensor(q), Tensor(kv)).data
        want = mha_oracle(
            q, kv,
            attn.wq.weight.data, attn.wq.bias.data,
            attn.wk.weight.data, attn.wk.bias.data,
            attn.wv.weight.data, attn.wv.bias.data,
            attn.wo.weight.data, attn.wo.bias.data,
            num_heads=4,
        )
        assert np.abs(got - want).max() < 1e-10

    def test_cross_gradients(self):
        rng = np.random.default_rng(14)
        block = make_block(seed=15).eval()
        q = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
        kv = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
        params = [q, kv] + block.parameters()
        assert max_relative_error(lambda: T.tsum(block(q, kv)), params) <= TOL


class TestErmUnit:
    def test_identity_configuration(self):
        rng = np.random.default_rng(16)
        unit = ErmUnit(4, np.random.default_rng(17))
        unit.set_identity()
        unit.eval()
        x = rng.normal(size=(6, 4))
        out = unit(Tensor(x)).data
        assert np.allclose(out, np.where(x >= 0, x, 0.01 * x), atol=1e-5)

    def test_zeroed_adjacency_column_blanks_output_column(self):
        rng = np.random.default_rng(18)
        unit = ErmUnit(3, np.random.default_rng(19))
        unit.set_identity()
        unit.adjacency.data[:, 1] = 0.0
        unit.eval()
        x1 = rng.normal(size=(5, 3))
        x2 = rng.normal(size=(5, 3))
        out1 = unit(Tensor(x1)).data[:, 1]
        out2 = unit(Tensor(x2)).data[:, 1]
        assert np.array_equal(out1, out2)
        assert np.allclose(out1, 0.0, atol=1e-12)

    def test_shape_preserved_for_any_length(self):
        unit = ErmUnit(3, np.random.default_rng(20))
        unit.eval()
        for t in (1, 2, 7):
            x = Tensor(np.random.default_rng(t).normal(size=(t, 3)))
            assert unit(x).shape == (t, 3)

    def test_wrong_width_rejected(self):
        unit = ErmUnit(3, np.random.default_rng(21))
        with pytest.raises(ConfigError):
            unit(Tensor(np.zeros((4, 5))))

    def test_gradients_training_mode(self):
        rng = np.random.default_rng(22)
        unit = ErmUnit(3, np.random.default_rng(23))
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        coef = rng.normal(size=(5, 3))

        def f():
            unit.running_mean[...] = 0.0
            unit.running_var[...] = 1.0
            return T.tsum(T.mul(unit(x), Tensor(coef)))

        assert max_relative_error(f, [x] + unit.parameters()) <= TOL


class TestMmilPool:
    def make(self, feat_dim=6, classes=4, seed=24):
        return MmilPool(feat_dim, classes, np.random.default_rng(seed))

    def test_constant_probability_is_exact_fixed_point(self):
        rng = np.random.default_rng(25)
        pool = self.make()
        q = rng.random(4)
        p = Tensor(np.tile(q, (5, 1)))
        f_a = Tensor(rng.normal(size=(5, 6)))
        f_v = Tensor(rng.normal(size=(5, 6)))
        out = pool(p, p, f_a, f_v).data
        assert np.abs(out - q).max() < 1e-12

    def test_single_segment_equal_logits_averages_modalities(self):
        rng = np.random.default_rng(26)
        pool = self.make()
        pool.modality_proj.weight.data[...] = 0.0
        pool.modality_proj.bias.data[...] = 0.0
        p_a = Tensor(rng.random((1, 4)))
        p_v = Tensor(rng.random((1, 4)))
        out = pool(p_a, p_v, Tensor(rng.normal(size=(1, 6))), Tensor(rng.normal(size=(1, 6)))).data
        assert np.abs(out - 0.5 * (p_a.data[0] + p_v.data[0])).max() < 1e-12

    def test_against_double_sum_oracle(self):
        rng = np.random.default_rng(27)
        pool = self.make(seed=28)
        p_a, p_v = rng.random((7, 4)), rng.random((7, 4))
        f_a, f_v = rng.normal(size=(7, 6)), rng.normal(size=(7, 6))
        got = pool(Tensor(p_a), Tensor(p_v), Tensor(f_a), Tensor(f_v)).data
        want = mmil_oracle(
            p_a, p_v, f_a, f_v,
            pool.temporal_proj.weight.data, pool.temporal_proj.bias.data,
            pool.modality_proj.weight.data, pool.modality_proj.bias.data,
        )
        assert np.abs(got - want).max() < 1e-12

    def test_convexity_and_weight_sums(self):
        rng = np.random.default_rng(29)
        pool = self.make(seed=30)
        for _ in range(50):
            t = int(rng.integers(1, 8))
            p_a, p_v = rng.random((t, 4)), rng.random((t, 4))
            f_a, f_v = rng.normal(size=(t, 6)), rng.normal(size=(t, 6))
            out, w_time, w_mod = pool.forward_with_weights(
                Tensor(p_a), Tensor(p_v), Tensor(f_a), Tensor(f_v)
            )
            lo = np.minimum(p_a, p_v).min(axis=0)
            hi = np.maximum(p_a, p_v).max(axis=0)
            assert (out.data >= lo - 1e-12).all() and (out.data <= hi + 1e-12).all()
            assert np.abs(w_time.sum(axis=0) - 1.0).max() < 1e-10
            assert np.abs(w_mod.sum(axis=1) - 1.0).max() < 1e-10

    def test_gradients(self):
        rng = np.random.default_rng(31)
        pool = self.make(feat_dim=4, classes=3, seed=32)
        p_a = Tensor(rng.random((4, 3)), requires_grad=True)
        p_v = Tensor(rng.random((4, 3)), requires_grad=True)
        f_a = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        f_v = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        params = [p_a, p_v, f_a, f_v] + pool.parameters()
        assert max_relative_error(lambda: T.tsum(pool(p_a, p_v, f_a, f_v)), params) <= TOL


class TestModuleMechanics:
    def test_named_parameters_and_state_roundtrip(self):
        block = make_block(seed=33)
        names = block.named_parameters()
        assert "attn.wq.weight" in names
        state = block.state_arrays()
        clone = make_block(seed=99)
        clone.load_state_arrays(state)
        x = Tensor(np.random.default_rng(34).normal(size=(3, 8)))
        assert np.array_equal(block.eval()(x).data, clone.eval()(x).data)

    def test_linear_zero_init(self):
        lin = Linear(3, 2, np.random.default_rng(0), zero_init=True)
        assert np.array_equal(lin(Tensor(np.ones((4, 3)))).data, np.zeros((4, 2)))

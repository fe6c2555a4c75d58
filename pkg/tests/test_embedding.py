import numpy as np
import pytest
from hypothesis import given, strategies as st

from stllmdf import autodiff as ad
from stllmdf.autodiff import Tensor
from stllmdf.embedding import (EmbeddingConfig, EmbeddingTables, assemble_hidden, embed,
                               embed_features, embed_periodicity, slots_per_day)
from stllmdf.errors import ConfigurationError, ShapeError

F64 = np.float64


def tables(rng, **kw):
    base = dict(input_len=4, num_nodes=3, num_features=1, d_f=2, d_a=3, slots_per_day=288)
    base.update(kw)
    return EmbeddingTables(EmbeddingConfig(**base), rng, F64)


class TestConfig:
    def test_default_width(self):
        assert EmbeddingConfig().d_h == 152

    @pytest.mark.parametrize("g,n", [(5, 288), (60, 24), (15, 96), (1440, 1)])
    def test_slots_per_day(self, g, n):
        assert slots_per_day(g) == n

    def test_granularity_must_divide_day(self):
        with pytest.raises(ConfigurationError):
            slots_per_day(7)


class TestFeatures:
    def test_zero_map(self, rng):
        tb = tables(rng)
        tb.W_feat.data[:] = 0
        out = embed_features(Tensor(rng.standard_normal((4, 3, 1)), dtype=F64), tb)
        assert not out.data.any()

    def test_identity_map(self, rng):
        tb = tables(rng, num_features=2, d_f=2)
        tb.W_feat.data[:] = np.eye(2)
        x = rng.standard_normal((4, 3, 2))
        np.testing.assert_array_equal(embed_features(Tensor(x, dtype=F64), tb).data, x)

    def test_hand_value(self, rng):
        tb = tables(rng)
        tb.W_feat.data[:] = [[2.0, 3.0]]
        tb.b_feat.data[:] = [1.0, -1.0]
        out = embed_features(Tensor(np.full((1, 1, 1), 5.0), dtype=F64), tb)
        np.testing.assert_allclose(out.data.reshape(-1), [11.0, 14.0])

    def test_feature_mismatch(self, rng):
        with pytest.raises(ShapeError):
            embed_features(Tensor(np.ones((4, 3, 2))), tables(rng))


class TestPeriodicity:
    def test_zero_tables(self, rng):
        tb = tables(rng)
        tb.T_w.data[:] = 0
        tb.T_d.data[:] = 0
        out = embed_periodicity(np.zeros(4, int), np.zeros(4, int), tb)
        assert out.shape == (4, 3, 4) and not out.data.any()

    def test_direct_rows(self, rng):
        tb = tables(rng)
        out = embed_periodicity(np.array([2, 2, 0, 1]), np.array([100, 100, 5, 7]), tb).data
        expect = np.concatenate([tb.T_w.data[2], tb.T_d.data[100]])
        for node in range(3):
            np.testing.assert_array_equal(out[0, node], expect)
        np.testing.assert_array_equal(out[0], out[1])

    def test_index_out_of_range(self, rng):
        with pytest.raises(IndexError):
            embed_periodicity(np.array([7, 0, 0, 0]), np.zeros(4, int), tables(rng))
        with pytest.raises(IndexError):
            embed_periodicity(np.zeros(4, int), np.full(4, 288), tables(rng))

    @given(st.integers(0, 6), st.integers(0, 287), st.permutations(range(3)))
    def test_node_invariant(self, day, slot, perm):
        tb = tables(np.random.default_rng(0))
        out = embed_periodicity(np.full(4, day), np.full(4, slot), tb).data
        np.testing.assert_array_equal(out[:, list(perm)], out)

    def test_only_indexed_rows_get_gradient(self, rng):
        tb = tables(rng, slots_per_day=6)
        dow, tod = np.array([1, 1, 3, 3]), np.array([0, 2, 2, 5])
        w = rng.standard_normal((4, 3, 4))
        grads = ad.backward((embed_periodicity(dow, tod, tb) * Tensor(w, dtype=F64)).sum())
        assert set(np.flatnonzero(np.abs(grads[tb.T_w]).sum(1))) == {1, 3}
        assert set(np.flatnonzero(np.abs(grads[tb.T_d]).sum(1))) == {0, 2, 5}
        err = ad.finite_diff_check(lambda: (embed_periodicity(dow, tod, tb) * Tensor(w, dtype=F64)).sum(),
                                   [tb.T_w, tb.T_d])
        assert err < 1e-4


class TestAssemble:
    def test_width_152(self, rng):
        cfg = EmbeddingConfig(input_len=12, num_nodes=2)
        tb = EmbeddingTables(cfg, rng, F64)
        x = rng.standard_normal((3, 12, 2, 1))
        out = embed(x, rng.integers(0, 7, (3, 12)), rng.integers(0, 288, (3, 12)), tb)
        assert out.shape == (3, 12, 2, 152)

    def test_slices_recover_segments(self, rng):
        xf = Tensor(rng.standard_normal((2, 4, 3, 2)))
        xp = Tensor(rng.standard_normal((2, 4, 3, 4)))
        xa = Tensor(rng.standard_normal((4, 3, 5)))
        out = assemble_hidden(xf, xp, xa).data
        np.testing.assert_array_equal(out[..., :2], xf.data)
        np.testing.assert_array_equal(out[..., 2:6], xp.data)
        for b in range(2):
            np.testing.assert_array_equal(out[b, ..., 6:], xa.data)

    def test_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            assemble_hidden(Tensor(np.ones((4, 3, 2))), Tensor(np.ones((4, 3, 3))),
                            Tensor(np.ones((4, 3, 5))))

    def test_equal_calendar_gives_equal_periodicity(self, rng):
        tb = tables(rng)
        dow, tod = rng.integers(0, 7, (1, 4)), rng.integers(0, 288, (1, 4))
        a = embed(rng.standard_normal((1, 4, 3, 1)), dow, tod, tb).data
        b = embed(rng.standard_normal((1, 4, 3, 1)), dow, tod, tb).data
        np.testing.assert_array_equal(a[..., 2:6], b[..., 2:6])
        np.testing.assert_array_equal(a[..., 6:], b[..., 6:])

    def test_adaptive_shared_across_samples(self, rng):
        tb = tables(rng)
        out = embed(rng.standard_normal((5, 4, 3, 1)), rng.integers(0, 7, (5, 4)),
                    rng.integers(0, 288, (5, 4)), tb).data
        for b in range(5):
            np.testing.assert_array_equal(out[b, ..., 6:], tb.X_a.data)

    def test_init_distributions(self):
        tb = EmbeddingTables(EmbeddingConfig(input_len=12, num_nodes=16), np.random.default_rng(0), F64)
        bound = 0.5 / np.sqrt(80)
        assert np.abs(tb.X_a.data).max() <= bound
        assert abs(tb.T_d.data.std() - 0.02) < 0.002

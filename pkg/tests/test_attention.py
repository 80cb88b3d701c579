"""Full/sparse attention, mask construction, and the shift decomposition."""

import numpy as np
import pytest

from qslab.attention import (AttentionInputs, SparsityMask, build_block_mask,
                             build_topk_mask, full_attention, matrix_to_csv,
                             measure_attention_shift, sparse_attention)
from qslab.errors import DegenerateRowError, ParameterError, ShapeError
from qslab.quant import Granularity, calibrate_minmax, fake_quant


def naive_attention(q, k, v, mask_bits=None):
    """Two-loop reference implementation kept independent of the library."""
    n, d = q.shape
    a = np.zeros((n, n))
    for i in range(n):
        logits = np.empty(n)
        for j in range(n):
            logits[j] = q[i] @ k[j] / np.sqrt(d)
            if mask_bits is not None and not mask_bits[i, j]:
                logits[j] = -np.inf
        m = logits.max()
        e = np.exp(logits - m)
        a[i] = e / e.sum()
    return a, a @ v


def random_inputs(rng, n, d):
    return AttentionInputs(q=rng.standard_normal((n, d)), k=rng.standard_normal((n, d)),
                           v=rng.standard_normal((n, d)))


def random_keep_mask(rng, n, density=0.5):
    bits = rng.random((n, n)) < density
    np.fill_diagonal(bits, True)
    return SparsityMask(bits=bits, density=bits.sum() / (n * n))


class TestFullAttention:
    def test_singleton(self):
        inputs = AttentionInputs(q=[[2.0]], k=[[3.0]], v=[[7.0]])
        a, out = full_attention(inputs)
        assert np.array_equal(a, [[1.0]])
        assert np.array_equal(out, [[7.0]])

    def test_constant_keys_give_uniform_map(self):
        rng = np.random.default_rng(0)
        n, d = 6, 4
        k = np.tile(rng.standard_normal(d), (n, 1))
        inputs = AttentionInputs(q=rng.standard_normal((n, d)), k=k,
                                 v=rng.standard_normal((n, d)))
        a, _ = full_attention(inputs)
        assert np.allclose(a, 1.0 / n)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        inputs = random_inputs(rng, 8, 4)
        a, out = full_attention(inputs)
        a_ref, out_ref = naive_attention(inputs.q, inputs.k, inputs.v)
        assert np.max(np.abs(a - a_ref)) <= 1e-9
        assert np.max(np.abs(out - out_ref)) <= 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            AttentionInputs(q=np.ones((3, 2)), k=np.ones((3, 2)), v=np.ones((2, 2)))


class TestSparseAttention:
    def test_full_mask_bit_exact(self):
        rng = np.random.default_rng(2)
        inputs = random_inputs(rng, 10, 5)
        mask = SparsityMask(bits=np.ones((10, 10), dtype=bool), density=1.0)
        a_full, out_full = full_attention(inputs)
        a_sparse, out_sparse = sparse_attention(inputs, mask)
        assert np.array_equal(a_full, a_sparse)
        assert np.array_equal(out_full, out_sparse)

    def test_identity_mask(self):
        rng = np.random.default_rng(3)
        inputs = random_inputs(rng, 5, 3)
        mask = SparsityMask(bits=np.eye(5, dtype=bool), density=0.2)
        a, out = sparse_attention(inputs, mask)
        assert np.array_equal(a, np.eye(5))
        assert np.array_equal(out, inputs.v)

    def test_matches_naive_masked_oracle(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            inputs = random_inputs(rng, 8, 4)
            mask = random_keep_mask(rng, 8)
            a, out = sparse_attention(inputs, mask)
            a_ref, out_ref = naive_attention(inputs.q, inputs.k, inputs.v, mask.bits)
            assert np.max(np.abs(a - a_ref)) <= 1e-9
            assert np.max(np.abs(out - out_ref)) <= 1e-9

    def test_masked_entries_exactly_zero(self):
        rng = np.random.default_rng(4)
        inputs = random_inputs(rng, 12, 4)
        mask = random_keep_mask(rng, 12, density=0.3)
        a, _ = sparse_attention(inputs, mask)
        assert np.all(a[~mask.bits] == 0.0)
        assert np.allclose(a.sum(axis=1), 1.0, atol=1e-9)

    def test_degenerate_mask_rejected_at_construction(self):
        bits = np.ones((3, 3), dtype=bool)
        bits[1, :] = False
        with pytest.raises(DegenerateRowError):
            SparsityMask(bits=bits, density=0.5)

    def test_literal_mode_keeps_masked_mass(self):
        # multiplying logits by 0 leaves pruned pairs with exp(0) weight
        rng = np.random.default_rng(5)
        inputs = random_inputs(rng, 6, 3)
        mask = random_keep_mask(rng, 6, density=0.4)
        a_lit, _ = sparse_attention(inputs, mask, literal=True)
        assert np.all(a_lit[~mask.bits] > 0.0)

    def test_mask_length_mismatch(self):
        rng = np.random.default_rng(6)
        inputs = random_inputs(rng, 4, 2)
        with pytest.raises(ShapeError):
            sparse_attention(inputs, random_keep_mask(rng, 5))


class TestTopkMask:
    def _reference_map(self, rng, n):
        inputs = random_inputs(rng, n, 4)
        a, _ = full_attention(inputs)
        return a

    def test_density_one_all_true(self):
        a = self._reference_map(np.random.default_rng(7), 8)
        mask = build_topk_mask(a, 1.0)
        assert mask.bits.all()

    def test_min_density_is_argmax_plus_diagonal(self):
        rng = np.random.default_rng(8)
        n = 8
        a = self._reference_map(rng, n)
        mask = build_topk_mask(a, 1.0 / n)
        for i in range(n):
            keep = set(np.flatnonzero(mask.bits[i]))
            assert i in keep
            assert int(np.argmax(a[i])) in keep
            assert len(keep) <= 2

    @pytest.mark.parametrize("density", [0.15, 0.25, 0.3, 0.5, 0.9])
    def test_density_within_slack(self, density):
        n = 64
        a = self._reference_map(np.random.default_rng(9), n)
        mask = build_topk_mask(a, density)
        assert abs(mask.popcount() / n**2 - density) <= 1.0 / n + 1e-12
        assert np.all(np.diag(mask.bits))

    def test_kept_mass_beats_random_mask(self):
        wins = 0
        trials = 50
        for seed in range(trials):
            rng = np.random.default_rng(seed)
            n = 16
            a = self._reference_map(rng, n)
            mask = build_topk_mask(a, 0.25)
            random_mask = random_keep_mask(rng, n, density=0.25)
            wins += a[mask.bits].sum() >= a[random_mask.bits].sum()
        assert wins >= 0.95 * trials

    def test_density_out_of_range(self):
        a = self._reference_map(np.random.default_rng(10), 4)
        with pytest.raises(ParameterError):
            build_topk_mask(a, 0.0)


class TestBlockMask:
    def test_block_equals_length_all_true(self):
        mask = build_block_mask(8, 8, 1.0, seed=0)
        assert mask.bits.all()

    def test_unit_block_min_density_identity(self):
        mask = build_block_mask(8, 1, 1.0 / 8, seed=0)
        assert np.array_equal(mask.bits, np.eye(8, dtype=bool))

    def test_density_hit(self):
        mask = build_block_mask(16, 4, 0.5, seed=1)
        assert 0.44 <= mask.popcount() / 256 <= 0.56

    def test_below_floor_reports_floor(self):
        with pytest.raises(ParameterError, match="floor"):
            build_block_mask(16, 4, 0.1, seed=0)

    def test_seed_determinism(self):
        a = build_block_mask(16, 4, 0.5, seed=3)
        b = build_block_mask(16, 4, 0.5, seed=3)
        assert np.array_equal(a.bits, b.bits)


class TestAttentionShift:
    def test_no_compression_no_shift(self):
        rng = np.random.default_rng(11)
        inputs = random_inputs(rng, 8, 4)
        mask = SparsityMask(bits=np.ones((8, 8), dtype=bool), density=1.0)
        rep = measure_attention_shift(inputs, inputs, mask)
        assert rep.delta_sparse == rep.delta_quant == rep.delta_total == 0.0
        assert rep.interaction == 0.0

    def test_sparse_only(self):
        rng = np.random.default_rng(12)
        inputs = random_inputs(rng, 8, 4)
        mask = random_keep_mask(rng, 8, density=0.4)
        rep = measure_attention_shift(inputs, inputs, mask)
        assert rep.delta_quant == 0.0
        assert rep.delta_total == pytest.approx(rep.delta_sparse)

    def test_joint_shift_dominates(self):
        wins = 0
        trials = 100
        for seed in range(trials):
            rng = np.random.default_rng(seed)
            inputs = random_inputs(rng, 16, 8)
            quantized = AttentionInputs(
                q=fake_quant(inputs.q, calibrate_minmax(inputs.q, 4, Granularity.PER_TOKEN)),
                k=fake_quant(inputs.k, calibrate_minmax(inputs.k, 4, Granularity.PER_TOKEN)),
                v=inputs.v)
            a_ref, _ = full_attention(inputs)
            mask = build_topk_mask(a_ref, 0.25)
            rep = measure_attention_shift(inputs, quantized, mask)
            wins += rep.delta_total >= max(rep.delta_sparse, rep.delta_quant)
        assert wins >= 0.90 * trials

    def test_monotone_shift_under_nested_masks(self):
        wins = 0
        trials = 100
        for seed in range(trials):
            rng = np.random.default_rng(seed)
            inputs = random_inputs(rng, 16, 4)
            a_ref, _ = full_attention(inputs)
            sparse_mask = build_topk_mask(a_ref, 0.25)
            dense_mask = build_topk_mask(a_ref, 0.5)
            assert sparse_mask.is_subset_of(dense_mask)
            a_full, _ = full_attention(inputs)
            a_dense, _ = sparse_attention(inputs, dense_mask)
            a_sparse, _ = sparse_attention(inputs, sparse_mask)
            wins += (np.linalg.norm(a_full - a_dense)
                     <= np.linalg.norm(a_full - a_sparse) + 1e-12)
        assert wins == trials


class TestMaskSerialization:
    def test_rle_round_trip(self):
        rng = np.random.default_rng(13)
        mask = random_keep_mask(rng, 12, density=0.3)
        restored = SparsityMask.loads(mask.dumps())
        assert np.array_equal(mask.bits, restored.bits)
        assert restored.density == mask.density

    def test_csv_export(self, tmp_path):
        rng = np.random.default_rng(14)
        inputs = random_inputs(rng, 4, 2)
        a, _ = full_attention(inputs)
        path = tmp_path / "map.csv"
        matrix_to_csv(a, path)
        loaded = np.loadtxt(path, delimiter=",")
        assert np.allclose(loaded, a)

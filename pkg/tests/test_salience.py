import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropseg.salience import (
    ActivePatchSet,
    SalienceDropoutError,
    SalienceResponse,
    TokenSpanMap,
    aggregate_token_maps,
    class_softmax,
    drop_set_update,
    gradcam_combine,
    salience_dropout_run,
)


def scalar_gradcam(attn, grad):
    """Independent scalar-loop oracle for the gradient-weighted combine."""
    k, p, _ = attn.shape
    out = np.zeros_like(attn, dtype=float)
    for ki in range(k):
        for i in range(p):
            for j in range(p):
                g = grad[ki, i, j]
                out[ki, i, j] = (g if g > 0 else 0.0) * attn[ki, i, j]
    return out


class TestGradcamCombine:
    def test_nonpositive_gradient_kills_everything(self):
        attn = np.random.default_rng(0).random((2, 3, 3))
        grad = -np.random.default_rng(1).random((2, 3, 3))
        assert np.all(gradcam_combine(attn, grad) == 0)

    def test_unit_gradient_is_identity(self):
        attn = np.random.default_rng(0).random((2, 3, 3))
        out = gradcam_combine(attn, np.ones_like(attn))
        np.testing.assert_array_equal(out, attn)

    def test_worked_example_matches_scalar_oracle(self):
        attn = np.array([[[0.2, 0.5], [0.1, 0.3]]])
        grad = np.array([[[-1.0, 2.0], [0.5, -3.0]]])
        expected = np.array([[[0.0, 1.0], [0.05, 0.0]]])  # frozen from the oracle
        np.testing.assert_allclose(scalar_gradcam(attn, grad), expected, atol=1e-12)
        np.testing.assert_allclose(gradcam_combine(attn, grad), expected, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="match"):
            gradcam_combine(np.zeros((1, 2, 2)), np.zeros((1, 3, 3)))

    def test_non_finite_rejected(self):
        attn = np.zeros((1, 2, 2))
        grad = np.full((1, 2, 2), np.nan)
        with pytest.raises(ValueError, match="finite"):
            gradcam_combine(attn, grad)
        with pytest.raises(ValueError, match="finite"):
            gradcam_combine(attn + np.inf, np.zeros((1, 2, 2)))

    def test_negative_attention_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            gradcam_combine(-np.ones((1, 2, 2)), np.ones((1, 2, 2)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_bounded_by_attention_when_grad_below_one(self, seed):
        rng = np.random.default_rng(seed)
        attn = rng.random((2, 4, 4))
        grad = rng.uniform(-1.0, 1.0, (2, 4, 4))
        out = gradcam_combine(attn, grad)
        assert np.all(out >= 0)
        assert np.all(out <= attn + 1e-12)


class TestAggregateTokenMaps:
    def test_single_token_span(self):
        maps = np.random.default_rng(0).random((5, 3, 3))
        spans = TokenSpanMap(spans=((4,),))
        np.testing.assert_array_equal(aggregate_token_maps(maps, spans)[0], maps[4])

    def test_mean_of_constant_maps(self):
        maps = np.zeros((5, 2, 2))
        maps[4] = 0.4
        spans = TokenSpanMap(spans=((3, 4),))
        np.testing.assert_allclose(aggregate_token_maps(maps, spans)[0], 0.2)

    def test_elementwise_mean_oracle(self):
        maps = np.zeros((5, 2, 2))
        maps[3] = np.array([[1.0, 0.0], [0.0, 1.0]])
        maps[4] = np.array([[0.0, 1.0], [1.0, 0.0]])
        expected = (maps[3] + maps[4]) / 2  # elementwise-mean oracle
        out = aggregate_token_maps(maps, TokenSpanMap(spans=((3, 4),)))
        np.testing.assert_allclose(out[0], expected)
        np.testing.assert_allclose(out[0], np.full((2, 2), 0.5))

    def test_permutation_invariant_within_span(self):
        maps = np.random.default_rng(1).random((6, 2, 2))
        a = aggregate_token_maps(maps, TokenSpanMap(spans=((3, 4, 5),)))
        b = aggregate_token_maps(maps, TokenSpanMap(spans=((5, 3, 4),)))
        np.testing.assert_allclose(a, b)

    def test_empty_span_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            TokenSpanMap(spans=((),))

    def test_prefix_indices_rejected(self):
        with pytest.raises(ValueError, match="prefix"):
            TokenSpanMap(spans=((2,),))

    def test_overlapping_spans_rejected(self):
        with pytest.raises(ValueError, match="two spans"):
            TokenSpanMap(spans=((3, 4), (4, 5)))

    def test_out_of_range_index_rejected(self):
        maps = np.zeros((4, 2, 2))
        with pytest.raises(ValueError, match="out of range"):
            aggregate_token_maps(maps, TokenSpanMap(spans=((5,),)))


class TestClassSoftmax:
    def test_single_class_gives_ones(self):
        attn = np.random.default_rng(0).random((1, 3, 3))
        np.testing.assert_allclose(class_softmax(attn), 1.0)

    def test_equal_values_give_uniform(self):
        attn = np.full((4, 2, 2), 0.7)
        np.testing.assert_allclose(class_softmax(attn), 0.25)

    def test_hand_computed_two_class(self):
        attn = np.zeros((2, 1, 1))
        attn[0], attn[1] = 2.0, 1.0
        out = class_softmax(attn, temperature=1.0)
        # e^2 / (e^2 + e^1), hand computed
        np.testing.assert_allclose(out[0, 0, 0], 0.7311, atol=1e-4)
        np.testing.assert_allclose(out[1, 0, 0], 0.2689, atol=1e-4)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError, match="temperature"):
            class_softmax(np.ones((2, 2, 2)), temperature=0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_columns_sum_to_one_and_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        attn = rng.random((3, 4, 4)) * 5
        out = class_softmax(attn)
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-6)
        shift = rng.random((1, 4, 4)) * 3
        out2 = class_softmax(attn + shift)
        np.testing.assert_allclose(out, out2, atol=1e-6)


class TestDropSetUpdate:
    def test_all_equal_drops_lowest_row_major(self):
        active = ActivePatchSet(2, np.ones((2, 2), bool))
        updated = drop_set_update(np.ones((2, 2)), active)
        np.testing.assert_array_equal(updated.mask, [[False, False], [True, True]])

    def test_sort_and_take_oracle(self):
        # row-major values 5,3,8,1: the two highest (8 and 5) go
        u = np.array([[5.0, 3.0], [8.0, 1.0]])
        active = ActivePatchSet.full(2)
        updated = drop_set_update(u, active)
        np.testing.assert_array_equal(updated.mask, [[False, True], [False, True]])

    def test_576_to_288(self):
        active = ActivePatchSet.full(24)
        updated = drop_set_update(np.random.default_rng(0).random((24, 24)), active)
        assert updated.count == 288

    def test_empty_active_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            drop_set_update(np.ones((2, 2)), ActivePatchSet(2, np.zeros((2, 2), bool)))

    def test_single_patch_left_unchanged(self):
        mask = np.zeros((2, 2), bool)
        mask[1, 1] = True
        updated = drop_set_update(np.ones((2, 2)), ActivePatchSet(2, mask))
        assert updated.count == 1

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 8))
    def test_removes_exactly_half_and_stays_subset(self, seed, grid):
        rng = np.random.default_rng(seed)
        mask = rng.random((grid, grid)) < 0.7
        if not mask.any():
            mask[0, 0] = True
        active = ActivePatchSet(grid, mask)
        updated = drop_set_update(rng.random((grid, grid)), active)
        assert updated.count == active.count - active.count // 2
        assert updated.is_subset_of(active)

    def test_repeated_halving_reaches_power_of_two_sizes(self):
        active = ActivePatchSet.full(8)  # 64 patches
        rng = np.random.default_rng(3)
        sizes = [active.count]
        for _ in range(4):
            active = drop_set_update(rng.random((8, 8)), active)
            sizes.append(active.count)
        assert sizes == [64, 32, 16, 8, 4]


class _StubProvider:
    """Provider double driven by a function(active) -> (attn, grad)."""

    def __init__(self, n_classes, grid, fn):
        self.n_classes = n_classes
        self.grid = grid
        self.fn = fn
        self.queries = []

    def query(self, active):
        self.queries.append(active)
        attn, grad = self.fn(active)
        return SalienceResponse(attention=attn, gradient=grad)


class TestSalienceDropoutRun:
    def test_four_rounds_on_24_grid_leaves_36(self):
        rng = np.random.default_rng(0)

        def fn(active):
            attn = rng.random((2, 24, 24)) * active.mask
            return attn, np.ones_like(attn) * active.mask

        acc = salience_dropout_run(_StubProvider(2, 24, fn), rounds=4)
        assert acc.final_active.count == 36  # 93.75% of 576 dropped

    def test_zero_provider_single_round(self):
        def fn(active):
            z = np.zeros((1, 4, 4))
            return z, z

        acc = salience_dropout_run(_StubProvider(1, 4, fn), rounds=1)
        assert np.all(acc.aggregate == 0)
        # half dropped by the row-major tie-break
        np.testing.assert_array_equal(
            acc.final_active.mask.reshape(-1)[:8], np.zeros(8, bool)
        )
        assert acc.final_active.count == 8

    def test_replay_sum_oracle(self):
        """Replay recorded responses through an independent loop and compare."""
        rng = np.random.default_rng(42)
        responses = {}

        def fn(active):
            key = active.to_bits()
            if key not in responses:
                attn = rng.random((2, 6, 6)) * active.mask
                grad = rng.normal(size=(2, 6, 6)) * active.mask
                responses[key] = (attn, grad)
            return responses[key]

        acc = salience_dropout_run(_StubProvider(2, 6, fn), rounds=3)

        # independent replay: same drop rule, scalar accumulation
        replay = np.zeros((2, 6, 6))
        active = ActivePatchSet.full(6)
        for _ in range(3):
            attn, grad = responses[active.to_bits()]
            layer = np.maximum(grad, 0) * attn
            layer = layer * active.mask
            replay = replay + layer
            active = drop_set_update(layer.sum(axis=0), active)
        np.testing.assert_array_equal(acc.aggregate, replay)

    def test_aggregate_equals_sum_of_history_exactly(self):
        rng = np.random.default_rng(1)

        def fn(active):
            attn = rng.random((3, 8, 8)) * active.mask
            return attn, rng.normal(size=(3, 8, 8)) * active.mask

        acc = salience_dropout_run(_StubProvider(3, 8, fn), rounds=4)
        total = np.zeros_like(acc.aggregate)
        for layer in acc.history:
            total += layer
        np.testing.assert_array_equal(acc.aggregate, total)

    def test_history_zero_outside_previous_active_set(self):
        rng = np.random.default_rng(2)

        def fn(active):
            # deliberately violate masking; the core must force zeros
            attn = rng.random((1, 6, 6))
            return attn, np.ones((1, 6, 6))

        acc = salience_dropout_run(_StubProvider(1, 6, fn), rounds=3)
        for t, layer in enumerate(acc.history):
            outside = ~acc.active_sets[t].mask
            assert np.all(layer[:, outside] == 0)

    def test_provider_failure_aborts_with_round_index(self):
        calls = {"n": 0}

        def fn(active):
            calls["n"] += 1
            if calls["n"] == 2:
                raise RuntimeError("provider crashed")
            z = np.ones((1, 4, 4)) * active.mask
            return z, z

        with pytest.raises(SalienceDropoutError, match="round 1"):
            salience_dropout_run(_StubProvider(1, 4, fn), rounds=3)

    def test_grid_mismatch_rejected(self):
        def fn(active):
            z = np.ones((1, 5, 5))
            return z, z

        with pytest.raises(SalienceDropoutError, match="shape"):
            salience_dropout_run(_StubProvider(1, 4, fn), rounds=1)

    def test_rounds_must_be_positive(self):
        with pytest.raises(ValueError):
            salience_dropout_run(_StubProvider(1, 4, lambda a: None), rounds=0)


class TestActivePatchSet:
    def test_bit_round_trip(self):
        rng = np.random.default_rng(5)
        mask = rng.random((5, 5)) < 0.5
        aset = ActivePatchSet(5, mask)
        again = ActivePatchSet.from_bits(aset.to_bits(), 5)
        np.testing.assert_array_equal(again.mask, mask)

    def test_wrong_byte_count_rejected(self):
        with pytest.raises(ValueError, match="bytes"):
            ActivePatchSet.from_bits(b"\x00", 5)

    def test_mask_is_immutable(self):
        aset = ActivePatchSet.full(3)
        with pytest.raises(ValueError):
            aset.mask[0, 0] = False

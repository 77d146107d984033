"""Mask plan statistics, determinism, and substitution mechanics."""

import numpy as np
import pytest

from fatspeech import numerics as nm
from fatspeech.masking import MaskPlan, mask_span, mask_tokens, substitute_rows


class TestSpanPlans:
    def test_ratio_zero_masks_nothing(self):
        plan = mask_span(500, 0.0, 5, seed=1)
        assert plan.count == 0

    def test_ratio_one_masks_everything(self):
        for seed in range(5):
            plan = mask_span(137, 1.0, 5, seed=seed)
            assert plan.indicator.all()

    def test_same_seed_same_plan(self):
        a = mask_span(300, 0.3, 5, seed=42)
        b = mask_span(300, 0.3, 5, seed=42)
        np.testing.assert_array_equal(a.indicator, b.indicator)
        assert a.spans == b.spans

    def test_different_seeds_differ(self):
        a = mask_span(300, 0.3, 5, seed=1)
        b = mask_span(300, 0.3, 5, seed=2)
        assert not np.array_equal(a.indicator, b.indicator)

    def test_mean_fraction_near_target(self):
        fractions = [mask_span(10_000, 0.3, 5, seed=s).fraction for s in range(100)]
        assert abs(np.mean(fractions) - 0.3) < 0.03

    def test_every_drawn_span_at_most_span_len(self):
        for seed in range(20):
            plan = mask_span(200, 0.5, 5, seed=seed)
            assert all(1 <= stop - start <= 5 for start, stop in plan.spans)

    def test_spans_union_equals_indicator(self):
        plan = mask_span(200, 0.4, 5, seed=9)
        rebuilt = np.zeros(200, dtype=bool)
        for start, stop in plan.spans:
            assert not rebuilt[start:stop].any()  # non-overlapping
            rebuilt[start:stop] = True
        np.testing.assert_array_equal(rebuilt, plan.indicator)

    def test_fraction_reaches_at_least_target(self):
        for seed in range(10):
            plan = mask_span(1000, 0.3, 5, seed=seed)
            assert plan.fraction >= 0.3

    def test_empty_sequence(self):
        plan = mask_span(0, 0.5, 5, seed=0)
        assert plan.indicator.shape == (0,)

    def test_bad_ratio_rejected(self):
        with pytest.raises(ValueError):
            mask_span(10, 1.5, 5, seed=0)


class TestTokenPlans:
    def test_extremes(self):
        assert mask_tokens(50, 0.0, seed=3).count == 0
        assert mask_tokens(50, 1.0, seed=3).count == 50

    def test_mean_fraction_near_target(self):
        fractions = [mask_tokens(10_000, 0.3, seed=s).fraction for s in range(100)]
        assert abs(np.mean(fractions) - 0.3) < 0.03

    def test_deterministic(self):
        a = mask_tokens(64, 0.3, seed=7)
        b = mask_tokens(64, 0.3, seed=7)
        np.testing.assert_array_equal(a.indicator, b.indicator)


class TestSubstitution:
    def test_masked_rows_replaced_kept_rows_untouched(self):
        rng = np.random.default_rng(0)
        rows = rng.normal(size=(6, 4))
        learned = nm.Tensor(np.full(4, 9.0))
        indicator = np.array([True, False, True, False, False, True])
        out = substitute_rows(nm.Tensor(rows), indicator, learned)
        np.testing.assert_array_equal(out.data[indicator], np.full((3, 4), 9.0))
        np.testing.assert_array_equal(out.data[~indicator], rows[~indicator])

    def test_gradient_reaches_learned_vector_only_via_masked_rows(self):
        rows = nm.Tensor(np.ones((5, 3)))
        learned = nm.Tensor(np.zeros(3), requires_grad=True)
        indicator = np.array([True, True, False, False, False])
        with nm.Tape() as tape:
            out = substitute_rows(rows, indicator, learned)
            tape.backward(nm.sum_(out))
        np.testing.assert_array_equal(learned.grad, np.full(3, 2.0))

    def test_no_masking_means_identity(self):
        rows = np.arange(12.0).reshape(4, 3)
        out = substitute_rows(nm.Tensor(rows), np.zeros(4, bool),
                              nm.Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, rows)

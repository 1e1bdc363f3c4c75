import numpy as np
import pytest
from hypothesis import given, strategies as st

from moskit import (
    InvalidInputError,
    PostConfig,
    correct,
    decode_classification,
    ensemble,
    pipeline,
    quantize,
)


class TestQuantize:
    def test_on_grid_unchanged(self):
        assert quantize(3.0) == 3.0

    def test_clamping(self):
        assert quantize(0.2) == 1.0
        assert quantize(5.7) == 5.0

    def test_nearest_grid_point(self):
        assert quantize(3.07) == 3.125

    def test_midpoint_rounds_up(self):
        assert quantize(3.0625) == 3.125

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            quantize(float("nan"))

    @given(st.floats(-2, 8, allow_nan=False))
    def test_idempotent_and_on_grid(self, x):
        q = quantize(x)
        assert quantize(q) == q
        assert 1.0 <= q <= 5.0
        steps = (q - 1.0) / 0.125
        assert abs(steps - round(steps)) < 1e-9

    @given(st.floats(1, 5, allow_nan=False))
    def test_error_bounded_by_half_step(self, x):
        assert abs(quantize(x) - x) <= 0.125 / 2 + 1e-12


class TestDecode:
    def test_one_hot(self):
        probs = np.zeros(33)
        probs[16] = 1.0
        assert decode_classification(probs) == 3.0

    def test_uniform_argmax_takes_first(self):
        probs = np.full(33, 1 / 33)
        assert decode_classification(probs, "argmax") == 1.0

    def test_uniform_expectation_is_grid_mean(self):
        probs = np.full(33, 1 / 33)
        assert decode_classification(probs, "expectation") == pytest.approx(3.0)

    def test_invalid_distribution(self):
        with pytest.raises(InvalidInputError):
            decode_classification(np.full(33, 0.5))


class TestEnsembleAndCorrect:
    def test_ensemble_mean(self):
        assert ensemble(3.0, 3.0) == 3.0
        assert ensemble(2.0, 4.0) == 3.0
        assert ensemble(4.0, 2.0) == 3.0

    @pytest.mark.parametrize("x, expected", [(1.2, 1.15), (4.5, 4.75), (3.0, 3.0)])
    def test_correct_regions(self, x, expected):
        assert correct(x) == pytest.approx(expected, abs=1e-12)

    def test_correct_clamps(self):
        assert correct(1.01) == 1.0  # 0.96 clamps back up
        assert correct(4.9) == 5.0

    @given(st.floats(0.5, 5.5, allow_nan=False), st.floats(0.5, 5.5, allow_nan=False))
    def test_correct_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert correct(lo) <= correct(hi)


class TestPipeline:
    def one_hot(self, k):
        p = np.zeros(33)
        p[k - 1] = 1.0
        return p

    def test_agreeing_heads(self):
        assert pipeline(3.0, self.one_hot(17)) == 3.0

    def test_low_region_walkthrough(self):
        # 1.1 and class 1 average to 1.05, correction pulls to 1.0, grid keeps it
        assert pipeline(1.1, self.one_hot(1)) == 1.0

    def test_regression_only(self):
        assert pipeline(4.5, None) == quantize(correct(4.5))

    def test_classification_only(self):
        assert pipeline(None, self.one_hot(33)) == 5.0

    def test_no_inputs_rejected(self):
        with pytest.raises(InvalidInputError):
            pipeline(None, None)

    def test_ensemble_flag_off_uses_regression(self):
        cfg = PostConfig(ensemble=False)
        assert pipeline(2.0, self.one_hot(33), cfg) == 2.0

    def test_alternative_order(self):
        cfg = PostConfig(order="quantize_then_correct")
        out = pipeline(4.3, None, cfg)
        steps = (out - 1.0) / 0.125
        assert abs(steps - round(steps)) < 1e-9

    @given(st.floats(0, 6, allow_nan=False), st.integers(1, 33))
    def test_output_always_on_grid(self, reg, k):
        out = pipeline(reg, self.one_hot(k))
        assert 1.0 <= out <= 5.0
        steps = (out - 1.0) / 0.125
        assert abs(steps - round(steps)) < 1e-9

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import norm

from plcapf.model import (
    ParameterState,
    Spectrogram,
    TemplateDictionary,
    normalize_frames,
    observation_log_density,
    reconstruct_frame,
)

finite = st.floats(0.0, 10.0, allow_nan=False, allow_infinity=False)


def random_state(rng, n_i, n_m, n_d, batch=()):
    return ParameterState(
        rng.random(batch + (n_i,)),
        rng.dirichlet(np.ones(n_m), size=batch + (n_i,)),
        rng.dirichlet(np.ones(n_d), size=batch + (n_i, n_m)),
    )


def random_dictionary(rng, n_i, n_m, n_f, shifts):
    t = rng.random((n_i, n_m, n_f))
    return TemplateDictionary(t / t.sum(-1, keepdims=True), shifts)


class TestNormalizeFrames:
    def test_symmetric_column(self):
        out, energy = normalize_frames(Spectrogram(np.array([[2.0], [2.0]])))
        np.testing.assert_array_equal(out.values[:, 0], [0.5, 0.5])
        assert energy[0] == 4.0

    def test_zero_column_stays_zero(self):
        out, energy = normalize_frames(Spectrogram(np.zeros((2, 1))))
        np.testing.assert_array_equal(out.values, 0.0)
        assert energy[0] == 0.0

    def test_matches_per_column_division(self):
        rng = np.random.default_rng(3)
        values = rng.random((8, 4))
        out, energy = normalize_frames(Spectrogram(values))
        for t in range(4):
            col = [values[f, t] for f in range(8)]
            total = math.fsum(col)
            np.testing.assert_allclose(out.values[:, t], [v / total for v in col], rtol=1e-14)
            assert energy[t] == pytest.approx(total, rel=1e-14)

    def test_metadata_preserved(self):
        out, _ = normalize_frames(Spectrogram(np.ones((3, 2)), 0.02, 36))
        assert (out.frame_hop_seconds, out.bins_per_octave) == (0.02, 36)

    @given(arrays(float, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
    def test_nonzero_columns_sum_to_one(self, values):
        out, energy = normalize_frames(Spectrogram(values))
        sums = out.values.sum(axis=0)
        assert np.all(np.abs(sums[energy > 0] - 1.0) <= 1e-9)
        assert np.all(sums[energy == 0] == 0.0)


class TestSpectrogram:
    def test_negative_entry_names_position(self):
        values = np.ones((3, 4))
        values[2, 1] = -0.5
        with pytest.raises(ValueError, match=r"f=2, t=1"):
            Spectrogram(values)

    def test_non_finite_rejected(self):
        values = np.ones((2, 2))
        values[0, 1] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            Spectrogram(values)

    @pytest.mark.parametrize("hop,bpo", [(0.0, 60), (-1.0, 60), (0.01, 0)])
    def test_bad_metadata(self, hop, bpo):
        with pytest.raises(ValueError):
            Spectrogram(np.ones((2, 2)), hop, bpo)

    def test_needs_matrix(self):
        with pytest.raises(ValueError, match="2-D"):
            Spectrogram(np.ones(3))


class TestTemplateDictionary:
    def test_templates_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            TemplateDictionary(np.full((1, 1, 4), 0.3))

    def test_shift_range_must_be_symmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            TemplateDictionary(np.full((1, 1, 4), 0.25), (-1, 0, 1, 2))

    def test_two_dimensional_input_means_one_mode(self):
        d = TemplateDictionary(np.full((3, 4), 0.25))
        assert (d.n_pitches, d.n_modes, d.n_shifts, d.n_bins) == (3, 1, 5, 4)

    def test_shifts_truncate_instead_of_wrapping(self):
        t = np.zeros((1, 1, 5))
        t[0, 0, [0, 4]] = 0.5
        d = TemplateDictionary(t, (-1, 0, 1))
        np.testing.assert_array_equal(d.shifted[0, 0, 0], [0, 0, 0, 0.5, 0])
        np.testing.assert_array_equal(d.shifted[0, 0, 2], [0, 0.5, 0, 0, 0])
        np.testing.assert_array_equal(d.shifted[0, 0, 1], t[0, 0])


class TestReconstruct:
    def test_identity(self):
        t = np.array([[[0.1, 0.2, 0.3, 0.4]]])
        d = TemplateDictionary(t, (0,))
        state = ParameterState(np.array([1.0]), np.array([[1.0]]), np.array([[[1.0]]]))
        np.testing.assert_array_equal(reconstruct_frame(state, d), t[0, 0])

    def test_zero_activations(self):
        rng = np.random.default_rng(0)
        d = random_dictionary(rng, 3, 2, 10, (-1, 0, 1))
        state = random_state(rng, 3, 2, 3)
        state.A[:] = 0.0
        np.testing.assert_array_equal(reconstruct_frame(state, d), np.zeros(10))

    def test_matches_explicit_loops(self):
        rng = np.random.default_rng(11)
        shifts = (-1, 0, 1)
        d = random_dictionary(rng, 2, 1, 9, shifts)
        state = random_state(rng, 2, 1, 3)
        expected = np.zeros(9)
        for i in range(2):
            for m in range(1):
                for k, s in enumerate(shifts):
                    for f in range(9):
                        src = f - s
                        if 0 <= src < 9:
                            expected[f] += state.A[i] * state.B[i, m] * state.C[i, m, k] * d.templates[i, m, src]
        np.testing.assert_allclose(reconstruct_frame(state, d), expected, rtol=1e-13)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        d = random_dictionary(rng, 3, 2, 12, (-2, -1, 0, 1, 2))
        batch = random_state(rng, 3, 2, 5, batch=(4,))
        out = reconstruct_frame(batch, d)
        for n in range(4):
            single = ParameterState(batch.A[n], batch.B[n], batch.C[n])
            np.testing.assert_allclose(out[n], reconstruct_frame(single, d), rtol=1e-13)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(0)
        d = random_dictionary(rng, 3, 1, 8, (0,))
        with pytest.raises(ValueError, match="do not match"):
            reconstruct_frame(random_state(rng, 2, 1, 1), d)

    def test_unit_mass_without_truncation(self, tiny_dictionary):
        rng = np.random.default_rng(5)
        state = random_state(rng, 2, 1, 3)
        state.A /= state.A.sum()
        assert reconstruct_frame(state, tiny_dictionary).sum() == pytest.approx(1.0, abs=1e-9)

    @given(st.floats(0.0, 100.0), st.integers(0, 2**32 - 1))
    def test_linear_in_activations(self, alpha, seed):
        rng = np.random.default_rng(seed)
        d = random_dictionary(rng, 3, 2, 10, (-1, 0, 1))
        state = random_state(rng, 3, 2, 3)
        scaled = ParameterState(alpha * state.A, state.B, state.C)
        np.testing.assert_allclose(
            reconstruct_frame(scaled, d), alpha * reconstruct_frame(state, d), rtol=1e-12, atol=1e-15
        )

    @given(st.integers(0, 2**32 - 1))
    def test_inside_convex_hull_of_shifted_templates(self, seed):
        rng = np.random.default_rng(seed)
        # zero margins keep every shift inside the axis
        t = np.zeros((3, 2, 14))
        t[..., 3:11] = rng.random((3, 2, 8))
        d = TemplateDictionary(t / t.sum(-1, keepdims=True), (-2, -1, 0, 1, 2))
        state = random_state(rng, 3, 2, 5)
        state.A /= state.A.sum()
        out = reconstruct_frame(state, d)
        assert np.all(out <= d.templates.max() + 1e-12)
        assert np.all(out >= 0)


class TestObservationLogDensity:
    def test_zero_residual(self):
        assert observation_log_density([0.3], [0.3], 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi))
        assert observation_log_density([0.3], [0.3], 1.0) == pytest.approx(-0.9189, abs=1e-4)

    def test_unit_residual(self):
        value = observation_log_density([1.0, 0.0], [0.0, 0.0], 1.0)
        assert value == pytest.approx(-math.log(2 * math.pi) - 0.5)
        assert value == pytest.approx(-2.3379, abs=1e-4)

    def test_matches_scalar_pdf_sum(self):
        rng = np.random.default_rng(7)
        y, mu = rng.random(16), rng.random(16)
        expected = math.fsum(norm.logpdf(a, loc=b, scale=0.1) for a, b in zip(y, mu))
        assert observation_log_density(y, mu, 0.1) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("sigma", [0.0, -0.1])
    def test_sigma_must_be_positive(self, sigma):
        with pytest.raises(ValueError, match="sigma"):
            observation_log_density([1.0], [1.0], sigma)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            observation_log_density([1.0, 2.0], [1.0], 0.1)

    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
    def test_decreases_with_residual_norm(self, seed, a, b):
        rng = np.random.default_rng(seed)
        y, direction = rng.random(8), rng.standard_normal(8)
        lo, hi = sorted((a, b))
        near = observation_log_density(y, y + lo * direction, 0.2)
        far = observation_log_density(y, y + hi * direction, 0.2)
        assert far <= near

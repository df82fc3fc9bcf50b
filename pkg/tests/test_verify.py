"""Statistical metrics and the analytic proposition checks."""
import numpy as np
import pytest

from jointdiff.datasets import make_gaussian_mixture
from jointdiff.verify import (accuracy, energy_distance, ito_isometry_reference,
                              jaccard, proof_diagnostics, two_sample_test,
                              verify_ode_integral_identity,
                              verify_quadratic_variation, verify_yT_invariance)


class TestEnergyDistance:
    def test_identical_sets_give_zero(self):
        a = np.random.default_rng(0).standard_normal((50, 3))
        assert energy_distance(a, a.copy()) == pytest.approx(0.0, abs=1e-12)

    def test_single_point_sets(self):
        # 2*|0-2| - 0 - 0 = 4
        assert energy_distance(np.array([[0.0]]), np.array([[2.0]])) == 4.0

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((20, 2)), rng.standard_normal((30, 2))
        assert energy_distance(a, b) == pytest.approx(energy_distance(b, a),
                                                      rel=1e-12)

    def test_separated_sets_positive(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((40, 2))
        assert energy_distance(a, a + 10.0) > 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            energy_distance(np.zeros((3, 2)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            energy_distance(np.zeros((0, 2)), np.zeros((3, 2)))


class TestTwoSampleTest:
    def test_same_distribution_passes(self):
        # frozen draw: statistic 0.0021 against threshold 0.0115
        mix = make_gaussian_mixture(8, 4000, d_x=2, K=8, seed=3, scale=0.08)
        idx = np.random.default_rng(0).permutation(4000)
        res = two_sample_test(mix.x[idx[:400]], mix.x[idx[400:800]],
                              n_permutations=200, seed=0)
        assert res.passed
        assert res.statistic < res.threshold

    def test_shifted_distribution_fails(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((200, 2))
        res = two_sample_test(a, a + 2.0, n_permutations=100, seed=0)
        assert not res.passed

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((60, 2)), rng.standard_normal((60, 2))
        r1 = two_sample_test(a, b, seed=9)
        r2 = two_sample_test(a, b, seed=9)
        assert r1.statistic == r2.statistic and r1.threshold == r2.threshold


class TestAccuracy:
    def test_values(self):
        pred = np.array([[0], [1], [1], [0]])
        true = np.array([[0], [1], [0], [0]])
        assert accuracy(pred, true) == 0.75

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            accuracy(np.zeros((2, 1)), np.zeros((3, 1)))


class TestJaccard:
    def test_identical_masks(self):
        m = np.array([[0, 1, 2, 1]])
        assert jaccard(m, m, K=3) == 1.0

    def test_disjoint_equal_foregrounds(self):
        pred = np.array([[1, 1, 0, 0]])
        true = np.array([[0, 0, 1, 1]])
        assert jaccard(pred, true, K=2) == 0.0

    def test_partial_overlap_one_third(self):
        # pred marks pixels {1,2}, truth marks {2,3}: |inter|=1, |union|=3
        pred = np.array([[0, 1, 1, 0]])
        true = np.array([[0, 0, 1, 1]])
        assert jaccard(pred, true, K=2) == pytest.approx(1.0 / 3.0)

    def test_empty_union_class_skipped(self):
        # class 2 appears nowhere: the sample's score is class 1's alone
        pred = np.array([[0, 1, 1, 0]])
        true = np.array([[0, 1, 1, 0]])
        assert jaccard(pred, true, K=3) == 1.0

    def test_all_background_raises(self):
        z = np.zeros((2, 4), dtype=int)
        with pytest.raises(ValueError):
            jaccard(z, z, K=2)

    def test_needs_foreground_class(self):
        m = np.array([[0, 0]])
        with pytest.raises(ValueError):
            jaccard(m, m, K=1)


class TestQuadraticVariation:
    def test_mask_variance_contracts_to_minimum(self, two_atom_oracle, schedule):
        # measured at these settings: final std 0.0104, variance 1.1e-4
        qv = verify_quadratic_variation(two_atom_oracle, schedule, steps=200,
                                        m_paths=300, seed=0)
        assert qv.monotone_to_minimum
        assert qv.variance[-1] < 1e-3
        assert qv.std_final == pytest.approx(np.sqrt(qv.variance[-1]))

    def test_isometry_reference_vanishes_toward_t_min(self, schedule):
        vals = [ito_isometry_reference(schedule, tau)
                for tau in (0.5, 0.25, 0.1, 0.01, schedule.t_min)]
        assert all(v > 0 for v in vals)
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-3


class TestOdeIntegralIdentity:
    def test_constant_posterior_closes_the_identity(self, single_atom_oracle,
                                                    schedule):
        # at 8000 steps the shared discretization error drops to 3.3e-7
        r = verify_ode_integral_identity(single_atom_oracle, schedule,
                                         steps=8000)
        assert r.residual < 1e-6

    def test_two_point_residual(self, two_atom_oracle, schedule):
        # measured 1.26e-4 at 400 steps
        r = verify_ode_integral_identity(two_atom_oracle, schedule, steps=400)
        assert r.residual < 1e-3
        assert r.y_ode.shape == r.y_quad.shape
        assert len(r.epsilon_curve) == len(r.times)

    def test_posterior_settles_before_t_min(self, two_atom_oracle, schedule):
        # eps(t) = |E[y|x_t] - E[y|x_{t_min}]| must collapse at the end
        r = verify_ode_integral_identity(two_atom_oracle, schedule, steps=400)
        assert r.epsilon_curve[-1] == 0.0
        assert r.epsilon_curve.max() > 1e-3


class TestYTInvariance:
    def test_single_trial_spread_is_zero(self, two_atom_oracle, schedule):
        inv = verify_yT_invariance(two_atom_oracle, schedule, steps=100,
                                   y_values=(0.0,))
        assert inv.max_deviation == 0.0
        assert inv.predenoise_deviation == 0.0

    def test_terminal_masks_forget_y_T(self, two_atom_oracle, schedule):
        # wildly different y_T (0, +-1, +-100, random) spread by 2.1 before
        # the final denoise yet land on bit-identical outputs after it,
        # because the x path never sees y
        inv = verify_yT_invariance(two_atom_oracle, schedule, steps=400)
        assert inv.max_deviation == 0.0
        assert inv.predenoise_deviation > 1.0
        assert inv.prefactor_error < 1e-3
        assert inv.sigma_ratio == pytest.approx(0.010486, rel=1e-3)


class TestProofDiagnostics:
    def test_bundle_fields(self, two_atom_oracle, schedule):
        d = proof_diagnostics(two_atom_oracle, schedule, steps=100,
                              m_paths=50, seed=0)
        assert d.quad_variation_estimate >= 0.0
        assert d.integral_residual >= 0.0
        assert len(d.epsilon_curve) == 101

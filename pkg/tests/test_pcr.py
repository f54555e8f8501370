"""Transfer-weight regression tests.

Oracles: numpy's lstsq (min-norm least squares through a different LAPACK
driver than the implementation's explicit SVD composition) and the normal
equations for the full-rank OLS case.
"""

import numpy as np
import pytest

from synthcombo.pcr import (
    DonorPanel,
    SpectrumReport,
    TransferWeights,
    diagnostics,
    kappa_select,
    pcr_fit,
    pcr_predict,
)


def random_low_rank(rows, cols, rank, seed, noise=0.0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(rows, rank))
    b = rng.normal(size=(rank, cols))
    m = a @ b
    if noise:
        m = m + rng.normal(0.0, noise, size=m.shape)
    return m


def panel_of(matrix):
    return DonorPanel(tuple(range(matrix.shape[1])), matrix)


class TestPanelValidation:
    def test_column_count_must_match_donors(self):
        with pytest.raises(ValueError):
            DonorPanel((1, 2, 3), np.zeros((4, 2)))

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            DonorPanel((1, 1), np.zeros((4, 2)))

    def test_non_finite_rejected(self):
        m = np.zeros((2, 2))
        m[0, 0] = np.inf
        with pytest.raises(ValueError):
            DonorPanel((1, 2), m)


class TestPcrFit:
    def test_zero_target_gives_zero_weights(self):
        m = random_low_rank(20, 5, 3, seed=0)
        w = pcr_fit(panel_of(m), np.zeros(20), 3)
        assert np.allclose(w.weights, 0.0)

    def test_single_matching_donor(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=15)
        w = pcr_fit(DonorPanel(("d",), y.reshape(-1, 1)), y, 1)
        assert w.rank == 1
        assert abs(w.weights[0] - 1.0) < 1e-12

    def test_noiseless_rank3_reproduces_target(self):
        m = random_low_rank(40, 8, 3, seed=2)
        beta = np.random.default_rng(3).normal(size=8)
        y = m @ beta
        w = pcr_fit(panel_of(m), y, 3)
        assert w.rank == 3
        assert np.max(np.abs(m @ w.weights - y)) <= 1e-8
        # min-norm least squares gives the same fitted values
        ref, *_ = np.linalg.lstsq(m, y, rcond=None)
        assert np.max(np.abs(m @ ref - m @ w.weights)) <= 1e-8

    def test_full_rank_kappa_equals_ols(self):
        rng = np.random.default_rng(4)
        m = rng.normal(size=(30, 6))
        y = rng.normal(size=30)
        w = pcr_fit(panel_of(m), y, 6)
        ols = np.linalg.solve(m.T @ m, m.T @ y)
        assert np.max(np.abs(w.weights - ols)) <= 1e-8

    def test_weights_lie_in_row_space(self):
        m = random_low_rank(25, 7, 2, seed=5, noise=0.01)
        y = np.random.default_rng(6).normal(size=25)
        w = pcr_fit(panel_of(m), y, 2)
        _, _, vt = np.linalg.svd(m)
        proj = vt[:2].T @ (vt[:2] @ w.weights)
        assert np.linalg.norm(w.weights - proj) <= 1e-10

    def test_target_scaling_is_exact_for_powers_of_two(self):
        m = random_low_rank(18, 4, 2, seed=7)
        y = np.random.default_rng(8).normal(size=18)
        w1 = pcr_fit(panel_of(m), y, 2)
        w2 = pcr_fit(panel_of(m), 2.0 * y, 2)
        assert np.array_equal(w2.weights, 2.0 * w1.weights)

    def test_duplicate_donor_column_keeps_fitted_values(self):
        m = random_low_rank(30, 5, 2, seed=9)
        y = np.random.default_rng(10).normal(size=30)
        w1 = pcr_fit(panel_of(m), y, 2)
        m2 = np.hstack([m, m[:, :1]])
        w2 = pcr_fit(DonorPanel(tuple(range(6)), m2), y, 2)
        assert np.max(np.abs(m @ w1.weights - m2 @ w2.weights)) <= 1e-10

    def test_tiny_singular_values_are_dropped(self):
        rng = np.random.default_rng(11)
        q, _ = np.linalg.qr(rng.normal(size=(12, 12)))
        m = q[:, :2] @ np.diag([5.0, 1e-14]) @ np.eye(2, 3)
        w = pcr_fit(DonorPanel((1, 2, 3), m), rng.normal(size=12), 2)
        assert w.rank == 1
        assert w.singvals.size == 1

    def test_zero_panel_rejected(self):
        with pytest.raises(ValueError, match="rank 0"):
            pcr_fit(panel_of(np.zeros((5, 3))), np.ones(5), 1)

    def test_kappa_bounds(self):
        m = random_low_rank(10, 4, 2, seed=12)
        with pytest.raises(ValueError):
            pcr_fit(panel_of(m), np.zeros(10), 0)
        with pytest.raises(ValueError):
            pcr_fit(panel_of(m), np.zeros(10), 5)

    def test_target_length_checked(self):
        m = random_low_rank(10, 4, 2, seed=13)
        with pytest.raises(ValueError):
            pcr_fit(panel_of(m), np.zeros(9), 2)


class TestTransferWeights:
    def test_rank_must_match_retained(self):
        with pytest.raises(ValueError):
            TransferWeights(np.zeros(2), 2, np.array([1.0]), np.array([1.0]))

    def test_singvals_must_decrease(self):
        with pytest.raises(ValueError):
            TransferWeights(np.zeros(2), 2, np.array([1.0, 2.0]), np.array([2.0, 1.0]))


class TestPredict:
    def test_zero_weights(self):
        w = TransferWeights(np.zeros(3), 1, np.array([1.0]), np.array([1.0]))
        assert pcr_predict([4.0, 5.0, 6.0], w) == 0.0

    def test_one_hot(self):
        w = TransferWeights(np.array([0.0, 1.0, 0.0]), 1, np.array([1.0]), np.array([1.0]))
        assert pcr_predict([4.0, 5.0, 6.0], w) == 5.0

    def test_consistent_with_fit_on_panel_rows(self):
        m = random_low_rank(20, 6, 3, seed=14)
        y = m @ np.random.default_rng(15).normal(size=6)
        w = pcr_fit(panel_of(m), y, 3)
        fitted = m @ w.weights
        for i in (0, 7, 19):
            assert abs(pcr_predict(m[i], w) - fitted[i]) < 1e-12

    def test_length_mismatch(self):
        w = TransferWeights(np.zeros(3), 1, np.array([1.0]), np.array([1.0]))
        with pytest.raises(ValueError):
            pcr_predict([1.0, 2.0], w)


class TestKappaSelect:
    def test_fixed_passthrough(self):
        m = random_low_rank(10, 5, 2, seed=16)
        assert kappa_select(panel_of(m), np.zeros(10), "fixed", fixed=4) == 4
        with pytest.raises(ValueError):
            kappa_select(panel_of(m), np.zeros(10), "fixed", fixed=9)
        with pytest.raises(ValueError):
            kappa_select(panel_of(m), np.zeros(10), "fixed")

    def test_unknown_method(self):
        m = random_low_rank(10, 5, 2, seed=17)
        with pytest.raises(ValueError, match="unknown"):
            kappa_select(panel_of(m), np.zeros(10), "bic")

    def test_elbow_rank_one(self):
        rng = np.random.default_rng(18)
        m = np.outer(rng.normal(size=12), rng.normal(size=4))
        assert kappa_select(panel_of(m), np.zeros(12), "elbow") == 1

    def test_elbow_finds_largest_gap(self):
        rng = np.random.default_rng(19)
        qu, _ = np.linalg.qr(rng.normal(size=(20, 4)))
        qv, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        m = qu @ np.diag([10.0, 5.0, 4.0, 0.01]) @ qv
        assert kappa_select(panel_of(m), np.zeros(20), "elbow") == 3

    def test_cv_deterministic(self):
        m = random_low_rank(24, 6, 3, seed=20, noise=0.3)
        y = m @ np.ones(6)
        k1 = kappa_select(panel_of(m), y, "cv", seed=5)
        k2 = kappa_select(panel_of(m), y, "cv", seed=5)
        assert k1 == k2

    def test_cv_recovers_rank_three_in_plurality(self):
        # SNR 1: noise variance matches signal variance entrywise
        votes = []
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            a = rng.normal(size=(120, 3))
            b = rng.normal(size=(3, 12))
            signal = a @ b
            sigma = float(np.sqrt(np.mean(signal**2)))
            m = signal + rng.normal(0.0, sigma, size=signal.shape)
            beta = rng.normal(size=12)
            y = signal @ beta + rng.normal(0.0, float(np.std(signal @ beta)), size=120)
            votes.append(kappa_select(panel_of(m), y, "cv", seed=seed))
        counts = {k: votes.count(k) for k in set(votes)}
        top = max(counts, key=counts.get)
        assert top == 3, counts


class TestDiagnostics:
    def test_identity_ratios(self):
        rep = diagnostics(panel_of(np.eye(5)))
        assert np.allclose(rep.ratios, 1.0)
        assert np.isclose(rep.mean_square, 5 / 25)
        assert np.allclose(rep.energy, np.arange(1, 6) / 5)

    def test_rank_one(self):
        m = np.outer(np.ones(6), np.array([1.0, 2.0]))
        rep = diagnostics(panel_of(m))
        assert rep.ratios[1] <= 1e-12
        assert np.isclose(rep.energy[0], 1.0)

    def test_low_rank_energy_concentrates(self):
        m = random_low_rank(30, 8, 3, seed=21)
        rep = diagnostics(panel_of(m))
        assert rep.energy[2] >= 0.99

    def test_as_dict_round_trips_through_json(self):
        import json

        rep = diagnostics(panel_of(np.eye(3)))
        blob = json.dumps(rep.as_dict())
        back = json.loads(blob)
        assert back["singvals"] == [1.0, 1.0, 1.0]

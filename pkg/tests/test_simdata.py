"""Synthetic data generator: truth construction, SNR calibration, and the
three observation patterns."""

import math

import numpy as np
import pytest

from synthcombo.design import DesignParams, design_sample
from synthcombo.hypercube import SparseFourierVector
from synthcombo.simdata import (
    GroundTruth,
    SimConfig,
    confounded_sampler,
    expected_values,
    gen_truth,
    observation_weights,
    realize_panel,
    signal_variance,
    truth_from_dict,
    truth_to_dict,
)


def toy_truth(p=3, sigma=0.0):
    """One unit, one subset: |values| are constant over the cube."""
    return GroundTruth(
        alphas=(SparseFourierVector(p, [(1, 2.0)]),), r=1, s=1, p=p, sigma=sigma
    )


class TestConfig:
    def test_defaults(self):
        cfg = SimConfig(n_units=20, p=10, r=3)
        assert cfg.effective_base_nnz == math.ceil(10**1.5) == 32
        assert cfg.sparsity == 96
        assert cfg.effective_donor_count == 6
        assert cfg.effective_donor_obs == math.ceil(2 * 10**2.5) == 633
        assert cfg.effective_nondonor_obs == 162

    def test_overrides(self):
        cfg = SimConfig(n_units=20, p=12, r=2, base_nnz=2, donor_obs=100)
        assert cfg.sparsity == 4
        assert cfg.effective_donor_obs == 100

    def test_validation(self):
        with pytest.raises(ValueError, match="snr"):
            SimConfig(n_units=5, p=4, r=2, snr=0.0)
        with pytest.raises(ValueError, match="pattern"):
            SimConfig(n_units=5, p=4, r=2, pattern="adaptive")
        with pytest.raises(ValueError, match="r must be"):
            SimConfig(n_units=3, p=4, r=4)


class TestGenTruth:
    def test_rank_and_sparsity(self):
        cfg = SimConfig(n_units=12, p=8, r=3, base_nnz=4, seed=5)
        truth = gen_truth(cfg)
        assert truth.r == 3
        assert all(vec.nnz <= 12 for vec in truth.alphas)
        union = sorted({b for vec in truth.alphas for b in vec.support_bits})
        mat = np.zeros((12, len(union)))
        idx = {b: j for j, b in enumerate(union)}
        for i, vec in enumerate(truth.alphas):
            for b, v in vec.items():
                mat[i, idx[b]] = v
        svals = np.linalg.svd(mat, compute_uv=False)
        assert int(np.sum(svals > svals[0] * 1e-8)) == 3

    def test_first_r_units_are_the_bases(self):
        cfg = SimConfig(n_units=10, p=8, r=2, base_nnz=3, seed=1)
        truth = gen_truth(cfg)
        base_union = set(truth.alphas[0].support_bits) | set(truth.alphas[1].support_bits)
        for vec in truth.alphas[2:]:
            assert set(vec.support_bits) <= base_union

    def test_rank_one_means_identical_units(self):
        # Dirichlet weights over a single component are identically 1
        cfg = SimConfig(n_units=6, p=6, r=1, base_nnz=3, seed=2)
        truth = gen_truth(cfg)
        base = dict(truth.alphas[0].items())
        for vec in truth.alphas[1:]:
            assert dict(vec.items()) == pytest.approx(base)

    def test_global_snr_calibration(self):
        cfg = SimConfig(n_units=9, p=7, r=2, base_nnz=4, snr=2.5, seed=3)
        truth = gen_truth(cfg)
        mean_var = np.mean([signal_variance(v) for v in truth.alphas])
        assert abs(mean_var / truth.sigma**2 - 2.5) <= 1e-9

    def test_per_unit_snr_calibration(self):
        cfg = SimConfig(n_units=9, p=7, r=2, base_nnz=4, snr=1.0, seed=3)
        truth = gen_truth(cfg, snr_scope="per_unit")
        for u, vec in enumerate(truth.alphas):
            assert abs(signal_variance(vec) / truth.unit_sigma(u) ** 2 - 1.0) <= 1e-9

    def test_infeasible_sparsity(self):
        with pytest.raises(ValueError, match="subsets"):
            gen_truth(SimConfig(n_units=5, p=3, r=2, seed=0))

    def test_bad_scope(self):
        with pytest.raises(ValueError, match="snr_scope"):
            gen_truth(SimConfig(n_units=5, p=6, r=2, base_nnz=2), snr_scope="median")

    def test_deterministic(self):
        cfg = SimConfig(n_units=8, p=7, r=2, base_nnz=4, seed=11)
        a = gen_truth(cfg)
        b = gen_truth(cfg)
        assert a.sigma == b.sigma
        for va, vb in zip(a.alphas, b.alphas):
            assert dict(va.items()) == dict(vb.items())


class TestSignalVariance:
    def test_matches_brute_force_cube_variance(self):
        rng = np.random.default_rng(8)
        for p in (3, 5, 7):
            bits = rng.choice(np.arange(1 << p), size=4, replace=False)
            vec = SparseFourierVector(p, list(zip(bits.tolist(), rng.normal(size=4).tolist())))
            truth = GroundTruth((vec,), r=1, s=4, p=p, sigma=0.0)
            values = expected_values(truth, 0)
            assert abs(signal_variance(vec) - float(np.var(values))) <= 1e-10

    def test_constant_term_excluded(self):
        vec = SparseFourierVector(3, [(0, 5.0), (2, 1.5)])
        assert signal_variance(vec) == pytest.approx(2.25)


class TestObservationWeights:
    def test_sum_to_one_and_uniform_case(self):
        truth = toy_truth()
        w = observation_weights(truth, 0)
        assert abs(w.sum() - 1.0) <= 1e-12
        assert np.allclose(w, 1.0 / 8.0)

    def test_zero_cells_get_zero_weight(self):
        # values are -2, 0, or +2; exactly half the cube sits at zero
        vec = SparseFourierVector(3, [(1, 1.0), (2, 1.0)])
        truth = GroundTruth((vec,), r=1, s=2, p=3, sigma=0.0)
        w = observation_weights(truth, 0)
        values = expected_values(truth, 0)
        assert np.all(w[values == 0.0] == 0.0)
        assert abs(w.sum() - 1.0) <= 1e-12

    def test_all_zero_unit_rejected(self):
        zero = SparseFourierVector(3, [])
        anchor = SparseFourierVector(3, [(1, 1.0)])
        truth = GroundTruth((anchor, zero), r=1, s=2, p=3, sigma=0.0)
        with pytest.raises(ValueError, match="zero"):
            observation_weights(truth, 1)


class TestConfoundedSampler:
    def test_draws_are_unique_and_noiseless_values_exact(self):
        truth = toy_truth(p=4)
        pairs = confounded_sampler(truth, 0, count=10, seed=3)
        masks = [c.mask for c, _ in pairs]
        assert len(set(masks)) == 10
        values = expected_values(truth, 0)
        for combo, y in pairs:
            assert y == pytest.approx(values[combo.mask])

    def test_never_draws_zero_weight_cells(self):
        vec = SparseFourierVector(3, [(1, 1.0), (2, 1.0)])
        truth = GroundTruth((vec,), r=1, s=2, p=3, sigma=0.0)
        values = expected_values(truth, 0)
        positive = int(np.count_nonzero(values))
        pairs = confounded_sampler(truth, 0, count=positive, seed=9)
        for combo, _ in pairs:
            assert values[combo.mask] != 0.0

    def test_more_draws_than_positive_cells_refused(self):
        vec = SparseFourierVector(3, [(1, 1.0), (2, 1.0)])
        truth = GroundTruth((vec,), r=1, s=2, p=3, sigma=0.0)
        with pytest.raises(ValueError, match="positive weight"):
            confounded_sampler(truth, 0, count=5, seed=0)

    def test_count_beyond_cube_refused(self):
        with pytest.raises(ValueError, match="cube"):
            confounded_sampler(toy_truth(), 0, count=9, seed=0)

    def test_single_draw_frequencies_follow_weights(self):
        # unequal weights over a 2-bit cube; one draw per seed
        vec = SparseFourierVector(2, [(1, 2.0), (2, 1.0), (3, 0.5)])
        truth = GroundTruth((vec,), r=1, s=3, p=2, sigma=0.0)
        w = observation_weights(truth, 0)
        counts = np.zeros(4)
        n = 3000
        for seed in range(n):
            (combo, _), = confounded_sampler(truth, 0, count=1, seed=seed)
            counts[combo.mask] += 1
        freq = counts / n
        # three-sigma band per cell
        for mask in range(4):
            band = 3.0 * math.sqrt(w[mask] * (1 - w[mask]) / n)
            assert abs(freq[mask] - w[mask]) <= band + 1e-12, (mask, freq[mask], w[mask])


class TestRealizePanel:
    def test_design_plan_shares_combos(self):
        cfg = SimConfig(n_units=12, p=10, r=2, base_nnz=3, seed=4)
        truth = gen_truth(cfg)
        params = DesignParams(n_units=12, p=10, r=2, s=cfg.sparsity, gamma=0.1, delta=0.5)
        plan = design_sample(params, seed=1, preset="sims")
        panel = realize_panel(truth, plan, seed=2)
        for u in plan.donor_ids:
            assert np.array_equal(panel.unit_masks[u], plan.donor_combos)
        for u in plan.nondonor_ids:
            assert np.array_equal(panel.unit_masks[u], plan.nondonor_combos)

    def test_zero_noise_design_values_exact(self):
        cfg = SimConfig(n_units=8, p=9, r=2, base_nnz=3, seed=4, snr=1.0)
        truth = gen_truth(cfg)
        quiet = GroundTruth(truth.alphas, truth.r, truth.s, truth.p, sigma=0.0)
        params = DesignParams(n_units=8, p=9, r=2, s=6, gamma=0.1, delta=0.5)
        plan = design_sample(params, seed=0, preset="sims")
        panel = realize_panel(quiet, plan, seed=5)
        for u in range(8):
            values = expected_values(quiet, u)
            assert np.allclose(panel.unit_outcomes[u], values[panel.unit_masks[u]], atol=1e-12)

    def test_confounded_pattern_obs_counts(self):
        cfg = SimConfig(n_units=10, p=7, r=2, base_nnz=3, seed=6)
        truth = gen_truth(cfg)
        panel = realize_panel(truth, "confounded", seed=7, donor_obs=60, nondonor_obs=12)
        sizes = sorted(m.size for m in panel.unit_masks)
        assert sizes == [12] * 6 + [60] * 4

    def test_uniform_pattern_default_sizes(self):
        cfg = SimConfig(n_units=7, p=6, r=1, base_nnz=3, seed=6)
        truth = gen_truth(cfg)
        # defaults: 2 heavy units at ceil(2*6^2.5) = 177 > 64, so override
        panel = realize_panel(truth, "uniform", seed=3, donor_obs=50)
        sizes = sorted(m.size for m in panel.unit_masks)
        assert sizes == [2, 2, 2, 2, 2, 50, 50]

    def test_reproducible_bytes(self):
        cfg = SimConfig(n_units=9, p=7, r=2, base_nnz=3, seed=8)
        truth = gen_truth(cfg)
        a = realize_panel(truth, "confounded", seed=1, donor_obs=40)
        b = realize_panel(truth, "confounded", seed=1, donor_obs=40)
        c = realize_panel(truth, "confounded", seed=2, donor_obs=40)
        for u in range(9):
            assert a.unit_masks[u].tobytes() == b.unit_masks[u].tobytes()
            assert a.unit_outcomes[u].tobytes() == b.unit_outcomes[u].tobytes()
        assert any(
            a.unit_masks[u].tobytes() != c.unit_masks[u].tobytes() for u in range(9)
        )

    def test_plan_dimension_mismatch(self):
        cfg = SimConfig(n_units=8, p=9, r=2, base_nnz=3, seed=4)
        truth = gen_truth(cfg)
        params = DesignParams(n_units=9, p=9, r=2, s=6, gamma=0.1, delta=0.5)
        plan = design_sample(params, seed=0, preset="sims")
        with pytest.raises(ValueError, match="dimensions"):
            realize_panel(truth, plan, seed=0)

    def test_unknown_pattern(self):
        with pytest.raises(ValueError, match="expected a DesignPlan"):
            realize_panel(toy_truth(), "adaptive", seed=0)

    def test_too_many_heavy_units(self):
        with pytest.raises(ValueError, match="heavily observed"):
            realize_panel(toy_truth(), "uniform", seed=0, donor_count=5)


class TestTruthRoundtrip:
    def test_json_roundtrip(self):
        cfg = SimConfig(n_units=6, p=6, r=2, base_nnz=3, seed=13)
        truth = gen_truth(cfg, snr_scope="per_unit")
        back = truth_from_dict(truth_to_dict(truth))
        assert back.r == truth.r and back.s == truth.s and back.p == truth.p
        assert back.sigma == pytest.approx(truth.sigma)
        assert back.per_unit_sigma == pytest.approx(truth.per_unit_sigma)
        for va, vb in zip(truth.alphas, back.alphas):
            assert dict(va.items()) == pytest.approx(dict(vb.items()))

    def test_rank_validation_on_load(self):
        payload = {
            "p": 3,
            "r": 2,
            "s": 2,
            "sigma": 0.1,
            "alphas": [
                {"bits": [1], "coeffs": [1.0]},
                {"bits": [1], "coeffs": [2.0]},
            ],
        }
        with pytest.raises(ValueError, match="rank"):
            truth_from_dict(payload)

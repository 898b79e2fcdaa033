"""Evaluation metrics: similarity bounds, grid shape, alignment contract."""

import dataclasses

import numpy as np
import pytest

from anchordiff import autodiff as ad
from anchordiff import evaluation, trainer
from anchordiff.gradcheck import downscaled_config


def small_cfg(**overrides):
    cfg = downscaled_config(seed=overrides.pop("seed", 1))
    return dataclasses.replace(cfg, **overrides)


class TestCosine:
    def test_identical_vectors_score_one(self):
        v = np.array([[1.0, 2.0, -3.0]])
        assert evaluation.cosine(v, v) == pytest.approx(1.0)

    def test_orthogonal_vectors_score_zero(self):
        a = np.array([[1.0, 0.0]])
        b = np.array([[0.0, 5.0]])
        assert evaluation.cosine(a, b) == pytest.approx(0.0)

    def test_opposite_vectors_score_minus_one(self):
        a = np.array([[2.0, -1.0]])
        assert evaluation.cosine(a, -3.0 * a) == pytest.approx(-1.0)

    def test_zero_norm_scores_zero(self):
        a = np.zeros((1, 4))
        b = np.ones((1, 4))
        assert evaluation.cosine(a, b) == 0.0
        assert evaluation.cosine(b, a) == 0.0

    def test_bounded_on_random_pairs(self):
        rng = ad.Rng(5, "cosine")
        for i in range(50):
            a = rng.stream(f"a{i}").normal(1, 6)
            b = rng.stream(f"b{i}").normal(1, 6)
            assert -1.0 <= evaluation.cosine(a, b) <= 1.0


class TestNearestRowDistance:
    def test_exact_match_is_zero(self):
        rows = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert evaluation.nearest_row_distance(rows, rows) == 0.0

    def test_hand_checked_example(self):
        source = np.array([[0.0, 0.0], [10.0, 0.0]])
        targets = np.array([[3.0, 4.0], [10.0, 1.0]])
        # nearest distances: 5.0 and 1.0, mean 3.0
        assert evaluation.nearest_row_distance(source, targets) == pytest.approx(3.0)

    def test_adding_far_target_changes_nothing(self):
        rng = ad.Rng(6, "rows")
        source = rng.stream("s").normal(3, 4)
        targets = rng.stream("t").normal(2, 4)
        far = np.vstack([targets, np.full((1, 4), 1e6)])
        a = evaluation.nearest_row_distance(source, targets)
        b = evaluation.nearest_row_distance(source, far)
        assert a == pytest.approx(b)


class TestEvaluateState:
    def test_similarities_stay_bounded(self):
        base = trainer.build_base(small_cfg())
        state = trainer.personalize_state(base, "full")
        out = evaluation.evaluate_state(state, n_samples=4)
        assert -1.0 <= out["identity_sim"] <= 1.0
        assert -1.0 <= out["prompt_sim"] <= 1.0
        assert out["samples"] == 4

    def test_untrained_model_scores_near_zero(self):
        # An untrained denoiser is context-blind, so identity similarity
        # over many samples is pure noise around zero.
        base = trainer.build_base(small_cfg(seed=2))
        state = trainer.personalize_state(base, "full")
        out = evaluation.evaluate_state(state, n_samples=100)
        assert abs(out["identity_sim"]) < 0.15

    def test_same_state_same_scores(self):
        base = trainer.build_base(small_cfg())
        state = trainer.personalize_state(base, "no_ida")
        a = evaluation.evaluate_state(state, n_samples=3)
        b = evaluation.evaluate_state(state, n_samples=3)
        assert a == b


class TestAblationGrid:
    def test_grid_shape_and_order(self):
        cfg = small_cfg(steps=1, eval_seeds=(1, 2), eval_samples=2)
        rows = evaluation.ablation_grid(cfg)
        assert len(rows) == 4 * 2
        expected = [(mode, seed) for mode in evaluation.MODE_ORDER
                    for seed in (1, 2)]
        assert [(r.mode, r.seed) for r in rows] == expected

    def test_rows_carry_finite_metrics(self):
        cfg = small_cfg(steps=1, eval_seeds=(1,), eval_samples=2)
        for row in evaluation.ablation_grid(cfg):
            assert np.isfinite(row.identity_sim)
            assert np.isfinite(row.prompt_sim)
            assert np.isfinite(row.final_loss)
            assert row.time_s >= 0.0


class TestAlignmentDiagnostic:
    def trained_pair(self, seed=1):
        cfg = small_cfg(seed=seed, steps=1)
        base = trainer.build_base(cfg)
        full, _ = trainer.train_run(
            dataclasses.replace(cfg, ablation_mode="full"), base=base)
        naive, _ = trainer.train_run(
            dataclasses.replace(cfg, ablation_mode="naive_concat"), base=base)
        return full, naive

    def test_reports_both_distances(self):
        full, naive = self.trained_pair()
        rep = evaluation.alignment_diagnostic(full, naive)
        assert rep.seed == 1
        assert rep.dist_enhanced >= 0.0
        assert rep.dist_naive >= 0.0

    def test_untrained_states_rejected(self):
        cfg = small_cfg()
        base = trainer.build_base(cfg)
        full = trainer.personalize_state(base, "full")
        naive = trainer.personalize_state(base, "naive_concat")
        with pytest.raises(ad.ContractError):
            evaluation.alignment_diagnostic(full, naive)

    def test_wrong_modes_rejected(self):
        full, naive = self.trained_pair()
        with pytest.raises(ad.ContractError):
            evaluation.alignment_diagnostic(naive, full)

    def test_seed_mismatch_rejected(self):
        full, _ = self.trained_pair(seed=1)
        _, naive = self.trained_pair(seed=2)
        with pytest.raises(ad.ContractError):
            evaluation.alignment_diagnostic(full, naive)

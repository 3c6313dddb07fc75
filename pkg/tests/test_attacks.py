import numpy as np
import pytest

from cbmrobust.attacks import (
    AttackConfig,
    apply_perturbation,
    attacks_over_targets,
    linearized_attack,
    margins,
    multi_constraint_attack,
    single_constraint_attack,
    untargeted_min_attack,
)
from cbmrobust.core import (
    LinearHead,
    MlpHead,
    MlpLayer,
    linear_head_as_mlp,
    logits,
    mlp_forward,
    predict,
)
from cbmrobust.errors import DegenerateDirectionError, ParameterError

from helpers import fit_mlp_head, grid_min_norm_2d, random_head


class TestMargins:
    def test_worked_example(self, two_class_head):
        beta = margins(two_class_head, [1.0, 0.0], t=1)
        assert beta[0] == pytest.approx(2.0)
        assert beta[1] == 0.0

    def test_zero_input_zero_bias(self, rng):
        head = LinearHead(weights=rng.normal(size=(4, 3)), bias=np.zeros(4))
        assert np.allclose(margins(head, np.zeros(3), t=2), 0.0)

    def test_matches_scalar_formula(self, rng):
        head = random_head(rng, 4, 6)
        c = rng.normal(size=6)
        t = 2
        beta = margins(head, c, t)
        for k in range(4):
            expected = float(
                (head.weights[k] - head.weights[t]) @ c + head.bias[k] - head.bias[t]
            )
            assert beta[k] == pytest.approx(expected, abs=1e-12)

    def test_target_out_of_range(self, two_class_head):
        with pytest.raises(ParameterError):
            margins(two_class_head, [0.0, 0.0], t=5)


class TestSingleConstraint:
    def test_worked_example(self, two_class_head):
        cfg = AttackConfig(epsilon=0.01)
        res = single_constraint_attack(two_class_head, [1.0, 0.0], 0, 1, cfg)
        np.testing.assert_allclose(res.delta, [-1.005, 0.0])
        scores = logits(two_class_head, np.array([1.0, 0.0]) + res.delta)
        assert scores[1] - scores[0] == pytest.approx(0.01)
        assert res.success

    def test_already_winning_returns_zero(self):
        head = LinearHead(weights=[[1.0, 0.0], [-1.0, 0.0]], bias=[0.0, 0.0])
        cfg = AttackConfig(epsilon=0.01)
        res = single_constraint_attack(head, [-1.0, 0.0], y_star=0, t=1, cfg=cfg)
        assert np.all(res.delta == 0.0)
        assert res.success

    def test_matches_grid_search(self, rng):
        cfg = AttackConfig(epsilon=1e-3)
        checked = 0
        while checked < 5:
            head = random_head(rng, 3, 2)
            c = rng.uniform(0, 1, size=2)
            y = predict(head, c)
            t = (y + 1) % 3
            direction = head.weights[t] - head.weights[y]
            gap = margins(head, c, t)[y] + cfg.epsilon
            if np.linalg.norm(direction) < 0.3 or not 0.5 < gap / np.linalg.norm(direction) < 2.5:
                continue
            res = single_constraint_attack(head, c, y, t, cfg)
            oracle = grid_min_norm_2d(head, c, y, t, cfg.epsilon)
            assert res.norm == pytest.approx(oracle, rel=0.01)
            checked += 1

    def test_degenerate_direction(self):
        head = LinearHead(weights=[[1.0, 0.0], [1.0, 0.0]], bias=[0.0, 1.0])
        with pytest.raises(DegenerateDirectionError):
            single_constraint_attack(head, [0.5, 0.5], 0, 1)

    def test_target_equals_true_class(self, two_class_head):
        with pytest.raises(ParameterError):
            single_constraint_attack(two_class_head, [1.0, 0.0], 0, 0)

    def test_scale_covariance(self, rng):
        # scaling W, b and epsilon together by alpha leaves delta unchanged
        head = random_head(rng, 3, 4)
        c = rng.uniform(0, 1, size=4)
        y = predict(head, c)
        t = (y + 1) % 3
        base = single_constraint_attack(head, c, y, t, AttackConfig(epsilon=1e-3))
        for alpha in (0.5, 2.0, 10.0):
            scaled_head = LinearHead(weights=alpha * head.weights, bias=alpha * head.bias)
            scaled = single_constraint_attack(
                scaled_head, c, y, t, AttackConfig(epsilon=alpha * 1e-3)
            )
            np.testing.assert_allclose(scaled.delta, base.delta, rtol=1e-9, atol=1e-12)

    def test_zero_margin_zero_epsilon(self):
        head = LinearHead(weights=[[1.0, 0.0], [-1.0, 0.0]], bias=[0.0, 0.0])
        res = single_constraint_attack(head, [0.0, 0.7], 0, 1, AttackConfig(epsilon=0.0))
        assert np.all(res.delta == 0.0)


class TestMultiConstraint:
    def test_two_class_equals_single(self, rng):
        for _ in range(10):
            head = random_head(rng, 2, 5)
            c = rng.uniform(0, 1, size=5)
            y = predict(head, c)
            t = 1 - y
            single = single_constraint_attack(head, c, y, t)
            multi = multi_constraint_attack(head, c, y, t)
            np.testing.assert_allclose(multi.delta, single.delta, atol=1e-10)

    def test_meets_all_boundaries_with_margin(self, rng):
        cfg = AttackConfig(epsilon=1e-3)
        for _ in range(20):
            head = random_head(rng, 4, 8)
            c = rng.uniform(0, 1, size=8)
            y = predict(head, c)
            t = (y + 1) % 4
            res = multi_constraint_attack(head, c, y, t, cfg)
            assert res.success
            scores = logits(head, c + res.delta)
            for k in range(4):
                if k != t:
                    assert scores[t] - scores[k] == pytest.approx(cfg.epsilon, abs=1e-9)

    def test_norm_at_least_grid_minimum(self, rng):
        cfg = AttackConfig(epsilon=1e-3)
        found = 0
        while found < 3:
            head = random_head(rng, 3, 2)
            c = rng.uniform(0, 1, size=2)
            y = predict(head, c)
            t = (y + 1) % 3
            if np.linalg.norm(head.weights[t] - head.weights[y]) < 0.3:
                continue
            res = multi_constraint_attack(head, c, y, t, cfg)
            if not res.success:
                continue
            oracle = grid_min_norm_2d(head, c, y, t, cfg.epsilon)
            assert res.norm >= oracle - 2e-3
            found += 1

    def test_rank_deficient_rows(self):
        # duplicated non-target rows: pseudoinverse keeps delta finite
        head = LinearHead(
            weights=[[1.0, 0.0], [0.2, 0.9], [0.2, 0.9], [-1.0, 0.2]],
            bias=[0.0, 0.1, 0.1, 0.0],
        )
        res = multi_constraint_attack(head, [0.9, 0.1], y_star=0, t=3)
        assert np.all(np.isfinite(res.delta))
        assert res.success

    def test_all_zero_constraints(self):
        head = LinearHead(weights=[[0.5, 0.5], [0.5, 0.5]], bias=[0.0, 1.0])
        with pytest.raises(DegenerateDirectionError):
            multi_constraint_attack(head, [0.1, 0.2], 0, 1)


class TestUntargeted:
    def test_two_class_matches_targeted(self, rng):
        head = random_head(rng, 2, 4)
        c = rng.uniform(0, 1, size=4)
        y = predict(head, c)
        res = untargeted_min_attack(head, c, y)
        targeted = multi_constraint_attack(head, c, y, 1 - y)
        np.testing.assert_allclose(res.delta, targeted.delta)
        assert res.target == 1 - y

    def test_symmetric_tie_takes_lowest_target(self):
        head = LinearHead(
            weights=[[0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]],
            bias=[0.0, 0.0, 0.0],
        )
        res = untargeted_min_attack(head, [0.0, 1.0], y_star=0, method="single")
        assert res.target == 1

    def test_matches_exhaustive_enumeration(self, rng):
        cfg = AttackConfig()
        for method in ("single", "multi"):
            for _ in range(10):
                head = random_head(rng, 5, 6)
                c = rng.uniform(0, 1, size=6)
                y = predict(head, c)
                res = untargeted_min_attack(head, c, y, cfg, method=method)
                per_target = attacks_over_targets(head, c, y, cfg, method=method)
                successful = {t: r for t, r in per_target.items() if r.success}
                pool = successful or per_target
                best_norm = min(r.norm for r in pool.values())
                assert res.norm == pytest.approx(best_norm)
                assert res.success == bool(successful)

    def test_successful_attacks_satisfy_margin_invariant(self, rng):
        cfg = AttackConfig(epsilon=1e-3)
        for method in ("single", "multi"):
            for _ in range(50):
                head = random_head(rng, int(rng.integers(2, 8)), int(rng.integers(2, 12)))
                c = rng.uniform(0, 1, size=head.num_concepts)
                y = int(rng.integers(head.num_classes))
                res = untargeted_min_attack(head, c, y, cfg, method=method)
                if res.success:
                    scores = logits(head, c + res.delta)
                    assert int(np.argmax(scores)) == res.target
                    assert scores[res.target] - scores[y] >= cfg.epsilon - 1e-9

    def test_identical_rows_raise(self):
        head = LinearHead(weights=np.ones((3, 2)), bias=[0.0, 0.5, 1.0])
        with pytest.raises(DegenerateDirectionError):
            untargeted_min_attack(head, [0.5, 0.5], 0, method="single")


class TestClamping:
    def test_clamped_flag_and_range(self, two_class_head):
        cfg = AttackConfig(epsilon=0.01, clamp_concepts=True)
        res = single_constraint_attack(two_class_head, [1.0, 0.0], 0, 1, cfg)
        moved = apply_perturbation([1.0, 0.0], res.delta, clamp=True)
        assert moved.clamped
        assert moved.in_unit_range()
        # unclamped perturbation leaves the box; clamped success is honest
        assert (np.array([1.0, 0.0]) + res.delta)[0] < 0.0
        assert res.success == (predict(two_class_head, moved) == 1)


class TestLinearized:
    def test_identity_layer_matches_multi(self, rng):
        head = random_head(rng, 4, 6)
        mlp = linear_head_as_mlp(head)
        c = rng.uniform(0, 1, size=6)
        y = predict(head, c)
        t = (y + 2) % 4
        lin = linearized_attack(mlp, c, y, t)
        ref = multi_constraint_attack(head, c, y, t)
        assert lin.success
        np.testing.assert_allclose(lin.delta, ref.delta, atol=1e-6)

    def test_constant_head_fails_gracefully(self):
        mlp = MlpHead(layers=(MlpLayer(np.zeros((3, 2)), np.array([0.0, 1.0, 0.5]), "identity"),))
        res = linearized_attack(mlp, [0.2, 0.3], y_star=1, t=0, cfg=AttackConfig(max_relin_iters=3))
        assert not res.success

    def test_trained_two_layer_success_rate(self, synth_pair):
        train, test = synth_pair
        mlp = fit_mlp_head(train, hidden=16, epochs=300, seed=1)
        cfg = AttackConfig(epsilon=1e-3, max_relin_iters=20)
        samples = test.samples[:200]
        assert len(samples) == 125  # whole test split at this config
        hits = 0
        for s in samples:
            order = np.argsort(mlp_forward(mlp, s.concepts))[::-1]
            target = int(order[0]) if order[0] != s.label else int(order[1])
            res = linearized_attack(mlp, s.concepts, s.label, target, cfg)
            hits += res.success
        assert hits / len(samples) >= 0.80

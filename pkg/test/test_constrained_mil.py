import math
from unittest import TestCase

import numpy as np
from scipy.special import softmax as reference_softmax

from segadapt.constrained_mil import (
    build_constraints,
    class_weights,
    infer_image_labels,
    mil_loss,
    project_to_constraints,
    pseudo_label_image,
)
from segadapt.exceptions import ArgumentError, ConfigurationError, InfeasibleConstraintsError
from segadapt.models.class_stats import ClassStat, ClassStats
from segadapt.models.constraints import LOWER, UPPER, Constraint, ConstraintSet


def make_stats(entries):
    '''
    entries: list of (alpha, delta, gamma) or None for classes never seen
    '''
    stats = ClassStats(num_classes=len(entries))
    for class_id, entry in enumerate(entries):
        if entry is None:
            stats.append(ClassStat(class_id=class_id, n=0))
        else:
            alpha, delta, gamma = entry
            stats.append(ClassStat(class_id=class_id, alpha=alpha, delta=delta, gamma=gamma, n=10))
    return stats


def grid_kl_oracle(p, cons, units=50):
    '''
    Exact minimum of mean per-pixel KL(Q || P) over three-class Q whose
    entries lie on the 1 / units grid, subject to cons. Dynamic programming
    over the running class totals. math.inf when no grid point is feasible.
    '''
    _, pixels = p.shape
    a, b = np.meshgrid(np.arange(units + 1), np.arange(units + 1), indexing='ij')
    keep = a + b <= units
    a, b = a[keep], b[keep]
    grid = np.stack([a, b, units - a - b]) / units

    size = units * pixels + 1
    best = np.full((size, size), math.inf)
    best[0, 0] = 0.0
    for pixel in range(pixels):
        with np.errstate(divide='ignore', invalid='ignore'):
            terms = np.where(grid > 0, grid * (np.log(grid) - np.log(p[:, pixel:pixel + 1])), 0.0)
        cost = terms.sum(axis=0)
        reach = units * pixel + 1
        previous = best[:reach, :reach]
        best = np.full((size, size), math.inf)
        for g in range(len(cost)):
            window = best[a[g]:a[g] + reach, b[g]:b[g] + reach]
            np.minimum(window, previous + cost[g], out=window)

    totals = np.arange(size)
    s0, s1 = np.meshgrid(totals, totals, indexing='ij')
    s2 = units * pixels - s0 - s1
    feasible = np.isfinite(best) & (s2 >= 0)
    coverage = np.stack([s0, s1, s2]) / (units * pixels)
    for c in cons:
        if c.kind == LOWER:
            feasible &= coverage[c.class_id] >= c.bound
        else:
            feasible &= coverage[c.class_id] <= c.bound
    return float(best[feasible].min()) / pixels if feasible.any() else math.inf


def random_instance(rng):
    p = rng.dirichlet(np.full(3, 2.0), size=4).T
    p = np.maximum(p, 1e-3)
    p /= p.sum(axis=0, keepdims=True)
    reachable = rng.dirichlet(np.ones(3), size=4).T.mean(axis=1)
    lower_class, upper_class = rng.choice(3, size=2, replace=False)
    cons = ConstraintSet(num_classes=3)
    cons.append(Constraint(
        class_id=lower_class, kind=LOWER, bound=reachable[lower_class] * rng.uniform(0.5, 1.0), hard=True
    ))
    cons.append(Constraint(
        class_id=upper_class, kind=UPPER,
        bound=reachable[upper_class] + (1 - reachable[upper_class]) * rng.uniform(0.0, 0.5), hard=True
    ))
    return p, cons


class InferImageLabelsTest(TestCase):

    def test_presence_threshold(self):
        stats = make_stats([(0.5, 0.6, 0.8), (0.2, 0.3, 0.4), (0.1, 0.2, 0.3)])
        pred = np.zeros((10, 10), dtype=np.uint8)
        pred[0, :3] = 1
        self.assertEqual(infer_image_labels(pred, stats), frozenset({0, 1}))

    def test_threshold_is_strict(self):
        stats = make_stats([(0.5, 0.6, 0.8), (0.2, 0.3, 0.4)])
        pred = np.zeros((10, 10), dtype=np.uint8)
        pred[0, :2] = 1
        self.assertEqual(infer_image_labels(pred, stats), frozenset({0}))

    def test_zero_alpha_floor(self):
        stats = make_stats([(0.5, 0.6, 0.9), (0.0, 0.01, 0.02)])
        pred = np.zeros((50, 50), dtype=np.uint8)
        pred[0, 0] = 1
        self.assertEqual(infer_image_labels(pred, stats), frozenset({0}))
        pred[0, 1] = 1
        self.assertEqual(infer_image_labels(pred, stats), frozenset({0, 1}))

    def test_unusable_classes_never_present(self):
        stats = make_stats([(0.5, 0.6, 0.8), None])
        pred = np.ones((4, 4), dtype=np.uint8)
        self.assertEqual(infer_image_labels(pred, stats), frozenset())

    def test_matches_rule_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            alphas = rng.uniform(0, 0.5, size=4)
            stats = make_stats([(a, a + 0.1, a + 0.3) for a in alphas])
            pred = rng.choice(4, size=(8, 8), p=rng.dirichlet(np.ones(4))).astype(np.uint8)
            d = np.bincount(pred.ravel(), minlength=4) / pred.size
            expected = {c for c in range(4) if d[c] > 0 and d[c] > 0.1 * alphas[c]}
            self.assertEqual(infer_image_labels(pred, stats), frozenset(expected))

    def test_monotone_in_coverage(self):
        stats = make_stats([(0.3, 0.5, 0.8), (0.3, 0.4, 0.6)])
        pred = np.zeros((10, 10), dtype=np.uint8)
        seen = False
        for count in range(1, 50):
            pred.ravel()[:count] = 1
            present = 1 in infer_image_labels(pred, stats)
            self.assertFalse(seen and not present)
            seen = seen or present
        self.assertTrue(seen)


class BuildConstraintsTest(TestCase):

    def test_single_present_class(self):
        stats = make_stats([(0.2, 0.3, 0.7), None, None])
        cons = build_constraints({0}, stats)
        self.assertEqual(len(cons), 2)
        lower = cons.filter(kind=LOWER)[0]
        upper = cons.filter(kind=UPPER)[0]
        self.assertEqual((lower.class_id, lower.bound, lower.hard), (0, 0.3, False))
        self.assertEqual((upper.class_id, upper.bound, upper.hard), (0, 0.7, True))

    def test_lower_bounds_scaled(self):
        stats = make_stats([(0.5, 0.7, 0.9), (0.4, 0.6, 0.8), None])
        lowers = build_constraints({0, 1}, stats).lower_bounds()
        self.assertAlmostEqual(lowers[0], 0.7 / 1.3, places=12)
        self.assertAlmostEqual(lowers[1], 0.6 / 1.3, places=12)

    def test_absent_classes_capped(self):
        stats = make_stats([(0.2, 0.3, 0.7), (0.3, 0.4, 0.5), (0.0, 0.01, 0.02)])
        cons = build_constraints({0}, stats)
        uppers = cons.upper_bounds()
        self.assertAlmostEqual(uppers[1], 0.03, places=12)
        self.assertNotIn(2, uppers)
        self.assertTrue(all(c.hard for c in cons.filter(kind=UPPER)))

    def test_matches_rule_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            entries = []
            for _ in range(5):
                alpha, gamma = np.sort(rng.uniform(0, 0.6, size=2))
                entries.append((alpha, rng.uniform(alpha, gamma), gamma))
            stats = make_stats(entries)
            present = set(rng.choice(5, size=int(rng.integers(1, 4)), replace=False).tolist())
            cons = build_constraints(present, stats)
            total = sum(entries[c][1] for c in present)
            scale = 1 / total if total > 1 else 1.0
            for c in present:
                self.assertAlmostEqual(cons.lower_bounds()[c], entries[c][1] * scale, places=12)
            for c in set(range(5)) - present:
                if entries[c][0] > 0:
                    self.assertAlmostEqual(cons.upper_bounds()[c], 0.1 * entries[c][0], places=12)

    def test_empty_present_set(self):
        with self.assertRaises(ArgumentError):
            build_constraints(set(), make_stats([(0.2, 0.3, 0.7)]))

    def test_infeasible_set_is_rejected(self):
        cons = ConstraintSet(num_classes=3, data=[
            Constraint(class_id=0, kind=LOWER, bound=0.7),
            Constraint(class_id=1, kind=LOWER, bound=0.6),
        ])
        with self.assertRaises(InfeasibleConstraintsError) as ctx:
            project_to_constraints(np.full((3, 2, 2), 1 / 3), cons)
        self.assertTrue(ctx.exception.violated)


class ProjectionTest(TestCase):

    def test_worked_example(self):
        probs = np.array([0.9, 0.1]).reshape(2, 1, 1)
        cons = ConstraintSet(num_classes=2, data=[Constraint(class_id=1, kind=LOWER, bound=0.3, hard=True)])
        latent = project_to_constraints(probs, cons)
        np.testing.assert_allclose(latent.q[:, 0, 0], [0.7, 0.3], atol=1e-6)
        self.assertTrue(latent.converged)

        latent = project_to_constraints(probs, cons, solver='ascent', max_iter=5000)
        np.testing.assert_allclose(latent.q[:, 0, 0], [0.7, 0.3], atol=1e-5)

    def test_satisfied_constraints_are_identity(self):
        probs = reference_softmax(np.random.default_rng(0).normal(size=(3, 2, 2)), axis=0)
        cov = probs.mean(axis=(1, 2))
        cons = ConstraintSet(num_classes=3, data=[
            Constraint(class_id=0, kind=LOWER, bound=cov[0] / 2, hard=False),
            Constraint(class_id=0, kind=UPPER, bound=min(1.0, cov[0] * 1.5)),
        ])
        latent = project_to_constraints(probs, cons)
        np.testing.assert_allclose(latent.q, probs, atol=1e-12)
        np.testing.assert_array_equal(latent.multipliers, [0.0, 0.0])

    def test_empty_set_is_identity(self):
        probs = reference_softmax(np.random.default_rng(1).normal(size=(3, 2, 2)), axis=0)
        latent = project_to_constraints(probs, ConstraintSet(num_classes=3))
        np.testing.assert_array_equal(latent.q, probs)

    def test_no_worse_than_grid_search(self):
        rng = np.random.default_rng(42)
        compared = 0
        for _ in range(100):
            p, cons = random_instance(rng)
            latent = project_to_constraints(p.reshape(3, 2, 2), cons)
            q = latent.q.reshape(3, 4)
            np.testing.assert_allclose(q.sum(axis=0), 1.0, atol=1e-6)
            for c in cons:
                coverage = q[c.class_id].mean()
                if c.kind == LOWER:
                    self.assertGreaterEqual(coverage, c.bound - 1e-6)
                else:
                    self.assertLessEqual(coverage, c.bound + 1e-6)
            grid = grid_kl_oracle(p, cons)
            if math.isinf(grid):
                continue
            compared += 1
            self.assertLessEqual(latent.kl, grid + 1e-3)
        self.assertGreaterEqual(compared, 90)

    def test_ascent_solver_agrees(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            p, cons = random_instance(rng)
            lbfgs = project_to_constraints(p.reshape(3, 2, 2), cons)
            ascent = project_to_constraints(p.reshape(3, 2, 2), cons, solver='ascent', max_iter=20000)
            self.assertAlmostEqual(ascent.kl, lbfgs.kl, delta=1e-3)

    def test_soft_lower_bound_slack(self):
        probs = np.array([0.99, 0.01]).reshape(2, 1, 1)
        cons = ConstraintSet(num_classes=2, data=[Constraint(class_id=1, kind=LOWER, bound=0.5, hard=False)])
        latent = project_to_constraints(probs, cons)
        self.assertAlmostEqual(latent.q[1, 0, 0], 0.5, places=5)

        capped = project_to_constraints(probs, cons, slack_penalty=1.0)
        self.assertAlmostEqual(capped.multipliers[0], 1.0, places=6)
        self.assertGreater(capped.violations[0], 0.4)
        self.assertTrue(capped.converged)

    def test_masked_pixels_keep_probabilities(self):
        probs = reference_softmax(np.random.default_rng(2).normal(size=(2, 2, 2)), axis=0)
        mask = np.array([[True, True], [True, False]])
        cons = ConstraintSet(num_classes=2, data=[Constraint(class_id=1, kind=UPPER, bound=0.05)])
        latent = project_to_constraints(probs, cons, mask=mask)
        np.testing.assert_array_equal(latent.q[:, 1, 1], probs[:, 1, 1])
        self.assertLessEqual(latent.q[1][mask].mean(), 0.05 + 1e-6)

    def test_unknown_solver(self):
        cons = ConstraintSet(num_classes=2, data=[Constraint(class_id=1, kind=UPPER, bound=0.5)])
        with self.assertRaises(ArgumentError):
            project_to_constraints(np.full((2, 1, 1), 0.5), cons, solver='newton')


class ClassWeightsTest(TestCase):

    def test_rule(self):
        stats = make_stats([(0.15, 0.2, 0.3), (0.05, 0.1, 0.2), (0.1, 0.2, 0.3), None])
        np.testing.assert_array_equal(class_weights(stats), [0.1, 1.0, 1.0, 1.0])

    def test_depends_only_on_alpha(self):
        stats = make_stats([(0.15, 0.2, 0.3), (0.05, 0.1, 0.2)])
        scaled = make_stats([(0.15, 0.4, 0.6), (0.05, 0.2, 0.4)])
        np.testing.assert_array_equal(class_weights(stats), class_weights(scaled))


class MilLossTest(TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(9)
        self.scores = self.rng.normal(size=(3, 4, 4))

    def test_entropy_at_identity(self):
        q = reference_softmax(self.scores, axis=0)
        loss, _ = mil_loss(self.scores, q, np.ones(3))
        entropy = float(np.mean(-np.sum(q * np.log(q), axis=0)))
        self.assertAlmostEqual(loss, entropy, places=12)

    def test_weights_scale_linearly(self):
        q = reference_softmax(self.rng.normal(size=(3, 4, 4)), axis=0)
        loss, grads = mil_loss(self.scores, q, np.ones(3))
        scaled_loss, scaled_grads = mil_loss(self.scores, q, np.full(3, 0.1))
        self.assertAlmostEqual(scaled_loss, 0.1 * loss, places=12)
        np.testing.assert_allclose(scaled_grads, 0.1 * grads, rtol=1e-12)

    def test_gradient_matches_finite_differences(self):
        q = reference_softmax(self.rng.normal(size=(3, 4, 4)), axis=0)
        weights = np.array([0.1, 1.0, 0.5])
        _, grads = mil_loss(self.scores, q, weights)
        for _ in range(10):
            index = tuple(int(self.rng.integers(0, s)) for s in self.scores.shape)
            old = self.scores[index]
            self.scores[index] = old + 1e-6
            plus, _ = mil_loss(self.scores, q, weights)
            self.scores[index] = old - 1e-6
            minus, _ = mil_loss(self.scores, q, weights)
            self.scores[index] = old
            numeric = (plus - minus) / 2e-6
            self.assertLessEqual(abs(grads[index] - numeric), 1e-4 * abs(numeric) + 1e-8)

    def test_shape_mismatch(self):
        with self.assertRaises(ConfigurationError):
            mil_loss(self.scores, np.ones((3, 4, 5)) / 3, np.ones(3))
        with self.assertRaises(ConfigurationError):
            mil_loss(self.scores, np.ones((3, 4, 4)) / 3, np.ones(2))


class PseudoLabelTest(TestCase):

    def test_pipeline(self):
        stats = make_stats([(0.3, 0.5, 0.7), (0.2, 0.3, 0.5), (0.1, 0.2, 0.3)])
        scores = np.zeros((3, 8, 8))
        scores[0] = 2.0
        scores[1, :2] = 4.0
        pseudo = pseudo_label_image(scores, stats)
        self.assertEqual(pseudo.present, frozenset({0, 1}))
        self.assertEqual(pseudo.latent.q.shape, (3, 8, 8))
        np.testing.assert_allclose(pseudo.latent.q.sum(axis=0), 1.0, atol=1e-9)
        self.assertLessEqual(pseudo.latent.q[2].mean(), 0.01 + 1e-6)
        self.assertIn('multipliers', pseudo.serialize())

    def test_nothing_present(self):
        stats = make_stats([None, None])
        self.assertIsNone(pseudo_label_image(np.zeros((2, 8, 8)), stats))

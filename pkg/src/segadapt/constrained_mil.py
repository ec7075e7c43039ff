'''
Category-specific adaptation: image-level labels inferred from the current
prediction, size constraints transferred from the source statistics, and
the KL projection of the network's softmax onto those constraints.

The projection solves  min_Q mean_pixels KL(Q || P)  subject to coverage
bounds in the dual, one multiplier per bound:

    Q_c(pixel) ∝ P_c(pixel) * exp(sum of signed multipliers of class c)

Soft lower bounds carry a hinge slack penalty, which caps their multiplier.
'''
import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from segadapt import logger
from segadapt.core_model import predict, softmax
from segadapt.exceptions import ArgumentError, ConfigurationError
from segadapt.label_stats import coverage
from segadapt.models.constraints import LOWER, UPPER, Constraint, ConstraintSet

PRESENCE_FACTOR = 0.1
ABSENT_FACTOR = 0.1
ZERO_ALPHA_FLOOR = 5e-4
WEIGHT_THRESHOLD = 0.1
DOWN_WEIGHT = 0.1
PROB_FLOOR = 1e-7
SLACK_PENALTY = 10.0


def infer_image_labels(pred, stats):
    '''
    Class c is present when its predicted coverage exceeds PRESENCE_FACTOR * alpha_c
    '''
    d = coverage(pred, stats.num_classes)
    present = set()
    for stat in stats:
        if not stat.usable:
            continue
        d_c = d[stat.class_id]
        if d_c <= 0 or d_c <= PRESENCE_FACTOR * stat.alpha:
            continue
        if stat.alpha == 0 and d_c < ZERO_ALPHA_FLOOR:
            continue
        present.add(stat.class_id)
    return frozenset(present)


def build_constraints(present, stats, absent_factor=ABSENT_FACTOR):
    if not present:
        raise ArgumentError('No present classes: nothing to constrain')
    for class_id in present:
        if not stats[class_id].usable:
            raise ArgumentError(f'Class {class_id} has no source statistics')

    lowers = {c: min(stats[c].delta, stats[c].gamma) for c in sorted(present)}
    total = sum(lowers.values())
    if total > 1:
        lowers = {c: v / total for c, v in lowers.items()}

    uppers = {c: stats[c].gamma for c in sorted(present)}
    for stat in stats:
        if stat.class_id in present or not stat.usable or stat.alpha <= 0:
            continue
        uppers[stat.class_id] = absent_factor * stat.alpha

    # keep per-pixel normalisation satisfiable when every class is capped
    if len(uppers) == stats.num_classes and sum(uppers.values()) < 1:
        present_total = sum(uppers[c] for c in present)
        room = 1 - (sum(uppers.values()) - present_total)
        if present_total > 0:
            for c in present:
                uppers[c] = min(1.0, uppers[c] * room / present_total)
        if sum(uppers.values()) < 1:
            lifted = max(present, key=lambda c: uppers[c])
            uppers[lifted] = min(1.0, uppers[lifted] + 1 - sum(uppers.values()))

    cons = ConstraintSet(num_classes=stats.num_classes)
    for class_id, bound in lowers.items():
        cons.append(Constraint(class_id=class_id, kind=LOWER, bound=bound, hard=False))
    for class_id in sorted(uppers):
        cons.append(Constraint(class_id=class_id, kind=UPPER, bound=uppers[class_id], hard=True))
    return cons


class LatentDistribution():

    __slots__ = [
        'q',
        'multipliers',
        'violations',
        'iterations',
        'converged',
        'kl',
    ]

    def __init__(self, **kwargs):
        for name in self.__slots__:
            setattr(self, name, kwargs.get(name))

    def serialize(self):
        return {
            'multipliers': [float(v) for v in self.multipliers],
            'violations': [float(v) for v in self.violations],
            'iterations': int(self.iterations),
            'converged': bool(self.converged),
            'kl': float(self.kl),
        }


def _normalise(probs):
    probs = np.clip(np.asarray(probs, dtype=np.float64), PROB_FLOOR, None)
    return probs / probs.sum(axis=0, keepdims=True)


class _Dual():

    def __init__(self, log_p, cons, slack_penalty):
        self.log_p = log_p
        self.num_classes = log_p.shape[0]
        self.classes = np.array([c.class_id for c in cons], dtype=int)
        self.signs = np.array([c.sign for c in cons])
        self.bounds = np.array([c.bound for c in cons])
        self.upper_limits = np.array([
            slack_penalty if (c.kind == LOWER and not c.hard) else np.inf for c in cons
        ])

    def class_shift(self, lam):
        shift = np.zeros(self.num_classes)
        np.add.at(shift, self.classes, self.signs * lam)
        return shift

    def distribution(self, lam):
        logits = self.log_p + self.class_shift(lam)[:, None]
        log_z = logsumexp(logits, axis=0)
        return np.exp(logits - log_z), log_z

    def value_and_grad(self, lam):
        q, log_z = self.distribution(lam)
        cov = q.mean(axis=1)
        value = -log_z.mean() + float(np.sum(self.signs * lam * self.bounds))
        grad = self.signs * (self.bounds - cov[self.classes])
        return value, grad, q, cov

    def residual(self, lam, grad):
        at_lower = lam <= 0
        at_upper = lam >= self.upper_limits
        residual = grad.copy()
        residual[at_lower] = np.maximum(grad[at_lower], 0)
        residual[at_upper] = np.minimum(grad[at_upper], 0)
        return float(np.max(np.abs(residual))) if residual.size else 0.0


def _solve_lbfgs(dual, max_iter, tol):
    def objective(lam):
        value, grad, _, _ = dual.value_and_grad(lam)
        return -value, -grad

    result = minimize(
        objective,
        np.zeros(len(dual.bounds)),
        jac=True,
        method='L-BFGS-B',
        bounds=[(0, None if np.isinf(u) else u) for u in dual.upper_limits],
        options={'maxiter': max_iter, 'gtol': tol * 1e-3, 'ftol': 1e-15},
    )
    return np.clip(result.x, 0, dual.upper_limits), int(result.nit)


def _solve_ascent(dual, max_iter, tol, step, start=None):
    lam = np.zeros(len(dual.bounds)) if start is None else start.copy()
    for iteration in range(max_iter):
        _, grad, _, _ = dual.value_and_grad(lam)
        if dual.residual(lam, grad) < tol:
            return lam, iteration
        lam = np.clip(lam + step * grad, 0, dual.upper_limits)
    return lam, max_iter


def project_to_constraints(probs, cons, solver='lbfgs', slack_penalty=SLACK_PENALTY,
                           mask=None, max_iter=500, tol=1e-6, step=0.1):
    '''
    probs: C x H x W softmax.  mask: optional H x W, False pixels are left as P
    and do not count towards coverage.
    '''
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ConfigurationError(f'Expected C x H x W probabilities, got {probs.shape}')
    if cons.is_empty:
        return LatentDistribution(
            q=probs.copy(), multipliers=np.zeros(0), violations=np.zeros(0),
            iterations=0, converged=True, kl=0.0
        )
    cons.check_feasible()

    num_classes = probs.shape[0]
    mask = np.ones(probs.shape[1:], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ArgumentError('Projection needs at least one unmasked pixel')
    if any(c.class_id >= num_classes for c in cons):
        raise ConfigurationError('Constraint refers to a class outside the score channels')

    p = _normalise(probs[:, mask])
    dual = _Dual(np.log(p), cons, slack_penalty)
    if solver == 'lbfgs':
        lam, iterations = _solve_lbfgs(dual, max_iter, tol)
        _, grad, _, _ = dual.value_and_grad(lam)
        if dual.residual(lam, grad) >= tol:
            lam, polish = _solve_ascent(dual, max_iter, tol, step, start=lam)
            iterations += polish
    elif solver == 'ascent':
        lam, iterations = _solve_ascent(dual, max_iter, tol, step)
    else:
        raise ArgumentError(f'Unknown projection solver {solver!r}')

    _, grad, q_valid, cov = dual.value_and_grad(lam)
    violations = np.maximum(dual.signs * (dual.bounds - cov[dual.classes]), 0)
    converged = dual.residual(lam, grad) < tol
    if not converged:
        worst = [repr(c) for c, v in zip(cons, violations) if v > tol]
        logger.warning('Projection stopped after %s iterations, still violating %s', iterations, worst)

    q = probs.copy()
    q[:, mask] = q_valid
    kl = float(np.mean(np.sum(q_valid * (np.log(q_valid) - np.log(p)), axis=0)))
    return LatentDistribution(
        q=q, multipliers=lam, violations=violations,
        iterations=iterations, converged=converged, kl=kl
    )


def class_weights(stats):
    return np.array([
        DOWN_WEIGHT if (stat.usable and stat.alpha > WEIGHT_THRESHOLD) else 1.0
        for stat in stats
    ])


def mil_loss(scores, q, weights, mask=None):
    '''
    Weighted cross-entropy between softmax(scores) and Q; each pixel takes the
    weight of its most likely pseudo-label class. Mean over unmasked pixels.
    Returns (loss, d_scores).
    '''
    scores = np.asarray(scores, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if scores.shape != q.shape:
        raise ConfigurationError(f'Score shape {scores.shape} does not match Q {q.shape}')
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (scores.shape[-3],):
        raise ConfigurationError(f'Expected {scores.shape[-3]} class weights, got {weights.shape}')
    mask = np.ones(scores.shape[:-3] + scores.shape[-2:], dtype=bool) if mask is None else mask
    count = int(np.sum(mask))
    if count == 0:
        return 0.0, np.zeros_like(scores)

    pixel_weights = weights[np.argmax(q, axis=-3)] * mask
    log_probs = scores - logsumexp(scores, axis=-3, keepdims=True)
    loss = float(np.sum(pixel_weights * -np.sum(q * log_probs, axis=-3))) / count
    d_scores = np.expand_dims(pixel_weights, -3) * (np.exp(log_probs) - q) / count
    return loss, d_scores


class PseudoLabel():

    __slots__ = [
        'present',
        'constraints',
        'latent',
    ]

    def __init__(self, **kwargs):
        self.present = kwargs['present']
        self.constraints = kwargs['constraints']
        self.latent = kwargs['latent']

    def serialize(self):
        return dict(
            present=sorted(int(c) for c in self.present),
            constraints=self.constraints.serialize(),
            **self.latent.serialize()
        )


def pseudo_label_image(scores, stats, solver='lbfgs', slack_penalty=SLACK_PENALTY):
    '''
    predict -> image labels -> constraints -> projection for one C x H x W score map.
    None when no class is predicted present.
    '''
    present = infer_image_labels(predict(scores), stats)
    if not present:
        return None
    cons = build_constraints(present, stats)
    latent = project_to_constraints(softmax(scores), cons, solver=solver, slack_penalty=slack_penalty)
    return PseudoLabel(present=present, constraints=cons, latent=latent)

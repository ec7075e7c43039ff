'''
Per-unit domain classifier over FeatureMaps and the alternating
classifier / representation updates that align source and target units.

Probabilities are "unit comes from the source domain".
'''
import dataclasses
from collections import OrderedDict
from typing import Optional

import numpy as np
from scipy.special import expit

from segadapt import logger
from segadapt.exceptions import ArgumentError, ConfigurationError, NonFiniteLossError
from segadapt.layers import Conv2d, ReLU
from segadapt.models.params import DomainParams
from segadapt.optim import MomentumSGD

EPS = 1e-7


class DomainClassifier():

    def __init__(self, feature_channels, hidden=64):
        self.feature_channels = feature_channels
        self.hidden = hidden
        self.layers = [
            Conv2d('disc1', feature_channels, hidden, kernel_size=1),
            ReLU(),
            Conv2d('disc2', hidden, 1, kernel_size=1),
        ]

    def param_shapes(self):
        shapes = OrderedDict()
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def init_params(self, seed, dtype=np.float32):
        return DomainParams.init_uniform(self.param_shapes(), seed, dtype=dtype)

    def zero_params(self, dtype=np.float32):
        return DomainParams(
            data=[(name, np.zeros(shape, dtype=dtype)) for name, shape in self.param_shapes().items()]
        )

    def forward(self, dparams, features):
        '''
        features: N x D x H x W  ->  probs N x H x W clamped to [EPS, 1 - EPS]
        '''
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.feature_channels:
            raise ConfigurationError(
                f'Domain classifier expects {self.feature_channels} feature channels, got shape {x.shape}'
            )
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(dparams, x)
            caches.append(cache)
        raw = expit(x[:, 0])
        probs = np.clip(raw, EPS, 1 - EPS)
        return probs, (caches, raw)

    def backward(self, dparams, d_probs, cache):
        '''
        Returns (d_features, DomainParams grads)
        '''
        caches, raw = cache
        inside = (raw > EPS) & (raw < 1 - EPS)
        d_x = (d_probs * raw * (1 - raw) * inside)[:, None]
        grads = OrderedDict((name, np.zeros(shape)) for name, shape in self.param_shapes().items())
        for layer, layer_cache in zip(reversed(self.layers), reversed(caches)):
            d_x, layer_grads = layer.backward(dparams, d_x, layer_cache)
            for name, value in layer_grads.items():
                grads[name] += value
        return d_x, DomainParams(data=grads)


def domain_forward(classifier, dparams, features):
    features = np.asarray(features)
    single = features.ndim == 3
    probs, _ = classifier.forward(dparams, features[None] if single else features)
    return probs[0] if single else probs


def _clamped(maps):
    clamped = []
    for p in maps:
        p = np.asarray(p, dtype=np.float64)
        inside = (p >= EPS) & (p <= 1 - EPS)
        clamped.append((np.clip(p, EPS, 1 - EPS), inside))
    return clamped


def domain_loss(p_src, p_tgt):
    '''
    L_D = -sum_source log p - sum_target log(1 - p)

    Returns (loss, (grads w.r.t. each source map, grads w.r.t. each target map)).
    '''
    if len(p_src) == 0 or len(p_tgt) == 0:
        raise ArgumentError('domain_loss needs at least one source and one target map')
    loss = 0.0
    grads_src = []
    for p, inside in _clamped(p_src):
        loss -= float(np.log(p).sum())
        grads_src.append(-inside.astype(np.float64) / p)
    grads_tgt = []
    for p, inside in _clamped(p_tgt):
        loss -= float(np.log1p(-p).sum())
        grads_tgt.append(inside.astype(np.float64) / (1 - p))
    return loss, (grads_src, grads_tgt)


def inverse_domain_loss(p_src, p_tgt):
    '''
    L_Dinv = -sum_source log(1 - p) - sum_target log p
    '''
    loss, (grads_tgt, grads_src) = domain_loss(p_tgt, p_src)
    return loss, (grads_src, grads_tgt)


def unit_accuracy(p_src, p_tgt):
    correct = sum(int((np.asarray(p) >= 0.5).sum()) for p in p_src)
    correct += sum(int((np.asarray(p) < 0.5).sum()) for p in p_tgt)
    total = sum(np.asarray(p).size for p in p_src) + sum(np.asarray(p).size for p in p_tgt)
    return correct / total if total else float('nan')


@dataclasses.dataclass(frozen=True)
class StepConfig:
    k_d: int = 1
    k_r: int = 1
    classifier_learning_rate: float = 1e-3
    representation_learning_rate: float = 1e-4
    momentum: float = 0.9
    normalize_by_units: bool = True
    unit_sample: Optional[int] = None


def sample_units(shape, unit_sample, rng):
    '''
    Boolean N x H x W mask choosing unit_sample units per image (all when None)
    '''
    mask = np.zeros(shape, dtype=bool)
    per_image = shape[1] * shape[2]
    if unit_sample is None or unit_sample >= per_image:
        mask[...] = True
        return mask
    for n in range(shape[0]):
        chosen = rng.choice(per_image, size=unit_sample, replace=False)
        mask[n].flat[chosen] = True
    return mask


def _select(maps, mask):
    return [maps[mask]]


def _scatter(grads, mask):
    full = np.zeros(mask.shape)
    full[mask] = grads[0]
    return full


def classifier_loss_and_grads(classifier, dparams, feats_src, feats_tgt,
                              normalize=True, mask_src=None, mask_tgt=None):
    '''
    Classifier objective: L_D over the selected units, gradients to DomainParams
    '''
    p_src, cache_src = classifier.forward(dparams, feats_src)
    p_tgt, cache_tgt = classifier.forward(dparams, feats_tgt)
    mask_src = np.ones(p_src.shape, dtype=bool) if mask_src is None else mask_src
    mask_tgt = np.ones(p_tgt.shape, dtype=bool) if mask_tgt is None else mask_tgt
    scale = 1.0 / (mask_src.sum() + mask_tgt.sum()) if normalize else 1.0

    loss, (g_src, g_tgt) = domain_loss(_select(p_src, mask_src), _select(p_tgt, mask_tgt))
    _, grads_src = classifier.backward(dparams, scale * _scatter(g_src, mask_src), cache_src)
    _, grads_tgt = classifier.backward(dparams, scale * _scatter(g_tgt, mask_tgt), cache_tgt)
    for name in grads_src:
        grads_src[name] += grads_tgt[name]
    return scale * loss, grads_src, (p_src, p_tgt)


def alignment_loss_and_grads(classifier, dparams, feats_src, feats_tgt,
                             normalize=True, mask_src=None, mask_tgt=None):
    '''
    Representation objective (L_D + L_Dinv) / 2 with the classifier frozen.
    Returns (value, d_feats_src, d_feats_tgt, {'L_D', 'L_Dinv'}).
    '''
    p_src, cache_src = classifier.forward(dparams, feats_src)
    p_tgt, cache_tgt = classifier.forward(dparams, feats_tgt)
    mask_src = np.ones(p_src.shape, dtype=bool) if mask_src is None else mask_src
    mask_tgt = np.ones(p_tgt.shape, dtype=bool) if mask_tgt is None else mask_tgt
    scale = 1.0 / (mask_src.sum() + mask_tgt.sum()) if normalize else 1.0

    sel_src = _select(p_src, mask_src)
    sel_tgt = _select(p_tgt, mask_tgt)
    l_d, (gd_src, gd_tgt) = domain_loss(sel_src, sel_tgt)
    l_inv, (gi_src, gi_tgt) = inverse_domain_loss(sel_src, sel_tgt)

    d_p_src = 0.5 * scale * (_scatter(gd_src, mask_src) + _scatter(gi_src, mask_src))
    d_p_tgt = 0.5 * scale * (_scatter(gd_tgt, mask_tgt) + _scatter(gi_tgt, mask_tgt))
    d_feats_src, _ = classifier.backward(dparams, d_p_src, cache_src)
    d_feats_tgt, _ = classifier.backward(dparams, d_p_tgt, cache_tgt)
    value = 0.5 * scale * (l_d + l_inv)
    return value, d_feats_src, d_feats_tgt, {'L_D': scale * l_d, 'L_Dinv': scale * l_inv}


def classifier_step(classifier, dparams, feats_src, feats_tgt, optimizer,
                    normalize=True, mask_src=None, mask_tgt=None):
    '''
    One classifier update (ModelParams untouched). Returns the pre-update loss.
    '''
    loss, grads, _ = classifier_loss_and_grads(
        classifier, dparams, feats_src, feats_tgt, normalize, mask_src, mask_tgt
    )
    if not np.isfinite(loss):
        raise NonFiniteLossError('L_D', {'loss': loss})
    optimizer.step(dparams, grads)
    return loss


def representation_step(net, classifier, params, dparams, images_src, images_tgt, optimizer,
                        normalize=True, mask_src=None, mask_tgt=None):
    '''
    One representation update (DomainParams untouched). Returns the pre-update loss.
    '''
    fwd_src = net.forward(params, images_src, scores=False)
    fwd_tgt = net.forward(params, images_tgt, scores=False)
    value, d_src, d_tgt, _ = alignment_loss_and_grads(
        classifier, dparams, fwd_src.features, fwd_tgt.features, normalize, mask_src, mask_tgt
    )
    if not np.isfinite(value):
        raise NonFiniteLossError('L_da', {'loss': value})
    grads = net.backward(params, fwd_src, d_features=d_src)
    grads_tgt = net.backward(params, fwd_tgt, d_features=d_tgt)
    for name in grads:
        grads[name] += grads_tgt[name]
    optimizer.step(params, grads)
    return value


class AdversarialDiagnostics():

    __slots__ = [
        'l_d_before',
        'l_d_after',
        'l_dinv_before',
        'l_dinv_after',
        'accuracy_before',
        'accuracy_after',
    ]

    def __init__(self, **kwargs):
        for name in self.__slots__:
            setattr(self, name, kwargs.get(name))

    def serialize(self):
        return {name: getattr(self, name) for name in self.__slots__}


def _measure(net, classifier, params, dparams, images_src, images_tgt, normalize):
    feats_src = net.forward(params, images_src, scores=False).features
    feats_tgt = net.forward(params, images_tgt, scores=False).features
    _, _, _, terms = alignment_loss_and_grads(classifier, dparams, feats_src, feats_tgt, normalize)
    p_src, _ = classifier.forward(dparams, feats_src)
    p_tgt, _ = classifier.forward(dparams, feats_tgt)
    return terms, unit_accuracy([p_src], [p_tgt]), feats_src, feats_tgt


def adversarial_step(net, classifier, params, dparams, batch_src, batch_tgt, schedule=None,
                     model_optimizer=None, domain_optimizer=None, rng=None):
    '''
    k_d classifier updates on L_D with the representation frozen, then k_r
    representation updates on (L_D + L_Dinv) / 2 with the classifier frozen.
    params and dparams are updated in place.
    '''
    schedule = schedule or StepConfig()
    if len(batch_src) == 0 or len(batch_tgt) == 0:
        raise ArgumentError('adversarial_step needs non-empty source and target batches')
    rng = rng if rng is not None else np.random.default_rng(0)
    model_optimizer = model_optimizer or MomentumSGD(
        schedule.representation_learning_rate, schedule.momentum
    )
    domain_optimizer = domain_optimizer or MomentumSGD(
        schedule.classifier_learning_rate, schedule.momentum
    )
    normalize = schedule.normalize_by_units

    before, accuracy_before, feats_src, feats_tgt = _measure(
        net, classifier, params, dparams, batch_src, batch_tgt, normalize
    )
    diagnostics = AdversarialDiagnostics(
        l_d_before=before['L_D'],
        l_dinv_before=before['L_Dinv'],
        accuracy_before=accuracy_before,
    )
    if not (np.isfinite(before['L_D']) and np.isfinite(before['L_Dinv'])):
        raise NonFiniteLossError('L_D', diagnostics.serialize())

    for _ in range(schedule.k_d):
        mask_src = sample_units(feats_src.shape[:1] + feats_src.shape[2:], schedule.unit_sample, rng)
        mask_tgt = sample_units(feats_tgt.shape[:1] + feats_tgt.shape[2:], schedule.unit_sample, rng)
        classifier_step(
            classifier, dparams, feats_src, feats_tgt, domain_optimizer,
            normalize, mask_src, mask_tgt
        )

    for _ in range(schedule.k_r):
        mask_src = sample_units(feats_src.shape[:1] + feats_src.shape[2:], schedule.unit_sample, rng)
        mask_tgt = sample_units(feats_tgt.shape[:1] + feats_tgt.shape[2:], schedule.unit_sample, rng)
        representation_step(
            net, classifier, params, dparams, batch_src, batch_tgt, model_optimizer,
            normalize, mask_src, mask_tgt
        )

    after, accuracy_after, _, _ = _measure(
        net, classifier, params, dparams, batch_src, batch_tgt, normalize
    )
    diagnostics.l_d_after = after['L_D']
    diagnostics.l_dinv_after = after['L_Dinv']
    diagnostics.accuracy_after = accuracy_after
    if not (np.isfinite(after['L_D']) and np.isfinite(after['L_Dinv'])):
        raise NonFiniteLossError('L_D', diagnostics.serialize())
    return params, dparams, diagnostics


def domain_separability(feats_src, feats_tgt, hidden=64, steps=300, learning_rate=0.05,
                        momentum=0.9, holdout=0.25, seed=0):
    '''
    Fit a fresh classifier on frozen features and return held-out unit accuracy.
    Images (not units) are split so held-out units come from unseen images.
    '''
    feats_src = np.asarray(feats_src, dtype=np.float64)
    feats_tgt = np.asarray(feats_tgt, dtype=np.float64)
    if len(feats_src) < 2 or len(feats_tgt) < 2:
        raise ArgumentError('domain_separability needs at least two images per domain')
    rng = np.random.default_rng(seed)

    def split(feats):
        order = rng.permutation(len(feats))
        n_held = max(1, int(round(holdout * len(feats))))
        return feats[order[n_held:]], feats[order[:n_held]]

    train_src, held_src = split(feats_src)
    train_tgt, held_tgt = split(feats_tgt)

    classifier = DomainClassifier(feats_src.shape[1], hidden)
    dparams = classifier.init_params(seed)
    optimizer = MomentumSGD(learning_rate, momentum)
    for _ in range(steps):
        classifier_step(classifier, dparams, train_src, train_tgt, optimizer)

    p_src, _ = classifier.forward(dparams, held_src)
    p_tgt, _ = classifier.forward(dparams, held_tgt)
    accuracy = unit_accuracy([p_src], [p_tgt])
    logger.debug('Fresh classifier held-out unit accuracy %.4f', accuracy)
    return accuracy

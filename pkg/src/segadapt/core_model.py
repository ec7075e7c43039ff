'''
Toy dilated fully convolutional segmentation network.

Public array conventions
  Image     H x W x 3 (or N x H x W x 3), values in [0, 1]
  LabelMap  H x W (or N x H x W) integer class ids, IGNORE_LABEL excluded
  FeatureMap / ScoreMap  C x H x W (or N x C x H x W)
'''
from collections import OrderedDict

import numpy as np
from scipy.special import log_softmax, softmax as _softmax

from segadapt import IGNORE_LABEL
from segadapt.config import ModelConfig
from segadapt.exceptions import ArgumentError, ConfigurationError, LabelSpaceError
from segadapt.layers import AvgPool2d, BilinearUpsample, Conv2d, ReLU
from segadapt.models.params import ModelParams


class ForwardPass():

    __slots__ = [
        'features',
        'coarse_scores',
        'scores',
        'trunk_caches',
        'score_cache',
        'upsample_cache',
    ]

    def __init__(self, **kwargs):
        for name in self.__slots__:
            setattr(self, name, kwargs.get(name))


class SegmentationNet():

    def __init__(self, config=None):
        self.config = config or ModelConfig()

        self.trunk = []
        in_channels = self.config.in_channels
        for index, (width, dilation) in enumerate(zip(self.config.widths, self.config.dilations)):
            self.trunk.append(
                Conv2d(f'conv{index + 1}', in_channels, width, self.config.kernel_size, dilation)
            )
            self.trunk.append(ReLU())
            if index < len(self.config.pool_strides):
                self.trunk.append(AvgPool2d(self.config.pool_strides[index]))
            in_channels = width

        self.score = Conv2d('score', in_channels, self.config.num_classes, kernel_size=1)
        self.upsample = BilinearUpsample(self.downsample_factor)

    @property
    def num_classes(self):
        return self.config.num_classes

    @property
    def feature_channels(self):
        return self.config.widths[-1]

    @property
    def downsample_factor(self):
        return int(np.prod(self.config.pool_strides, dtype=int))

    def _receptive_field(self, layers):
        field, jump = 1, 1
        for layer in layers:
            if isinstance(layer, Conv2d):
                field += (layer.kernel_size - 1) * layer.dilation * jump
            elif isinstance(layer, AvgPool2d):
                field += (layer.stride - 1) * jump
                jump *= layer.stride
        return field

    @property
    def receptive_field(self):
        return self._receptive_field(self.trunk)

    @property
    def stem_receptive_field(self):
        '''
        Receptive field of the downsampling stem: every layer up to the last pooling
        '''
        last_pool = max(
            (i for i, layer in enumerate(self.trunk) if isinstance(layer, AvgPool2d)),
            default=-1
        )
        return self._receptive_field(self.trunk[:last_pool + 1])

    def param_shapes(self):
        shapes = OrderedDict()
        for layer in self.trunk + [self.score]:
            shapes.update(layer.param_shapes())
        return shapes

    def init_params(self, seed, dtype=np.float32):
        return ModelParams.init_uniform(self.param_shapes(), seed, dtype=dtype)

    def zero_params(self, dtype=np.float32):
        return ModelParams(
            data=[(name, np.zeros(shape, dtype=dtype)) for name, shape in self.param_shapes().items()]
        )

    def to_batch(self, images):
        images = np.asarray(images)
        single = images.ndim == 3
        if single:
            images = images[None]
        if images.ndim != 4 or images.shape[-1] != self.config.in_channels:
            raise ConfigurationError(
                f'Expected images shaped (N,) H x W x {self.config.in_channels}, got {images.shape}'
            )
        height, width = images.shape[1:3]
        factor = self.downsample_factor
        minimum = self.stem_receptive_field
        if height % factor or width % factor:
            raise ConfigurationError(
                f'Image size {height}x{width} is not a multiple of the downsample factor {factor}'
            )
        if height < minimum or width < minimum:
            raise ConfigurationError(
                f'Image size {height}x{width} is below the receptive field {minimum}'
            )
        if not np.all(np.isfinite(images)) or images.min() < 0 or images.max() > 1:
            raise ArgumentError('Image values must be finite and within [0, 1]')
        return np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float64), single

    def forward(self, params, images, scores=True):
        x, single = self.to_batch(images)
        trunk_caches = []
        for layer in self.trunk:
            x, cache = layer.forward(params, x)
            trunk_caches.append(cache)
        result = ForwardPass(features=x, trunk_caches=trunk_caches)
        if scores:
            result.coarse_scores, result.score_cache = self.score.forward(params, x)
            result.scores, result.upsample_cache = self.upsample.forward(params, result.coarse_scores)
        return result

    def backward(self, params, fwd, d_scores=None, d_features=None):
        '''
        Accumulate parameter gradients from score and/or feature gradients.
        Returns float64 ModelParams keyed like params.
        '''
        grads = OrderedDict(
            (name, np.zeros(shape)) for name, shape in self.param_shapes().items()
        )
        d_x = np.zeros_like(fwd.features)
        if d_features is not None:
            d_x = d_x + d_features
        if d_scores is not None:
            d_coarse, _ = self.upsample.backward(params, d_scores, fwd.upsample_cache)
            d_feat, layer_grads = self.score.backward(params, d_coarse, fwd.score_cache)
            d_x = d_x + d_feat
            for name, value in layer_grads.items():
                grads[name] += value
        for layer, cache in zip(reversed(self.trunk), reversed(fwd.trunk_caches)):
            d_x, layer_grads = layer.backward(params, d_x, cache)
            for name, value in layer_grads.items():
                grads[name] += value
        return ModelParams(data=grads)


def _unbatch(array, single):
    return array[0] if single else array


def forward_features(net, params, image):
    _, single = net.to_batch(image)
    return _unbatch(net.forward(params, image, scores=False).features, single)


def forward_scores(net, params, image):
    _, single = net.to_batch(image)
    return _unbatch(net.forward(params, image).scores, single)


def bilinear_upsample(score_map, factor):
    score_map = np.asarray(score_map, dtype=np.float64)
    if int(factor) != factor or factor < 1:
        raise ArgumentError(f'Upsample factor must be a positive integer, got {factor}')
    single = score_map.ndim == 3
    batch = score_map[None] if single else score_map
    out, _ = BilinearUpsample(factor).forward(None, batch)
    return _unbatch(out, single)


def softmax(scores):
    scores = np.asarray(scores, dtype=np.float64)
    return _softmax(scores, axis=-3)


def predict(scores):
    '''
    Per-pixel argmax over classes, lowest class index wins ties.
    uint8 while every class id stays below IGNORE_LABEL, int32 otherwise.
    '''
    scores = np.asarray(scores)
    dtype = np.uint8 if scores.shape[-3] <= IGNORE_LABEL else np.int32
    return np.argmax(scores, axis=-3).astype(dtype)


def check_labels(labels, num_classes):
    labels = np.asarray(labels)
    valid = labels != IGNORE_LABEL
    if np.any(labels[valid] >= num_classes) or np.any(labels[valid] < 0):
        raise LabelSpaceError(f'Label values outside 0..{num_classes - 1} (and {IGNORE_LABEL})')
    return valid


def seg_loss(scores, labels):
    '''
    Mean cross-entropy over non-ignore pixels and its gradient w.r.t. scores
    '''
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape[-2:] != labels.shape[-2:] or scores.ndim != labels.ndim + 1:
        raise ConfigurationError(f'Score shape {scores.shape} does not match labels {labels.shape}')
    valid = check_labels(labels, scores.shape[-3])
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(scores)

    log_probs = log_softmax(scores, axis=-3)
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(log_probs, np.expand_dims(safe, -3), axis=-3)
    picked = np.squeeze(picked, axis=-3)
    loss = -float(picked[valid].sum()) / count

    d_scores = np.exp(log_probs)
    onehot = np.zeros_like(d_scores)
    np.put_along_axis(onehot, np.expand_dims(safe, -3), 1.0, axis=-3)
    d_scores -= onehot
    d_scores *= np.expand_dims(valid, -3)
    d_scores /= count
    return loss, d_scores


def seg_loss_and_grads(net, params, images, labels, fwd=None):
    fwd = fwd or net.forward(params, images)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    loss, d_scores = seg_loss(fwd.scores, labels)
    return loss, net.backward(params, fwd, d_scores=d_scores)

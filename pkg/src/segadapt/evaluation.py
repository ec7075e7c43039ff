import numpy as np
import pandas as pd

from segadapt import IGNORE_LABEL
from segadapt.core_model import forward_scores, predict
from segadapt.exceptions import ConfigurationError, LabelSpaceError


class ConfusionMatrix():
    '''
    Rows are ground truth, columns are predictions. Ignored pixels never count.
    '''

    def __init__(self, num_classes, matrix=None):
        self.num_classes = num_classes
        if matrix is None:
            matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.matrix = np.asarray(matrix, dtype=np.int64)

    def __add__(self, other):
        if other.num_classes != self.num_classes:
            raise LabelSpaceError(f'Cannot add {other.num_classes}-class to {self.num_classes}-class matrix')
        return ConfusionMatrix(self.num_classes, self.matrix + other.matrix)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.matrix, other.matrix)

    @property
    def total(self):
        return int(self.matrix.sum())

    def copy(self):
        return ConfusionMatrix(self.num_classes, self.matrix.copy())

    def accumulate(self, pred, gt):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ConfigurationError(f'Prediction shape {pred.shape} does not match ground truth {gt.shape}')
        valid = gt != IGNORE_LABEL
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        n = self.num_classes
        if g.size and (g.max() >= n or p.max() >= n or g.min() < 0 or p.min() < 0):
            raise LabelSpaceError(f'Label values outside 0..{n - 1}')
        self.matrix += np.bincount(n * g + p, minlength=n * n).reshape(n, n)
        return self

    def serialize(self):
        return {'num_classes': self.num_classes, 'matrix': self.matrix.tolist()}


def accumulate(cm, pred, gt):
    return cm.copy().accumulate(pred, gt)


class IoUResult():

    __slots__ = [
        'per_class',
        'miou',
        'included',
        'pixel_accuracy',
    ]

    def __init__(self, **kwargs):
        self.per_class = kwargs['per_class']
        self.miou = kwargs['miou']
        self.included = kwargs['included']
        self.pixel_accuracy = kwargs.get('pixel_accuracy')

    def to_frame(self, class_names=None):
        class_names = class_names or [f'class_{i}' for i in range(len(self.per_class))]
        frame = pd.DataFrame(
            [list(self.per_class) + [self.miou]],
            columns=list(class_names) + ['mIoU']
        )
        return frame

    def serialize(self):
        # NaN becomes null, strict JSON has no NaN
        return {
            'per_class': [_json_float(v) for v in self.per_class],
            'miou': _json_float(self.miou),
            'included': [bool(v) for v in self.included],
            'pixel_accuracy': _json_float(self.pixel_accuracy),
        }


def _json_float(value):
    if value is None or np.isnan(value):
        return None
    return float(value)


def iou(cm):
    '''
    Per-class IoU (NaN where the union is empty) and the mean over the rest
    '''
    matrix = cm.matrix.astype(np.float64)
    intersection = np.diag(matrix)
    union = matrix.sum(axis=0) + matrix.sum(axis=1) - intersection
    included = union > 0
    per_class = np.full(cm.num_classes, np.nan)
    per_class[included] = intersection[included] / union[included]
    miou = float(per_class[included].mean()) if included.any() else float('nan')
    total = matrix.sum()
    return IoUResult(
        per_class=per_class,
        miou=miou,
        included=included,
        pixel_accuracy=float(intersection.sum() / total) if total else float('nan'),
    )


def evaluate(net, params, images, labels, batch_size=16):
    cm = ConfusionMatrix(net.num_classes)
    for start in range(0, len(images), batch_size):
        scores = forward_scores(net, params, images[start:start + batch_size])
        cm.accumulate(predict(scores), labels[start:start + batch_size])
    return iou(cm), cm

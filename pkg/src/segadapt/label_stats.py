'''
Per-class size statistics of the labelled source domain.

For class c, only images where c covers at least one pixel contribute.
alpha / gamma are the 10th / 90th percentiles (linear interpolation between
closest ranks) and delta the mean of those coverages.
'''
import json

import numpy as np

from segadapt import IGNORE_LABEL, logger
from segadapt.exceptions import ArgumentError, EmptyCoverageError, LabelSpaceError, ParseError
from segadapt.models.class_stats import ClassStat, ClassStats
from segadapt.utils import write_json

LOWER_PERCENTILE = 10
UPPER_PERCENTILE = 90


def coverage(labels, num_classes=None):
    labels = np.asarray(labels)
    valid = labels[labels != IGNORE_LABEL].astype(np.int64)
    if valid.size == 0:
        raise EmptyCoverageError('Coverage is undefined when every pixel is ignored')
    if num_classes is None:
        num_classes = int(valid.max()) + 1
    if valid.min() < 0 or valid.max() >= num_classes:
        raise LabelSpaceError(f'Label values outside 0..{num_classes - 1}')
    return np.bincount(valid, minlength=num_classes) / valid.size


def compute_stats(source_labels, num_classes, class_names=None):
    per_class = [[] for _ in range(num_classes)]
    count = 0
    for labels in source_labels:
        try:
            d = coverage(labels, num_classes)
        except EmptyCoverageError:
            logger.warning('Skipping a fully ignored label map')
            continue
        count += 1
        for class_id in np.flatnonzero(d > 0):
            per_class[class_id].append(d[class_id])

    if count == 0:
        raise ArgumentError('compute_stats needs at least one label map with labelled pixels')

    stats = ClassStats(num_classes=num_classes, class_names=class_names)
    for class_id, values in enumerate(per_class):
        if not values:
            stats.append(ClassStat(class_id=class_id, n=0))
            continue
        # sorted so the result does not depend on image order
        values = np.sort(np.asarray(values))
        stats.append(
            ClassStat(
                class_id=class_id,
                alpha=float(np.percentile(values, LOWER_PERCENTILE)),
                delta=float(np.mean(values)),
                gamma=float(np.percentile(values, UPPER_PERCENTILE)),
                n=len(values),
            )
        )

    unusable = [s.class_id for s in stats if not s.usable]
    if unusable:
        logger.warning('Classes %s never appear in the source labels and are unusable', unusable)
    logger.info('Computed class statistics over %s label maps', count)
    return stats


def save_stats(stats, path):
    write_json(path, stats.serialize())


def load_stats(path):
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as ex:
        raise ParseError(f'Cannot read class statistics {path}: {ex}')
    except ValueError as ex:
        raise ParseError(f'Malformed class statistics {path}: {ex}')
    return ClassStats.parse(data)

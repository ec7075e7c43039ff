import json
import math
from unittest import TestCase

import numpy as np

from segadapt import IGNORE_LABEL
from segadapt.config import ModelConfig
from segadapt.core_model import SegmentationNet, forward_scores, predict
from segadapt.evaluation import ConfusionMatrix, accumulate, evaluate, iou
from segadapt.exceptions import ConfigurationError, LabelSpaceError


class ConfusionMatrixTest(TestCase):

    def test_perfect_prediction(self):
        gt = np.random.default_rng(0).integers(0, 3, size=(5, 5))
        cm = accumulate(ConfusionMatrix(3), gt, gt)
        self.assertEqual(int(np.trace(cm.matrix)), 25)
        self.assertEqual(cm.total, 25)

    def test_all_ignored(self):
        cm = ConfusionMatrix(2)
        updated = accumulate(cm, np.zeros((2, 2), dtype=int), np.full((2, 2), IGNORE_LABEL))
        self.assertEqual(updated, cm)
        self.assertEqual(updated.total, 0)

    def test_matches_naive_counting(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            num_classes = int(rng.integers(2, 6))
            gt = rng.integers(0, num_classes, size=(6, 7))
            gt[rng.uniform(size=gt.shape) < 0.1] = IGNORE_LABEL
            pred = rng.integers(0, num_classes, size=(6, 7))
            expected = np.zeros((num_classes, num_classes), dtype=int)
            for g, p in zip(gt.ravel(), pred.ravel()):
                if g != IGNORE_LABEL:
                    expected[g, p] += 1
            cm = accumulate(ConfusionMatrix(num_classes), pred, gt)
            np.testing.assert_array_equal(cm.matrix, expected)

            result = iou(cm)
            for c in range(num_classes):
                union = expected[c].sum() + expected[:, c].sum() - expected[c, c]
                if union == 0:
                    self.assertTrue(math.isnan(result.per_class[c]))
                else:
                    self.assertEqual(result.per_class[c], expected[c, c] / union)

    def test_accumulate_is_pure_and_additive(self):
        a = accumulate(ConfusionMatrix(2), np.array([[0, 1]]), np.array([[0, 0]]))
        b = accumulate(ConfusionMatrix(2), np.array([[1, 1]]), np.array([[1, 0]]))
        both = accumulate(a, np.array([[1, 1]]), np.array([[1, 0]]))
        self.assertEqual(a.total, 2)
        self.assertEqual(both, a + b)

    def test_errors(self):
        with self.assertRaises(ConfigurationError):
            accumulate(ConfusionMatrix(2), np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int))
        with self.assertRaises(LabelSpaceError):
            accumulate(ConfusionMatrix(2), np.zeros((1, 1), dtype=int), np.full((1, 1), 3))
        with self.assertRaises(LabelSpaceError):
            ConfusionMatrix(2) + ConfusionMatrix(3)


class IoUTest(TestCase):

    def test_worked_example(self):
        cm = accumulate(ConfusionMatrix(2), np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]))
        result = iou(cm)
        self.assertAlmostEqual(result.per_class[0], 0.5)
        self.assertAlmostEqual(result.per_class[1], 2 / 3)
        self.assertAlmostEqual(result.miou, (0.5 + 2 / 3) / 2)
        self.assertAlmostEqual(result.pixel_accuracy, 0.75)

    def test_identical_maps(self):
        gt = np.array([[0, 1], [1, 0]])
        result = iou(accumulate(ConfusionMatrix(2), gt, gt))
        np.testing.assert_array_equal(result.per_class, [1.0, 1.0])
        self.assertEqual(result.miou, 1.0)

    def test_absent_class_excluded(self):
        gt = np.array([[0, 1], [1, 0]])
        result = iou(accumulate(ConfusionMatrix(3), gt, gt))
        self.assertTrue(math.isnan(result.per_class[2]))
        self.assertEqual(list(result.included), [True, True, False])
        self.assertEqual(result.miou, 1.0)
        self.assertIsNone(result.serialize()['per_class'][2])

    def test_empty_matrix_serializes_to_strict_json(self):
        result = iou(accumulate(ConfusionMatrix(3), np.zeros((2, 2), dtype=int), np.full((2, 2), IGNORE_LABEL)))
        self.assertTrue(math.isnan(result.miou))
        data = result.serialize()
        self.assertIsNone(data['miou'])
        self.assertIsNone(data['pixel_accuracy'])
        self.assertEqual(data['per_class'], [None, None, None])
        self.assertEqual(json.loads(json.dumps(data, allow_nan=False)), data)

    def test_to_frame(self):
        gt = np.array([[0, 1], [1, 0]])
        frame = iou(accumulate(ConfusionMatrix(2), gt, gt)).to_frame(['road', 'sky'])
        self.assertEqual(list(frame.columns), ['road', 'sky', 'mIoU'])
        self.assertEqual(frame.loc[0, 'mIoU'], 1.0)


class EvaluateTest(TestCase):

    def test_matches_manual_accumulation(self):
        config = ModelConfig(num_classes=3, widths=(3, 4, 4), dilations=(1, 2, 2), pool_strides=(2, 2))
        net = SegmentationNet(config)
        params = net.init_params(0)
        rng = np.random.default_rng(0)
        images = rng.uniform(size=(5, 16, 16, 3))
        labels = rng.integers(0, 3, size=(5, 16, 16))

        result, cm = evaluate(net, params, images, labels, batch_size=2)
        manual = ConfusionMatrix(3)
        for image, label in zip(images, labels):
            manual.accumulate(predict(forward_scores(net, params, image)), label)
        self.assertEqual(cm, manual)
        self.assertEqual(cm.total, 5 * 16 * 16)
        self.assertEqual(result.miou, iou(manual).miou)

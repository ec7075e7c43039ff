import dataclasses
import filecmp
import json
import os
import tempfile
from unittest import TestCase

import numpy as np

from segadapt.exceptions import ArgumentError, DatasetError
from segadapt.models.manifest import MANIFEST_FILENAME, DatasetManifest
from segadapt.synth_data import (
    PRESETS,
    BandPrior,
    SceneConfig,
    ShiftParams,
    apply_shift,
    generate_domain,
    load_arrays,
    load_dataset,
    preset_configs,
    render_scene,
    split_config,
)

BANDS_ONLY = SceneConfig(objects=(), colors=SceneConfig().colors[:3])


def mean_coverage(config, class_id, n=200):
    return float(np.mean([
        np.mean(render_scene(config, index)[1] == class_id) for index in range(n)
    ]))


class RenderSceneTest(TestCase):

    def test_shapes_and_label_range(self):
        config = SceneConfig(seed=3)
        for index in range(10):
            image, labels = render_scene(config, index)
            self.assertEqual(image.shape, (64, 64, 3))
            self.assertEqual(image.dtype, np.uint8)
            self.assertEqual(labels.shape, (64, 64))
            self.assertLess(int(labels.max()), config.num_classes)

    def test_deterministic(self):
        config = SceneConfig(seed=5)
        first = render_scene(config, 4)
        second = render_scene(config, 4)
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])
        self.assertFalse(np.array_equal(first[1], render_scene(config, 5)[1]))

    def test_single_class(self):
        config = SceneConfig(bands=(BandPrior('everything'),), objects=(), colors=((0.5, 0.5, 0.5),))
        for index in range(5):
            _, labels = render_scene(config, index)
            self.assertTrue((labels == 0).all())

    def test_band_prior_mean(self):
        road = BANDS_ONLY.class_id('road')
        self.assertAlmostEqual(mean_coverage(BANDS_ONLY, road), 0.4, delta=0.05)

    def test_rejects_bad_configs(self):
        with self.assertRaises(ArgumentError):
            SceneConfig(image_size=8)
        with self.assertRaises(ArgumentError):
            SceneConfig(bands=(BandPrior('a', 0.5), BandPrior('b', 0.5)), objects=(), colors=((0, 0, 0),) * 2)
        with self.assertRaises(ArgumentError):
            SceneConfig(colors=((0, 0, 0),))


class ApplyShiftTest(TestCase):

    def test_zero_shift_is_identity(self):
        config = SceneConfig(seed=2)
        self.assertEqual(apply_shift(config, ShiftParams()), config)
        self.assertEqual(apply_shift(config, ShiftParams()).hash, config.hash)

    def test_illumination_shift_keeps_labels(self):
        config = SceneConfig(seed=9)
        shifted = apply_shift(config, ShiftParams(gain=(0.7, 0.8, 0.9), bias=(0.1, 0.0, -0.1), gamma=1.4))
        for index in range(10):
            image, labels = render_scene(config, index)
            shifted_image, shifted_labels = render_scene(shifted, index)
            np.testing.assert_array_equal(labels, shifted_labels)
            self.assertFalse(np.array_equal(image, shifted_image))

    def test_layout_shift_moves_coverage(self):
        road = BANDS_ONLY.class_id('road')
        shifted = apply_shift(BANDS_ONLY, ShiftParams(band_heights=(('road', 0.2),)))
        difference = mean_coverage(shifted, road) - mean_coverage(BANDS_ONLY, road)
        self.assertAlmostEqual(difference, 0.2, delta=0.05)

    def test_out_of_range_shift(self):
        with self.assertRaises(ArgumentError):
            apply_shift(SceneConfig(), ShiftParams(gain=(10.0, 1.0, 1.0)))
        with self.assertRaises(ArgumentError):
            apply_shift(SceneConfig(), ShiftParams(band_heights=(('river', 0.1),)))

    def test_presets(self):
        for preset in PRESETS:
            source, target = preset_configs(preset, 1)
            self.assertEqual(source.class_names, target.class_names)
            self.assertNotEqual(source.hash, target.hash)
        with self.assertRaises(ArgumentError):
            preset_configs('huge', 1)

    def test_split_configs_differ_only_in_seed(self):
        train = split_config('large', 3, 'target', 'train')
        test = split_config('large', 3, 'target', 'test')
        self.assertNotEqual(train.seed, test.seed)
        self.assertEqual(dataclasses.replace(train, seed=0), dataclasses.replace(test, seed=0))


class GenerateDomainTest(TestCase):

    def test_byte_identical_outputs(self):
        config = SceneConfig(seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            first = os.path.join(tmp, 'a')
            second = os.path.join(tmp, 'b')
            generate_domain(config, 4, first, domain='source')
            generate_domain(config, 4, second, domain='source')
            comparison = filecmp.dircmp(first, second)
            self.assertEqual(comparison.diff_files, [])
            for sub in ('images', 'labels'):
                names = sorted(os.listdir(os.path.join(first, sub)))
                self.assertEqual(names, ['00000.png', '00001.png', '00002.png', '00003.png'])
                _, mismatch, errors = filecmp.cmpfiles(
                    os.path.join(first, sub), os.path.join(second, sub), names, shallow=False
                )
                self.assertEqual((mismatch, errors), ([], []))

    def test_manifest(self):
        config = SceneConfig(seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generate_domain(config, 3, tmp, split='val', domain='target')
            with open(os.path.join(tmp, MANIFEST_FILENAME)) as f:
                data = json.load(f)
            self.assertEqual(data['config_hash'], config.hash)
            self.assertEqual(data['count'], 3)
            loaded = DatasetManifest.load(tmp)
            self.assertEqual(loaded.split, 'val')
            self.assertEqual(loaded.num_classes, 6)
            self.assertEqual(len(loaded), len(manifest))

    def test_load_dataset(self):
        config = SceneConfig(seed=2)
        with tempfile.TemporaryDirectory() as tmp:
            generate_domain(config, 3, tmp)
            pairs = list(load_dataset(tmp))
            self.assertEqual(len(pairs), 3)
            image, labels = pairs[1]
            expected_image, expected_labels = render_scene(config, 1)
            np.testing.assert_allclose(image, expected_image / 255.0)
            np.testing.assert_array_equal(labels, expected_labels)

            images, no_labels = load_arrays(DatasetManifest.load(tmp), with_labels=False)
            self.assertEqual(images.shape, (3, 64, 64, 3))
            self.assertIsNone(no_labels)

    def test_missing_raster(self):
        with tempfile.TemporaryDirectory() as tmp:
            generate_domain(SceneConfig(), 2, tmp)
            missing = os.path.join(tmp, 'labels', '00001.png')
            os.remove(missing)
            with self.assertRaises(DatasetError) as ctx:
                list(load_dataset(tmp))
            self.assertEqual(ctx.exception.path, missing)

    def test_hash_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            generate_domain(SceneConfig(), 1, tmp)
            path = os.path.join(tmp, MANIFEST_FILENAME)
            with open(path) as f:
                data = json.load(f)
            data['config_hash'] = '0' * 64
            with open(path, 'w') as f:
                json.dump(data, f)
            with self.assertRaises(DatasetError):
                list(load_dataset(tmp))

    def test_rejects_empty(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ArgumentError):
                generate_domain(SceneConfig(), 0, tmp)

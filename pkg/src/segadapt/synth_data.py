'''
Synthetic street-like scenes with exact labels.

A scene is a stack of horizontal stuff bands (sky / building / road
analogues, top to bottom, one band filling the remainder) with sampled
rectangular or elliptical objects (car / sign / person analogues) anchored
to a band. Layout and appearance draw from separate per-image seed streams,
so appearance-only shifts leave every label map untouched.
'''
import dataclasses
import os
from typing import Optional, Tuple

import numpy as np
from PIL import Image as PILImage

from segadapt import logger
from segadapt.exceptions import ArgumentError, DatasetError, ParseError
from segadapt.models.manifest import DatasetManifest, ManifestEntry
from segadapt.utils import config_hash, derive_seed


@dataclasses.dataclass(frozen=True)
class BandPrior:
    name: str
    height: Optional[float] = None   # None fills what the other bands leave
    jitter: float = 0.08


@dataclasses.dataclass(frozen=True)
class ObjectPrior:
    name: str
    anchor: str
    count: float = 1.0
    width: Tuple[float, float] = (0.08, 0.16)
    aspect: float = 0.5
    shape: str = 'rect'

    def __post_init__(self):
        object.__setattr__(self, 'width', tuple(self.width))
        if self.shape not in ('rect', 'ellipse'):
            raise ArgumentError(f'Unknown object shape {self.shape!r}')


DEFAULT_BANDS = (
    BandPrior('sky', height=0.3),
    BandPrior('building'),
    BandPrior('road', height=0.4),
)

DEFAULT_OBJECTS = (
    ObjectPrior('car', anchor='road', count=1.5, width=(0.08, 0.16), aspect=0.5, shape='rect'),
    ObjectPrior('sign', anchor='building', count=1.0, width=(0.04, 0.07), aspect=1.0, shape='rect'),
    ObjectPrior('person', anchor='road', count=1.0, width=(0.03, 0.05), aspect=2.5, shape='ellipse'),
)

DEFAULT_COLORS = (
    (0.55, 0.70, 0.95),
    (0.55, 0.45, 0.40),
    (0.35, 0.35, 0.38),
    (0.85, 0.15, 0.15),
    (0.95, 0.85, 0.10),
    (0.20, 0.60, 0.30),
)


@dataclasses.dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    bands: Tuple[BandPrior, ...] = DEFAULT_BANDS
    objects: Tuple[ObjectPrior, ...] = DEFAULT_OBJECTS
    colors: Tuple[Tuple[float, float, float], ...] = DEFAULT_COLORS
    texture_noise: float = 0.06
    gain: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ('bands', 'objects', 'colors', 'gain', 'bias'):
            value = getattr(self, name)
            if name == 'colors':
                value = tuple(tuple(c) for c in value)
            object.__setattr__(self, name, tuple(value))
        if self.image_size < 16:
            raise ArgumentError(f'image_size must be >= 16, got {self.image_size}')
        if not self.bands:
            raise ArgumentError('At least one band is required')
        if sum(1 for b in self.bands if b.height is None) != 1:
            raise ArgumentError('Exactly one band must fill the remainder (height None)')
        if len(self.colors) != self.num_classes:
            raise ArgumentError(f'{len(self.colors)} colors for {self.num_classes} classes')
        if len(set(self.class_names)) != self.num_classes:
            raise ArgumentError(f'Class names must be unique: {self.class_names}')
        band_names = {b.name for b in self.bands}
        for obj in self.objects:
            if obj.anchor not in band_names:
                raise ArgumentError(f'Object {obj.name} anchored to unknown band {obj.anchor}')
            if obj.count < 0 or min(obj.width) <= 0:
                raise ArgumentError(f'Object {obj.name}: count and width must be nonnegative')
        for band in self.bands:
            if band.jitter < 0 or (band.height is not None and band.height < 0):
                raise ArgumentError(f'Band {band.name}: height and jitter must be nonnegative')
        if self.texture_noise < 0 or self.gamma <= 0:
            raise ArgumentError('texture_noise must be >= 0 and gamma > 0')

    @property
    def class_names(self):
        return tuple(b.name for b in self.bands) + tuple(o.name for o in self.objects)

    @property
    def num_classes(self):
        return len(self.bands) + len(self.objects)

    def class_id(self, name):
        return self.class_names.index(name)

    @property
    def hash(self):
        return config_hash(self)

    def serialize(self):
        return dataclasses.asdict(self)

    @staticmethod
    def parse(data):
        if isinstance(data, SceneConfig):
            return data
        try:
            data = dict(data)
            data['bands'] = tuple(BandPrior(**b) for b in data.get('bands', DEFAULT_BANDS))
            data['objects'] = tuple(ObjectPrior(**o) for o in data.get('objects', DEFAULT_OBJECTS))
            return SceneConfig(**data)
        except (TypeError, KeyError) as ex:
            raise ParseError(f'Malformed scene config: {ex}')


@dataclasses.dataclass(frozen=True)
class ShiftParams:
    gain: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    noise: float = 0.0
    band_heights: Tuple[Tuple[str, float], ...] = ()
    object_counts: Tuple[Tuple[str, float], ...] = ()

    def validate(self):
        if any(not 0.25 <= g <= 4.0 for g in self.gain):
            raise ArgumentError(f'Shift gain {self.gain} outside [0.25, 4]')
        if any(abs(b) > 0.5 for b in self.bias):
            raise ArgumentError(f'Shift bias {self.bias} outside [-0.5, 0.5]')
        if not 0.25 <= self.gamma <= 4.0:
            raise ArgumentError(f'Shift gamma {self.gamma} outside [0.25, 4]')
        if not -0.2 <= self.noise <= 0.3:
            raise ArgumentError(f'Shift noise {self.noise} outside [-0.2, 0.3]')
        if any(abs(delta) > 0.5 for _, delta in self.band_heights):
            raise ArgumentError('Band height shifts must be within +-0.5')
        if any(abs(delta) > 5 for _, delta in self.object_counts):
            raise ArgumentError('Object count shifts must be within +-5')
        return self


def apply_shift(config, shift):
    '''
    Compose an appearance transform and offset layout priors.
    Gains and biases compose affinely, gammas multiply.
    '''
    shift.validate()
    band_deltas = dict(shift.band_heights)
    count_deltas = dict(shift.object_counts)
    unknown = (set(band_deltas) - {b.name for b in config.bands}) | \
        (set(count_deltas) - {o.name for o in config.objects})
    if unknown:
        raise ArgumentError(f'Shift refers to unknown classes {sorted(unknown)}')

    bands = tuple(
        b if b.height is None else dataclasses.replace(b, height=max(0.0, b.height + band_deltas.get(b.name, 0.0)))
        for b in config.bands
    )
    objects = tuple(
        dataclasses.replace(o, count=max(0.0, o.count + count_deltas.get(o.name, 0.0)))
        for o in config.objects
    )
    return dataclasses.replace(
        config,
        bands=bands,
        objects=objects,
        gain=tuple(g * s for g, s in zip(config.gain, shift.gain)),
        bias=tuple(b * s + d for b, s, d in zip(config.bias, shift.gain, shift.bias)),
        gamma=config.gamma * shift.gamma,
        texture_noise=max(0.0, config.texture_noise + shift.noise),
    )


# cross-city / cross-season / sim-to-real analogues
PRESETS = {
    'small': ShiftParams(
        gain=(0.95, 1.0, 1.05),
        bias=(0.02, 0.0, -0.02),
        band_heights=(('road', 0.05), ('sky', -0.05)),
        object_counts=(('car', 0.5),),
    ),
    'medium': ShiftParams(
        gain=(0.8, 0.9, 1.15),
        bias=(0.05, 0.05, 0.08),
        gamma=1.2,
        noise=0.03,
        band_heights=(('sky', 0.05),),
        object_counts=(('sign', 0.5),),
    ),
    'large': ShiftParams(
        gain=(0.6, 0.75, 0.9),
        bias=(0.15, 0.1, 0.05),
        gamma=1.5,
        noise=0.08,
        band_heights=(('road', 0.15), ('sky', -0.1)),
        object_counts=(('car', 1.5), ('person', 1.0)),
    ),
}


def preset_configs(preset, seed):
    if preset not in PRESETS:
        raise ArgumentError(f'Unknown preset {preset!r}, expected one of {sorted(PRESETS)}')
    source = SceneConfig(seed=seed)
    return source, apply_shift(source, PRESETS[preset])


def split_config(preset, seed, domain, split):
    source, target = preset_configs(preset, seed)
    config = source if domain == 'source' else target
    return dataclasses.replace(config, seed=derive_seed(seed, domain, split))


def _band_rows(config, rng):
    size = config.image_size
    heights = []
    for band in config.bands:
        if band.height is None:
            heights.append(None)
        else:
            heights.append(float(np.clip(rng.normal(band.height, band.jitter), 0.02, 0.95)))
    fixed = sum(h for h in heights if h is not None)
    if fixed > 0.98:
        heights = [None if h is None else h * 0.98 / fixed for h in heights]
        fixed = 0.98
    heights = [1.0 - fixed if h is None else h for h in heights]
    edges = np.round(np.concatenate([[0.0], np.cumsum(heights)]) * size).astype(int)
    edges[-1] = size
    return {band.name: (edges[i], edges[i + 1]) for i, band in enumerate(config.bands)}


def _render_labels(config, rng):
    size = config.image_size
    labels = np.zeros((size, size), dtype=np.uint8)
    rows = _band_rows(config, rng)
    for band in config.bands:
        top, bottom = rows[band.name]
        labels[top:bottom] = config.class_id(band.name)

    yy, xx = np.mgrid[0:size, 0:size]
    for obj in config.objects:
        class_id = config.class_id(obj.name)
        top, bottom = rows[obj.anchor]
        for _ in range(rng.poisson(obj.count)):
            width = max(2, int(round(rng.uniform(*obj.width) * size)))
            height = max(2, int(round(width * obj.aspect)))
            if bottom - top < 2 or width >= size:
                continue
            y_bottom = int(rng.integers(top + 1, bottom + 1))
            y_top = max(0, y_bottom - height)
            x_left = int(rng.integers(0, size - width + 1))
            if obj.shape == 'rect':
                labels[y_top:y_bottom, x_left:x_left + width] = class_id
            else:
                cy, cx = (y_top + y_bottom - 1) / 2, x_left + (width - 1) / 2
                ry, rx = max((y_bottom - y_top) / 2, 0.5), width / 2
                inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
                labels[inside] = class_id
    return labels


def _render_image(config, labels, rng):
    colors = np.asarray(config.colors, dtype=np.float64)
    image = colors[labels]
    if config.texture_noise > 0:
        image = image + rng.normal(0.0, config.texture_noise, size=image.shape)
    image = np.clip(image * np.asarray(config.gain) + np.asarray(config.bias), 0.0, 1.0)
    image = image ** config.gamma
    return np.round(image * 255).astype(np.uint8)


def render_scene(config, index):
    '''
    (uint8 H x W x 3 image, uint8 H x W labels) for one scene
    '''
    layout_rng = np.random.default_rng([config.seed, index, 0])
    appearance_rng = np.random.default_rng([config.seed, index, 1])
    labels = _render_labels(config, layout_rng)
    return _render_image(config, labels, appearance_rng), labels


def generate_domain(config, n, out_dir, split='train', domain=None):
    if n < 1:
        raise ArgumentError(f'n must be >= 1, got {n}')
    try:
        os.makedirs(os.path.join(out_dir, 'images'), exist_ok=True)
        os.makedirs(os.path.join(out_dir, 'labels'), exist_ok=True)
    except OSError as ex:
        raise DatasetError(f'Cannot create {out_dir}: {ex}', path=out_dir)

    manifest = DatasetManifest(
        split=split,
        domain=domain,
        config_hash=config.hash,
        config=config.serialize(),
        class_names=config.class_names,
        root=os.path.abspath(out_dir),
    )
    for index in range(n):
        image, labels = render_scene(config, index)
        entry = ManifestEntry(
            image=os.path.join('images', f'{index:05d}.png'),
            label=os.path.join('labels', f'{index:05d}.png'),
        )
        try:
            PILImage.fromarray(image).save(manifest.path(entry.image))
            PILImage.fromarray(labels).save(manifest.path(entry.label))
        except OSError as ex:
            raise DatasetError(f'Cannot write into {out_dir}: {ex}', path=out_dir)
        manifest.append(entry)

    manifest.save()
    logger.info('Generated %s %s/%s scenes in %s', n, domain or 'domain', split, out_dir)
    return manifest


def _read_png(path, mode):
    if not os.path.exists(path):
        raise DatasetError(f'Missing raster {path}', path=path)
    try:
        with PILImage.open(path) as raster:
            if raster.mode != mode:
                raise DatasetError(f'Raster {path} has mode {raster.mode}, expected {mode}', path=path)
            return np.asarray(raster)
    except (OSError, SyntaxError) as ex:
        raise DatasetError(f'Corrupt raster {path}: {ex}', path=path)


def load_dataset(manifest, with_labels=True):
    '''
    Yields (image float64 H x W x 3 in [0, 1], labels or None) in manifest order.
    with_labels=False masks labels for unlabelled-target use.
    '''
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    if manifest.config is not None:
        if SceneConfig.parse(manifest.config).hash != manifest.config_hash:
            raise DatasetError('Manifest config hash does not match its config', path=manifest.root)
    for entry in manifest:
        image = _read_png(manifest.path(entry.image), 'RGB').astype(np.float64) / 255.0
        labels = None
        if with_labels:
            if entry.label is None:
                raise DatasetError(f'No label raster for {entry.image}', path=manifest.path(entry.image))
            labels = _read_png(manifest.path(entry.label), 'L')
            if labels.shape != image.shape[:2]:
                raise DatasetError(f'Label/image size mismatch for {entry.label}', path=manifest.path(entry.label))
        yield image, labels


def load_arrays(manifest, with_labels=True):
    '''
    Whole split as stacked arrays: (N x H x W x 3 images, N x H x W labels or None)
    '''
    images, labels = [], []
    for image, label in load_dataset(manifest, with_labels):
        images.append(image)
        labels.append(label)
    if not images:
        raise DatasetError('Empty dataset', path=getattr(manifest, 'root', manifest))
    return np.stack(images), (np.stack(labels) if with_labels else None)

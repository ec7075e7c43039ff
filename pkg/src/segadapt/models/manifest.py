import json
import os

from segadapt.exceptions import DatasetError, ParseError
from segadapt.utils import write_json

MANIFEST_FILENAME = 'manifest.json'


class DatasetManifest():

    def __init__(self, *args, **kwargs):
        self._data = kwargs.get('data', [])
        self.split = kwargs.get('split', 'train')
        self.domain = kwargs.get('domain')
        self.config_hash = kwargs.get('config_hash')
        self.config = kwargs.get('config')
        self.class_names = list(kwargs.get('class_names') or [])
        self.root = kwargs.get('root')

    def __getitem__(self, i):
        return self._data[i]

    def __iter__(self):
        return (i for i in self._data)

    def __len__(self):
        return len(self._data)

    def append(self, data):
        self._data.append(data)

    def extend(self, data):
        self._data.extend(data)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def count(self):
        return len(self)

    def path(self, relative):
        return os.path.join(self.root or '.', relative)

    def serialize(self):
        return {
            'split': self.split,
            'domain': self.domain,
            'count': self.count,
            'config_hash': self.config_hash,
            'config': self.config,
            'class_names': self.class_names,
            'entries': [d.serialize() for d in self],
        }

    def save(self, dirpath=None):
        dirpath = dirpath or self.root
        write_json(os.path.join(dirpath, MANIFEST_FILENAME), self.serialize())

    @staticmethod
    def parse(data, root=None):
        if isinstance(data, DatasetManifest):
            return data
        try:
            manifest = DatasetManifest(
                split=data['split'],
                domain=data.get('domain'),
                config_hash=data['config_hash'],
                config=data.get('config'),
                class_names=data['class_names'],
                root=root,
            )
            manifest.extend([ManifestEntry.parse(e) for e in data['entries']])
        except (KeyError, TypeError) as ex:
            raise ParseError(f'Malformed dataset manifest: missing {ex}')
        if int(data.get('count', len(manifest))) != len(manifest):
            raise ParseError(f'Manifest count {data.get("count")} does not match {len(manifest)} entries')
        return manifest

    @staticmethod
    def load(path):
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_FILENAME)
        try:
            with open(path) as f:
                data = json.load(f)
        except OSError as ex:
            raise DatasetError(f'Cannot read manifest {path}: {ex}', path=path)
        except ValueError as ex:
            raise ParseError(f'Malformed manifest {path}: {ex}')
        return DatasetManifest.parse(data, root=os.path.dirname(os.path.abspath(path)))


class ManifestEntry():

    __slots__ = [
        'image',
        'label',
    ]

    def __init__(self, **kwargs):
        self.image = kwargs['image']
        self.label = kwargs.get('label')

    @staticmethod
    def parse(data):
        if isinstance(data, ManifestEntry):
            return data
        if isinstance(data, dict):
            return ManifestEntry(**data)
        raise NotImplementedError()

    def serialize(self):
        return {
            'image': self.image,
            'label': self.label,
        }

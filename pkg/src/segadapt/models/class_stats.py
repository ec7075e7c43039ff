import math

import numpy as np

from segadapt.exceptions import ParseError

SCHEMA = 'segadapt.class_stats/1'


class ClassStats():

    def __init__(self, *args, **kwargs):
        self._data = kwargs.get('data', [])
        self.num_classes = kwargs.get('num_classes', len(self._data))
        self.class_names = list(
            kwargs.get('class_names') or [f'class_{i}' for i in range(self.num_classes)]
        )

    def __getitem__(self, i):
        return self._data[i]

    def __iter__(self):
        return (i for i in self._data)

    def __len__(self):
        return len(self._data)

    def __eq__(self, other):
        return (
            isinstance(other, ClassStats) and
            self.num_classes == other.num_classes and
            self.class_names == other.class_names and
            self.serialize() == other.serialize()
        )

    def append(self, data):
        self._data.append(data)

    def extend(self, data):
        self._data.extend(data)

    @property
    def alpha(self):
        return np.array([s.alpha if s.usable else np.nan for s in self])

    @property
    def usable(self):
        return np.array([s.usable for s in self])

    def serialize(self):
        return {
            'schema': SCHEMA,
            'num_classes': self.num_classes,
            'class_names': self.class_names,
            'classes': {
                str(stat.class_id): stat.serialize() for stat in self
            }
        }

    @staticmethod
    def parse(data):
        if isinstance(data, ClassStats):
            return data
        if not isinstance(data, dict):
            raise ParseError('Class statistics must be a mapping')
        if data.get('schema') != SCHEMA:
            raise ParseError(f'Unsupported class statistics schema {data.get("schema")!r}')
        try:
            num_classes = int(data['num_classes'])
            classes = data['classes']
        except (KeyError, TypeError, ValueError) as ex:
            raise ParseError(f'Missing label-space metadata: {ex}')
        class_names = data.get('class_names')
        if class_names is not None and len(class_names) != num_classes:
            raise ParseError(f'{len(class_names)} class names for {num_classes} classes')

        stats = ClassStats(num_classes=num_classes, class_names=class_names)
        for class_id in range(num_classes):
            if str(class_id) not in classes:
                raise ParseError(f'Missing entry for class {class_id}', entry=class_id)
            stats.append(ClassStat.parse(dict(classes[str(class_id)], class_id=class_id)))
        extra = set(classes) - {str(i) for i in range(num_classes)}
        if extra:
            raise ParseError(f'Entries outside the label space: {sorted(extra)}', entry=sorted(extra)[0])
        return stats


class ClassStat():

    __slots__ = [
        'class_id',
        'alpha',
        'delta',
        'gamma',
        'n',
    ]

    def __init__(self, **kwargs):
        self.class_id = int(kwargs['class_id'])
        self.n = int(kwargs.get('n', 0))
        self.alpha = _optional_float(kwargs.get('alpha'))
        self.delta = _optional_float(kwargs.get('delta'))
        self.gamma = _optional_float(kwargs.get('gamma'))

    @property
    def usable(self):
        return self.n > 0

    def validate(self):
        if self.n < 0:
            raise ParseError(f'Class {self.class_id}: negative count {self.n}', entry=self.class_id)
        if not self.usable:
            return self
        values = (self.alpha, self.delta, self.gamma)
        if any(v is None or not math.isfinite(v) or not 0 <= v <= 1 for v in values):
            raise ParseError(
                f'Class {self.class_id}: alpha/delta/gamma must be fractions in [0, 1], got {values}',
                entry=self.class_id
            )
        if self.alpha > self.gamma:
            raise ParseError(
                f'Class {self.class_id}: alpha {self.alpha} exceeds gamma {self.gamma}',
                entry=self.class_id
            )
        return self

    @staticmethod
    def parse(data):
        if isinstance(data, ClassStat):
            return data
        try:
            return ClassStat(**data).validate()
        except (KeyError, TypeError, ValueError) as ex:
            raise ParseError(f'Malformed class entry {data!r}: {ex}', entry=data.get('class_id'))

    def serialize(self):
        return {
            'alpha': self.alpha,
            'delta': self.delta,
            'gamma': self.gamma,
            'n': self.n,
        }


def _optional_float(value):
    return None if value is None else float(value)

from collections import OrderedDict

import numpy as np

from segadapt.exceptions import ConfigurationError


class NamedTensors():
    '''
    Ordered name -> ndarray container. Iterates over names like a dict.
    '''

    def __init__(self, *args, **kwargs):
        self._data = OrderedDict(kwargs.get('data', {}))

    def __getitem__(self, name):
        return self._data[name]

    def __setitem__(self, name, value):
        self._data[name] = value

    def __contains__(self, name):
        return name in self._data

    def __iter__(self):
        return (name for name in self._data)

    def __len__(self):
        return len(self._data)

    def __eq__(self, other):
        if not isinstance(other, NamedTensors) or list(self) != list(other):
            return False
        return all(
            self[name].shape == other[name].shape and np.array_equal(self[name], other[name])
            for name in self
        )

    def names(self):
        return list(self._data.keys())

    def items(self):
        return self._data.items()

    @property
    def num_params(self):
        return sum(v.size for v in self._data.values())

    def copy(self):
        return self.__class__(
            data=[(name, value.copy()) for name, value in self.items()]
        )

    def zeros_like(self, dtype=None):
        return self.__class__(
            data=[
                (name, np.zeros_like(value, dtype=dtype or value.dtype))
                for name, value in self.items()
            ]
        )

    def astype(self, dtype):
        return self.__class__(
            data=[(name, value.astype(dtype)) for name, value in self.items()]
        )

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self._data.values())

    def check_shapes(self, shapes):
        if list(shapes.keys()) != self.names():
            raise ConfigurationError(
                f'Parameter names {self.names()} do not match architecture {list(shapes.keys())}'
            )
        for name, shape in shapes.items():
            if tuple(self[name].shape) != tuple(shape):
                raise ConfigurationError(
                    f'Parameter {name} has shape {self[name].shape}, expected {tuple(shape)}'
                )

    def serialize(self):
        return {
            name: {
                'shape': list(value.shape),
                'values': value.ravel().tolist()
            } for name, value in self.items()
        }

    @classmethod
    def parse(cls, data):
        if isinstance(data, cls):
            return data
        if isinstance(data, dict):
            return cls(
                data=[
                    (name, np.asarray(d['values'], dtype=np.float32).reshape(d['shape']))
                    for name, d in data.items()
                ]
            )
        raise NotImplementedError()

    @classmethod
    def init_uniform(cls, shapes, seed, dtype=np.float32):
        '''
        Seeded uniform init in [-s, s] with s = fan_in ** -0.5, biases included
        '''
        rng = np.random.default_rng(seed)
        data = []
        for name, shape in shapes.items():
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else _bias_fan_in(shapes, name)
            scale = fan_in ** -0.5
            data.append((name, rng.uniform(-scale, scale, size=shape).astype(dtype)))
        return cls(data=data)


def _bias_fan_in(shapes, name):
    weight_name = name.rsplit('.', 1)[0] + '.weight'
    if weight_name in shapes:
        return int(np.prod(shapes[weight_name][1:]))
    return 1


class ModelParams(NamedTensors):
    pass


class DomainParams(NamedTensors):
    pass

'''
Layers of the segmentation network. Tensors are NCHW float64 arrays.

Every layer has `forward(params, x) -> (out, cache)` and
`backward(params, dout, cache) -> (dx, grads)` where grads maps parameter
names to gradient arrays (empty for parameter-free layers).
'''
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from segadapt.exceptions import ArgumentError, ConfigurationError


class Conv2d():

    __slots__ = [
        'name',
        'in_channels',
        'out_channels',
        'kernel_size',
        'dilation',
    ]

    def __init__(self, name, in_channels, out_channels, kernel_size=3, dilation=1):
        if kernel_size % 2 != 1:
            raise ConfigurationError(f'{name}: kernel size must be odd, got {kernel_size}')
        if dilation < 1:
            raise ConfigurationError(f'{name}: dilation must be >= 1, got {dilation}')
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.dilation = dilation

    @property
    def padding(self):
        return self.dilation * (self.kernel_size // 2)

    @property
    def weight_name(self):
        return f'{self.name}.weight'

    @property
    def bias_name(self):
        return f'{self.name}.bias'

    def param_shapes(self):
        return {
            self.weight_name: (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size),
            self.bias_name: (self.out_channels,),
        }

    def _windows(self, x):
        pad = self.padding
        span = self.dilation * (self.kernel_size - 1) + 1
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        windows = sliding_window_view(padded, (span, span), axis=(2, 3))
        return windows[..., ::self.dilation, ::self.dilation]

    def forward(self, params, x):
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f'{self.name}: expected {self.in_channels} input channels, got {x.shape[1]}'
            )
        weight = np.asarray(params[self.weight_name], dtype=np.float64)
        bias = np.asarray(params[self.bias_name], dtype=np.float64)
        windows = self._windows(x)
        out = np.einsum('nchwij,ocij->nohw', windows, weight, optimize=True)
        out += bias[None, :, None, None]
        return out, (windows, x.shape)

    def backward(self, params, dout, cache):
        windows, x_shape = cache
        weight = np.asarray(params[self.weight_name], dtype=np.float64)
        grads = {
            self.weight_name: np.einsum('nohw,nchwij->ocij', dout, windows, optimize=True),
            self.bias_name: dout.sum(axis=(0, 2, 3)),
        }

        n, c, h, w = x_shape
        pad = self.padding
        d = self.dilation
        dpadded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        for i in range(self.kernel_size):
            for j in range(self.kernel_size):
                dpadded[:, :, i * d:i * d + h, j * d:j * d + w] += np.einsum(
                    'nohw,oc->nchw', dout, weight[:, :, i, j], optimize=True
                )
        dx = dpadded[:, :, pad:pad + h, pad:pad + w]
        return dx, grads


class ReLU():

    __slots__ = []

    def param_shapes(self):
        return {}

    def forward(self, params, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, dout, cache):
        return dout * cache, {}


class AvgPool2d():

    __slots__ = ['stride']

    def __init__(self, stride):
        if stride < 1:
            raise ConfigurationError(f'Pool stride must be >= 1, got {stride}')
        self.stride = stride

    def param_shapes(self):
        return {}

    def forward(self, params, x):
        n, c, h, w = x.shape
        s = self.stride
        if h % s or w % s:
            raise ConfigurationError(f'Spatial size {h}x{w} not divisible by pool stride {s}')
        out = x.reshape(n, c, h // s, s, w // s, s).mean(axis=(3, 5))
        return out, x.shape

    def backward(self, params, dout, cache):
        s = self.stride
        dx = np.repeat(np.repeat(dout, s, axis=2), s, axis=3) / (s * s)
        return dx, {}


def interpolation_matrix(size, factor):
    '''
    Corner-aligned linear interpolation weights, shape (size * factor, size)
    '''
    out_size = size * factor
    matrix = np.zeros((out_size, size))
    if size == 1:
        matrix[:, 0] = 1.0
        return matrix
    positions = np.arange(out_size) * (size - 1) / (out_size - 1)
    lower = np.minimum(np.floor(positions).astype(int), size - 2)
    frac = positions - lower
    rows = np.arange(out_size)
    matrix[rows, lower] = 1.0 - frac
    matrix[rows, lower + 1] += frac
    return matrix


class BilinearUpsample():

    __slots__ = ['factor']

    def __init__(self, factor):
        if int(factor) != factor or factor < 1:
            raise ArgumentError(f'Upsample factor must be a positive integer, got {factor}')
        self.factor = int(factor)

    def param_shapes(self):
        return {}

    def forward(self, params, x):
        if self.factor == 1:
            return x.copy(), None
        rows = interpolation_matrix(x.shape[2], self.factor)
        cols = interpolation_matrix(x.shape[3], self.factor)
        out = np.einsum('yh,nchw,xw->ncyx', rows, x, cols, optimize=True)
        return out, (rows, cols)

    def backward(self, params, dout, cache):
        if cache is None:
            return dout.copy(), {}
        rows, cols = cache
        return np.einsum('yh,ncyx,xw->nchw', rows, dout, cols, optimize=True), {}

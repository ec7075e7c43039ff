import numpy as np

from segadapt.exceptions import ArgumentError


class MomentumSGD():
    '''
    v <- momentum * v + g;  p <- p - lr * v

    Updates happen in place and keep the storage dtype of params and
    velocities (float32 in training), so a checkpoint holds the exact state.
    '''

    def __init__(self, learning_rate, momentum=0.9, velocity=None):
        if learning_rate <= 0:
            raise ArgumentError(f'learning_rate must be positive, got {learning_rate}')
        if not 0 <= momentum < 1:
            raise ArgumentError(f'momentum must be in [0, 1), got {momentum}')
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = velocity

    def step(self, params, grads):
        if self.velocity is None:
            self.velocity = params.zeros_like()
        for name in params:
            velocity = self.velocity[name]
            velocity[...] = self.momentum * velocity.astype(np.float64) + grads[name]
            param = params[name]
            param[...] = param.astype(np.float64) - self.learning_rate * velocity.astype(np.float64)
        return params

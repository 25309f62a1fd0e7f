"""
Adam with bias correction over the model's trainable tensors
Frozen tensors are never registered, so they stay bit-identical.
"""

import numpy as np

from errors import OptimizerError

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


def adam_step(param, grad, m, v, lr, t, beta1=BETA1, beta2=BETA2, epsilon=EPSILON):
    """One in-place Adam update of `param`, `m`, `v` (numpy arrays) at step t >= 1"""
    if t < 1:
        raise OptimizerError(f"Adam step counter must start at 1, got {t}")
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise OptimizerError(f"shape mismatch: param {param.shape}, grad {grad.shape}, "
                             f"moments {m.shape} / {v.shape}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    param -= (lr / bc1) * m / (np.sqrt(v / bc2) + epsilon)


class Adam:
    """Adam over a list of (name, Tensor) pairs; moments are keyed by name"""

    def __init__(self, named_params, lr=1e-4, beta1=BETA1, beta2=BETA2, epsilon=EPSILON):
        if lr <= 0:
            raise OptimizerError(f"learning rate must be positive, got {lr}")
        self.params = [(name, t) for name, t in named_params if t.requires_grad]
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}

    def zero_grad(self):
        for _, tensor in self.params:
            tensor.zero_grad()

    def step(self):
        """Apply one update; all gradients are checked before anything changes"""
        for name, tensor in self.params:
            if tensor.grad is None:
                raise OptimizerError(f"'{name}' has no gradient; run backward first")
            if not np.all(np.isfinite(tensor.grad)):
                raise OptimizerError(f"non-finite gradient in '{name}', step aborted")
        self.t += 1
        for name, tensor in self.params:
            adam_step(tensor.data, tensor.grad, self.m[name], self.v[name], self.lr, self.t,
                      self.beta1, self.beta2, self.epsilon)

    def state(self):
        """(step, [(name, m, v)]) in registration order"""
        return self.t, [(name, self.m[name], self.v[name]) for name, _ in self.params]

    def load_state(self, step, moments):
        known = {name for name, _ in self.params}
        for name, m, v in moments:
            if name not in known:
                raise OptimizerError(f"moment for unknown parameter '{name}'")
            if m.shape != self.m[name].shape or v.shape != self.v[name].shape:
                raise OptimizerError(f"moment shape mismatch for '{name}'")
            self.m[name][...] = m
            self.v[name][...] = v
        self.t = int(step)

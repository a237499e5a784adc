"""First-order optimizers over lists of parameter tensors."""

import numpy as np


class MissingGradError(RuntimeError):
    """step() called while some parameter has no gradient."""


class OptimizerState:
    """Shared step logic: update in place, clear grads, count steps."""

    kind = None

    def __init__(self, params, learning_rate):
        if learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {learning_rate}")
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.step_count = 0

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradError(f"parameter {i} has no gradient")
        self.step_count += 1
        for i, p in enumerate(self.params):
            p.data -= self._update(i, p.grad)
            p.grad = None

    def _update(self, index, grad):
        raise NotImplementedError


class Sgd(OptimizerState):
    kind = "sgd"

    def _update(self, index, grad):
        return self.learning_rate * grad


class Adam(OptimizerState):
    kind = "adam"

    def __init__(self, params, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, index, grad):
        t = self.step_count
        m = self.m[index]
        v = self.v[index]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind, params, learning_rate):
    if kind == "sgd":
        return Sgd(params, learning_rate)
    if kind == "adam":
        return Adam(params, learning_rate)
    raise ValueError(f"unknown optimizer kind {kind!r}")

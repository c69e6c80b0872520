"""Gradient-descent optimizers over a ParameterStore.

Both optimizers read ``.grad`` from every parameter in the store and
update ``.data`` in place.  A NaN or infinite gradient aborts the step
with the offending parameter named, before any data is touched.
"""

import numpy as np

from .nn import ParameterStore


class StepAbortedError(FloatingPointError):
    """A gradient was non-finite; no parameter was modified."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient in parameter {param_name!r}")
        self.param_name = param_name


def _checked_grads(store: ParameterStore) -> list:
    grads = []
    for name, p in store.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise StepAbortedError(name)
        grads.append((name, p, g))
    return grads


class SGD:
    """Plain gradient descent: p <- p - lr * grad."""

    def __init__(self, store: ParameterStore, lr: float):
        self.store = store
        self.lr = float(lr)

    def step(self):
        for _, p, g in _checked_grads(self.store):
            p.data -= self.lr * g

    def zero_grad(self):
        self.store.zero_grad()


class Adam:
    """Adam with bias correction (Kingma & Ba defaults)."""

    def __init__(
        self,
        store: ParameterStore,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.store = store
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in store.items()}

    def step(self):
        checked = _checked_grads(self.store)
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p, g in checked:
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self):
        self.store.zero_grad()

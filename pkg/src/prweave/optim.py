from collections import OrderedDict
from typing import Mapping

import numpy as np

from .autodiff import Tensor


class Adam:
    """Adam over a named set of tensors; only tensors with a gradient move."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = OrderedDict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = OrderedDict((n, np.zeros(p.shape)) for n, p in self.params.items())
        self.v = OrderedDict((n, np.zeros(p.shape)) for n, p in self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.assign(p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for n in self.params:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], step_count: int) -> None:
        for n in self.params:
            self.m[n] = np.array(arrays[f"adam.m.{n}"])
            self.v[n] = np.array(arrays[f"adam.v.{n}"])
        self.step_count = step_count

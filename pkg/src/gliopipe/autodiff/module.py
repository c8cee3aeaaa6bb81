"""Minimal parameter container shared by layers and models."""
from __future__ import annotations

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .optim import kaiming_uniform, parameter


class Module:
    """Holds named parameters and child modules in registration order."""

    def __init__(self):
        self._params = {}
        self._children = {}
        self.training = False

    def add_param(self, name, values):
        p = parameter(values, name=name)
        self._params[name] = p
        return p

    def add_conv(self, name, c_out, c_in, k, rng):
        fan_in = c_in * k ** 3
        w = self.add_param(f"{name}.w", kaiming_uniform((c_out, c_in, k, k, k), fan_in, rng))
        b = self.add_param(f"{name}.b", np.zeros(c_out))
        return w, b

    def add_dense(self, name, f_in, f_out, rng):
        w = self.add_param(f"{name}.w", kaiming_uniform((f_in, f_out), f_in, rng))
        b = self.add_param(f"{name}.b", np.zeros(f_out))
        return w, b

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def train(self, mode=True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def save(self, path):
        return save_checkpoint(path, self.named_parameters())

    def load_state(self, state):
        named = dict(self.named_parameters())
        if list(state) != list(named):
            missing = set(named) - set(state)
            extra = set(state) - set(named)
            raise ValueError(f"checkpoint/model mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, p in named.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.values = np.array(state[name], dtype=np.float64)
        return self

    def load(self, path):
        return self.load_state(load_checkpoint(path))

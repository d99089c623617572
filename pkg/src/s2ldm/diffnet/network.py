"""Parameter containers and a sequential runner over the fixed layer set."""
import numpy as np

from .layers import layer_backward, layer_forward
from .optim import Param


class Module:
    """Named :class:`Param` storage; subclasses define forward/backward."""

    def __init__(self, dtype=np.float64):
        self.params = {}
        self.dtype = np.dtype(dtype)
        self._layer_keys = {}

    def add_params(self, prefix, arrays):
        for key, value in arrays.items():
            self.params[f"{prefix}.{key}"] = Param(np.asarray(value, dtype=self.dtype))
        self._layer_keys.clear()

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        return {k: p.value for k, p in self.params.items()}

    def load_arrays(self, arrays):
        missing = sorted(set(self.params) - set(arrays))
        if missing:
            raise ValueError(f"missing parameters: {missing[:5]}")
        for key, p in self.params.items():
            value = np.asarray(arrays[key], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ValueError(f"parameter {key}: shape {value.shape}, expected {p.value.shape}")
            p.value[...] = value

    def _layer_arrays(self, name):
        keys = self._layer_keys.get(name)
        if keys is None:
            prefix = name + "."
            keys = [(k[len(prefix):], k) for k in self.params if k.startswith(prefix)]
            self._layer_keys[name] = keys
        return {short: self.params[full].value for short, full in keys}

    def _accumulate(self, name, grads):
        for key, g in grads.items():
            self.params[f"{name}.{key}"].grad += g


class Sequential(Module):
    """Runs ``(kind, name, options)`` layers in order.

    Parameter-free layers use ``name=None``.
    """

    def __init__(self, layers, dtype=np.float64):
        super().__init__(dtype)
        self.layers = list(layers)

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        caches = []
        for kind, name, opts in self.layers:
            params = self._layer_arrays(name) if name else {}
            x, cache = layer_forward(kind, params, x, **opts)
            caches.append(cache)
        return x, caches

    def backward(self, caches, dout):
        """Accumulate parameter gradients and return the input gradient."""
        dout = np.asarray(dout, dtype=self.dtype)
        for (kind, name, _), cache in zip(reversed(self.layers), reversed(caches)):
            params = self._layer_arrays(name) if name else {}
            dout, grads = layer_backward(kind, params, cache, dout)
            if name:
                self._accumulate(name, grads)
        return dout

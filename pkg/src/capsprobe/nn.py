"""Parameter containers, initialisers and seeding shared by every model."""

import zlib

import numpy as np

from . import checkpoint
from .tensor import Tensor, no_grad


def component_rng(seed, component):
    """Independent, reproducible generator for one named component of a run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(component.encode())]))


def he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Module:
    """Holds named parameters in registration order."""

    kind = "module"

    def __init__(self):
        self._params = {}
        self.trained = False

    def param(self, name, value):
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def named_parameters(self):
        return dict(self._params)

    def parameters(self):
        return list(self._params.values())

    def num_parameters(self):
        return int(sum(p.size for p in self._params.values()))

    def state_dict(self):
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if self._params[k].shape != v.shape:
                raise ValueError(f"{k}: checkpoint shape {v.shape} != model shape {self._params[k].shape}")
            self._params[k].data = np.array(v, dtype=np.float64)

    def save(self, path):
        checkpoint.save(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(checkpoint.load(path))
        self.trained = True
        return self

    # classifiers override scores(); prediction is argmax with lowest-index ties
    def scores(self, x):
        raise NotImplementedError

    def predict(self, x, batch=256):
        x = np.asarray(x, dtype=np.float64)
        out = []
        with no_grad():
            for i in range(0, len(x), batch):
                out.append(np.argmax(self.scores(Tensor(x[i:i + batch])).data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def param_count(model):
    """Exact number of trainable scalars."""
    return model.num_parameters()

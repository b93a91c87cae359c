"""Parameter-holding modules built on the fused ops."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import ShapeMismatch, Tensor, relu

__all__ = ["Module", "Linear", "LSTM", "Conv2d", "LayerNorm", "Dropout", "MLP"]


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True)


class Module:
    """Base class: every ``Tensor`` attribute is a parameter (frozen ones have
    ``requires_grad`` off); submodules are found among attributes and lists."""

    training = True

    def named_parameters(self, prefix: str = ""):
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                out.append((prefix + key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix + key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            items = val if isinstance(val, (list, tuple)) else (val,)
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ShapeMismatch(f"{name}: expected {p.data.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.W = _uniform(rng, (n_out, n_in), bound)
        self.b = _uniform(rng, (n_out,), bound)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.W, self.b)


class LSTM(Module):
    """Stacked LSTM returning the top layer's final hidden state."""

    def __init__(self, n_in: int, hidden: int, layers: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(hidden)
        self.hidden = hidden
        self.cells = []
        for k in range(layers):
            cell = Module()
            cell.Wx = _uniform(rng, (4 * hidden, n_in if k == 0 else hidden), bound)
            cell.Wh = _uniform(rng, (4 * hidden, hidden), bound)
            cell.b = _uniform(rng, (4 * hidden,), bound)
            self.cells.append(cell)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for cell in self.cells:
            h = F.lstm_layer(h, cell.Wx, cell.Wh, cell.b)
        return h[:, -1]


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 padding: str = "valid"):
        bound = 1.0 / np.sqrt(c_in * k * k)
        self.w = _uniform(rng, (c_out, c_in, k, k), bound)
        self.b = _uniform(rng, (c_out,), bound)
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.w, self.b, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.rate, self.rng, self.training)


class MLP(Module):
    """Dense stack with ReLU between layers; optional dropout and layer norm per hidden layer
    (order: dense, dropout, layer norm, ReLU)."""

    def __init__(self, sizes, rng: np.random.Generator, dropout: float = 0.0,
                 layer_norm: bool = False, final_activation: bool = False):
        sizes = list(sizes)
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        n_hidden = len(self.layers) if final_activation else len(self.layers) - 1
        self.drops = [Dropout(dropout, rng) for _ in range(n_hidden)] if dropout > 0 else []
        self.norms = [LayerNorm(s) for s in sizes[1:1 + n_hidden]] if layer_norm else []
        self.n_hidden = n_hidden

    def forward(self, x: Tensor) -> Tensor:
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < self.n_hidden:
                if self.drops:
                    x = self.drops[k](x)
                if self.norms:
                    x = self.norms[k](x)
                x = relu(x)
        return x


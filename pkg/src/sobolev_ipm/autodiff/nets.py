"""Small networks built on the tape engine: MLPs and 1-D conv stacks."""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = {"tanh": T.tanh, "softplus": T.softplus, "relu": T.relu}
# activations usable on any path that is differentiated twice
SMOOTH_ACTIVATIONS = frozenset({"tanh", "softplus"})


def _rng(rng=None, seed=None) -> np.random.Generator:
    if rng is not None:
        return rng
    return np.random.default_rng(seed)


class Module:
    activation: str = "tanh"

    def parameters(self) -> list[Tensor]:
        raise NotImplementedError

    @property
    def is_smooth(self) -> bool:
        return self.activation in SMOOTH_ACTIVATIONS

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_parameters():
            raise ValueError(f"expected {self.num_parameters()} values, got {flat.size}")
        i = 0
        for p in self.parameters():
            p.data = flat[i : i + p.size].reshape(p.shape).copy()
            i += p.size

    def arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError("parameter count mismatch")
        for p, a in zip(params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"shape {a.shape} does not match {p.shape}")
            p.data = a.copy()

    def copy(self):
        return copy.deepcopy(self)

    def check_finite(self) -> None:
        for p in self.parameters():
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError("non-finite parameter")


class Mlp(Module):
    """Fully connected net; hidden layers use `activation`, the last is linear."""

    def __init__(
        self,
        sizes: Sequence[int],
        activation: str = "tanh",
        rng: np.random.Generator | None = None,
        seed: int | None = None,
    ):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = _rng(rng, seed)
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def features(self, x) -> Tensor:
        """Output of the last hidden layer."""
        act = ACTIVATIONS[self.activation]
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = act(h @ w + b)
        return h

    def __call__(self, x) -> Tensor:
        h = self.features(x)
        return h @ self.weights[-1] + self.biases[-1]


class MlpCritic(Mlp):
    """Scalar-valued MLP critic ``f_p : R^d -> R``; returns shape ``(N,)``."""

    def __init__(self, input_dim: int, widths: Sequence[int] = (64, 64), activation="tanh", rng=None, seed=None):
        super().__init__((input_dim, *widths, 1), activation=activation, rng=rng, seed=seed)
        self.input_dim = int(input_dim)
        self.widths = tuple(int(w) for w in widths)

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected input of shape (N, {self.input_dim}), got {x.shape}")
        out = super().__call__(x)
        return T.reshape(out, (out.shape[0],))

    def scale_last_layer(self, c: float) -> None:
        self.weights[-1].data = self.weights[-1].data * c
        self.biases[-1].data = self.biases[-1].data * c


class LinearCritic(Module):
    """``f(x) = <w, x> + b``."""

    activation = "linear"

    @property
    def is_smooth(self) -> bool:
        return True

    def __init__(self, w, b: float = 0.0):
        self.w = Tensor(np.atleast_1d(np.asarray(w, dtype=np.float64)), requires_grad=True)
        self.b = Tensor(np.asarray([b], dtype=np.float64), requires_grad=True)
        self.input_dim = self.w.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]

    def __call__(self, x) -> Tensor:
        return x @ self.w + self.b


class MlpGenerator(Mlp):
    def __init__(self, noise_dim: int, widths: Sequence[int], out_dim: int, activation="tanh", rng=None, seed=None):
        super().__init__((noise_dim, *widths, out_dim), activation=activation, rng=rng, seed=seed)
        self.noise_dim = int(noise_dim)
        self.out_dim = int(out_dim)


class ShiftGenerator(Module):
    """``g(z) = z + b``; mostly useful for closed-form checks."""

    def __init__(self, dim: int, b=None):
        self.b = Tensor(np.zeros(dim) if b is None else np.asarray(b, dtype=np.float64), requires_grad=True)
        self.noise_dim = self.out_dim = int(dim)

    def parameters(self) -> list[Tensor]:
        return [self.b]

    def __call__(self, z) -> Tensor:
        return z + self.b


class Conv1d(Module):
    """'Same'-padded 1-D convolution over inputs of shape ``(B, L, C_in)``."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, rng=None, seed=None):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        rng = _rng(rng, seed)
        self.kernel = kernel
        self.in_ch, self.out_ch = in_ch, out_ch
        w = rng.normal(0.0, 1.0 / np.sqrt(kernel * in_ch), size=(kernel * in_ch, out_ch))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        c = self.kernel // 2
        # tap j reads x[l + j - c]
        taps = [T.shift(x, c - j, axis=1) if j != c else x for j in range(self.kernel)]
        stacked = T.concat(taps, axis=-1) if len(taps) > 1 else taps[0]
        return stacked @ self.weight + self.bias


class ConvCritic(Module):
    """Conv stack over ``(B, L, V)`` sequences followed by a linear read-out."""

    def __init__(self, length: int, vocab: int, width: int = 32, layers: int = 2, kernel: int = 3,
                 activation: str = "tanh", rng=None, seed=None):
        rng = _rng(rng, seed)
        self.activation = activation
        self.length, self.vocab, self.width = length, vocab, width
        chans = [vocab] + [width] * layers
        self.convs = [Conv1d(a, b, kernel, rng=rng) for a, b in zip(chans[:-1], chans[1:])]
        self.head = Mlp((length * width, 1), rng=rng)

    def parameters(self) -> list[Tensor]:
        out = []
        for c in self.convs:
            out += c.parameters()
        return out + self.head.parameters()

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        act = ACTIVATIONS[self.activation]
        h = x
        for conv in self.convs:
            h = act(conv(h))
        flat = T.reshape(h, (h.shape[0], self.length * self.width))
        out = self.head(flat)
        return T.reshape(out, (out.shape[0],))


class ConvGenerator(Module):
    """Noise -> ``(B, L, V)`` rows on the probability simplex (softmax output)."""

    def __init__(self, noise_dim: int, length: int, vocab: int, width: int = 32, layers: int = 2,
                 kernel: int = 3, activation: str = "tanh", rng=None, seed=None):
        rng = _rng(rng, seed)
        self.activation = activation
        self.noise_dim, self.length, self.vocab, self.width = noise_dim, length, vocab, width
        self.stem = Mlp((noise_dim, length * width), rng=rng)
        self.convs = [Conv1d(width, width, kernel, rng=rng) for _ in range(layers - 1)]
        self.out = Conv1d(width, vocab, kernel, rng=rng)

    def parameters(self) -> list[Tensor]:
        out = self.stem.parameters()
        for c in self.convs:
            out += c.parameters()
        return out + self.out.parameters()

    def logits(self, z) -> Tensor:
        act = ACTIVATIONS[self.activation]
        h = act(T.reshape(self.stem(z), (z.shape[0], self.length, self.width)))
        for conv in self.convs:
            h = act(conv(h))
        return self.out(h)

    def __call__(self, z) -> Tensor:
        return T.softmax(self.logits(z), axis=-1)

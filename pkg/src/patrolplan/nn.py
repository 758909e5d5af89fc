"""Small dense networks with hand-written backpropagation.

The oracles only need two-hidden-layer perceptrons on a few dozen inputs;
at that size plain numpy beats autograd frameworks on per-update overhead.
All arithmetic is float64 so finite-difference gradient checks are tight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MLP:
    """ReLU perceptron ``in -> h1 -> h2 -> out`` with a linear output layer."""

    def __init__(self, sizes: tuple[int, ...], rng: np.random.Generator | None = None):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.params: list[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def copy(self) -> "MLP":
        clone = MLP.__new__(MLP)
        clone.sizes = self.sizes
        clone.params = [p.copy() for p in self.params]
        return clone

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        for layer in range(self.n_layers):
            h = h @ self.params[2 * layer] + self.params[2 * layer + 1]
            if layer < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        return h

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass that also returns the layer inputs needed by ``backward``."""
        cache = [x]
        h = x
        for layer in range(self.n_layers):
            h = h @ self.params[2 * layer] + self.params[2 * layer + 1]
            if layer < self.n_layers - 1:
                h = np.maximum(h, 0.0)
                cache.append(h)
        return h, cache

    def backward(
        self, cache: list[np.ndarray], dout: np.ndarray, need_params: bool = True
    ) -> tuple[list[np.ndarray] | None, np.ndarray]:
        """Vector-Jacobian product: gradients w.r.t. parameters and input."""
        grads: list[np.ndarray] = [None] * len(self.params) if need_params else None  # type: ignore[list-item]
        delta = dout
        for layer in range(self.n_layers - 1, -1, -1):
            inp = cache[layer]
            W = self.params[2 * layer]
            if need_params:
                grads[2 * layer] = inp.T @ delta
                grads[2 * layer + 1] = delta.sum(axis=0)
            delta = delta @ W.T
            if layer > 0:
                delta = delta * (inp > 0.0)
        return grads, delta

    def soft_update(self, source: "MLP", tau: float) -> None:
        for target, src in zip(self.params, source.params):
            target *= 1.0 - tau
            target += tau * src

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        offset = 0
        for p in self.params:
            p[...] = vec[offset: offset + p.size].reshape(p.shape)
            offset += p.size

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{i}": p.copy() for i, p in enumerate(self.params)}

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray], prefix: str) -> "MLP":
        params = []
        i = 0
        while f"{prefix}.{i}" in state:
            params.append(np.array(state[f"{prefix}.{i}"], dtype=np.float64))
            i += 1
        if not params or len(params) % 2:
            raise ValueError(f"no complete network under prefix {prefix!r}")
        sizes = [params[0].shape[0]] + [params[k].shape[1] for k in range(0, len(params), 2)]
        net = cls.__new__(cls)
        net.sizes = tuple(int(s) for s in sizes)
        net.params = params
        return net


@dataclass
class Adam:
    """Adam over a fixed list of arrays, updated in place."""

    params: list[np.ndarray]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: list[np.ndarray], ascend: bool = False) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        sign = 1.0 if ascend else -1.0
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p += sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

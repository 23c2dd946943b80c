"""MLPs with squareplus activations, weight init, and the Adam optimizer.

Parameters live in flat dicts mapping names like ``"enc/W0"`` to numpy
arrays. During a differentiable forward pass the arrays are wrapped into
autodiff Tensors once (see :func:`wrap_params`) and the same apply code
runs on either representation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor

SQUAREPLUS_B = 4.0


def squareplus(x, b: float = SQUAREPLUS_B):
    """Numpy squareplus: (x + sqrt(x^2 + b)) / 2."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (x + np.sqrt(x * x + b))


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths of a 2-hidden-layer MLP: (input, h1, h2, output)."""

    sizes: tuple[int, int, int, int]

    def __post_init__(self):
        if len(self.sizes) != 4:
            raise ShapeMismatchError(
                f"expected (in, hidden, hidden, out) widths, got {self.sizes}"
            )
        if any(s < 1 for s in self.sizes):
            raise ShapeMismatchError(f"layer widths must be positive: {self.sizes}")


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str) -> dict[str, np.ndarray]:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    params = {}
    for i, (fi, fo) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        bound = np.sqrt(6.0 / (fi + fo))
        params[f"{prefix}/W{i}"] = rng.uniform(-bound, bound, size=(fo, fi))
        params[f"{prefix}/b{i}"] = np.zeros(fo)
    return params


def mlp_widths(params: Mapping[str, np.ndarray], prefix: str) -> tuple[int, ...]:
    w0 = params[f"{prefix}/W0"]
    w0 = w0.value if isinstance(w0, Tensor) else w0
    sizes = [w0.shape[1]]
    i = 0
    while f"{prefix}/W{i}" in params:
        w = params[f"{prefix}/W{i}"]
        w = w.value if isinstance(w, Tensor) else w
        sizes.append(w.shape[0])
        i += 1
    return tuple(sizes)


def mlp_apply(params: Mapping[str, Tensor], prefix: str, x: Tensor,
              output_squareplus: bool = False) -> Tensor:
    """Apply a 2-hidden-layer MLP; squareplus on hidden layers.

    The output head is linear unless ``output_squareplus`` is set (the
    embedding encoders use a squareplus head, the force/acceleration
    decoders a linear one).
    """
    x = ad.as_tensor(x)
    n_layers = 0
    while f"{prefix}/W{n_layers}" in params:
        n_layers += 1
    if n_layers == 0:
        raise ShapeMismatchError(f"no MLP parameters under prefix '{prefix}'")
    for i in range(n_layers):
        w = ad.as_tensor(params[f"{prefix}/W{i}"])
        b = ad.as_tensor(params[f"{prefix}/b{i}"])
        in_dim = x.value.shape[-1] if x.value.ndim > 0 else 1
        if w.value.shape[1] != in_dim:
            raise ShapeMismatchError(
                f"{prefix}/W{i} expects width {w.value.shape[1]}, got {in_dim}"
            )
        x = ad.matmul(x, ad.transpose(w)) + b
        if i < n_layers - 1 or output_squareplus:
            x = ad.squareplus(x, SQUAREPLUS_B)
    return x


def wrap_params(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap a parameter dict into trainable Tensors (once per forward)."""
    return {name: ad.parameter(a) for name, a in arrays.items()}


@dataclass
class AdamState:
    """First/second-moment accumulators plus step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: Mapping[str, np.ndarray], beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        t=0, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update with bias correction. Inputs are left untouched."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'"
            )
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1**t)
        vhat = v / (1.0 - state.beta2**t)
        new_params[name] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(
        m=new_m, v=new_v, t=t, beta1=state.beta1, beta2=state.beta2, eps=state.eps
    )

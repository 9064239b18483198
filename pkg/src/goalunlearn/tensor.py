"""Numeric substrate: float64 torch tensors plus the few primitives the lab needs.

Reverse-mode differentiation comes from torch autograd (a fresh tape per
forward pass). This module adds the pieces with stricter contracts than the
torch defaults: shape-checked matmul, a cosine that refuses zero vectors, an
explicit Adam step and a central-difference gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

DTYPE = torch.float64

torch.set_default_dtype(DTYPE)


class DegenerateInputError(ValueError):
    """Raised when an operation receives a zero-norm vector."""


class EvaluationError(RuntimeError):
    """Raised when a function under test produces a non-finite value."""


class MissingGradError(RuntimeError):
    """Raised when an optimizer step finds a parameter without a gradient."""


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return a @ b


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine similarity along ``dim``; zero-norm inputs raise instead of yielding 0."""
    if a.shape[dim] != b.shape[dim]:
        raise ValueError(f"length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    na = torch.linalg.vector_norm(a, dim=dim)
    nb = torch.linalg.vector_norm(b, dim=dim)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return (a * b).sum(dim=dim) / (na * nb)


@dataclass
class AdamState:
    """Moments for :func:`adam_step`, keyed by parameter position."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[int, torch.Tensor] = field(default_factory=dict)
    v: dict[int, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(
    params: Sequence[torch.Tensor],
    lr: float,
    state: AdamState,
    names: Sequence[str] | None = None,
) -> None:
    """One bias-corrected Adam update, in place."""
    for i, p in enumerate(params):
        if p.grad is None:
            label = names[i] if names is not None else f"#{i}"
            raise MissingGradError(f"parameter {label} has no gradient")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for i, p in enumerate(params):
        g = p.grad
        m = state.m.get(i)
        v = state.v.get(i)
        if m is None:
            m = torch.zeros_like(p)
            v = torch.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[i] = m
        state.v[i] = v
        p -= lr * (m / bc1) / (torch.sqrt(v / bc2) + state.eps)


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_difference_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar numpy function."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-5
) -> float:
    """Max elementwise relative error between autograd and central differences.

    The relative error of each entry is ``|a - n| / max(1, |a|, |n|)`` so that
    near-zero entries are compared absolutely.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = x.detach().clone().to(DTYPE)
    xg = x0.clone().requires_grad_(True)
    y = f(xg)
    if not bool(torch.isfinite(y).all()):
        raise EvaluationError(f"f(x) is not finite: {y}")
    (auto,) = torch.autograd.grad(y, xg)

    def numeric(arr: np.ndarray) -> float:
        with torch.no_grad():
            val = f(torch.from_numpy(arr).to(DTYPE))
        if not bool(torch.isfinite(val).all()):
            raise EvaluationError("f is not finite near x")
        return float(val)

    num = finite_difference_grad(numeric, x0.numpy(), eps)
    a = auto.detach().numpy()
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(num)))
    return float(np.max(np.abs(a - num) / scale))

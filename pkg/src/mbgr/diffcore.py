"""Differentiable primitives and a central-difference gradient verifier.

Derivatives come from torch autograd; every primitive here validates shapes
and refuses to emit non-finite values. ``grad_check`` compares autograd
against finite differences and is the oracle for all model gradients.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, **operands: torch.Tensor):
        desc = ", ".join(f"{k}={tuple(v.shape)}" for k, v in operands.items())
        super().__init__(f"{op}: incompatible shapes ({desc})")
        self.op = op
        self.operands = {k: tuple(v.shape) for k, v in operands.items()}


class NonFiniteError(FloatingPointError):
    """A tensor contains NaN or Inf."""

    def __init__(self, name: str):
        super().__init__(f"non-finite values in {name}")
        self.name = name


_STRICT = True


@contextmanager
def strict_checks(enabled: bool):
    """Toggle per-primitive finiteness checks (the training loop checks the loss instead)."""
    global _STRICT
    prev, _STRICT = _STRICT, enabled
    try:
        yield
    finally:
        _STRICT = prev


def check_finite(x: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if _STRICT and not torch.isfinite(x).all():
        raise NonFiniteError(name)
    return x


def _finite(op):
    def wrapped(*args, **kwargs):
        return check_finite(op(*args, **kwargs), op.__name__)

    wrapped.__name__ = op.__name__
    wrapped.__doc__ = op.__doc__
    return wrapped


@_finite
def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", a=a, b=b)
    return a @ b


@_finite
def concat(tensors: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    ref = tensors[0]
    for i, t in enumerate(tensors[1:], 1):
        if t.dim() != ref.dim():
            raise ShapeError("concat", **{"t0": ref, f"t{i}": t})
        d = dim % ref.dim()
        if any(t.shape[j] != ref.shape[j] for j in range(ref.dim()) if j != d):
            raise ShapeError("concat", **{"t0": ref, f"t{i}": t})
    return torch.cat(list(tensors), dim=dim)


def _same_shape(op, a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(op, a=a, b=b) from None


@_finite
def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape("add", a, b)
    return a + b


@_finite
def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape("mul", a, b)
    return a * b


@_finite
def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


@_finite
def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


@_finite
def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


@_finite
def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    ez = torch.exp(z)
    return ez / ez.sum(dim=dim, keepdim=True)


@_finite
def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    return z - torch.log(torch.exp(z).sum(dim=dim, keepdim=True))


@_finite
def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity over the last axis.

    ``a``: (..., d), ``b``: (n, d) -> (..., n). Zero-norm rows are an error,
    never clamped.
    """
    if a.shape[-1] != b.shape[-1] or b.dim() != 2:
        raise ShapeError("cosine_sim", a=a, b=b)
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    if (na == 0).any() or (nb == 0).any():
        raise ZeroDivisionError("cosine_sim: zero-norm embedding")
    return (a / na) @ (b / nb).T


@_finite
def gather(table: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Embedding lookup: rows of ``table`` at integer ``index``."""
    if table.dim() != 2:
        raise ShapeError("gather", table=table, index=index)
    if index.numel() and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"gather: index out of range [0, {table.shape[0]})")
    return table[index]


@_finite
def mean(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


@_finite
def total(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


@_finite
def squared_error(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError("squared_error", a=a, b=b)
    return ((a - b) ** 2).sum()


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "concat": concat,
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "relu": relu,
    "silu": silu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "cosine_sim": cosine_sim,
    "gather": gather,
    "mean": mean,
    "sum": total,
    "squared_error": squared_error,
}


def primitive_set() -> list[str]:
    return sorted(PRIMITIVES)


@dataclass
class GradientReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def worst(self, n: int = 5) -> list[tuple[str, float]]:
        return sorted(self.errors.items(), key=lambda kv: -kv[1])[:n]


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Sequence[torch.Tensor],
    eps: float = 1e-6,
    tolerance: float = 1e-4,
) -> GradientReport:
    """Compare autograd gradients with central differences, entry by entry.

    ``loss_fn`` is re-evaluated with each parameter entry shifted by +/- eps,
    so it must read the parameters afresh on every call.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    report = GradientReport(tolerance=tolerance)
    if not params:
        return report
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise TypeError(f"{name}: grad_check needs float64, got {p.dtype}")

    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteError("loss")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)

    with torch.no_grad():
        for name, g in zip(names, grads):
            p = params[name]
            analytic = torch.zeros_like(p) if g is None else g.detach().reshape(p.shape)
            flat = p.view(-1)
            worst = 0.0
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                fp = loss_fn().item()
                flat[j] = orig - eps
                fm = loss_fn().item()
                flat[j] = orig
                if not (torch.isfinite(torch.tensor(fp)) and torch.isfinite(torch.tensor(fm))):
                    raise NonFiniteError(f"loss at {name}[{j}]")
                numeric = (fp - fm) / (2 * eps)
                a = analytic.reshape(-1)[j].item()
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, abs(a - numeric) / denom)
            report.errors[name] = worst
    return report

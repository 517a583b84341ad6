"""Reverse-mode differentiation utilities on top of torch autograd.

The pipeline only needs first-order gradients of scalar losses w.r.t.
flat parameter buffers, a stop-gradient primitive and deterministic
scatter-add into hash-table rows; torch's tape provides all of that.
Storage is float32, reductions accumulate in float64 where it matters
(see ``mean64``).
"""

from __future__ import annotations

from collections.abc import Callable, Iterable

import torch


class Parameter(torch.nn.Parameter):
    """Trainable flat buffer with a name (gradient lives in .grad)."""

    def __new__(cls, data, name: str = "", requires_grad: bool = True):
        p = super().__new__(cls, torch.as_tensor(data, dtype=torch.float32), requires_grad)
        p.param_name = name
        return p


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Pass the value through, block the adjoint."""
    return x.detach()


def scatter_add_rows(table: torch.Tensor, indices: torch.Tensor,
                     rows: torch.Tensor) -> torch.Tensor:
    """table + scatter of rows at indices; repeated indices accumulate."""
    return table.index_add(0, indices, rows)


def mean64(x: torch.Tensor) -> torch.Tensor:
    """Mean with a float64 accumulator, cast back to the input dtype."""
    return x.double().mean().to(x.dtype)


def backward(root: torch.Tensor) -> None:
    """Accumulate d(root)/d(param) into .grad of every reachable parameter."""
    if root.numel() != 1:
        raise ValueError("backward root must be a scalar")
    root.backward()


def zero_gradients(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad.detach_()
            p.grad.zero_()


def finite_difference_gradient(f: Callable[[], torch.Tensor], param: torch.Tensor,
                               direction: torch.Tensor, step: float = 1e-4) -> float:
    """Central-difference directional derivative of scalar f along direction."""
    direction = direction / direction.norm()
    with torch.no_grad():
        param += step * direction
        f_plus = float(f())
        param -= 2 * step * direction
        f_minus = float(f())
        param += step * direction
    return (f_plus - f_minus) / (2 * step)


def gradient_check(f: Callable[[], torch.Tensor], param: torch.Tensor,
                   n_directions: int = 8, step: float = 1e-4,
                   rtol: float = 1e-3,
                   generator: torch.Generator | None = None) -> float:
    """Max normalized error between autograd and central differences.

    Projects the autograd gradient on random directions. The error scale
    is max(|ad|, |fd|, noise/rtol) where noise = eps(dtype)·max(|f|,1)/step
    is the cancellation floor of the central difference: directions whose
    derivative sits below what FD can resolve at the requested tolerance
    are judged against that floor instead of their (unresolvable) value.
    A return below rtol means every direction passed.
    """
    zero_gradients([param])
    loss = f()
    loss.backward()
    grad = param.grad.detach().clone()
    noise = torch.finfo(param.dtype).eps * max(abs(float(loss.detach())), 1.0) / step
    worst = 0.0
    for _ in range(n_directions):
        d = torch.randn(param.shape, generator=generator, dtype=param.dtype)
        d = d / d.norm()
        ad = float((grad * d).sum())
        fd = finite_difference_gradient(f, param, d, step)
        scale = max(abs(ad), abs(fd), noise / rtol, 1e-6)
        worst = max(worst, abs(ad - fd) / scale)
    return worst

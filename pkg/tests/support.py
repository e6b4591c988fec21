"""Shared numerical helpers for the test suite."""

import torch


def directional_check(fn, x: torch.Tensor, seed: int, n_dirs: int = 3, h: float = 1e-6):
    """Relative error between autograd and central-difference directional derivatives.

    Probes ``n_dirs`` random unit directions plus the gradient direction and
    returns ``||analytic - numeric|| / max(||analytic||, ||numeric||)`` over
    that set; ``fn`` maps a float64 tensor to a scalar.
    """
    x = x.detach().double().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(x), x)
    gen = torch.Generator().manual_seed(seed)
    dirs = [torch.randn(x.shape, generator=gen, dtype=torch.float64) for _ in range(n_dirs)]
    if grad.norm() > 0:
        dirs.append(grad.clone())
    analytic, numeric = [], []
    with torch.no_grad():
        for v in dirs:
            v = v / v.norm()
            analytic.append(float((grad * v).sum()))
            numeric.append(float((fn(x + h * v) - fn(x - h * v)) / (2 * h)))
    a, n = torch.tensor(analytic), torch.tensor(numeric)
    return float((a - n).norm() / max(float(a.norm()), float(n.norm()), 1e-12))


def model_image(seed: int, size: int = 16, batch: int = 1) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, size, size, generator=gen, dtype=torch.float64) * 1.6 - 0.8

"""Finite-difference oracle shared by the gradient tests."""
import torch


def central_diff(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Gradient of scalar ``fn`` at ``x`` by central differences, element by element."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        f_plus = float(fn(x))
        flat[i] = orig - eps
        f_minus = float(fn(x))
        flat[i] = orig
        g[i] = (f_plus - f_minus) / (2 * eps)
    return grad


def autograd(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-12))

"""Shared test utilities."""
import numpy as np
import torch


def finite_difference_check(loss_fn, params, n_checks=10, seed=0, h=1e-6):
    """Worst relative error between autograd and central differences.

    ``params`` are float64 leaf tensors; ``n_checks`` random coordinates are
    drawn across all of them. ``loss_fn()`` must be deterministic.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_checks):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        j = int(rng.integers(sizes[k]))
        flat = params[k].data.view(-1)
        orig = flat[j].item()
        with torch.no_grad():
            flat[j] = orig + h
            up = loss_fn().item()
            flat[j] = orig - h
            down = loss_fn().item()
            flat[j] = orig
        fd = (up - down) / (2 * h)
        ad = grads[k].view(-1)[j].item()
        worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd), 1e-6))
    return worst

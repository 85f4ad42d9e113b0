"""Shared test oracles."""
import torch


def central_difference_check(loss_fn, params, h=1e-4, floor=1e-6):
    """Compare autograd with central differences for every scalar parameter.

    Returns the worst relative error ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                num = (up - down) / (2 * h)
                a = gflat[i].item()
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst

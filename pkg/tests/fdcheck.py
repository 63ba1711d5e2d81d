"""Central finite-difference gradient oracle used by the gradient tests."""
import torch


def sample_entries(params, fraction, rng, min_per_tensor=1):
    picks = []
    for name, p in params:
        n = p.numel()
        k = min(n, max(min_per_tensor, int(round(fraction * n))))
        for flat in rng.choice(n, size=k, replace=False):
            picks.append((name, p, int(flat)))
    return picks


def relative_errors(loss_fn, params, fraction=1.0, eps=1e-6, seed=0, floor=1e-8):
    """Compare autograd against central differences on sampled parameter entries.

    Returns a list of ``(name, index, analytic, numeric, rel_err)`` with
    ``rel_err = |a - n| / max(|a|, |n|, floor)``.
    """
    import numpy as np

    params = list(params)
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    grads = {name: p.grad.detach().clone().flatten() for name, p in params}
    rng = np.random.default_rng(seed)
    out = []
    with torch.no_grad():
        for name, p, i in sample_entries(params, fraction, rng):
            flat = p.view(-1)
            orig = flat[i].item()
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[name][i].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            out.append((name, i, analytic, numeric, err))
    return out

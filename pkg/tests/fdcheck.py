"""Finite-difference gradient checking helpers shared by the test suite."""

import torch


def perturb_parameters(module, std=0.02, seed=0):
    """Add small noise to every parameter so no gradient is trivially zero
    (several projections are zero-initialized on purpose)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def directional_derivative(loss_fn, param, direction, eps):
    """Central finite difference of loss_fn along `direction` in `param`."""
    with torch.no_grad():
        param.add_(eps * direction)
        plus = float(loss_fn())
        param.sub_(2 * eps * direction)
        minus = float(loss_fn())
        param.add_(eps * direction)
    return (plus - minus) / (2 * eps)


def check_parameter_gradients(loss_fn, named_params, eps=1e-6, rel_tol=1e-3,
                              seed=0, abs_floor=1e-7):
    """Compare analytic gradients with central differences, one random probe
    direction per parameter tensor. Returns the worst relative error.

    Every parameter participates: the probe validates <grad, v> against
    (L(p + eps*v) - L(p - eps*v)) / (2 eps) for a fixed random unit v.
    Derivatives below `abs_floor` on both sides count as agreeing (relative
    error is meaningless against finite-difference cancellation noise there).
    """
    loss = loss_fn()
    params = [p for _, p in named_params]
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    gen = torch.Generator().manual_seed(seed)

    worst = 0.0
    failures = []
    for (name, param), grad in zip(named_params, grads):
        v = torch.randn(param.shape, generator=gen, dtype=param.dtype)
        v = v / v.norm().clamp(min=1e-12)
        analytic = float((grad * v).sum())
        numeric = directional_derivative(loss_fn, param, v, eps)
        denom = max(abs(analytic), abs(numeric))
        rel = 0.0 if denom < abs_floor else abs(analytic - numeric) / denom
        worst = max(worst, rel)
        if rel > rel_tol:
            failures.append((name, analytic, numeric, rel))
    assert not failures, f"gradient mismatches: {failures[:5]} (worst rel {worst:.2e})"
    return worst

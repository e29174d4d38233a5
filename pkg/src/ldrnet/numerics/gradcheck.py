"""Central finite-difference verification of engine gradients.

Central differences are only meaningful where the function is smooth on
``[theta - eps, theta + eps]``. Every evaluation therefore records which
piece of each non-smooth op (relu6, abs, norm at 0, guarded division) its
inputs fall in; a perturbation that changes any of them has crossed a kink
and is reported rather than silently compared.
"""
import numpy as np

from .engine import backward, record_kinks


class KinkCrossedError(ArithmeticError):
    pass


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _evaluate(fn):
    with record_kinks() as regions:
        value = float(fn().data)
    return value, regions


def _same_regions(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central(fn, set_value, eps):
    set_value(eps)
    up, r_up = _evaluate(fn)
    set_value(-eps)
    down, r_down = _evaluate(fn)
    set_value(0.0)
    return (up - down) / (2 * eps), r_up, r_down


def _refined(fn, set_value, eps, base, min_eps):
    """Central difference at ``eps``, shrunk tenfold while a kink lies inside the interval."""
    while True:
        value, r_up, r_down = _central(fn, set_value, eps)
        crossed = base is not None and not (_same_regions(base, r_up) and _same_regions(base, r_down))
        if not crossed or min_eps is None or eps / 10 < min_eps * (1 - 1e-9):
            return value, crossed
        eps /= 10


def numeric_gradient(fn, param, eps=1e-4, indices=None, return_crossings=False, min_eps=None):
    """Central differences of scalar ``fn()`` w.r.t. ``param.data`` (perturbed in place).

    With ``return_crossings`` also returns a boolean array marking elements
    whose perturbation crossed a kink. With ``min_eps``, a crossing element is
    retried at eps/10, eps/100, ... down to ``min_eps`` before being marked.
    """
    flat = param.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    crossed = np.zeros(flat.size, dtype=bool)
    track = return_crossings or min_eps is not None
    base = _evaluate(fn)[1] if track else None
    for i in idx:
        orig = flat[i]

        def set_value(d, i=i, orig=orig):
            flat[i] = orig + d if d else orig

        out[i], crossed[i] = _refined(fn, set_value, eps, base, min_eps)
    if return_crossings:
        return out.reshape(param.shape), crossed.reshape(param.shape)
    return out.reshape(param.shape)


def finite_difference_check(fn, params, eps=1e-4, floor=1e-8, indices=None, strict=False, min_eps=None):
    """Max relative error between backprop and central differences.

    ``fn`` rebuilds the graph and returns the scalar loss Tensor; ``params``
    is one leaf Tensor or an iterable of them. Use float64 leaves for
    meaningful results. With ``strict``, raises KinkCrossedError if any
    perturbation crossed a non-smooth point (the comparison would be void);
    ``min_eps`` lets crossing elements retry at smaller steps first.
    """
    if not isinstance(params, (list, tuple)):
        params = [params]
    for p in params:
        p.grad = None
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        numeric, crossed = numeric_gradient(fn, p, eps, indices, return_crossings=True, min_eps=min_eps)
        if strict and crossed.any():
            raise KinkCrossedError(f"{int(crossed.sum())} element(s) of {p.name or 'parameter'} "
                                   f"cross a kink within eps={eps}")
        err = relative_error(analytic, numeric, floor)
        if indices is not None:
            err = err.reshape(-1)[list(indices)]
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def directional_check(fn, param, direction, eps=1e-4, floor=1e-8, min_eps=None):
    """Relative error of grad . v against a central difference of ``fn`` along ``v``.

    Moves every element of ``param`` at once, so one pair of evaluations
    covers the whole tensor. Requires ``param.grad`` from a prior backward.
    Returns ``(error, crossed)``.
    """
    v = np.asarray(direction, dtype=param.data.dtype)
    v = v / np.linalg.norm(v)
    orig = param.data.copy()

    def set_value(d):
        param.data[...] = orig + d * v if d else orig

    base = _evaluate(fn)[1]
    numeric, crossed = _refined(fn, set_value, eps, base, min_eps)
    analytic = float(np.sum(param.grad * v))
    return float(relative_error(analytic, numeric, floor)), crossed

"""Input gradients of critics, the gradient-norm constraint, and gradcheck."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor, grad, no_grad


def input_gradient(critic, x, create_graph: bool = True) -> Tensor:
    """Per-sample ``grad_x f(x)`` for a batch ``x`` of shape ``(N, ...)``.

    Samples do not interact inside the critic, so the gradient of the summed
    output with respect to the batch gives every per-sample gradient at once.
    With ``create_graph=True`` the result stays differentiable in the critic
    parameters, which requires a C^2 activation.
    """
    if create_graph and not getattr(critic, "is_smooth", True):
        raise ValueError(
            f"activation {critic.activation!r} is not C^2; second-order use needs tanh or softplus"
        )
    x = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    out = critic(x)
    (gx,) = grad(out.sum(), [x], create_graph=create_graph)
    return gx


def gradient_norm_sq(critic, x, create_graph: bool = True) -> Tensor:
    """``||grad_x f(x_i)||^2`` per sample, shape ``(N,)``."""
    gx = input_gradient(critic, x, create_graph=create_graph)
    axes = tuple(range(1, gx.ndim))
    return T.square(gx).sum(axis=axes)


def sobolev_constraint(critic, x, create_graph: bool = True) -> Tensor:
    """Empirical Sobolev norm ``(1/N) sum_i ||grad_x f(x_i)||^2``."""
    return gradient_norm_sq(critic, x, create_graph=create_graph).mean()


def grad_params_of_gradnorm(critic, batch) -> list[np.ndarray]:
    """``grad_p [(1/N) sum_i ||grad_x f_p(x_i)||^2]`` via double backward."""
    batch = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    omega = sobolev_constraint(critic, batch, create_graph=True)
    return [g.data for g in grad(omega, critic.parameters())]


def gradcheck(
    fn: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-6,
    analytic: np.ndarray | None = None,
) -> float:
    """Max over coordinates of ``|analytic - central| / (|analytic| + eps)``.

    `fn` maps a Tensor to a scalar Tensor.  When `analytic` is not given it
    is computed by reverse mode.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    point = np.array(point, dtype=np.float64)
    if analytic is None:
        x = Tensor(point, requires_grad=True)
        (g,) = grad(fn(x), [x])
        analytic = g.data
    analytic = np.asarray(analytic, dtype=np.float64).reshape(point.shape)
    numeric = np.empty_like(point)
    flat = point.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(Tensor(point)).data)
            flat[i] = orig - eps
            fm = float(fn(Tensor(point)).data)
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * eps)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + eps)))


def param_finite_difference(module, loss_fn: Callable[[], Tensor], eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss_fn()`` over the flattened parameters of `module`."""
    base = module.get_flat()
    out = np.empty_like(base)
    for i in range(base.size):
        v = base.copy()
        v[i] += eps
        module.set_flat(v)
        fp = float(loss_fn().data)
        v[i] -= 2 * eps
        module.set_flat(v)
        fm = float(loss_fn().data)
        out[i] = (fp - fm) / (2 * eps)
    module.set_flat(base)
    return out

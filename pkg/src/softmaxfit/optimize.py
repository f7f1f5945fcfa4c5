"""Monotone ascent for smooth concave objectives.

BFGS keeps an inverse-Hessian approximation of the negated objective;
``method="newton"`` uses the exact Hessian when the caller provides it.
Both take backtracking Armijo steps, so the objective never decreases by
more than its own rounding error.
"""

from dataclasses import dataclass

import numpy as np

__all__ = ["AscentResult", "maximize"]

ARMIJO_C = 1e-4
SHRINK = 0.5
# relative rounding level of the objective below which Armijo is meaningless
NOISE_REL = 1e-13


@dataclass(frozen=True)
class AscentResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    converged: bool
    iterations: int
    message: str
    history: tuple


def _inf_norm(g):
    return float(np.max(np.abs(g))) if g.size else 0.0


def maximize(fun, x0, grad, hess=None, method="bfgs", tol=1e-8, max_iter=500,
             max_backtracks=60):
    """Maximize ``fun`` from ``x0``.

    Parameters
    ----------
    fun, grad : callable
        Objective and its gradient.
    hess : callable, optional
        Exact Hessian, required for ``method="newton"``.
    method : {"bfgs", "newton"}
    tol : float
        Stop when the infinity norm of the gradient is at most ``tol``.
    max_iter : int
        Iteration cap; hitting it leaves ``converged`` false.

    Returns
    -------
    AscentResult
        ``history`` holds the objective value after every accepted step.
    """
    if method not in ("bfgs", "newton"):
        raise ValueError(f"unknown method {method!r}")
    if method == "newton" and hess is None:
        raise ValueError("newton needs a Hessian")
    x = np.array(x0, dtype=float)
    f = float(fun(x))
    g = np.asarray(grad(x), dtype=float)
    if not np.isfinite(f):
        raise FloatingPointError("objective is not finite at the initial point")
    history = [f]
    inv_h = None
    n = x.size
    for it in range(max_iter + 1):
        if _inf_norm(g) <= tol:
            return AscentResult(x, f, g, True, it, "gradient below tolerance", tuple(history))
        if it == max_iter:
            break
        direction = None
        if method == "newton":
            h = np.asarray(hess(x), dtype=float)
            try:
                chol = np.linalg.cholesky(-h)
                direction = np.linalg.solve(chol.T, np.linalg.solve(chol, g))
            except np.linalg.LinAlgError:
                direction = None
        if direction is None:
            if inv_h is None:
                # first step: steepest ascent scaled to unit length
                inv_h = np.eye(n) / max(np.linalg.norm(g), 1.0)
            direction = inv_h @ g
        slope = float(g @ direction)
        if slope <= 0:
            inv_h = np.eye(n) / max(np.linalg.norm(g), 1.0)
            direction = inv_h @ g
            slope = float(g @ direction)
        step = 1.0
        accepted = False
        noise = NOISE_REL * max(1.0, abs(f))
        g_norm = _inf_norm(g)
        for _ in range(max_backtracks):
            x_new = x + step * direction
            try:
                f_new = float(fun(x_new))
            except FloatingPointError:
                f_new = -np.inf
            if np.isfinite(f_new) and f_new >= f + ARMIJO_C * step * slope:
                g_new = np.asarray(grad(x_new), dtype=float)
                accepted = True
                break
            if np.isfinite(f_new) and step * slope <= noise and f_new >= f - noise:
                # the predicted gain is below the rounding level of f, so
                # judge the step by the gradient instead
                g_new = np.asarray(grad(x_new), dtype=float)
                if _inf_norm(g_new) < g_norm:
                    accepted = True
                    break
            step *= SHRINK
        if not accepted:
            return AscentResult(x, f, g, False, it, "line search failed", tuple(history))
        s = x_new - x
        y = g - g_new  # gradient change of the negated objective
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if inv_h is None or it == 0 and method == "bfgs":
                inv_h = np.eye(n) * (sy / float(y @ y))
            rho = 1.0 / sy
            hy = inv_h @ y
            inv_h = (inv_h - rho * (np.outer(s, hy) + np.outer(hy, s))
                     + (rho * rho * float(y @ hy) + rho) * np.outer(s, s))
        x, f, g = x_new, f_new, g_new
        history.append(f)
    return AscentResult(x, f, g, False, max_iter, "iteration limit reached", tuple(history))

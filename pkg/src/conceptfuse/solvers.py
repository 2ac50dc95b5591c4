"""Dense least-squares and quasi-Newton kernels used by the fusion engine.

Matrices are plain ``float64`` numpy arrays. Everything here is a pure
function of its inputs.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidMatrix, NumericalDivergence, ShapeError

DEFAULT_PINV_TOL = 1e-10


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Return ``m`` as a finite 2-D float64 array or raise."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidMatrix(f"{name} contains non-finite entries")
    return arr


def pseudoinverse(m, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse through the SVD.

    Singular values below ``tol * sigma_max`` are treated as zero.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if a.size == 0:
        return np.zeros((cols, rows))
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s[0] == 0.0:
        return np.zeros((cols, rows))
    keep = s > tol * s[0]
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (vt.T * inv_s) @ u.T


def solve_min_norm_ls(gram, cross, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Minimum-Frobenius-norm ``D`` minimizing ``||D @ gram - cross||``.

    The result is ``cross @ pinv(gram)``; for a PSD Gram matrix this is also
    the minimum-norm stationary point of ``tr(D G D^T) - 2 tr(D C^T)``.
    """
    g = as_matrix(gram, "gram")
    c = as_matrix(cross, "cross")
    if g.shape[0] != g.shape[1]:
        raise ShapeError(f"gram must be square, got {g.shape}")
    if c.shape[1] != g.shape[0]:
        raise ShapeError(f"cross has {c.shape[1]} columns but gram is {g.shape[0]}x{g.shape[0]}")
    return c @ pseudoinverse(g, tol)


@dataclass(frozen=True)
class QuadraticObjective:
    """``f(D) = tr(D G D^T) - 2 tr(D C^T) + constant`` over ``d x k`` matrices ``D``."""

    gram: np.ndarray
    cross: np.ndarray
    constant: float = 0.0

    def __post_init__(self):
        g = as_matrix(self.gram, "gram")
        c = as_matrix(self.cross, "cross")
        if g.shape[0] != g.shape[1] or c.shape[1] != g.shape[0]:
            raise ShapeError(f"gram {g.shape} incompatible with cross {c.shape}")
        scale = max(float(np.max(np.abs(g))) if g.size else 0.0, 1e-300)
        if np.max(np.abs(g - g.T), initial=0.0) > 1e-10 * scale:
            raise InvalidMatrix("gram is not symmetric")
        if g.size:
            lowest = np.linalg.eigvalsh(0.5 * (g + g.T))[0]
            if lowest < -1e-8 * max(float(np.max(np.diag(g))), 0.0):
                raise InvalidMatrix(f"gram is not PSD (eigenvalue {lowest:.3e})")
        object.__setattr__(self, "gram", g)
        object.__setattr__(self, "cross", c)
        object.__setattr__(self, "constant", float(self.constant))

    @property
    def shape(self) -> tuple[int, int]:
        return self.cross.shape

    def value(self, d: np.ndarray) -> float:
        dg = d @ self.gram
        return float(np.sum(dg * d) - 2.0 * np.sum(d * self.cross) + self.constant)

    def grad(self, d: np.ndarray) -> np.ndarray:
        return 2.0 * (d @ self.gram - self.cross)

    def solve(self, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
        return solve_min_norm_ls(self.gram, self.cross, tol)


# ---------------------------------------------------------------------------
# L-BFGS


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic through (a, fa, ga), (b, fb, gb), or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    x = b - (b - a) * (gb + d2 - d1) / denom
    return x if np.isfinite(x) else None


def _strong_wolfe(phi, f0, g0, step, c1, c2, max_evals=30):
    """Line search along a descent direction; returns (step, f, g_vec, derphi).

    ``phi(alpha)`` returns ``(f, grad_vector, directional_derivative)``.
    Follows the bracketing/zoom scheme of Nocedal & Wright (Alg. 3.5/3.6).
    """

    def zoom(lo, f_lo, d_lo, hi, f_hi, d_hi, evals):
        best = None
        while evals < max_evals:
            x = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            left, right = min(lo, hi), max(lo, hi)
            margin = 0.1 * (right - left)
            if x is None or not (left + margin <= x <= right - margin):
                x = 0.5 * (lo + hi)
            fx, gx, dx = phi(x)
            evals += 1
            if fx > f0 + c1 * x * g0 or fx >= f_lo:
                hi, f_hi, d_hi = x, fx, dx
            else:
                if abs(dx) <= -c2 * g0:
                    return x, fx, gx, dx
                if dx * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = x, fx, dx
                best = (x, fx, gx, dx)
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        return best

    prev, f_prev, d_prev = 0.0, f0, g0
    alpha = step
    evals = 0
    best = None
    while evals < max_evals:
        fa, ga, da = phi(alpha)
        evals += 1
        if fa > f0 + c1 * alpha * g0 or (evals > 1 and fa >= f_prev):
            hit = zoom(prev, f_prev, d_prev, alpha, fa, da, evals)
            return hit if hit is not None else best
        best = (alpha, fa, ga, da)
        if abs(da) <= -c2 * g0:
            return best
        if da >= 0:
            hit = zoom(alpha, fa, da, prev, f_prev, d_prev, evals)
            return hit if hit is not None else best
        prev, f_prev, d_prev = alpha, fa, da
        alpha *= 2.0
    return best


def lbfgs_minimize(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    init,
    steps: int = 100,
    history: int = 10,
    tol: float = 1e-10,
    c1: float = 1e-4,
    c2: float = 0.9,
    return_info: bool = False,
):
    """Minimize ``f`` from ``init`` with limited-memory BFGS.

    ``f`` and ``grad`` take arrays of ``init``'s shape. Iteration stops after
    ``steps`` accepted iterations, when the gradient norm drops below ``tol``,
    or when the line search can make no further progress. Only iterates that
    satisfy the sufficient-decrease condition are accepted, so the objective
    never increases.

    With ``return_info=True`` returns ``(x, info)`` where ``info`` holds the
    iteration count and the objective trace.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    x0 = np.array(init, dtype=np.float64)
    shape = x0.shape
    x = x0.ravel().copy()

    def fg(v):
        fv = float(f(v.reshape(shape)))
        gv = np.asarray(grad(v.reshape(shape)), dtype=np.float64).ravel()
        return fv, gv

    info = {"iterations": 0, "trace": []}
    if steps == 0:
        return (x0, info) if return_info else x0

    fx, gx = fg(x)
    if not np.isfinite(fx) or not np.all(np.isfinite(gx)):
        raise NumericalDivergence("non-finite objective or gradient at the initial point", x0)
    info["trace"].append(fx)

    s_hist: deque = deque(maxlen=history)
    y_hist: deque = deque(maxlen=history)
    rho_hist: deque = deque(maxlen=history)

    for it in range(steps):
        if np.linalg.norm(gx) < tol:
            break
        # two-loop recursion
        q = gx.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            gamma = 1.0 / max(np.linalg.norm(gx), 1e-300)
        r = gamma * q
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ r)
            r += s * (a - b)
        direction = -r
        slope = gx @ direction
        if not slope < 0:
            # lost descent; restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()
            direction = -gx / max(np.linalg.norm(gx), 1e-300)
            slope = gx @ direction

        def phi(alpha, x=x, direction=direction):
            fv, gv = fg(x + alpha * direction)
            if not (np.isfinite(fv) and np.all(np.isfinite(gv))):
                raise NumericalDivergence(
                    f"non-finite objective or gradient at step length {alpha:g}", x.reshape(shape)
                )
            return fv, gv, gv @ direction

        found = _strong_wolfe(phi, fx, slope, 1.0, c1, c2)
        if found is None:
            break
        alpha, f_new, g_new, _ = found
        if not f_new <= fx:
            break
        s = alpha * direction
        y = g_new - gx
        sy = s @ y
        x = x + s
        fx, gx = f_new, g_new
        info["iterations"] = it + 1
        info["trace"].append(fx)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)

    out = x.reshape(shape)
    return (out, info) if return_info else out

"""AR(1) working-correlation estimating equations for one latent class.

For subject i with Pearson residuals ``e = A^{-1/2}(y - mu)`` and AR(1)
correlation ``R(alpha)``, the estimating function has three blocks::

    U1 = X' A^{1/2} R^{-1} e / phi
    U2 = (2 phi alpha (n-1)/(1-alpha^2) - e' dR^{-1}/dalpha e) / phi
    U3 = (e' R^{-1} e / phi - n) / phi

``R^{-1}`` is tridiagonal, so every quadratic form reduces to three sums:
``S0 = sum e_j^2``, ``S_end = e_1^2 + e_n^2`` and ``S1 = sum e_j e_{j+1}``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import xlogy

from .process import ClassParams, PanelArrays, PanelData, SubjectRecord, max_alpha

logger = logging.getLogger(__name__)

__all__ = [
    "ar1_inverse",
    "ar1_inverse_deriv",
    "ar1_apply",
    "score_u",
    "score_contributions",
    "EeState",
    "solve_weighted_ee",
    "ee_residual",
    "poisson_irls",
    "poisson_deviance",
    "EE_TOL",
    "ALPHA_CAP",
]

EE_TOL = 1e-8
MAX_CYCLES = 100
ALPHA_CAP = 0.999
ALPHA_EPS = 1e-6
PHI_FLOOR = 1.0 + 1e-6
# beta scoring steps per block cycle; the outer cycle loop finishes convergence
NEWTON_PER_CYCLE = 1


def _check_alpha(alpha):
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")


def ar1_inverse(alpha: float, n: int) -> np.ndarray:
    """Inverse of the AR(1) correlation matrix ``R[k, j] = alpha**|k-j|``."""
    _check_alpha(alpha)
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return np.ones((1, 1))
    d = 1.0 - alpha ** 2
    diag = np.full(n, (1.0 + alpha ** 2) / d)
    diag[[0, -1]] = 1.0 / d
    off = np.full(n - 1, -alpha / d)
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


def ar1_inverse_deriv(alpha: float, n: int) -> np.ndarray:
    """Elementwise derivative of :func:`ar1_inverse` with respect to alpha."""
    _check_alpha(alpha)
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return np.zeros((1, 1))
    d2 = (1.0 - alpha ** 2) ** 2
    diag = np.full(n, 4.0 * alpha / d2)
    diag[[0, -1]] = 2.0 * alpha / d2
    off = np.full(n - 1, -(1.0 + alpha ** 2) / d2)
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


def ar1_apply(v, alpha: float, n, mask) -> np.ndarray:
    """Apply each subject's ``R^{-1}`` along axis 1 of left-aligned padded ``v``.

    ``v`` has shape (m, T) or (m, T, k); padded cells must be zero.
    """
    n = np.asarray(n)
    pos = np.arange(np.shape(v)[1])[None, :]
    interior = ((pos > 0) & (pos < n[:, None] - 1)).astype(float)
    return _ar1_apply(np.asarray(v, dtype=float), alpha, interior, np.asarray(mask, float), n >= 2)


def _ar1_apply(v, alpha, interior, maskf, multi):
    if alpha == 0.0:
        return v.copy()
    a2 = alpha ** 2
    if v.ndim > 2:
        interior, maskf = interior[..., None], maskf[..., None]
    nb = np.zeros_like(v)
    nb[:, 1:] = v[:, :-1]
    nb[:, :-1] += v[:, 1:]
    out = (v + a2 * interior * v - alpha * nb) * (maskf / (1.0 - a2))
    if not multi.all():
        out[~multi] = v[~multi]
    return out


def _apply_arrays(v, alpha, arrays):
    return _ar1_apply(v, alpha, *arrays.ar1_structure)


def _xt(arrays, v):
    """``sum_t x_it * v_it`` per subject, shape (m, p)."""
    return (arrays.x * v[..., None]).sum(axis=1)


def score_u(subject: SubjectRecord, params: ClassParams) -> np.ndarray:
    """Estimating function ``U_i(theta)`` of one subject, length p + 2.

    Reference implementation with explicit matrices.
    """
    x = subject.x
    y = subject.y.astype(float)
    n = subject.n
    a, phi = params.alpha, params.phi
    mu = params.mean_curve(x)
    sq = np.sqrt(mu)
    e = (y - mu) / sq
    r_inv = ar1_inverse(a, n)
    dr_inv = ar1_inverse_deriv(a, n)
    u1 = x.T @ (sq * (r_inv @ e)) / phi
    u2 = (2.0 * phi * a * (n - 1) / (1.0 - a ** 2) - e @ dr_inv @ e) / phi
    u3 = (e @ r_inv @ e / phi - n) / phi
    return np.concatenate([u1, [u2, u3]])


# ---------------------------------------------------------------------------
# vectorised kernels


@dataclass
class _Resid:
    mu: np.ndarray
    e: np.ndarray
    s0: np.ndarray
    s_end: np.ndarray
    s_int: np.ndarray
    s1: np.ndarray


def _residuals(arrays: PanelArrays, beta) -> _Resid:
    mu = arrays.mu(beta)
    e = np.where(arrays.mask, (arrays.y - mu) / np.sqrt(mu), 0.0)
    e2 = e * e
    s0 = e2.sum(axis=1)
    idx = np.arange(e.shape[0])
    multi = arrays.n >= 2
    s_end = np.where(multi, e2[:, 0] + e2[idx, arrays.n - 1], 0.0)
    s_int = np.where(multi, s0 - s_end, 0.0)
    s1 = (e[:, 1:] * e[:, :-1]).sum(axis=1)
    return _Resid(mu, e, s0, s_end, s_int, s1)


def _quad(r: _Resid, n, alpha):
    """Per-subject ``e'R^{-1}e`` and ``e'(dR^{-1}/dalpha)e``."""
    a2 = alpha ** 2
    d = 1.0 - a2
    multi = n >= 2
    q = np.where(multi, (r.s0 + a2 * r.s_int - 2.0 * alpha * r.s1) / d, r.s0)
    dq = np.where(
        multi, (2.0 * alpha * r.s_end + 4.0 * alpha * r.s_int - 2.0 * (1.0 + a2) * r.s1) / d ** 2, 0.0
    )
    return q, dq


def _u_blocks(arrays, beta, alpha, phi, r=None):
    r = _residuals(arrays, beta) if r is None else r
    n = arrays.n
    v = _apply_arrays(r.e, alpha, arrays)
    u1 = _xt(arrays, np.sqrt(r.mu) * v) / phi
    q, dq = _quad(r, n, alpha)
    u2 = (2.0 * phi * alpha * (n - 1) / (1.0 - alpha ** 2) - dq) / phi
    u3 = (q / phi - n) / phi
    return u1, u2, u3, r, q


def score_contributions(panel, params: ClassParams) -> np.ndarray:
    """``U_i(theta)`` for every subject, shape (m, p + 2)."""
    a = panel.arrays if isinstance(panel, PanelData) else panel
    u1, u2, u3, _, _ = _u_blocks(a, params.beta, params.alpha, params.phi)
    return np.column_stack([u1, u2, u3])


def ee_residual(panel, weights, params: ClassParams) -> float:
    """``max |sum_i w_i U_i| / sum_i w_i``."""
    w = np.asarray(weights, dtype=float)
    u = score_contributions(panel, params)
    return float(np.max(np.abs(w @ u)) / w.sum())


@dataclass
class EeState:
    """Result of a weighted estimating-equation solve for one class."""

    params: ClassParams
    weights: np.ndarray = field(repr=False)
    residual_norm: float
    cycles: int = 0
    converged: bool = True
    alpha_fallback: bool = False
    phi_floored: bool = False
    frozen: bool = False


def _beta_step(a: PanelArrays, w, beta, alpha, tol, max_newton=25):
    W = w.sum()

    def u1_sum(b):
        r = _residuals(a, b)
        v = _apply_arrays(r.e, alpha, a)
        return w @ _xt(a, np.sqrt(r.mu) * v), r

    g, r = u1_sum(beta)
    gnorm = np.max(np.abs(g)) / W
    for _ in range(max_newton):
        if gnorm <= tol:
            break
        z = a.x * np.sqrt(r.mu)[..., None]
        rz = _apply_arrays(z, alpha, a)
        zw = (z * w[:, None, None]).reshape(-1, z.shape[2])
        info = zw.T @ rz.reshape(-1, z.shape[2])
        try:
            step = np.linalg.solve(info, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, g, rcond=None)[0]
        t = 1.0
        for _ in range(40):
            b_new = beta + t * step
            g_new, r_new = u1_sum(b_new)
            n_new = np.max(np.abs(g_new)) / W
            if np.all(np.isfinite(g_new)) and n_new < gnorm:
                break
            t *= 0.5
        else:
            break
        beta, g, r, gnorm = b_new, g_new, r_new, n_new
    return beta


def _alpha_sums(a: PanelArrays, w, beta):
    r = _residuals(a, beta)
    return (
        float(w @ np.maximum(a.n - 1, 0)),
        float(w @ r.s_end),
        float(w @ r.s_int),
        float(w @ r.s1),
        r,
    )


def _alpha_root(sums, phi, cap, current):
    """Root of the weighted U2 sum on [0, cap]; falls back to the best endpoint."""
    npairs, s_end, s_int, s1 = sums

    def f(al):
        d = 1.0 - al * al
        dq = (2.0 * al * s_end + 4.0 * al * s_int - 2.0 * (1.0 + al * al) * s1) / d ** 2
        return (2.0 * phi * al * npairs / d - dq) / phi

    if npairs == 0:
        return 0.0, False
    grid = np.linspace(0.0, cap, 32)
    vals = np.array([f(g) for g in grid])
    zero = np.flatnonzero(vals == 0.0)
    brackets = np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)
    roots = list(grid[zero])
    for k in brackets:
        roots.append(brentq(f, grid[k], grid[k + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps))
    if roots:
        roots = np.asarray(roots)
        return float(roots[np.argmin(np.abs(roots - current))]), False
    ends = np.array([0.0, cap])
    return float(ends[np.argmin(np.abs([vals[0], vals[-1]]))]), True


def solve_weighted_ee(
    panel,
    weights,
    init: ClassParams,
    tol: float = EE_TOL,
    max_cycles: int = MAX_CYCLES,
) -> EeState:
    """Solve ``sum_i w_i U_i(theta) = 0`` by block coordinate updates.

    Each cycle takes damped Fisher-scoring steps for beta, then a bracketed
    root search for alpha on ``[0, min(alpha_max, 0.999) - 1e-6]``, then the
    closed-form ``phi = sum w_i Q_i / sum w_i n_i``.
    """
    a = panel.arrays if isinstance(panel, PanelData) else panel
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    W = w.sum()
    m = w.shape[0]
    if W <= 1e-6 * m or W <= 0:
        return EeState(init, w, float("nan"), converged=False, frozen=True)

    beta, alpha, phi = np.array(init.beta, dtype=float), init.alpha, init.phi
    res = ee_residual(a, w, init)
    if res <= tol:
        return EeState(init, w, res, cycles=0)

    fallback = floored = False
    cycles = 0
    for cycles in range(1, max_cycles + 1):
        beta = _beta_step(a, w, beta, alpha, tol * 0.1, max_newton=NEWTON_PER_CYCLE)
        cap = min(max_alpha(beta, a), ALPHA_CAP) - ALPHA_EPS
        cap = max(cap, 0.0)
        npairs, s_end, s_int, s1, r = _alpha_sums(a, w, beta)
        alpha, fallback = _alpha_root((npairs, s_end, s_int, s1), phi, cap, min(alpha, cap))
        q, _ = _quad(r, a.n, alpha)
        phi = float(w @ q) / float(w @ a.n)
        floored = phi < PHI_FLOOR
        phi = max(phi, PHI_FLOOR)
        cur = ClassParams.from_phi(beta, alpha, phi)
        res = ee_residual(a, w, cur)
        if res <= tol:
            break
        # residual left only in clamped blocks cannot shrink further
        if fallback or floored:
            u = score_contributions(a, cur)
            core = np.abs(w @ u)[: a.x.shape[2]] / W
            if np.max(core) <= tol:
                break
    converged = res <= tol
    if not converged and not (fallback or floored):
        logger.warning("weighted EE did not converge in %d cycles (residual %.3g)", cycles, res)
    return EeState(
        cur,
        w,
        res,
        cycles=cycles,
        converged=converged,
        alpha_fallback=fallback,
        phi_floored=floored,
    )


# ---------------------------------------------------------------------------
# Poisson regression used for initialisation


def poisson_irls(panel, weights=None, tol=1e-10, max_iter=100) -> np.ndarray:
    """Maximum-likelihood Poisson regression with log link (IRLS).

    Subjects are weighted by ``weights`` (default 1).  Iterates are
    step-halved so the log-likelihood never decreases; when the maximum lies
    at infinity (e.g. all counts zero) the iteration stops at ``max_iter``.
    """
    a = panel.arrays if isinstance(panel, PanelData) else panel
    m = a.y.shape[0]
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=float)
    X = a.x[a.mask]
    y = a.y[a.mask]
    ww = np.broadcast_to(w[:, None], a.mask.shape)[a.mask]
    if np.linalg.matrix_rank(X[ww > 0]) < X.shape[1]:
        raise np.linalg.LinAlgError("Poisson design is rank deficient")

    def loglik(b):
        eta = X @ b
        return float(ww @ (y * eta - np.exp(eta)))

    ybar = max((ww @ y) / ww.sum(), 1e-8)
    beta = np.zeros(X.shape[1])
    beta[0] = np.log(ybar) if np.allclose(X[:, 0], 1.0) else 0.0
    ll = loglik(beta)
    for _ in range(max_iter):
        mu = np.exp(X @ beta)
        grad = X.T @ (ww * (y - mu))
        info = (X * (ww * mu)[:, None]).T @ X
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        t = 1.0
        for _ in range(50):
            b_new = beta + t * step
            ll_new = loglik(b_new)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            break
        done = np.max(np.abs(b_new - beta)) < tol * (1.0 + np.max(np.abs(beta)))
        beta, ll = b_new, ll_new
        if done:
            break
    return beta


def poisson_deviance(panel, beta) -> np.ndarray:
    """Per-subject ``D(y_i; beta) = 2 sum_j [y_ij log(y_ij / mu_ij) - (y_ij - mu_ij)]``."""
    a = panel.arrays if isinstance(panel, PanelData) else panel
    eta = a.x @ np.asarray(beta, dtype=float)
    term = xlogy(a.y, a.y) - a.y * eta - a.y + np.exp(eta)
    return 2.0 * np.where(a.mask, term, 0.0).sum(axis=1)

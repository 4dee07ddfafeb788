"""Singular value decomposition and the differentiable rank proxy.

The solver is a one-sided Jacobi SVD written here rather than taken from a
library: the matrices involved are at most a few hundred rows by 128 columns,
and Jacobi gives high relative accuracy on exactly the near-rank-deficient
inputs the consistency energy drives toward. numpy is used only for the
column arithmetic.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _bump, _node

__all__ = ["svd", "second_singular_value", "SvdConvergenceError"]

# Two singular values closer than this are treated as a degenerate (ties)
# case for gradient purposes; the solver's returned vectors then act as a
# subgradient choice.
DEGENERATE_GAP = 1e-9

_JACOBI_TOL = 1e-13
_MAX_SWEEPS = 60


class SvdConvergenceError(RuntimeError):
    pass


def _one_sided_jacobi(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD of a (m, n) matrix with m >= n via one-sided Jacobi rotations.

    Returns (u, s, v) with a = u @ diag(s) @ v.T, s descending and >= 0.
    """
    m, n = a.shape
    work = a.copy()
    # Scale to O(1) before iterating: with entries around 1e-108 the squared
    # column products in the convergence test underflow to zero and the sweep
    # loop spins forever. The scale multiplies back onto sigma at the end.
    scale = np.abs(work).max()
    if scale > 0.0 and (scale < 1e-100 or scale > 1e100):
        work /= scale
    else:
        scale = 1.0
    v = np.eye(n)
    for _ in range(_MAX_SWEEPS):
        # Columns below the noise floor of the matrix are rounding debris from
        # earlier rotations; zero them outright or they stall the sweep loop
        # by staying correlated with the dominant column forever.
        norms = np.linalg.norm(work, axis=0)
        floor = max(m, n) * np.finfo(np.float64).eps * norms.max()
        work[:, norms <= floor] = 0.0
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                cp = work[:, p]
                cq = work[:, q]
                app = cp @ cp
                aqq = cq @ cq
                apq = cp @ cq
                if app == 0.0 or aqq == 0.0:
                    continue
                if abs(apq) <= _JACOBI_TOL * np.sqrt(app * aqq):
                    continue
                rotated = True
                tau = (aqq - app) / (2.0 * apq)
                if tau == 0.0:
                    t = 1.0
                elif abs(tau) > 1e150:  # exact formula overflows in tau*tau
                    t = 0.5 / tau
                else:
                    t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * cp - s * cq
                new_q = s * cp + c * cq
                work[:, p] = new_p
                work[:, q] = new_q
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            break
    else:
        raise SvdConvergenceError(
            f"one-sided Jacobi did not converge in {_MAX_SWEEPS} sweeps on {a.shape}"
        )

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]

    u = np.zeros_like(work)
    tiny = max(m, n) * np.finfo(np.float64).eps * (sigma[0] if sigma[0] > 0 else 1.0)
    for j in range(n):
        if sigma[j] > tiny:
            u[:, j] = work[:, j] / sigma[j]
    # Complete columns for (near-)zero singular values so u stays orthonormal.
    for j in range(n):
        if sigma[j] > tiny:
            continue
        _bump("svd_null_completion")
        for seed in range(m + n):
            cand = np.zeros(m)
            cand[seed % m] = 1.0
            cand -= u @ (u.T @ cand)
            norm = np.linalg.norm(cand)
            if norm > 0.5:
                u[:, j] = cand / norm
                break
        sigma[j] = 0.0
    return u, sigma * scale, v


def svd(matrix: Tensor | np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Thin SVD of a rank-2 tensor: (m, n) -> U (m, r), S (r,), V (n, r).

    Singular values come back non-negative and non-increasing; U and V have
    orthonormal columns. The factors are plain (non-differentiating) tensors;
    use :func:`second_singular_value` for the differentiable rank proxy.
    """
    m_in = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix, dtype=np.float64)
    if m_in.ndim != 2:
        raise ValueError(f"svd: expected a rank-2 matrix, got shape {m_in.shape}")
    if m_in.shape[0] < 1 or m_in.shape[1] < 1:
        raise ValueError("svd: empty matrix")
    if not np.all(np.isfinite(m_in)):
        raise FloatingPointError("svd: non-finite input")

    if m_in.shape[0] >= m_in.shape[1]:
        u, s, v = _one_sided_jacobi(m_in)
    else:
        v, s, u = _one_sided_jacobi(m_in.T)
    return Tensor(u), Tensor(s), Tensor(v)


def second_singular_value(matrix: Tensor | np.ndarray) -> Tensor:
    """sigma_2 of a matrix, differentiable with d(sigma_2)/dM = u2 v2^T.

    Matrices with fewer than 2 rows or columns have no second singular value;
    the proxy is defined as 0 there with zero gradient (a single row is
    trivially consistent).
    """
    m = ad.as_tensor(matrix)
    if m.data.ndim != 2:
        raise ValueError(f"second_singular_value: rank-2 input required, got {m.data.shape}")
    if min(m.data.shape) < 2:
        return _node(np.asarray(0.0), (m,))  # zero-gradient leaf over m

    u, s, v = svd(m)
    sig = s.data
    if (sig[0] - sig[1] < DEGENERATE_GAP) or (len(sig) > 2 and sig[1] - sig[2] < DEGENERATE_GAP):
        _bump("sigma2_degenerate_gap")

    outer = np.outer(u.data[:, 1], v.data[:, 1])
    out = _node(np.asarray(sig[1]), (m,))

    def backward():
        if m.requires_grad:
            m._accumulate(float(out.grad) * outer)

    out._backward = backward
    return out

"""Lawson-Hanson active-set solver for non-negative least squares."""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError, ValidationError


def lawson_hanson(A, b, max_iter=None, tol=1e-12):
    """Solve ``min ||A x - b||`` subject to ``x >= 0``.

    Parameters
    ----------
    A : array_like, shape (m, n)
    b : array_like, shape (m,)
    max_iter : int, optional
        Cap on the total number of passive-set updates. Defaults to ``3 * n``.
    tol : float
        Dual tolerance, relative to ``||b||`` after the columns of `A` have
        been scaled to unit norm.

    Returns
    -------
    x : ndarray, shape (n,)
    rnorm : float
        Euclidean norm of the residual.

    Raises
    ------
    ConvergenceError
        When the iteration cap is reached before the KKT conditions hold.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or b.shape != (A.shape[0],):
        raise ValidationError(f"incompatible shapes {A.shape} and {b.shape}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ValidationError("non-finite input to NNLS")
    m, n = A.shape
    if max_iter is None:
        max_iter = 3 * n

    # Unit-norm columns make the dual tolerance independent of channel units.
    norms = np.linalg.norm(A, axis=0)
    norms[norms == 0] = 1.0
    As = A / norms
    bnorm = np.linalg.norm(b)
    dual_tol = tol * max(bnorm, np.finfo(float).tiny)

    z = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = As.T @ b
    iterations = 0

    def solve_passive(mask):
        out = np.zeros(n)
        if mask.any():
            out[mask] = np.linalg.lstsq(As[:, mask], b, rcond=None)[0]
        return out

    while True:
        candidates = ~passive & (w > dual_tol)
        if not candidates.any():
            break
        if iterations >= max_iter:
            raise ConvergenceError(
                f"NNLS did not converge in {max_iter} iterations",
                residual=float(np.linalg.norm(As @ z - b)),
            )
        iterations += 1

        # Pick the most promising index; skip ones that rounding sends negative.
        order = np.argsort(np.where(candidates, -w, np.inf))
        trial = None
        for j in order[: candidates.sum()]:
            mask = passive.copy()
            mask[j] = True
            s = solve_passive(mask)
            if s[j] > 0:
                trial, passive = s, mask
                break
        if trial is None:
            break

        while np.any(trial[passive] <= 0):
            if iterations >= max_iter:
                raise ConvergenceError(
                    f"NNLS did not converge in {max_iter} iterations",
                    residual=float(np.linalg.norm(As @ z - b)),
                )
            iterations += 1
            blocking = passive & (trial <= 0)
            step = np.min(z[blocking] / (z[blocking] - trial[blocking]))
            z = z + step * (trial - z)
            passive &= z > 0
            z[~passive] = 0.0
            trial = solve_passive(passive)

        z = trial
        w = As.T @ (b - As @ z)

    x = z / norms
    return x, float(np.linalg.norm(A @ x - b))


def kkt_violation(A, b, x):
    """Largest violation of the NNLS optimality conditions at `x`.

    Returned values are relative to ``||b||`` with unit-norm columns, so they
    can be compared against the solver's dual tolerance.
    """
    A = np.asarray(A, dtype=float)
    norms = np.linalg.norm(A, axis=0)
    norms[norms == 0] = 1.0
    grad = (A / norms).T @ (b - A @ x)
    scale = max(np.linalg.norm(b), np.finfo(float).tiny)
    free = x > 0
    violations = np.concatenate([
        np.abs(grad[free]),          # stationarity on the free set
        np.maximum(grad[~free], 0),  # dual feasibility on the active set
        np.maximum(-x, 0) * norms,   # primal feasibility
    ])
    return float(violations.max(initial=0.0) / scale)


def lawson_hanson_batch(A, B, max_iter=None, tol=1e-12):
    """Run :func:`lawson_hanson` on every row of `B` against the same `A`.

    The iterations are those of the scalar solver, advanced for all
    right-hand sides at once. Least-squares solves on a passive set are
    shared between rows with the same set.

    Parameters
    ----------
    A : array_like, shape (m, n)
    B : array_like, shape (k, m)

    Returns
    -------
    X : ndarray, shape (k, n)
        Solutions; rows that hit `max_iter` are NaN.
    converged : ndarray of bool, shape (k,)
    """
    A = np.asarray(A, dtype=float)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.ndim != 2 or B.shape[1] != A.shape[0]:
        raise ValidationError(f"incompatible shapes {A.shape} and {B.shape}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValidationError("non-finite input to NNLS")
    k = B.shape[0]
    m, n = A.shape
    if max_iter is None:
        max_iter = 3 * n

    norms = np.linalg.norm(A, axis=0)
    norms[norms == 0] = 1.0
    As = A / norms
    dual_tol = tol * np.maximum(np.linalg.norm(B, axis=1), np.finfo(float).tiny)
    bits = 1 << np.arange(n)
    pinvs = {}

    def solve(masks, rhs):
        out = np.zeros((len(masks), n))
        codes = masks @ bits
        for code in np.unique(codes):
            cols = (code & bits) > 0
            if not cols.any():
                continue
            if code not in pinvs:
                pinvs[code] = np.linalg.pinv(As[:, cols])
            sel = codes == code
            out[np.ix_(sel, cols)] = rhs[sel] @ pinvs[code].T
        return out

    Z = np.zeros((k, n))
    passive = np.zeros((k, n), dtype=bool)
    iterations = np.zeros(k, dtype=int)
    active = np.ones(k, dtype=bool)
    failed = np.zeros(k, dtype=bool)

    while True:
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        W = (B[idx] - Z[idx] @ As.T) @ As
        cand = ~passive[idx] & (W > dual_tol[idx, None])
        has = cand.any(axis=1)
        active[idx[~has]] = False
        idx, W, cand = idx[has], W[has], cand[has]
        over = iterations[idx] >= max_iter
        failed[idx[over]] = True
        active[idx[over]] = False
        idx, W, cand = idx[~over], W[~over], cand[~over]
        if idx.size == 0:
            continue
        iterations[idx] += 1

        # Most promising candidate per row; skip ones that rounding sends negative.
        trial = np.zeros((len(idx), n))
        new_passive = passive[idx].copy()
        chosen = np.zeros(len(idx), dtype=bool)
        remaining = cand.copy()
        pending = np.arange(len(idx))
        while pending.size:
            j = np.argmax(np.where(remaining[pending], W[pending], -np.inf), axis=1)
            masks = passive[idx[pending]].copy()
            masks[np.arange(len(pending)), j] = True
            s = solve(masks, B[idx[pending]])
            ok = s[np.arange(len(pending)), j] > 0
            good = pending[ok]
            trial[good], new_passive[good], chosen[good] = s[ok], masks[ok], True
            bad = pending[~ok]
            remaining[bad, j[~ok]] = False
            pending = bad[remaining[bad].any(axis=1)]
        active[idx[~chosen]] = False
        idx, trial, P = idx[chosen], trial[chosen], new_passive[chosen]
        z = Z[idx]
        alive = np.ones(len(idx), dtype=bool)

        while True:
            r = np.flatnonzero(alive & (P & (trial <= 0)).any(axis=1))
            if r.size == 0:
                break
            over = iterations[idx[r]] >= max_iter
            if over.any():
                failed[idx[r[over]]] = True
                active[idx[r[over]]] = False
                alive[r[over]] = False
                r = r[~over]
                if r.size == 0:
                    continue
            iterations[idx[r]] += 1
            blocking = P[r] & (trial[r] <= 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(blocking, z[r] / (z[r] - trial[r]), np.inf)
            step = ratio.min(axis=1)
            zr = z[r] + step[:, None] * (trial[r] - z[r])
            pr = P[r] & (zr > 0)
            zr[~pr] = 0.0
            z[r], P[r] = zr, pr
            trial[r] = solve(pr, B[idx[r]])

        Z[idx[alive]] = trial[alive]
        passive[idx[alive]] = P[alive]

    X = Z / norms
    X[failed] = np.nan
    return X, ~failed

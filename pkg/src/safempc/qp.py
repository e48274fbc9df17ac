"""Dense primal-dual interior-point solver for convex QP subproblems.

Solves ``min 0.5 d'Hd + g'd  s.t.  A d = b,  G d >= h`` with Mehrotra's
predictor-corrector.  ``H`` must be positive definite on the null space of
``A``; the SQP driver regularises it before calling in here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


@dataclass
class QpResult:
    d: np.ndarray
    y: np.ndarray  # equality multipliers
    lam: np.ndarray  # inequality multipliers, >= 0
    converged: bool
    iterations: int


def solve_qp(H, g, A, b, G, h, tol: float = 1e-10, max_iter: int = 80, polish_from: float = 1e-6) -> QpResult:
    n = g.shape[0]
    me = A.shape[0]
    mi = G.shape[0]

    d = np.zeros(n)
    y = np.zeros(me)
    if mi:
        s = np.maximum(G @ d - h, 1.0)
        lam = np.ones(mi)
    else:
        s = lam = np.zeros(0)

    scale = 1.0 + max(np.max(np.abs(g), initial=0.0), np.max(np.abs(H), initial=0.0))
    K = np.zeros((n + me, n + me))
    K[n:, :n] = A
    K[:n, n:] = A.T
    if me:
        K[n:, n:] = -1e-14 * np.eye(me)
    rhs = np.empty(n + me)

    for it in range(1, max_iter + 1):
        r_d = H @ d + g - A.T @ y - (G.T @ lam if mi else 0.0)
        r_e = A @ d - b
        r_i = G @ d - s - h if mi else np.zeros(0)
        mu = float(s @ lam) / mi if mi else 0.0
        err = max(
            np.max(np.abs(r_d), initial=0.0) / scale,
            np.max(np.abs(r_e), initial=0.0),
            np.max(np.abs(r_i), initial=0.0),
            mu,
        )
        if err <= tol:
            return _polish(H, g, A, b, G, h, QpResult(d, y, lam, True, it - 1), tol) or QpResult(d, y, lam, True, it - 1)
        if err <= polish_from:
            # degenerate problems can stall near the solution; an exact solve
            # on the identified active set usually finishes the job
            polished = _polish(H, g, A, b, G, h, QpResult(d, y, lam, True, it - 1), tol)
            if polished is not None:
                return polished
        if not np.isfinite(err) or (mi and np.max(lam) > 1e14):
            break

        # slack and inequality multipliers eliminated into the primal block
        K[:n, :n] = H + (G.T * (lam / np.maximum(s, 1e-150))) @ G if mi else H
        try:
            lu = sla.lu_factor(K, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            break

        def direction(r_c):
            rhs[:n] = -r_d
            if mi:
                rhs[:n] -= G.T @ ((r_c + lam * r_i) / s)
            rhs[n:] = -r_e
            sol = sla.lu_solve(lu, rhs, check_finite=False)
            dd = sol[:n]
            dy = -sol[n:]
            if mi:
                ds = G @ dd + r_i
                dlam = -(r_c + lam * ds) / s
            else:
                ds = dlam = np.zeros(0)
            return dd, dy, ds, dlam

        if not mi:
            dd, dy, _, _ = direction(np.zeros(0))
            d, y = d + dd, y + dy
            continue

        # predictor
        dd, dy, ds, dlam = direction(s * lam)
        a_aff = min(_max_step(s, ds), _max_step(lam, dlam))
        mu_aff = float((s + a_aff * ds) @ (lam + a_aff * dlam)) / mi
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        dd, dy, ds, dlam = direction(s * lam + ds * dlam - sigma * mu)
        tau = min(max(0.95, 1.0 - mu), 0.99999)
        a = min(1.0, tau * _max_step(s, ds), tau * _max_step(lam, dlam))
        d = d + a * dd
        y = y + a * dy
        s = s + a * ds
        lam = lam + a * dlam

    return QpResult(d, y, lam, False, max_iter)


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def _polish(H, g, A, b, G, h, res: QpResult, tol: float, max_swaps: int = 8) -> QpResult | None:
    """Re-solve with the identified active set as equalities.

    The interior-point iterate is only accurate to its barrier tolerance; the
    equality-constrained KKT solve on the active set is exact.  A few
    primal-dual active-set swaps repair a guessed set that is slightly off
    (degenerate constraints with both slack and multiplier near zero).
    Returns ``None`` unless the polished point is primal and dual feasible.
    """
    n = g.shape[0]
    me = A.shape[0]
    mi = G.shape[0]
    active = np.flatnonzero(res.lam > G @ res.d - h) if mi else np.zeros(0, dtype=int)
    feas_tol = 1e3 * tol * (1.0 + np.max(np.abs(h), initial=0.0))
    for _ in range(max_swaps + 1):
        C = np.vstack([A, G[active]])
        m = C.shape[0]
        K = np.zeros((n + m, n + m))
        K[:n, :n] = H
        K[:n, n:] = C.T
        K[n:, :n] = C
        try:
            sol = np.linalg.solve(K, np.concatenate([-g, b, h[active]]))
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(sol)):
            return None
        d = sol[:n]
        mult = -sol[n:]
        lam = np.zeros(mi)
        lam[active] = mult[me:]
        slack = G @ d - h if mi else np.zeros(0)
        worst_lam = int(np.argmin(lam)) if mi else -1
        worst_slack = int(np.argmin(slack)) if mi else -1
        if mi and lam[worst_lam] < -feas_tol:
            active = active[active != worst_lam]
        elif mi and slack[worst_slack] < -feas_tol:
            active = np.sort(np.append(active, worst_slack))
        else:
            if np.max(np.abs(A @ d - b), initial=0.0) > feas_tol:
                return None
            return QpResult(d, mult[:me], np.maximum(lam, 0.0), True, res.iterations)
    return None

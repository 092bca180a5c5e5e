"""Embedded dense QP solver for per-step contact problems.

Solves batches of tiny inequality-constrained QPs

    minimize  1/2 v' P v + q' v    subject to  G v >= c

with P diagonal positive definite (3 generalized velocities) and up to 16
rows (two friction-cone generators per contact).  The solver is an
ADMM iterator in the operator-splitting style with an active-set polish
pass that drives the KKT residual to the requested tolerance.  Everything
is vectorized over the batch dimension; all schedules are fixed so results
are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 4000
DEFAULT_RHO = 50.0
ADMM_SIGMA = 1e-6
ADMM_ALPHA = 1.6
CHUNK = 25
POLISH_DELTA = 1e-9
POLISH_REFINE = 1


class QpError(Exception):
    """Raised by the single-problem API when the solver does not converge."""

    def __init__(self, message, kkt_residual=np.inf):
        super().__init__(message)
        self.kkt_residual = float(kkt_residual)


@dataclass
class QpBatchResult:
    v: np.ndarray          # (B, 3) primal solution
    duals: np.ndarray      # (B, m) multipliers of the generator rows, >= 0
    kkt_residual: np.ndarray   # (B,) infinity-norm KKT residual
    iterations: np.ndarray     # (B,) ADMM iterations consumed
    converged: np.ndarray      # (B,) bool


def _inv3x3(h):
    """Closed-form batched 3x3 inverse (adjugate / determinant)."""
    a, b, c = h[:, 0, 0], h[:, 0, 1], h[:, 0, 2]
    d, e, f = h[:, 1, 0], h[:, 1, 1], h[:, 1, 2]
    g, i, j = h[:, 2, 0], h[:, 2, 1], h[:, 2, 2]
    co = np.empty_like(h)
    co[:, 0, 0] = e * j - f * i
    co[:, 0, 1] = c * i - b * j
    co[:, 0, 2] = b * f - c * e
    co[:, 1, 0] = f * g - d * j
    co[:, 1, 1] = a * j - c * g
    co[:, 1, 2] = c * d - a * f
    co[:, 2, 0] = d * i - e * g
    co[:, 2, 1] = b * g - a * i
    co[:, 2, 2] = a * e - b * d
    det = a * co[:, 0, 0] + b * co[:, 1, 0] + c * co[:, 2, 0]
    return co / det[:, None, None]


def _chol_solve(s, rhs):
    """Solve s @ u = rhs for batched small SPD matrices.

    Closed forms for m <= 2, otherwise an unrolled Cholesky: loops over the
    (small) matrix dimension, vectorized over the batch.  s: (B, m, m),
    rhs: (B, m).
    """
    B, m, _ = s.shape
    if m == 1:
        return rhs / s[:, :, 0]
    if m == 2:
        a, b, d = s[:, 0, 0], s[:, 0, 1], s[:, 1, 1]
        det = a * d - b * b
        out = np.empty_like(rhs)
        out[:, 0] = (d * rhs[:, 0] - b * rhs[:, 1]) / det
        out[:, 1] = (a * rhs[:, 1] - b * rhs[:, 0]) / det
        return out
    if m >= 3:
        return np.linalg.solve(s, rhs[..., None])[..., 0]
    L = np.zeros_like(s)
    for j in range(m):
        acc = s[:, j, j].copy()
        for k in range(j):
            acc -= L[:, j, k] * L[:, j, k]
        L[:, j, j] = np.sqrt(np.maximum(acc, 1e-300))
        for i in range(j + 1, m):
            acc = s[:, i, j].copy()
            for k in range(j):
                acc -= L[:, i, k] * L[:, j, k]
            L[:, i, j] = acc / L[:, j, j]
    u = np.zeros_like(rhs)
    for i in range(m):
        acc = rhs[:, i].copy()
        for k in range(i):
            acc -= L[:, i, k] * u[:, k]
        u[:, i] = acc / L[:, i, i]
    for i in range(m - 1, -1, -1):
        acc = u[:, i]
        for k in range(i + 1, m):
            acc -= L[:, k, i] * u[:, k]
        u[:, i] = acc / L[:, i, i]
    return u


def _kkt_residual(p_diag, q, G, c, v, mu):
    """Infinity-norm KKT residual per batch row.

    Components: stationarity |Pv + q - G'mu|, primal violation
    max(0, c - Gv), dual violation max(0, -mu), and complementarity
    |mu * (Gv - c)|.
    """
    Gv = np.einsum("bmk,bk->bm", G, v)
    slack = Gv - c
    stat = p_diag[None, :] * v + q - np.einsum("bmk,bm->bk", G, mu)
    r = np.abs(stat).max(axis=1)
    r = np.maximum(r, np.maximum(-slack, 0.0).max(axis=1, initial=0.0))
    r = np.maximum(r, np.maximum(-mu, 0.0).max(axis=1, initial=0.0))
    r = np.maximum(r, np.abs(mu * slack).max(axis=1, initial=0.0))
    return r


def _polish(p_diag, q, G, c, active):
    """Equality-constrained solve on an assumed active set.

    Regularized Schur-complement solve with iterative refinement plus two
    rounds of active-set repair (drop negative duals, add violated rows).
    Returns (v, mu, kkt_residual).
    """
    B, m, _ = G.shape
    a_inv = 1.0 / (p_diag + POLISH_DELTA)
    v_out = np.zeros((B, 3))
    mu_out = np.zeros((B, m))
    work = np.arange(B)
    act = active.copy()
    qw, Gw, cw = q, G, c
    for _ in range(2 * m + 2):
        aw = act[work]
        # compress to the occupied active slots: n = 3 generalized
        # velocities keep generic active sets tiny regardless of m
        n_act = max(int(aw.sum(axis=1).max()), 1)
        slots = np.argsort(~aw, axis=1, kind="stable")[:, :n_act]
        valid = np.take_along_axis(aw, slots, axis=1)
        Ga = np.take_along_axis(Gw, slots[:, :, None], axis=1) \
            * valid[:, :, None]
        ca = np.take_along_axis(cw, slots, axis=1) * valid
        GAi = Ga * a_inv[None, None, :]
        S = np.einsum("bik,bjk->bij", GAi, Ga) \
            + POLISH_DELTA * np.eye(n_act)
        mu_c = _chol_solve(S, ca + np.einsum("bik,bk->bi", GAi, qw))
        v = a_inv[None, :] * (-qw + np.einsum("bmk,bm->bk", Ga, mu_c))
        for _ in range(POLISH_REFINE):
            r1 = -qw - p_diag[None, :] * v \
                + np.einsum("bmk,bm->bk", Ga, mu_c)
            r2 = ca - np.einsum("bmk,bk->bm", Ga, v)
            dmu = _chol_solve(S, r2 - np.einsum("bik,bk->bi", GAi, r1))
            mu_c = mu_c + dmu
            v = v + a_inv[None, :] * (r1 + np.einsum("bmk,bm->bk", Ga, dmu))
        mu = np.zeros((len(work), m))
        np.put_along_axis(mu, slots, np.where(valid, mu_c, 0.0), axis=1)
        slack = np.einsum("bmk,bk->bm", Gw, v) - cw
        viol = np.where(~aw, slack, 0.0)
        worst_viol = viol.min(axis=1)
        has_add = worst_viol < -1e-9
        # change the set one row at a time: add the most violated row,
        # drop the most negative dual; anything else risks cycling
        neg = np.where(aw, mu, 0.0)
        has_neg = neg.min(axis=1) < -1e-9
        unsettled = has_add | has_neg
        settled = ~unsettled
        tgt = work[settled]
        v_out[tgt] = v[settled]
        mu_out[tgt] = np.where(aw[settled], np.maximum(mu[settled], 0.0), 0.0)
        if not unsettled.any():
            break
        lanes = np.arange(len(work))
        change = np.zeros_like(aw)
        change[lanes, viol.argmin(axis=1)] |= has_add
        drop = np.zeros_like(aw)
        drop[lanes, neg.argmin(axis=1)] = has_neg
        act[work] = (aw & ~drop) | change
        keep = unsettled
        work = work[keep]
        qw, Gw, cw = qw[keep], Gw[keep], cw[keep]
        v_out[work] = v[keep]
        mu_out[work] = np.where(act[work], np.maximum(mu[keep], 0.0), 0.0)
    return v_out, mu_out, _kkt_residual(p_diag, q, G, c, v_out, mu_out)


def solve_batch(p_diag, q, G, c, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                rho=DEFAULT_RHO) -> QpBatchResult:
    """Solve a batch of contact QPs sharing the diagonal Hessian p_diag.

    q: (B, 3); G: (B, m, 3); c: (B, m).  Padding rows are expressed as zero
    G rows with strictly negative c (always satisfied, dual forced to 0).
    Rows certified primal-infeasible are reported as not converged.
    """
    p_diag = np.asarray(p_diag, dtype=float)
    q = np.asarray(q, dtype=float)
    G = np.asarray(G, dtype=float)
    c = np.asarray(c, dtype=float)
    B, m, _ = G.shape

    v_out = np.empty((B, 3))
    mu_out = np.zeros((B, m))
    res_out = np.full(B, np.inf)
    iter_out = np.zeros(B, dtype=int)
    done = np.zeros(B, dtype=bool)
    solved = np.zeros(B, dtype=bool)

    if m == 0 or B == 0:
        v_out[:] = -q / p_diag[None, :]
        return QpBatchResult(v_out, mu_out, np.zeros(B),
                             iter_out, np.ones(B, dtype=bool))

    idx = np.arange(B)
    x = -q / p_diag[None, :]
    z = np.einsum("bmk,bk->bm", G, x)
    y = np.zeros((B, m))
    H = np.zeros((B, 3, 3))
    H[:, np.arange(3), np.arange(3)] = p_diag + ADMM_SIGMA
    H += rho * np.einsum("bmi,bmj->bij", G, G)
    H_inv = _inv3x3(H)

    def commit(targets, vv, mm, rr, it):
        v_out[targets] = vv
        mu_out[targets] = mm
        res_out[targets] = rr
        iter_out[targets] = it
        done[targets] = True
        solved[targets] = True

    # unconstrained minimum: directly valid for strictly feasible rows; the
    # rest get an immediate polish pass seeded with their most violated row
    res0 = _kkt_residual(p_diag, q, G, c, x, np.zeros((B, m)))
    free = res0 <= tol
    commit(idx[free], x[free], np.zeros((free.sum(), m)), res0[free], 0)
    rest = ~free
    if rest.any():
        slack0 = (z - c)[rest]
        seed = np.zeros((rest.sum(), m), dtype=bool)
        seed[np.arange(rest.sum()), slack0.argmin(axis=1)] = True
        v_p, mu_p, res_p = _polish(p_diag, q[rest], G[rest], c[rest], seed)
        ok_p = res_p <= tol
        commit(idx[rest][ok_p], v_p[ok_p], mu_p[ok_p], res_p[ok_p], 0)

    it = 0
    chunk_i = 0
    while it < max_iter and not done.all():
        chunk = CHUNK if chunk_i < 8 else (4 * CHUNK if chunk_i < 16 else 10 * CHUNK)
        chunk = min(chunk, max_iter - it)
        live = ~done
        xl, zl, yl = x[live], z[live], y[live]
        Gl, cl, ql, Hl = G[live], c[live], q[live], H_inv[live]
        y_prev = yl.copy()
        for _ in range(chunk):
            rhs = ADMM_SIGMA * xl - ql + np.einsum(
                "bmk,bm->bk", Gl, rho * zl - yl)
            x_t = np.einsum("bij,bj->bi", Hl, rhs)
            z_t = np.einsum("bmk,bk->bm", Gl, x_t)
            xl = ADMM_ALPHA * x_t + (1.0 - ADMM_ALPHA) * xl
            z_rel = ADMM_ALPHA * z_t + (1.0 - ADMM_ALPHA) * zl
            zl = np.maximum(z_rel + yl / rho, cl)
            yl = yl + rho * (z_rel - zl)
        it += chunk
        chunk_i += 1
        x[live], z[live], y[live] = xl, zl, yl
        live_idx = idx[live]
        mu = np.maximum(-yl, 0.0)
        res = _kkt_residual(p_diag, ql, Gl, cl, xl, mu)
        ok = res <= tol
        commit(live_idx[ok], xl[ok], mu[ok], res[ok], it)
        rest = ~ok
        # primal infeasibility certificate: d >= 0 with G'd ~ 0 and c'd > 0
        if rest.any():
            d = -(yl[rest] - y_prev[rest]) / chunk
            d_norm = np.abs(d).max(axis=1)
            scale = np.where(d_norm > 0, d_norm, 1.0)
            d_unit = np.maximum(d, 0.0) / scale[:, None]
            gtd = np.abs(np.einsum("bmk,bm->bk", Gl[rest], d_unit)).max(axis=1)
            ctd = np.einsum("bm,bm->b", cl[rest], d_unit)
            infeas = (d_norm > 1e-12) & (gtd <= 1e-9) & (ctd > 1e-9)
            if infeas.any():
                tgt = live_idx[rest][infeas]
                res_out[tgt] = np.inf
                iter_out[tgt] = it
                done[tgt] = True
        rest_idx = live_idx[rest][~done[live_idx[rest]]]
        # polish on a power-of-two backoff early on, every boundary later
        if len(rest_idx) and ((chunk_i & (chunk_i - 1)) == 0 or chunk_i >= 8):
            sel = np.isin(live_idx, rest_idx)
            mu_r = mu[sel]
            slack = np.einsum("bmk,bk->bm", Gl[sel], xl[sel]) - cl[sel]
            active = (mu_r > 1e-7 * (1.0 + mu_r.max(axis=1, keepdims=True))) \
                | (slack < 1e-7)
            v_p, mu_p, res_p = _polish(p_diag, ql[sel], Gl[sel], cl[sel],
                                       active)
            ok_p = res_p <= tol
            commit(rest_idx[ok_p], v_p[ok_p], mu_p[ok_p], res_p[ok_p], it)

    if not done.all():
        live = ~done
        mu = np.maximum(-y[live], 0.0)
        res = _kkt_residual(p_diag, q[live], G[live], c[live], x[live], mu)
        v_out[live] = x[live]
        mu_out[live] = mu
        res_out[live] = res
        iter_out[live] = it
    return QpBatchResult(v_out, mu_out, res_out, iter_out, solved)

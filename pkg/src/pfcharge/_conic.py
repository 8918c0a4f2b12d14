"""Primal-dual interior-point core for the allocation cone program.

Solves, for ``x``::

    minimize    -sum_l w_l log(s_l)
    subject to  A x = b
                G x + s = h,   s in K

where ``K`` is the product of ``nw`` weighted nonnegative rays (the powers),
``nl`` plain nonnegative rays and ``nq`` second-order cones of dimension 4.
The log objective is folded into the barrier: on the weighted rays the
complementarity target is pinned at ``s_l z_l = w_l`` instead of being driven
to zero, which is exactly the optimality condition of the weighted log.
Everything else is a standard Mehrotra predictor-corrector with
Nesterov-Todd scaling.

``G`` is passed in structured form: every nonnegative row has a single
nonzero (``ncol``, ``ncoef``), every cone touches four columns (``qcols``)
through a dense 4x4 block (``qM``). The reduced KKT system is factored with
a sparse quasidefinite LDL^T (static + dynamic regularization, iterative
refinement), falling back to dense LU when refinement stalls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

OPTIMAL = 0
INFEASIBLE = 1
MAX_ITER = 2
STALLED = 3

STEP_FRACTION = 0.99
STATIC_REG = 1e-10
DYNAMIC_EPS = 1e-14
DYNAMIC_REG = 1e-8
REFINE_STEPS = 10
# complementarity is never targeted below MU_FLOOR * tol: cones stay interior
MU_FLOOR = 1e-3
# pinned products are checked relatively down to this normalized weight, absolutely below
PIN_FLOOR = 1e-6


# -- symbolic analysis (plain Python, cached by the caller) ------------------

@dataclass(frozen=True)
class KKTPattern:
    """Ordering and symbolic factorization of the reduced KKT matrix."""

    n: int
    p: int
    perm: np.ndarray      # new position -> original index
    sign: np.ndarray      # +1 primal, -1 dual, in new positions
    Ap: np.ndarray        # CSC of the permuted upper triangle
    Ai: np.ndarray
    src: np.ndarray       # flat index into the dense original K for each entry
    diag: np.ndarray      # entry position of each diagonal
    Lp: np.ndarray
    parent: np.ndarray


def _min_degree(adj: list[set[int]]) -> list[int]:
    adj = [set(a) for a in adj]
    alive = set(range(len(adj)))
    order = []
    while alive:
        v = min(alive, key=lambda u: (len(adj[u]), u))
        nbrs = adj[v]
        for a in nbrs:
            adj[a] |= nbrs
            adj[a].discard(a)
            adj[a].discard(v)
        alive.remove(v)
        order.append(v)
    return order


def kkt_pattern(A: np.ndarray, ncol: np.ndarray, qcols: np.ndarray) -> KKTPattern:
    p, n = A.shape
    N = n + p
    adj: list[set[int]] = [set() for _ in range(N)]
    for cols in qcols:
        for a in cols:
            for b in cols:
                if a != b:
                    adj[a].add(int(b))
    rows, cols = np.nonzero(A)
    for r, c in zip(rows, cols):
        adj[n + r].add(int(c))
        adj[c].add(int(n + r))
    perm = np.array(_min_degree(adj), dtype=np.int64)
    iperm = np.empty(N, dtype=np.int64)
    iperm[perm] = np.arange(N)

    Ap = [0]
    Ai: list[int] = []
    src: list[int] = []
    diag = np.empty(N, dtype=np.int64)
    for k in range(N):
        old = perm[k]
        entries = sorted(int(iperm[o]) for o in adj[old] if iperm[o] < k)
        for i in entries:
            Ai.append(i)
            src.append(int(perm[i]) * N + int(old))
        diag[k] = len(Ai)
        Ai.append(k)
        src.append(int(old) * N + int(old))
        Ap.append(len(Ai))
    Ap_arr = np.array(Ap, dtype=np.int64)
    Ai_arr = np.array(Ai, dtype=np.int64)
    Lp, parent = _ldl_symbolic(N, Ap_arr, Ai_arr)
    sign = np.where(perm < n, 1.0, -1.0)
    return KKTPattern(n, p, perm, sign, Ap_arr, Ai_arr, np.array(src, dtype=np.int64),
                      diag, Lp, parent)


def _ldl_symbolic(N, Ap, Ai):
    parent = np.full(N, -1, dtype=np.int64)
    flag = np.empty(N, dtype=np.int64)
    lnz = np.zeros(N, dtype=np.int64)
    for k in range(N):
        flag[k] = k
        for q in range(Ap[k], Ap[k + 1]):
            i = Ai[q]
            while i < k and flag[i] != k:
                if parent[i] == -1:
                    parent[i] = k
                lnz[i] += 1
                flag[i] = k
                i = parent[i]
    Lp = np.zeros(N + 1, dtype=np.int64)
    Lp[1:] = np.cumsum(lnz)
    return Lp, parent


# -- numeric kernels ----------------------------------------------------------

@njit(cache=True)
def _ldl_numeric(N, Ap, Ai, Ax, Lp, parent, sign, Li, Lx, D, Y, pattern, flag, lnz):
    for k in range(N):
        Y[k] = 0.0
        top = N
        flag[k] = k
        lnz[k] = 0
        for q in range(Ap[k], Ap[k + 1]):
            i = Ai[q]
            Y[i] += Ax[q]
            length = 0
            while flag[i] != k:
                pattern[length] = i
                length += 1
                flag[i] = k
                i = parent[i]
            while length > 0:
                top -= 1
                length -= 1
                pattern[top] = pattern[length]
        D[k] = Y[k]
        Y[k] = 0.0
        for t in range(top, N):
            i = pattern[t]
            yi = Y[i]
            Y[i] = 0.0
            p2 = Lp[i] + lnz[i]
            for q in range(Lp[i], p2):
                Y[Li[q]] -= Lx[q] * yi
            lki = yi / D[i]
            D[k] -= lki * yi
            Li[p2] = k
            Lx[p2] = lki
            lnz[i] += 1
        if D[k] * sign[k] < DYNAMIC_EPS:
            D[k] = sign[k] * DYNAMIC_REG


@njit(cache=True)
def _ldl_solve(N, Lp, Li, Lx, D, perm, rhs, out):
    x = np.empty(N)
    for k in range(N):
        x[k] = rhs[perm[k]]
    for j in range(N):
        for q in range(Lp[j], Lp[j + 1]):
            x[Li[q]] -= Lx[q] * x[j]
    for j in range(N):
        x[j] /= D[j]
    for j in range(N - 1, -1, -1):
        for q in range(Lp[j], Lp[j + 1]):
            x[j] -= Lx[q] * x[Li[q]]
    for k in range(N):
        out[perm[k]] = x[k]


@njit(cache=True)
def _kkt_solve(K, rhs, N, Lp, Li, Lx, D, perm):
    sol = np.zeros(N)
    corr = np.empty(N)
    scale = np.max(np.abs(rhs)) + 1e-300
    res = rhs.copy()
    ok = False
    for _ in range(REFINE_STEPS):
        _ldl_solve(N, Lp, Li, Lx, D, perm, res, corr)
        sol += corr
        res = rhs - K @ sol
        if np.max(np.abs(res)) <= 1e-13 * scale:
            ok = True
            break
    if not ok:
        sol = np.linalg.solve(K, rhs)
    return sol


@njit(cache=True)
def _soc_nt(s, z, W, Winv):
    """Nesterov-Todd scaling for one 4-dim cone: W z = Winv s."""
    sn = math.sqrt(max(s[0] * s[0] - (s[1] * s[1] + s[2] * s[2] + s[3] * s[3]), 1e-300))
    zn = math.sqrt(max(z[0] * z[0] - (z[1] * z[1] + z[2] * z[2] + z[3] * z[3]), 1e-300))
    gamma = math.sqrt(max(0.5 * (1.0 + (s[0] * z[0] + s[1] * z[1] + s[2] * z[2] + s[3] * z[3]) / (sn * zn)),
                          1e-300))
    w0 = (s[0] / sn + z[0] / zn) / (2.0 * gamma)
    beta = math.sqrt(sn / zn)
    c = 1.0 / (1.0 + w0)
    w1 = np.empty(3)
    for i in range(3):
        w1[i] = (s[i + 1] / sn - z[i + 1] / zn) / (2.0 * gamma)
    for i in range(3):
        for j in range(3):
            v = w1[i] * w1[j] * c
            if i == j:
                v += 1.0
            W[i + 1, j + 1] = beta * v
            Winv[i + 1, j + 1] = v / beta
        W[0, i + 1] = beta * w1[i]
        W[i + 1, 0] = beta * w1[i]
        Winv[0, i + 1] = -w1[i] / beta
        Winv[i + 1, 0] = -w1[i] / beta
    W[0, 0] = beta * w0
    Winv[0, 0] = w0 / beta


@njit(cache=True)
def _mv4(M, v, out):
    for r in range(4):
        out[r] = M[r, 0] * v[0] + M[r, 1] * v[1] + M[r, 2] * v[2] + M[r, 3] * v[3]


@njit(cache=True)
def _soc_div(lam, d, out):
    """Solve lam o u = d for u (Jordan product of the second-order cone)."""
    det = lam[0] * lam[0] - (lam[1] * lam[1] + lam[2] * lam[2] + lam[3] * lam[3])
    u0 = (lam[0] * d[0] - (lam[1] * d[1] + lam[2] * d[2] + lam[3] * d[3])) / det
    out[0] = u0
    for i in range(1, 4):
        out[i] = (d[i] - u0 * lam[i]) / lam[0]


@njit(cache=True)
def _jordan(a, b, nn, nq, out):
    for i in range(nn):
        out[i] = a[i] * b[i]
    for k in range(nq):
        o = nn + 4 * k
        out[o] = a[o] * b[o] + a[o + 1] * b[o + 1] + a[o + 2] * b[o + 2] + a[o + 3] * b[o + 3]
        for i in range(1, 4):
            out[o + i] = a[o] * b[o + i] + b[o] * a[o + i]


@njit(cache=True)
def _max_step(u, du, nn, nq, start=0):
    """Largest alpha with u + alpha du in K (may be inf), rays before ``start`` ignored."""
    alpha = np.inf
    for i in range(start, nn):
        if du[i] < 0.0:
            a = -u[i] / du[i]
            if a < alpha:
                alpha = a
    for k in range(nq):
        o = nn + 4 * k
        a = du[o] * du[o] - (du[o + 1] ** 2 + du[o + 2] ** 2 + du[o + 3] ** 2)
        b = u[o] * du[o] - (u[o + 1] * du[o + 1] + u[o + 2] * du[o + 2] + u[o + 3] * du[o + 3])
        c = u[o] * u[o] - (u[o + 1] ** 2 + u[o + 2] ** 2 + u[o + 3] ** 2)
        if b < 0.0 or a < 0.0:
            disc = b * b - a * c
            if disc >= 0.0:
                denom = -b + math.sqrt(disc)
                step = max(c, 0.0) / denom if denom > 0.0 else 0.0
                if step < alpha:
                    alpha = step
    return alpha


@njit(cache=True)
def g_matvec(x, ncol, ncoef, qcols, qM, out):
    """out = G x for the structured G."""
    nn = ncol.shape[0]
    for i in range(nn):
        out[i] = ncoef[i] * x[ncol[i]]
    for k in range(qcols.shape[0]):
        o = nn + 4 * k
        for r in range(4):
            acc = 0.0
            for c in range(4):
                acc += qM[k, r, c] * x[qcols[k, c]]
            out[o + r] = acc


@njit(cache=True)
def gt_matvec(v, ncol, ncoef, qcols, qM, out):
    """out = G^T v for the structured G."""
    out[:] = 0.0
    nn = ncol.shape[0]
    for i in range(nn):
        out[ncol[i]] += ncoef[i] * v[i]
    for k in range(qcols.shape[0]):
        o = nn + 4 * k
        for c in range(4):
            acc = 0.0
            for r in range(4):
                acc += qM[k, r, c] * v[o + r]
            out[qcols[k, c]] += acc


@njit(cache=True)
def _newton(K, rx, ry, rz, lam, rhs_c, d, Wq, Wqi, ncol, ncoef, qcols, qM, n,
            Lp, Li, Lx, D, perm):
    """One Newton solve; returns dx, dy, scaled dz, scaled ds, dz, ds."""
    nn = ncol.shape[0]
    nq = qcols.shape[0]
    m = nn + 4 * nq
    u = np.empty(m)
    rhat = np.empty(m)
    v = np.empty(m)          # W^-1 rhat, so that Gh^T rhat = G^T v
    for i in range(nn):
        u[i] = rhs_c[i] / lam[i]
        rhat[i] = rz[i] / d[i] + u[i]
        v[i] = rhat[i] / d[i]
    for k in range(nq):
        o = nn + 4 * k
        _soc_div(lam[o:o + 4], rhs_c[o:o + 4], u[o:o + 4])
        _mv4(Wqi[k], rz[o:o + 4], rhat[o:o + 4])
        rhat[o:o + 4] += u[o:o + 4]
        _mv4(Wqi[k], rhat[o:o + 4], v[o:o + 4])
    N = K.shape[0]
    rhs = np.empty(N)
    gtv = np.empty(n)
    gt_matvec(v, ncol, ncoef, qcols, qM, gtv)
    rhs[:n] = -rx - gtv
    rhs[n:] = -ry
    sol = _kkt_solve(K, rhs, N, Lp, Li, Lx, D, perm)
    dx = sol[:n].copy()
    dy = sol[n:].copy()
    gdx = np.empty(m)
    g_matvec(dx, ncol, ncoef, qcols, qM, gdx)
    dzt = np.empty(m)
    for i in range(nn):
        dzt[i] = gdx[i] / d[i] + rhat[i]
    for k in range(nq):
        o = nn + 4 * k
        _mv4(Wqi[k], gdx[o:o + 4], dzt[o:o + 4])
        dzt[o:o + 4] += rhat[o:o + 4]
    dst = u - dzt
    dz = np.empty(m)
    ds = np.empty(m)
    for i in range(nn):
        dz[i] = dzt[i] / d[i]
        ds[i] = dst[i] * d[i]
    for k in range(nq):
        o = nn + 4 * k
        _mv4(Wqi[k], dzt[o:o + 4], dz[o:o + 4])
        _mv4(Wq[k], dst[o:o + 4], ds[o:o + 4])
    return dx, dy, dzt, dst, dz, ds


@njit(cache=True)
def solve_cone_program(A, b, h, ncol, ncoef, qcols, qM, nw, w, x, y, z, s, tol, max_iter,
                       Ap, Ai, src, diag, Lp, parent, perm, sign, verbose=False):
    """Run the interior-point iteration in place on ``x, y, z, s``.

    Returns ``(status, iterations)``. Convergence requires primal and dual
    residuals below ``tol`` (relative), the barrier gap below ``tol`` and
    every pinned product ``s_l z_l / w_l`` within ``tol`` of one.
    """
    p, n = A.shape
    nn = ncol.shape[0]
    nq = qcols.shape[0]
    m = nn + 4 * nq
    nl = nn - nw
    theta = nl + nq
    N = n + p
    K = np.zeros((N, N))
    K[n:, :n] = A
    K[:n, n:] = A.T
    Kflat = K.ravel()
    nnzA = Ai.shape[0]
    Ax = np.empty(nnzA)
    nnzL = Lp[N]
    Li = np.empty(max(nnzL, 1), dtype=np.int64)
    Lx = np.empty(max(nnzL, 1))
    D = np.empty(N)
    Y = np.empty(N)
    pattern = np.empty(N, dtype=np.int64)
    flag = np.empty(N, dtype=np.int64)
    lnz = np.empty(N, dtype=np.int64)

    lam = np.empty(m)
    d = np.empty(nn)
    Wq = np.zeros((max(nq, 1), 4, 4))
    Wqi = np.zeros((max(nq, 1), 4, 4))
    target = np.zeros(m)
    lamsq = np.empty(m)
    corr = np.empty(m)
    gx = np.empty(m)
    gtz = np.empty(n)
    Mh = np.empty((4, 4))
    bnorm = 1.0 + np.max(np.abs(b)) if p > 0 else 1.0
    hnorm = 1.0 + np.max(np.abs(h)) if m > 0 else 1.0
    stalls = 0
    mu0 = 1.0
    res0 = 1.0

    for it in range(max_iter + 1):
        gt_matvec(z, ncol, ncoef, qcols, qM, gtz)
        rx = A.T @ y + gtz
        ry = A @ x - b
        g_matvec(x, ncol, ncoef, qcols, qM, gx)
        rz = gx + s - h
        gap = 0.0
        for i in range(nw, m):
            gap += s[i] * z[i]
        mu = gap / theta if theta > 0 else 0.0
        pin = 0.0
        for i in range(nw):
            pin = max(pin, abs(s[i] * z[i] - w[i]) / max(w[i], PIN_FLOOR))
        pres = 0.0
        if p > 0:
            pres = np.max(np.abs(ry)) / bnorm
        pres = max(pres, np.max(np.abs(rz)) / hnorm)
        zmax = max(1.0, np.max(np.abs(z)))
        dres = np.max(np.abs(rx)) / zmax
        if it == 0:
            mu0, res0 = mu, max(pres, dres, 1e-300)
        if verbose:
            print(it, pres, dres, gap, pin)
        if pres <= tol and dres <= tol and abs(gap) <= tol and pin <= tol:
            return OPTIMAL, it
        if it == max_iter:
            break

        # infeasibility certificate: z in K*, A'y + G'z = 0, h'z + b'y < 0
        cert = h @ z + b @ y
        if cert < 0.0 and np.max(np.abs(rx)) <= tol * abs(cert) and pres > math.sqrt(tol):
            return INFEASIBLE, it

        # scaled Hessian G^T W^-2 G assembled block by block
        K[:n, :n] = 0.0
        for i in range(nn):
            d[i] = math.sqrt(s[i] / z[i])
            lam[i] = math.sqrt(s[i] * z[i])
            c = ncol[i]
            K[c, c] += ncoef[i] * ncoef[i] * z[i] / s[i]
        for k in range(nq):
            o = nn + 4 * k
            _soc_nt(s[o:o + 4], z[o:o + 4], Wq[k], Wqi[k])
            _mv4(Wq[k], z[o:o + 4], lam[o:o + 4])
            for r in range(4):
                for c in range(4):
                    acc = 0.0
                    for j in range(4):
                        acc += Wqi[k][r, j] * qM[k, j, c]
                    Mh[r, c] = acc
            for a in range(4):
                for bb in range(a, 4):
                    acc = Mh[0, a] * Mh[0, bb] + Mh[1, a] * Mh[1, bb] + Mh[2, a] * Mh[2, bb] + Mh[3, a] * Mh[3, bb]
                    K[qcols[k, a], qcols[k, bb]] += acc
                    if bb != a:
                        K[qcols[k, bb], qcols[k, a]] += acc
        for q in range(nnzA):
            Ax[q] = Kflat[src[q]]
        for k in range(N):
            Ax[diag[k]] += sign[k] * STATIC_REG
        if not np.all(np.isfinite(Ax)):
            return STALLED, it
        _ldl_numeric(N, Ap, Ai, Ax, Lp, parent, sign, Li, Lx, D, Y, pattern, flag, lnz)

        # predictor: drive plain complementarity to zero, pinned block to w
        _jordan(lam, lam, nn, nq, lamsq)
        target[:] = 0.0
        target[:nw] = w
        rhs_c = target - lamsq
        dx, dy, dzt, dst, dz, ds = _newton(K, rx, ry, rz, lam, rhs_c, d, Wq, Wqi, ncol, ncoef,
                                           qcols, qM, n, Lp, Li, Lx, D, perm)
        alpha = min(1.0, _max_step(s, ds, nn, nq), _max_step(z, dz, nn, nq, nw))
        if theta > 0 and gap > 0:
            gap_aff = 0.0
            for i in range(nw, m):
                gap_aff += (s[i] + alpha * ds[i]) * (z[i] + alpha * dz[i])
            sigma = min(1.0, max(0.0, gap_aff / gap)) ** 3
        else:
            sigma = 0.0

        # corrector with Mehrotra second-order term; mu may not fall faster than
        # the residuals, otherwise near-degenerate cones collapse before feasibility
        mu_t = min(mu, max(sigma * mu, 0.1 * mu0 * max(pres, dres) / res0, MU_FLOOR * tol / theta))
        _jordan(dst, dzt, nn, nq, corr)
        for i in range(nw, nn):
            target[i] = mu_t
        for k in range(nq):
            target[nn + 4 * k] = mu_t
        rhs_c = target - lamsq - corr
        dx, dy, dzt, dst, dz, ds = _newton(K, rx, ry, rz, lam, rhs_c, d, Wq, Wqi, ncol, ncoef,
                                           qcols, qM, n, Lp, Li, Lx, D, perm)
        alpha = min(1.0, STEP_FRACTION * min(_max_step(s, ds, nn, nq), _max_step(z, dz, nn, nq, nw)))
        if verbose:
            print("   alpha", alpha, "sigma", sigma)
        if not (alpha > 1e-12):
            stalls += 1
            if stalls >= 5:
                return STALLED, it
        else:
            stalls = 0
        x += alpha * dx
        y += alpha * dy
        z += alpha * dz
        s += alpha * ds
        # re-centre pinned pairs that drifted far from s z = w; otherwise keep the
        # plain primal-dual update so residuals shrink linearly with the step
        for i in range(nw):
            ratio = s[i] * z[i] / w[i]
            if ratio < 0.5 or ratio > 10.0:
                z[i] = w[i] / s[i]
    return MAX_ITER, max_iter

"""
Structured interior-point kernel for the battery scheduling problem of a
large microgrid.

The problem solved is::

    minimize    ||sum_i (p_i - gamma_i m_i) - c||^2 + eps (||p||^2 + ||m||^2)
    subject to  0 <= p_i <= hi_i,  0 <= m_i <= M_i,  p_i/hi_i + m_i/M_i <= 1,
                x_i(n) = alpha_i x_i(n-1) + dt (beta_i p_i(n) - m_i(n)),
                0 <= x_i(n) <= C_i

with ``p = u_plus`` and ``m = -u_minus``. SoC trajectories are explicit
variables and the dynamics are equality constraints, so every Newton step
reduces to

* a 2x2 system per household and step,
* one SPD tridiagonal system per household (the dynamics multipliers),
* one dense ``N x N`` system for the aggregate coupling.

The tridiagonal inverses never need to be formed: the capacitance matrix
only needs ``f' Tri^-1 f``, which is assembled from the LDL' factors by a
product recursion in ``O(N^2)`` per household.
"""

import numba
import numpy as np

# row kinds per household and step
_P_LO, _P_HI, _M_LO, _M_HI, _SHARE = range(5)

# iterative refinement passes per Newton solve
REFINE_STEPS = 3

# static regularization of the SoC block in the factorization only
X_REG = 1e-8


@numba.njit(cache=True, nogil=True)
def _ldl_tridiag(dx, cc, a, dfac, lfac):
    # LDL' of G diag(dx) G' + diag(cc) with G unit lower bidiagonal, subdiagonal -a.
    # Pivots are carried as dx[n] + e[n] with e >= 0, so nothing cancels even
    # when dx spans many orders of magnitude.
    N = dx.shape[0]
    e = cc[0]
    dfac[0] = dx[0] + e
    for n in range(1, N):
        lfac[n] = -a * dx[n - 1] / dfac[n - 1]
        e = cc[n] + a * a * dx[n - 1] * e / dfac[n - 1]
        dfac[n] = dx[n] + e


@numba.njit(cache=True, nogil=True)
def _ldl_solve(dfac, lfac, r, out):
    N = r.shape[0]
    out[0] = r[0]
    for n in range(1, N):
        out[n] = r[n] - lfac[n] * out[n - 1]
    out[N - 1] = out[N - 1] / dfac[N - 1]
    for n in range(N - 2, -1, -1):
        out[n] = out[n] / dfac[n] - lfac[n + 1] * out[n + 1]


@numba.njit(cache=True, nogil=True)
def _cholesky_solve(Lk, r):
    N = r.shape[0]
    y = np.empty(N)
    for n in range(N):
        acc = r[n]
        for k in range(n):
            acc -= Lk[n, k] * y[k]
        y[n] = acc / Lk[n, n]
    for n in range(N - 1, -1, -1):
        acc = y[n]
        for k in range(n + 1, N):
            acc -= Lk[k, n] * y[k]
        y[n] = acc / Lk[n, n]
    return y


@numba.njit(cache=True, nogil=True)
def solve_household_qp(alpha, beta, gamma, cap, hi, mx, xhat, c, dt, eps, tol, accept, max_iter):
    """Primal-dual interior-point method (Mehrotra predictor-corrector).

    Iterates until the scaled residuals and the duality gap drop below
    ``tol``. Close to the solution the Newton systems become ill
    conditioned (the tie-break ``eps`` is the only curvature of controls
    away from their bounds), so the best iterate seen is kept and the run
    stops early once the residuals start to grow again.

    Returns ``(p, m, iterations, converged)`` with ``p, m`` of shape
    ``(I, N)``; ``converged`` means the returned iterate is within
    ``accept``.
    """
    I = alpha.shape[0]
    N = c.shape[0]
    fp = np.zeros(I, dtype=np.bool_)
    fm = np.zeros(I, dtype=np.bool_)
    fx = np.zeros(I, dtype=np.bool_)
    ip = np.zeros(I)
    im = np.zeros(I)
    for i in range(I):
        fp[i] = hi[i] > 0.0 and cap[i] > 0.0
        fm[i] = mx[i] > 0.0 and cap[i] > 0.0
        fx[i] = fp[i] or fm[i]
        if fp[i]:
            ip[i] = 1.0 / hi[i]
        if fm[i]:
            im[i] = 1.0 / mx[i]

    act = np.zeros((5, I), dtype=np.bool_)
    hu = np.zeros((5, I))
    for i in range(I):
        act[_P_LO, i] = fp[i]
        act[_P_HI, i] = fp[i]
        act[_M_LO, i] = fm[i]
        act[_M_HI, i] = fm[i]
        act[_SHARE, i] = fp[i] and fm[i]
        hu[_P_HI, i] = hi[i]
        hu[_M_HI, i] = mx[i]
        hu[_SHARE, i] = 1.0
    nrows = 0
    for i in range(I):
        for k in range(5):
            if act[k, i]:
                nrows += N
        if fx[i]:
            nrows += 2 * N
    p = np.zeros((I, N))
    m = np.zeros((I, N))
    nu = np.zeros((I, N))
    if nrows == 0:
        return p, m, 0, True

    bp = dt * beta
    bm = -dt
    x = np.zeros((I, N))
    for i in range(I):
        if fx[i]:
            prev = xhat[i]
            for n in range(N):
                prev = alpha[i] * prev
                x[i, n] = prev

    s0 = 0.1
    su = np.ones((5, I, N))
    zu = np.zeros((5, I, N))
    sx = np.ones((2, I, N))
    zx = np.zeros((2, I, N))
    for i in range(I):
        for n in range(N):
            gu = (-p[i, n], p[i, n], -m[i, n], m[i, n], p[i, n] * ip[i] + m[i, n] * im[i])
            for k in range(5):
                if act[k, i]:
                    su[k, i, n] = max(hu[k, i] - gu[k], s0)
                    zu[k, i, n] = 1.0
            if fx[i]:
                sx[0, i, n] = max(x[i, n], s0)
                sx[1, i, n] = max(cap[i] - x[i, n], s0)
                zx[0, i, n] = 1.0
                zx[1, i, n] = 1.0

    hmax = 1.0
    for i in range(I):
        hmax = max(hmax, cap[i], hi[i], mx[i])
    cmax = 1.0
    for n in range(N):
        cmax = max(cmax, 2.0 * abs(c[n]))

    res = np.empty(N)
    rdp = np.empty((I, N))
    rdm = np.empty((I, N))
    rdx = np.empty((I, N))
    rn = np.empty((I, N))
    rpu = np.zeros((5, I, N))
    rpx = np.zeros((2, I, N))
    Wu = np.zeros((5, I, N))
    Wx = np.zeros((2, I, N))
    ipp = np.zeros((I, N))
    imm = np.zeros((I, N))
    ipm = np.zeros((I, N))
    Dx = np.ones((I, N))
    Wxs = np.ones((I, N))
    lap = np.zeros((I, N))
    lam = np.zeros((I, N))
    f = np.zeros((I, N))
    K0 = np.empty(N)
    dfac = np.empty((I, N))
    lfac = np.zeros((I, N))
    tau = np.empty(N)
    K = np.empty((N, N))
    dirs = np.zeros((2, 8, I, N))  # [predictor|corrector][dp dm dx dnu ...]
    dsu = np.zeros((2, 5, I, N))
    dzu = np.zeros((2, 5, I, N))
    dsx = np.zeros((2, 2, I, N))
    dzx = np.zeros((2, 2, I, N))
    rcu = np.zeros((5, I, N))
    rcx = np.zeros((2, I, N))
    tmp = np.empty(N)
    tmp2 = np.empty(N)
    rho = np.empty((I, N))
    rup = np.empty((I, N))
    rum = np.empty((I, N))
    rx = np.empty((I, N))
    Lpp = np.zeros((I, N))
    Lmm = np.zeros((I, N))
    Lpm = np.zeros((I, N))
    corr = np.zeros((4, I, N))
    eup = np.empty((I, N))
    eum = np.empty((I, N))
    ex = np.empty((I, N))
    en = np.empty((I, N))

    it = 0
    best = np.inf
    p_best = p.copy()
    m_best = m.copy()
    while True:
        # residuals
        for n in range(N):
            acc = -c[n]
            for i in range(I):
                acc += p[i, n] - gamma[i] * m[i, n]
            res[n] = acc
        rp_max = 0.0
        rd_max = 0.0
        gap = 0.0
        obj = 0.0
        for n in range(N):
            obj += res[n] * res[n]
        for i in range(I):
            for n in range(N):
                obj += eps * (p[i, n] ** 2 + m[i, n] ** 2)
                if fp[i]:
                    g = -zu[_P_LO, i, n] + zu[_P_HI, i, n] + zu[_SHARE, i, n] * ip[i]
                    rdp[i, n] = 2.0 * res[n] + 2.0 * eps * p[i, n] + g - bp[i] * nu[i, n]
                else:
                    rdp[i, n] = 0.0
                if fm[i]:
                    g = -zu[_M_LO, i, n] + zu[_M_HI, i, n] + zu[_SHARE, i, n] * im[i]
                    rdm[i, n] = -2.0 * gamma[i] * res[n] + 2.0 * eps * m[i, n] + g - bm * nu[i, n]
                else:
                    rdm[i, n] = 0.0
                if fx[i]:
                    nxt = alpha[i] * nu[i, n + 1] if n + 1 < N else 0.0
                    rdx[i, n] = -zx[0, i, n] + zx[1, i, n] + nu[i, n] - nxt
                    prv = alpha[i] * (x[i, n - 1] if n > 0 else xhat[i])
                    rn[i, n] = x[i, n] - prv - (bp[i] * p[i, n] + bm * m[i, n])
                    rpx[0, i, n] = -x[i, n] + sx[0, i, n]
                    rpx[1, i, n] = x[i, n] + sx[1, i, n] - cap[i]
                    gap += sx[0, i, n] * zx[0, i, n] + sx[1, i, n] * zx[1, i, n]
                    rp_max = max(rp_max, abs(rn[i, n]), abs(rpx[0, i, n]), abs(rpx[1, i, n]))
                else:
                    rdx[i, n] = 0.0
                    rn[i, n] = 0.0
                gu = (-p[i, n], p[i, n], -m[i, n], m[i, n], p[i, n] * ip[i] + m[i, n] * im[i])
                for k in range(5):
                    if act[k, i]:
                        rpu[k, i, n] = gu[k] + su[k, i, n] - hu[k, i]
                        gap += su[k, i, n] * zu[k, i, n]
                        rp_max = max(rp_max, abs(rpu[k, i, n]))
                rd_max = max(rd_max, abs(rdp[i, n]), abs(rdm[i, n]), abs(rdx[i, n]))
        mu = gap / nrows
        merit = max(rp_max / hmax, rd_max / cmax, gap / (1.0 + obj))
        if not merit == merit or merit > 1e3 * best:
            break
        if merit < best:
            best = merit
            p_best[:, :] = p
            m_best[:, :] = m
        if merit < tol or it >= max_iter:
            break
        it += 1

        # Newton matrix
        for n in range(N):
            K0[n] = 0.5
        for i in range(I):
            for n in range(N):
                for k in range(5):
                    Wu[k, i, n] = zu[k, i, n] / su[k, i, n] if act[k, i] else 0.0
                dp_ = 2.0 * eps + Wu[_P_LO, i, n] + Wu[_P_HI, i, n] if fp[i] else 1.0
                dm_ = 2.0 * eps + Wu[_M_LO, i, n] + Wu[_M_HI, i, n] if fm[i] else 1.0
                w5 = Wu[_SHARE, i, n]
                vp = ip[i]
                vm = im[i]
                lpp = dp_ + w5 * vp * vp
                lmm = dm_ + w5 * vm * vm
                lpm = w5 * vp * vm
                det = dp_ * dm_ + w5 * (vp * vp * dm_ + vm * vm * dp_)
                Lpp[i, n] = lpp
                Lmm[i, n] = lmm
                Lpm[i, n] = lpm
                ipp[i, n] = lmm / det if fp[i] else 0.0
                imm[i, n] = lpp / det if fm[i] else 0.0
                ipm[i, n] = -lpm / det if (fp[i] and fm[i]) else 0.0
                if fx[i]:
                    Wx[0, i, n] = zx[0, i, n] / sx[0, i, n]
                    Wx[1, i, n] = zx[1, i, n] / sx[1, i, n]
                    Wxs[i, n] = Wx[0, i, n] + Wx[1, i, n]
                    Dx[i, n] = 1.0 / (Wxs[i, n] + X_REG)
                else:
                    Wx[0, i, n] = 0.0
                    Wx[1, i, n] = 0.0
                    Wxs[i, n] = 1.0
                    Dx[i, n] = 1.0
                lap[i, n] = ipp[i, n] - ipm[i, n] * gamma[i]
                lam[i, n] = ipm[i, n] - imm[i, n] * gamma[i]
                f[i, n] = bp[i] * lap[i, n] + bm * lam[i, n]
                K0[n] += lap[i, n] - gamma[i] * lam[i, n]
        for n in range(N):
            for k in range(N):
                K[n, k] = 0.0
            K[n, n] = K0[n]
        for i in range(I):
            if not fx[i]:
                continue
            for n in range(N):
                lbp = ipp[i, n] * bp[i] + ipm[i, n] * bm
                lbm = ipm[i, n] * bp[i] + imm[i, n] * bm
                tmp[n] = max(bp[i] * lbp + bm * lbm, 0.0)
            _ldl_tridiag(Dx[i], tmp, alpha[i], dfac[i], lfac[i])
            # diagonal of the tridiagonal inverse
            tau[N - 1] = 1.0 / dfac[i, N - 1]
            for n in range(N - 2, -1, -1):
                tau[n] = 1.0 / dfac[i, n] + lfac[i, n + 1] ** 2 * tau[n + 1]
            for k in range(N):
                fk = f[i, k] * tau[k]
                if fk == 0.0:
                    continue
                K[k, k] -= f[i, k] * fk
                prod = 1.0
                for j in range(k - 1, -1, -1):
                    prod *= -lfac[i, j + 1]
                    if prod == 0.0:
                        break
                    v = f[i, j] * fk * prod
                    K[j, k] -= v
                    K[k, j] -= v
        Lk = np.linalg.cholesky(K)

        # predictor (s = 0) then corrector (s = 1)
        sigma_mu = 0.0
        for stage in range(2):
            if stage == 0:
                for i in range(I):
                    for n in range(N):
                        for k in range(5):
                            rcu[k, i, n] = su[k, i, n] * zu[k, i, n] if act[k, i] else 0.0
                        for k in range(2):
                            rcx[k, i, n] = sx[k, i, n] * zx[k, i, n] if fx[i] else 0.0
            else:
                for i in range(I):
                    for n in range(N):
                        for k in range(5):
                            if act[k, i]:
                                rcu[k, i, n] = (su[k, i, n] * zu[k, i, n] + dsu[0, k, i, n] * dzu[0, k, i, n]
                                                - sigma_mu)
                        if fx[i]:
                            for k in range(2):
                                rcx[k, i, n] = (sx[k, i, n] * zx[k, i, n] + dsx[0, k, i, n] * dzx[0, k, i, n]
                                                - sigma_mu)
            # right-hand sides
            for i in range(I):
                for n in range(N):
                    t0 = _scaled(Wu, rpu, rcu, su, act, _P_LO, i, n)
                    t1 = _scaled(Wu, rpu, rcu, su, act, _P_HI, i, n)
                    t2 = _scaled(Wu, rpu, rcu, su, act, _M_LO, i, n)
                    t3 = _scaled(Wu, rpu, rcu, su, act, _M_HI, i, n)
                    t4 = _scaled(Wu, rpu, rcu, su, act, _SHARE, i, n)
                    rup[i, n] = -rdp[i, n] - (-t0 + t1 + t4 * ip[i]) if fp[i] else 0.0
                    rum[i, n] = -rdm[i, n] - (-t2 + t3 + t4 * im[i]) if fm[i] else 0.0
                    if fx[i]:
                        t0 = Wx[0, i, n] * rpx[0, i, n] - rcx[0, i, n] / sx[0, i, n]
                        t1 = Wx[1, i, n] * rpx[1, i, n] - rcx[1, i, n] / sx[1, i, n]
                        rx[i, n] = -rdx[i, n] - (-t0 + t1)
                    else:
                        rx[i, n] = 0.0
            d = dirs[stage]
            _kkt_solve(rup, rum, rx, rn, ipp, ipm, imm, lap, lam, K0, gamma, bp, bm, alpha, Dx, f,
                       dfac, lfac, Lk, fx, d, rho, tmp, tmp2)
            # the reduced solve loses digits once barrier weights spread; refine against the exact operator
            for _ in range(REFINE_STEPS):
                _kkt_residual(d, rup, rum, rx, rn, Lpp, Lmm, Lpm, gamma, bp, bm, alpha, Wxs, fp, fm, fx,
                              eup, eum, ex, en, tmp)
                _kkt_solve(eup, eum, ex, en, ipp, ipm, imm, lap, lam, K0, gamma, bp, bm, alpha, Dx, f,
                           dfac, lfac, Lk, fx, corr, rho, tmp, tmp2)
                for i in range(I):
                    for n in range(N):
                        for k in range(4):
                            d[k, i, n] += corr[k, i, n]
            # slacks and multipliers
            amax = 1.0
            for i in range(I):
                for n in range(N):
                    dpn = d[0, i, n]
                    dmn = d[1, i, n]
                    gd = (-dpn, dpn, -dmn, dmn, dpn * ip[i] + dmn * im[i])
                    for k in range(5):
                        if act[k, i]:
                            dz = Wu[k, i, n] * (gd[k] + rpu[k, i, n]) - rcu[k, i, n] / su[k, i, n]
                            ds = (-rcu[k, i, n] - su[k, i, n] * dz) / zu[k, i, n]
                            dzu[stage, k, i, n] = dz
                            dsu[stage, k, i, n] = ds
                            if dz < 0.0:
                                amax = min(amax, -zu[k, i, n] / dz)
                            if ds < 0.0:
                                amax = min(amax, -su[k, i, n] / ds)
                    if fx[i]:
                        dxn = d[2, i, n]
                        gx = (-dxn, dxn)
                        for k in range(2):
                            dz = Wx[k, i, n] * (gx[k] + rpx[k, i, n]) - rcx[k, i, n] / sx[k, i, n]
                            ds = (-rcx[k, i, n] - sx[k, i, n] * dz) / zx[k, i, n]
                            dzx[stage, k, i, n] = dz
                            dsx[stage, k, i, n] = ds
                            if dz < 0.0:
                                amax = min(amax, -zx[k, i, n] / dz)
                            if ds < 0.0:
                                amax = min(amax, -sx[k, i, n] / ds)
            if stage == 0:
                gap_aff = 0.0
                for i in range(I):
                    for n in range(N):
                        for k in range(5):
                            if act[k, i]:
                                gap_aff += ((su[k, i, n] + amax * dsu[0, k, i, n])
                                            * (zu[k, i, n] + amax * dzu[0, k, i, n]))
                        if fx[i]:
                            for k in range(2):
                                gap_aff += ((sx[k, i, n] + amax * dsx[0, k, i, n])
                                            * (zx[k, i, n] + amax * dzx[0, k, i, n]))
                sigma = (gap_aff / gap) ** 3
                sigma_mu = sigma * mu
            else:
                a = min(1.0, 0.99 * amax)
                for i in range(I):
                    for n in range(N):
                        p[i, n] += a * d[0, i, n]
                        m[i, n] += a * d[1, i, n]
                        x[i, n] += a * d[2, i, n]
                        nu[i, n] += a * d[3, i, n]
                        for k in range(5):
                            if act[k, i]:
                                su[k, i, n] += a * dsu[1, k, i, n]
                                zu[k, i, n] += a * dzu[1, k, i, n]
                        if fx[i]:
                            for k in range(2):
                                sx[k, i, n] += a * dsx[1, k, i, n]
                                zx[k, i, n] += a * dzx[1, k, i, n]
    return p_best, m_best, it, best <= accept


@numba.njit(cache=True, nogil=True, inline="always")
def _scaled(W, rp, rc, s, act, k, i, n):
    if not act[k, i]:
        return 0.0
    return W[k, i, n] * rp[k, i, n] - rc[k, i, n] / s[k, i, n]


@numba.njit(cache=True, nogil=True)
def _kkt_solve(rup, rum, rx, rn, ipp, ipm, imm, lap, lam, K0, gamma, bp, bm, alpha, Dx, f,
               dfac, lfac, Lk, fx, out, rho, tmp, tmp2):
    I, N = rup.shape
    # H_u^-1 r_u, with H_u = Lambda + 2 A'A
    cc = np.zeros(N)
    for i in range(I):
        for n in range(N):
            tp = ipp[i, n] * rup[i, n] + ipm[i, n] * rum[i, n]
            tm = ipm[i, n] * rup[i, n] + imm[i, n] * rum[i, n]
            out[0, i, n] = tp
            out[1, i, n] = tm
            cc[n] += tp - gamma[i] * tm
    for n in range(N):
        cc[n] /= K0[n]
    for i in range(I):
        for n in range(N):
            hp = out[0, i, n] - lap[i, n] * cc[n]
            hm = out[1, i, n] - lam[i, n] * cc[n]
            erx = Dx[i, n] * rx[i, n]
            if n > 0:
                erx -= alpha[i] * Dx[i, n - 1] * rx[i, n - 1]
            rho[i, n] = -(bp[i] * hp + bm * hm) + erx + rn[i, n]
    # dynamics multipliers: (Tri - F K0^-1 F') dnu = rho
    w = np.zeros(N)
    for i in range(I):
        if not fx[i]:
            continue
        _ldl_solve(dfac[i], lfac[i], rho[i], tmp)
        for n in range(N):
            out[3, i, n] = tmp[n]
            w[n] += f[i, n] * tmp[n]
    w = _cholesky_solve(Lk, w)
    for i in range(I):
        if not fx[i]:
            for n in range(N):
                out[3, i, n] = 0.0
            continue
        for n in range(N):
            tmp2[n] = f[i, n] * w[n]
        _ldl_solve(dfac[i], lfac[i], tmp2, tmp)
        for n in range(N):
            out[3, i, n] += tmp[n]
    # controls and states
    cc[:] = 0.0
    for i in range(I):
        for n in range(N):
            dn = out[3, i, n]
            r1 = rup[i, n] + bp[i] * dn
            r2 = rum[i, n] + bm * dn
            tp = ipp[i, n] * r1 + ipm[i, n] * r2
            tm = ipm[i, n] * r1 + imm[i, n] * r2
            out[0, i, n] = tp
            out[1, i, n] = tm
            cc[n] += tp - gamma[i] * tm
    for n in range(N):
        cc[n] /= K0[n]
    for i in range(I):
        for n in range(N):
            out[0, i, n] -= lap[i, n] * cc[n]
            out[1, i, n] -= lam[i, n] * cc[n]
            if fx[i]:
                nxt = alpha[i] * out[3, i, n + 1] if n + 1 < N else 0.0
                out[2, i, n] = Dx[i, n] * (rx[i, n] - (out[3, i, n] - nxt))
            else:
                out[2, i, n] = 0.0


@numba.njit(cache=True, nogil=True)
def _kkt_residual(d, rup, rum, rx, rn, Lpp, Lmm, Lpm, gamma, bp, bm, alpha, Wxs, fp, fm, fx,
                  eup, eum, ex, en, agg):
    # residual of  H_u du - B' dnu = r_u,  Wx dx + E' dnu = r_x,  E dx - B du = -rn
    I, N = rup.shape
    for n in range(N):
        acc = 0.0
        for i in range(I):
            acc += d[0, i, n] - gamma[i] * d[1, i, n]
        agg[n] = 2.0 * acc
    for i in range(I):
        for n in range(N):
            dp = d[0, i, n]
            dm = d[1, i, n]
            dn = d[3, i, n]
            if fp[i]:
                eup[i, n] = rup[i, n] - (Lpp[i, n] * dp + Lpm[i, n] * dm + agg[n] - bp[i] * dn)
            else:
                eup[i, n] = 0.0
            if fm[i]:
                eum[i, n] = rum[i, n] - (Lpm[i, n] * dp + Lmm[i, n] * dm - gamma[i] * agg[n] - bm * dn)
            else:
                eum[i, n] = 0.0
            if fx[i]:
                nxt = alpha[i] * d[3, i, n + 1] if n + 1 < N else 0.0
                ex[i, n] = rx[i, n] - (Wxs[i, n] * d[2, i, n] + dn - nxt)
                prv = alpha[i] * d[2, i, n - 1] if n > 0 else 0.0
                en[i, n] = rn[i, n] + (d[2, i, n] - prv) - (bp[i] * dp + bm * dm)
            else:
                ex[i, n] = 0.0
                en[i, n] = 0.0

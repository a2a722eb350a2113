"""Hot numeric kernels.

Everything here is written in the numba-compatible subset of numpy so the
same source runs jitted or, with ``TILC_DISABLE_NUMBA=1``, as plain Python.
Higher-level modules wrap these with dataclasses and validation.
"""
import math

import numpy as np

from ._jit import njit

# layout of the packed vehicle parameter vector (see VehicleParams.packed)
P_MASS = 0
P_GRAVITY = 1
P_LF = 2
P_LR = 3
P_H = 4
P_DRAG = 5  # 0.5 * rho * CdA
P_RADIUS = 6  # 4 entries, fl fr rl rr
P_INERTIA = 10  # 4 entries
P_TIRE_B = 14
P_TIRE_C = 15
P_TIRE_D = 16
P_TIRE_E = 17
P_MU_S = 18
P_C_S = 19
P_LOAD_SENS = 20
P_FZ_NOM = 21
P_TMAX = 22  # 4 entries
P_SLEW = 26
P_STANDSTILL = 27
N_PARAMS = 28

STATUS_OK = 0
STATUS_DIVERGED = 1

QP_OK = 0
QP_MAX_ITER = 1
QP_INFEASIBLE_START = 2
QP_SINGULAR = 3


# ---------------------------------------------------------------- tire / slip


@njit
def slip_kernel(v, omega, radius):
    wr = omega * radius
    den = v if v > wr else wr
    if den <= 0.0:
        return np.nan
    return (v - wr) / den


@njit
def pacejka_kernel(slip, fz, b, c, d, e, mu_s, c_s, load_sens, fz_nom):
    """Longitudinal magic-formula force magnitude, positive for braking slip."""
    if fz <= 0.0:
        return 0.0
    d_eff = d * (1.0 - load_sens * (fz - fz_nom))
    if d_eff < 0.0:
        d_eff = 0.0
    d_eff *= mu_s
    x = b * slip
    phi = x - e * (x - math.atan(x))
    return d_eff * fz * math.sin(c * c_s * math.atan(phi))


@njit
def vertical_loads_kernel(mass, gravity, lf, lr, h, ax, out):
    """Quasi-static axle loads split left/right; returns True if clamped."""
    wb = lf + lr
    front = mass * (gravity * lr - ax * h) / wb
    rear = mass * (gravity * lf + ax * h) / wb
    clamped = False
    if front < 0.0:
        front = 0.0
        clamped = True
    if rear < 0.0:
        rear = 0.0
        clamped = True
    out[0] = 0.5 * front
    out[1] = 0.5 * front
    out[2] = 0.5 * rear
    out[3] = 0.5 * rear
    return clamped


# ------------------------------------------------------------------ actuator


@njit
def expm_small(a):
    """Matrix exponential by scaling and squaring with a (6,6) Pade approximant."""
    n = a.shape[0]
    nrm = 0.0
    for i in range(n):
        row = 0.0
        for j in range(n):
            row += abs(a[i, j])
        if row > nrm:
            nrm = row
    s = 0
    if nrm > 0.5:
        s = int(math.ceil(math.log2(nrm / 0.5)))
    x = a / (2.0 ** s)
    coeffs = (1.0, 0.5, 5.0 / 44.0, 1.0 / 66.0, 1.0 / 792.0, 1.0 / 15840.0, 1.0 / 665280.0)
    ident = np.eye(n)
    num = ident.copy()
    den = ident.copy()
    power = ident.copy()
    sign = 1.0
    for k in range(1, 7):
        power = power @ x
        sign = -sign
        num += coeffs[k] * power
        den += sign * coeffs[k] * power
    result = np.ascontiguousarray(np.linalg.solve(den, num))
    for _ in range(s):
        result = result @ result
    return result


@njit
def zoh_kernel(a, b, dt):
    """Exact zero-order-hold discretization of x' = A x + B u (single input)."""
    n = a.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = a * dt
    aug[:n, n] = b * dt
    phi = expm_small(aug)
    return phi[:n, :n].copy(), phi[:n, n].copy()


@njit
def actuator_matrices(wn, zeta):
    a = np.array([[0.0, 1.0], [-wn * wn, -2.0 * zeta * wn]])
    b = np.array([0.0, wn * wn])
    return a, b


@njit
def actuator_kernel(torque, rate, command, ad, bd, tmax, slew, dt):
    if command < 0.0:
        command = 0.0
    elif command > tmax:
        command = tmax
    t_new = ad[0, 0] * torque + ad[0, 1] * rate + bd[0] * command
    r_new = ad[1, 0] * torque + ad[1, 1] * rate + bd[1] * command
    if r_new > slew:
        r_new = slew
    elif r_new < -slew:
        r_new = -slew
    step = slew * dt
    if t_new > torque + step:
        t_new = torque + step
    elif t_new < torque - step:
        t_new = torque - step
    if t_new >= tmax:
        t_new = tmax
        if r_new > 0.0:
            r_new = 0.0
    elif t_new <= 0.0:
        t_new = 0.0
        if r_new < 0.0:
            r_new = 0.0
    return t_new, r_new


# ------------------------------------------------------------------- vehicle


@njit
def _vehicle_derivs(v, omega, tact, fz, p, frozen_slips, domega, slips):
    if v < p[P_STANDSTILL]:
        for i in range(4):
            slips[i] = frozen_slips[i]
    else:
        for i in range(4):
            slips[i] = slip_kernel(v, omega[i], p[P_RADIUS + i])
    total = 0.0
    for i in range(4):
        fx = pacejka_kernel(slips[i], fz[i], p[P_TIRE_B], p[P_TIRE_C], p[P_TIRE_D],
                            p[P_TIRE_E], p[P_MU_S], p[P_C_S], p[P_LOAD_SENS], p[P_FZ_NOM])
        total += fx
        dw = (fx * p[P_RADIUS + i] - tact[i]) / p[P_INERTIA + i]
        if omega[i] <= 0.0 and dw < 0.0:
            dw = 0.0
        domega[i] = dw
    dv = -(total + p[P_DRAG] * v * v) / p[P_MASS]
    if v <= 0.0 and dv < 0.0:
        dv = 0.0
    return dv


@njit
def vehicle_step_kernel(v, pos, omega, tact, tdot, ax, slips, commands, p, ad, bd, dt):
    """One fixed step: exact actuator update, then RK4 on chassis and wheels.

    Loads come from the acceleration of the previous step; the new
    acceleration is the mean chassis acceleration over this step.
    """
    new_tact = np.empty(4)
    new_tdot = np.empty(4)
    for i in range(4):
        t_i, r_i = actuator_kernel(tact[i], tdot[i], commands[i], ad, bd,
                                   p[P_TMAX + i], p[P_SLEW], dt)
        new_tact[i] = t_i
        new_tdot[i] = r_i

    fz = np.empty(4)
    vertical_loads_kernel(p[P_MASS], p[P_GRAVITY], p[P_LF], p[P_LR], p[P_H], ax, fz)

    k1w = np.empty(4)
    k2w = np.empty(4)
    k3w = np.empty(4)
    k4w = np.empty(4)
    scratch = np.empty(4)
    w_stage = np.empty(4)

    k1v = _vehicle_derivs(v, omega, new_tact, fz, p, slips, k1w, scratch)
    for i in range(4):
        w_stage[i] = omega[i] + 0.5 * dt * k1w[i]
    v2 = v + 0.5 * dt * k1v
    k2v = _vehicle_derivs(v2, w_stage, new_tact, fz, p, slips, k2w, scratch)
    for i in range(4):
        w_stage[i] = omega[i] + 0.5 * dt * k2w[i]
    v3 = v + 0.5 * dt * k2v
    k3v = _vehicle_derivs(v3, w_stage, new_tact, fz, p, slips, k3w, scratch)
    for i in range(4):
        w_stage[i] = omega[i] + dt * k3w[i]
    v4 = v + dt * k3v
    k4v = _vehicle_derivs(v4, w_stage, new_tact, fz, p, slips, k4w, scratch)

    v_new = v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    pos_new = pos + dt / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4)
    if v_new < 0.0:
        v_new = 0.0
    new_omega = np.empty(4)
    for i in range(4):
        w = omega[i] + dt / 6.0 * (k1w[i] + 2.0 * k2w[i] + 2.0 * k3w[i] + k4w[i])
        new_omega[i] = w if w > 0.0 else 0.0

    new_slips = np.empty(4)
    for i in range(4):
        if v_new < p[P_STANDSTILL]:
            new_slips[i] = slips[i]
        else:
            new_slips[i] = slip_kernel(v_new, new_omega[i], p[P_RADIUS + i])
    ax_new = (v_new - v) / dt

    status = STATUS_OK
    if not (math.isfinite(v_new) and math.isfinite(pos_new) and math.isfinite(ax_new)):
        status = STATUS_DIVERGED
    for i in range(4):
        if not (math.isfinite(new_omega[i]) and math.isfinite(new_tact[i])):
            status = STATUS_DIVERGED
    return v_new, pos_new, new_omega, new_tact, new_tdot, ax_new, new_slips, status


# ------------------------------------------------------------------------ QP


@njit
def qp_active_set(h, f, g, lo, hi, x0, max_iter, tol):
    """Primal active-set method for min 0.5 x'Hx + f'x  s.t.  lo <= Gx <= hi.

    ``x0`` must be feasible.  Returns (x, lam, iterations, status) where
    ``Hx + f = G' lam`` at the solution, lam >= 0 on active lower bounds and
    lam <= 0 on active upper bounds.  Ties are broken by lowest row index,
    so the method is fully deterministic.
    """
    n = h.shape[0]
    m = g.shape[0]
    x = x0.copy()
    lam = np.zeros(m)
    ws_row = np.empty(m, dtype=np.int64)
    ws_side = np.empty(m)
    active = np.zeros(m, dtype=np.int64)
    nw = 0

    for i in range(m):
        gx = 0.0
        for j in range(n):
            gx += g[i, j] * x[j]
        if gx < lo[i] - tol * (1.0 + abs(lo[i])) or gx > hi[i] + tol * (1.0 + abs(hi[i])):
            return x, lam, 0, QP_INFEASIBLE_START

    for it in range(1, max_iter + 1):
        grad = h @ x + f
        size = n + nw
        kkt = np.zeros((size, size))
        rhs = np.zeros(size)
        kkt[:n, :n] = h
        for k in range(nw):
            r = ws_row[k]
            for j in range(n):
                kkt[n + k, j] = ws_side[k] * g[r, j]
                kkt[j, n + k] = -ws_side[k] * g[r, j]
        for j in range(n):
            rhs[j] = -grad[j]
        sol = np.linalg.solve(kkt, rhs)
        step = sol[:n]
        mu = sol[n:]
        if not np.all(np.isfinite(sol)):
            return x, lam, it, QP_SINGULAR

        xnorm = 1.0
        for j in range(n):
            if abs(x[j]) > xnorm:
                xnorm = abs(x[j])
        pnorm = 0.0
        for j in range(n):
            if abs(step[j]) > pnorm:
                pnorm = abs(step[j])

        if pnorm <= 1e-12 * xnorm:
            worst = -1
            worst_mu = -tol
            for k in range(nw):
                if mu[k] < worst_mu:
                    worst_mu = mu[k]
                    worst = k
            if worst < 0:
                lam[:] = 0.0
                for k in range(nw):
                    lam[ws_row[k]] = ws_side[k] * mu[k]
                return x, lam, it, QP_OK
            active[ws_row[worst]] = 0
            for k in range(worst, nw - 1):
                ws_row[k] = ws_row[k + 1]
                ws_side[k] = ws_side[k + 1]
            nw -= 1
            continue

        alpha = 1.0
        block = -1
        block_side = 0.0
        for i in range(m):
            if active[i]:
                continue
            gp = 0.0
            gx = 0.0
            for j in range(n):
                gp += g[i, j] * step[j]
                gx += g[i, j] * x[j]
            scale = 1e-14 * (1.0 + pnorm)
            if gp < -scale and math.isfinite(lo[i]):
                ratio = (lo[i] - gx) / gp
                if ratio < 0.0:
                    ratio = 0.0
                if ratio < alpha:
                    alpha = ratio
                    block = i
                    block_side = 1.0
            elif gp > scale and math.isfinite(hi[i]):
                ratio = (hi[i] - gx) / gp
                if ratio < 0.0:
                    ratio = 0.0
                if ratio < alpha:
                    alpha = ratio
                    block = i
                    block_side = -1.0
        for j in range(n):
            x[j] += alpha * step[j]
        if block >= 0:
            ws_row[nw] = block
            ws_side[nw] = block_side
            active[block] = 1
            nw += 1

    return x, lam, max_iter, QP_MAX_ITER


# ----------------------------------------------------------------------- MPC


@njit
def slip_model_matrices(v, a, radius, inertia, wn, zeta):
    """Continuous slip + actuator model with brake torque (positive) as input.

    States: slip, actuated torque, actuated torque rate.  The slip row is
    the frozen-speed/accel model  dslip = -(a/v) slip + a/v + R/(J v) T.
    """
    am = np.zeros((3, 3))
    bm = np.zeros(3)
    cm = np.zeros(3)
    am[0, 0] = -a / v
    am[0, 1] = radius / (inertia * v)
    cm[0] = a / v
    am[1, 2] = 1.0
    am[2, 1] = -wn * wn
    am[2, 2] = -2.0 * zeta * wn
    bm[2] = wn * wn
    return am, bm, cm


@njit
def velocity_form_kernel(ad, bd):
    """Augment [dx; e] with the tracking error as integrating state."""
    n = ad.shape[0]
    phi = np.zeros((n + 1, n + 1))
    gam = np.zeros(n + 1)
    phi[:n, :n] = ad
    for j in range(n):
        phi[n, j] = ad[0, j]
    phi[n, n] = 1.0
    gam[:n] = bd
    gam[n] = bd[0]
    return phi, gam


@njit
def condensed_prediction(phi, gam, horizon):
    """Error predictions e(k+i) = F[i-1] z + G[i-1] dU (reference terms excluded)."""
    nz = phi.shape[0]
    fmat = np.zeros((horizon, nz))
    gmat = np.zeros((horizon, horizon))
    power = np.eye(nz)
    # impulse[j] = phi^j gam
    impulse = np.zeros((horizon, nz))
    col = gam.copy()
    for j in range(horizon):
        impulse[j] = col
        col = phi @ col
    for i in range(horizon):
        power = phi @ power
        fmat[i] = power[nz - 1]
        for j in range(i + 1):
            gmat[i, j] = impulse[i - j, nz - 1]
    return fmat, gmat


@njit
def mpc_qp_matrices(fmat, gmat, z0, ref_offsets, u_prev, umax, du_max, q, r, var_scale):
    """Condensed, scaled QP data.

    Decision variable y = dU / var_scale.  Constraint rows: one box row per
    move (rate limit, intersected with the cumulative bound for the first
    move) and one cumulative-torque row for every later move.
    """
    horizon = gmat.shape[0]
    free = fmat @ z0 - ref_offsets
    gs = gmat * var_scale
    hmat = q * (gs.T @ gs)
    for j in range(horizon):
        hmat[j, j] += r * var_scale * var_scale
    fvec = q * (gs.T @ free)
    norm = 0.0
    for j in range(horizon):
        norm += hmat[j, j]
    norm /= horizon
    hmat = hmat / norm
    fvec = fvec / norm
    # regularize
    min_diag = 1e-8
    for j in range(horizon):
        if hmat[j, j] < min_diag:
            hmat[j, j] = min_diag

    m = 2 * horizon - 1
    gin = np.zeros((m, horizon))
    lo = np.empty(m)
    hi = np.empty(m)
    rate = du_max / var_scale
    for j in range(horizon):
        gin[j, j] = 1.0
        lo[j] = -rate
        hi[j] = rate
    lo0 = -u_prev / var_scale
    hi0 = (umax - u_prev) / var_scale
    if lo0 > lo[0]:
        lo[0] = lo0
    if hi0 < hi[0]:
        hi[0] = hi0
    if lo[0] > hi[0]:
        lo[0] = hi[0]
    for j in range(1, horizon):
        row = horizon + j - 1
        for k in range(j + 1):
            gin[row, k] = 1.0
        lo[row] = lo0
        hi[row] = hi0
    return hmat, fvec, gin, lo, hi, free, norm


@njit
def mpc_solve_kernel(v, a, radius, inertia, wn, zeta, ts, horizon, z0, ref_offsets,
                     u_prev, umax, du_max, q, r, var_scale, max_iter, tol):
    am, bm, _ = slip_model_matrices(v, a, radius, inertia, wn, zeta)
    ad, bd = zoh_kernel(am, bm, ts)
    phi, gam = velocity_form_kernel(ad, bd)
    fmat, gmat = condensed_prediction(phi, gam, horizon)
    hmat, fvec, gin, lo, hi, free, _ = mpc_qp_matrices(
        fmat, gmat, z0, ref_offsets, u_prev, umax, du_max, q, r, var_scale)
    y0 = np.zeros(horizon)
    # u_prev within bounds makes the zero move feasible; otherwise pull back
    if lo[0] > 0.0:
        y0[0] = lo[0]
    elif hi[0] < 0.0:
        y0[0] = hi[0]
    y, lam, iters, status = qp_active_set(hmat, fvec, gin, lo, hi, y0, max_iter, tol)
    du = y * var_scale
    err_pred = free + gmat @ du
    return du, err_pred, iters, status

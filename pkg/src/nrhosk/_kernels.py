"""Compiled kernels for the force model and variational right-hand sides.

Internal module. Everything here runs in canonical units on flat float64
arrays so the integrator hot loop stays allocation-light. Model parameters
travel as a single packed vector (see the index constants below); public
modules build the pack once and wrap these kernels with typed interfaces.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Parameter-pack indices. All entries canonical unless noted.
MU_MOON = 0        # scaled lunar GM; 1.0 by construction
MU_EARTH = 1
MU_SUN = 2
J2_MOON = 3
R_MOON = 4         # lunar equatorial radius, LU
SRP_COEFF = 5      # P * Cr * A/m in canonical acceleration units
EMB_FACTOR = 6     # m_earth / (m_earth + m_moon)
OBLIQUITY = 7      # lunar pole tilt off the Earth-Moon orbit normal, rad
FLAG_J2 = 8
FLAG_EARTH = 9
FLAG_SUN = 10
FLAG_SRP = 11
EARTH_EL = 12      # a, e, n, tp then 9 entries of perifocal->inertial rotation
SUN_EL = 25
PACK_SIZE = 38

_TWO_PI = 2.0 * np.pi


@njit(cache=True)
def solve_kepler(mean_anomaly, ecc):
    """Eccentric anomaly from mean anomaly, Newton with bisection fallback."""
    m = mean_anomaly % _TWO_PI
    if m < 0.0:
        m += _TWO_PI
    e_anom = m if ecc < 0.8 else np.pi
    for _ in range(25):
        f = e_anom - ecc * np.sin(e_anom) - m
        df = 1.0 - ecc * np.cos(e_anom)
        step = f / df
        e_anom -= step
        if abs(step) < 1e-14:
            return e_anom
    # Newton stalled (pathological ecc); bisect on the monotone residual.
    lo, hi = 0.0, _TWO_PI
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid - ecc * np.sin(mid) - m > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


@njit(cache=True)
def ellipse_state(t, elements):
    """Position/velocity on a fixed Keplerian ellipse.

    ``elements`` holds [a, e, n, tp, R00..R22] with R the perifocal-to-base
    rotation; output units follow the element units.
    """
    a = elements[0]
    ecc = elements[1]
    n = elements[2]
    tp = elements[3]
    e_anom = solve_kepler(n * (t - tp), ecc)
    ce = np.cos(e_anom)
    se = np.sin(e_anom)
    b_over_a = np.sqrt(1.0 - ecc * ecc)
    x_pf = a * (ce - ecc)
    y_pf = a * b_over_a * se
    edot = n / (1.0 - ecc * ce)
    vx_pf = -a * se * edot
    vy_pf = a * b_over_a * ce * edot
    r = np.empty(3)
    v = np.empty(3)
    for i in range(3):
        r[i] = elements[4 + 3 * i] * x_pf + elements[5 + 3 * i] * y_pf
        v[i] = elements[4 + 3 * i] * vx_pf + elements[5 + 3 * i] * vy_pf
    return r, v


@njit(cache=True)
def earth_state(t, p):
    """Earth position/velocity relative to the Moon."""
    return ellipse_state(t, p[EARTH_EL:EARTH_EL + 13])


@njit(cache=True)
def sun_state(t, p):
    """Sun position/velocity relative to the Moon.

    The Sun orbits the Earth-Moon barycenter; the Moon's own barycentric
    offset is the Earth-mass fraction of the Earth-Moon vector.
    """
    s_r, s_v = ellipse_state(t, p[SUN_EL:SUN_EL + 13])
    e_r, e_v = earth_state(t, p)
    f = p[EMB_FACTOR]
    return s_r + f * e_r, s_v + f * e_v


@njit(cache=True)
def em_rotation(t, p):
    """Inertial -> Earth-Moon rotating frame.

    Returns the rotation matrix (rows are the frame axes) and the frame
    angular velocity in inertial coordinates: x from Earth toward the Moon,
    z along the Earth-Moon orbital angular momentum.
    """
    e_r, e_v = earth_state(t, p)
    en = np.sqrt(e_r[0] ** 2 + e_r[1] ** 2 + e_r[2] ** 2)
    h = np.empty(3)
    h[0] = e_r[1] * e_v[2] - e_r[2] * e_v[1]
    h[1] = e_r[2] * e_v[0] - e_r[0] * e_v[2]
    h[2] = e_r[0] * e_v[1] - e_r[1] * e_v[0]
    hn = np.sqrt(h[0] ** 2 + h[1] ** 2 + h[2] ** 2)
    rot = np.empty((3, 3))
    for i in range(3):
        rot[0, i] = -e_r[i] / en
        rot[2, i] = h[i] / hn
    rot[1, 0] = rot[2, 1] * rot[0, 2] - rot[2, 2] * rot[0, 1]
    rot[1, 1] = rot[2, 2] * rot[0, 0] - rot[2, 0] * rot[0, 2]
    rot[1, 2] = rot[2, 0] * rot[0, 1] - rot[2, 1] * rot[0, 0]
    w = h / (en * en)
    return rot, w


@njit(cache=True)
def pa_rotation(t, p):
    """Inertial -> lunar principal axes: EM frame tilted by a fixed obliquity."""
    rot_em, _ = em_rotation(t, p)
    eps = p[OBLIQUITY]
    c = np.cos(eps)
    s = np.sin(eps)
    rot = np.empty((3, 3))
    for i in range(3):
        rot[0, i] = rot_em[0, i]
        rot[1, i] = c * rot_em[1, i] + s * rot_em[2, i]
        rot[2, i] = -s * rot_em[1, i] + c * rot_em[2, i]
    return rot


@njit(cache=True)
def accel_kepler(r, mu):
    rn = np.sqrt(r[0] ** 2 + r[1] ** 2 + r[2] ** 2)
    return -(mu / rn ** 3) * r


@njit(cache=True)
def accel_j2(t, r, p):
    """Lunar oblateness acceleration, evaluated in the PA frame and rotated out."""
    rot = pa_rotation(t, p)
    r_pa = rot @ np.ascontiguousarray(r)
    rn2 = r_pa[0] ** 2 + r_pa[1] ** 2 + r_pa[2] ** 2
    rn = np.sqrt(rn2)
    u = r_pa[2] ** 2 / rn2
    k = -1.5 * p[MU_MOON] * p[J2_MOON] * p[R_MOON] ** 2
    w = k / rn ** 5
    g = np.empty(3)
    g[0] = w * r_pa[0] * (1.0 - 5.0 * u)
    g[1] = w * r_pa[1] * (1.0 - 5.0 * u)
    g[2] = w * r_pa[2] * (3.0 - 5.0 * u)
    return rot.T @ g


@njit(cache=True)
def accel_third_body(r, d, mu_body):
    """Differential gravity of a perturber at position d (same origin as r)."""
    ri = r - d
    rin = np.sqrt(ri[0] ** 2 + ri[1] ** 2 + ri[2] ** 2)
    dn = np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
    return -mu_body * (ri / rin ** 3 + d / dn ** 3)


@njit(cache=True)
def accel_srp(t, r, p):
    """Solar radiation pressure, inverse-square in the Sun distance.

    The reference distance is the instantaneous Earth-Sun separation, and the
    push is along the Sun-to-spacecraft direction. No shadow model.
    """
    d_sun, _ = sun_state(t, p)
    e_r, _ = earth_state(t, p)
    rs = r - d_sun
    rsn = np.sqrt(rs[0] ** 2 + rs[1] ** 2 + rs[2] ** 2)
    des = e_r - d_sun
    d_ref2 = des[0] ** 2 + des[1] ** 2 + des[2] ** 2
    return p[SRP_COEFF] * d_ref2 / rsn ** 3 * rs


@njit(cache=True)
def accel_total(t, y, p):
    """Sum of all enabled force-model terms at state y = (r, v)."""
    r = y[:3].copy()
    a = accel_kepler(r, p[MU_MOON])
    if p[FLAG_J2] != 0.0:
        a += accel_j2(t, r, p)
    if p[FLAG_EARTH] != 0.0:
        d_e, _ = earth_state(t, p)
        a += accel_third_body(r, d_e, p[MU_EARTH])
    if p[FLAG_SUN] != 0.0:
        d_s, _ = sun_state(t, p)
        a += accel_third_body(r, d_s, p[MU_SUN])
    if p[FLAG_SRP] != 0.0:
        a += accel_srp(t, r, p)
    return a


@njit(cache=True)
def _grav_gradient_point(r, mu):
    """mu * (3 rr^T / r^5 - I / r^3) for a point mass at the origin."""
    rn2 = r[0] ** 2 + r[1] ** 2 + r[2] ** 2
    rn = np.sqrt(rn2)
    g = np.empty((3, 3))
    c1 = 3.0 * mu / rn ** 5
    c2 = mu / rn ** 3
    for i in range(3):
        for j in range(3):
            g[i, j] = c1 * r[i] * r[j]
        g[i, i] -= c2
    return g


@njit(cache=True)
def accel_jacobian(t, y, p):
    """d(acceleration)/d(position), 3x3, for all enabled terms."""
    r = y[:3].copy()
    g = _grav_gradient_point(r, p[MU_MOON])
    if p[FLAG_J2] != 0.0:
        rot = pa_rotation(t, p)
        r_pa = rot @ np.ascontiguousarray(r)
        rn2 = r_pa[0] ** 2 + r_pa[1] ** 2 + r_pa[2] ** 2
        rn = np.sqrt(rn2)
        u = r_pa[2] ** 2 / rn2
        k = -1.5 * p[MU_MOON] * p[J2_MOON] * p[R_MOON] ** 2
        w = k / rn ** 7
        h_pa = np.empty((3, 3))
        for i in range(3):
            ci = 3.0 if i == 2 else 1.0
            for j in range(3):
                cj = 3.0 if j == 2 else 1.0
                h_pa[i, j] = w * r_pa[i] * r_pa[j] * (35.0 * u - 5.0 * (ci + cj - 1.0))
            h_pa[i, i] += w * rn2 * (ci - 5.0 * u)
        g += rot.T @ np.ascontiguousarray(h_pa @ rot)
    if p[FLAG_EARTH] != 0.0:
        d_e, _ = earth_state(t, p)
        g += _grav_gradient_point(r - d_e, p[MU_EARTH])
    if p[FLAG_SUN] != 0.0:
        d_s0, _ = sun_state(t, p)
        g += _grav_gradient_point(r - d_s0, p[MU_SUN])
    if p[FLAG_SRP] != 0.0:
        d_sun, _ = sun_state(t, p)
        e_r, _ = earth_state(t, p)
        rs = r - d_sun
        rsn2 = rs[0] ** 2 + rs[1] ** 2 + rs[2] ** 2
        rsn = np.sqrt(rsn2)
        des = e_r - d_sun
        d_ref2 = des[0] ** 2 + des[1] ** 2 + des[2] ** 2
        c = p[SRP_COEFF] * d_ref2
        for i in range(3):
            for j in range(3):
                g[i, j] -= 3.0 * c * rs[i] * rs[j] / rsn ** 5
            g[i, i] += c / rsn ** 3
    return g


@njit(cache=True)
def rhs_state(t, y, p):
    """Equations of motion, 6 states."""
    dy = np.empty(6)
    dy[:3] = y[3:6]
    dy[3:] = accel_total(t, y, p)
    return dy


@njit(cache=True)
def rhs_state_stm(t, y, p):
    """Equations of motion plus variational equations, 6 + 36 states."""
    dy = np.empty(42)
    dy[:3] = y[3:6]
    dy[3:6] = accel_total(t, y, p)
    g = accel_jacobian(t, y, p)
    phi = np.ascontiguousarray(y[6:42]).reshape(6, 6)
    dy[6:24] = phi[3:6, :].ravel()
    gphi = g @ np.ascontiguousarray(phi[:3, :])
    dy[24:42] = gphi.ravel()
    return dy

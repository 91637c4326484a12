"""Compiled inner loops.

Everything random is drawn by the caller and passed in as arrays, so the
kernels are deterministic functions of their inputs.
"""
import math

import numpy as np
from numba import njit

STATUS_OK = -1


@njit(cache=True)
def relax(fx, fy, fz, factor, fx_target):
    """Exact decay/pumping over an interval: F -> F_ss + (F - F_ss) * factor."""
    return (
        fx_target + (fx - fx_target) * factor,
        fy * factor,
        fz * factor,
    )


@njit(cache=True)
def rotate_y(fx, fy, fz, theta):
    """Rotate (fx, fz) about the y axis; positive theta takes +x toward +z."""
    c = math.cos(theta)
    s = math.sin(theta)
    return fx * c - fz * s, fy, fx * s + fz * c


@njit(cache=True)
def spin_step(fx, fy, fz, theta, half_factor, fx_target):
    """Symmetric split: half relaxation, rotation, half relaxation.

    With no pumping (``fx_target == 0``) relaxation is an isotropic scaling
    and commutes with the rotation, so the split is exact.
    """
    fx, fy, fz = relax(fx, fy, fz, half_factor, fx_target)
    fx, fy, fz = rotate_y(fx, fy, fz, theta)
    return relax(fx, fy, fz, half_factor, fx_target)


@njit(cache=True)
def sos_step(sos, state, x):
    """One sample through a cascade of transposed direct-form-II biquads."""
    for i in range(sos.shape[0]):
        b0 = sos[i, 0]
        b1 = sos[i, 1]
        b2 = sos[i, 2]
        a1 = sos[i, 4]
        a2 = sos[i, 5]
        y = b0 * x + state[i, 0]
        state[i, 0] = b1 * x - a1 * y + state[i, 1]
        state[i, 1] = b2 * x - a2 * y
        x = y
    return x


@njit(cache=True)
def sos_filter(sos, state, xs):
    out = np.empty_like(xs)
    for k in range(xs.shape[0]):
        out[k] = sos_step(sos, state, xs[k])
    return out


@njit(cache=True)
def actuator_advance(ad, bd, c_mean, d_mean, c_out, d_out, state, u):
    """Zero-order-hold step. Returns (field at step start, mean field over step)."""
    n = state.shape[0]
    b_start = d_out * u
    b_mean = d_mean * u
    for i in range(n):
        b_start += c_out[i] * state[i]
        b_mean += c_mean[i] * state[i]
    new = np.empty(n)
    for i in range(n):
        acc = bd[i] * u
        for j in range(n):
            acc += ad[i, j] * state[j]
        new[i] = acc
    for i in range(n):
        state[i] = new[i]
    return b_start, b_mean


@njit(cache=True)
def run_loop(
    b_ext_mean,
    u_inject,
    noise,
    feedback_start,
    sos,
    sos_state,
    ad,
    bd,
    c_mean,
    d_mean,
    c_out,
    d_out,
    act_state,
    spin0,
    gamma,
    dt,
    half_factor,
    fx_target,
    meas_gain,
    reference,
    f_bound,
    u_limit,
):
    """Single-rate loop: measure, filter, actuate, precess.

    Returns (y, u, b_c, fz, f_norm, status); ``status`` is the index of the
    first sample with ``|fz| > f_bound`` or ``|u| > u_limit``, or ``STATUS_OK``.
    """
    n = b_ext_mean.shape[0]
    y = np.zeros(n)
    u = np.zeros(n)
    bc = np.zeros(n)
    fz_out = np.zeros(n)
    fn_out = np.zeros(n)
    fx = spin0[0]
    fy = spin0[1]
    fz = spin0[2]
    status = STATUS_OK
    for k in range(n):
        fz_out[k] = fz
        fn_out[k] = math.sqrt(fx * fx + fy * fy + fz * fz)
        yk = meas_gain * fz + noise[k]
        y[k] = yk
        uk = u_inject[k]
        if k >= feedback_start:
            uk += sos_step(sos, sos_state, reference - yk)
        u[k] = uk
        b_start, b_mean = actuator_advance(ad, bd, c_mean, d_mean, c_out, d_out, act_state, uk)
        bc[k] = b_mean
        theta = gamma * (b_ext_mean[k] + b_mean) * dt
        fx, fy, fz = spin_step(fx, fy, fz, theta, half_factor, fx_target)
        if not (math.fabs(fz) <= f_bound and math.fabs(uk) <= u_limit):
            status = k
            break
    return y, u, bc, fz_out, fn_out, status

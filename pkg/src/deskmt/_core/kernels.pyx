# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled backend for the tabular-model kernels.

Mirrors pure.py function for function; see that module for the logits
convention. Kept dependency-free beyond libc so the build stays cheap.
"""

import numpy as np

from libc.math cimport exp, log


def build_m(double[::1] bias, double[:, ::1] pos, double[:, :, ::1] s1,
            double[:, :, ::1] s2, const long[::1] x, int n_steps):
    cdef int radius = (s1.shape[0] - 1) // 2
    cdef int p_max = pos.shape[0] - 1
    cdef int n_out = bias.shape[0]
    cdef int src_len = x.shape[0]
    cdef int t, i, v, sh, prow
    out = np.empty((n_steps, n_out), dtype=np.float64)
    cdef double[:, ::1] m = out
    for t in range(n_steps):
        prow = t if t < p_max else p_max
        for v in range(n_out):
            m[t, v] = bias[v] + pos[prow, v]
        for i in range(src_len):
            sh = i - t
            if sh < -radius:
                sh = -radius
            elif sh > radius:
                sh = radius
            for v in range(n_out):
                m[t, v] += s1[sh + radius, x[i], v]
            sh = (src_len - 1 - i) - t
            if sh < -radius:
                sh = -radius
            elif sh > radius:
                sh = radius
            for v in range(n_out):
                m[t, v] += s2[sh + radius, x[i], v]
    return out


def scatter_shift(double[:, ::1] d_m, const long[::1] x, int radius,
                  double[:, :, ::1] d_s1, double[:, :, ::1] d_s2):
    cdef int n_steps = d_m.shape[0]
    cdef int src_len = x.shape[0]
    cdef int n_out = d_s1.shape[2]
    cdef int t, i, v, sh
    for t in range(n_steps):
        for i in range(src_len):
            sh = i - t
            if sh < -radius:
                sh = -radius
            elif sh > radius:
                sh = radius
            for v in range(n_out):
                d_s1[sh + radius, x[i], v] += d_m[t, v]
            sh = (src_len - 1 - i) - t
            if sh < -radius:
                sh = -radius
            elif sh > radius:
                sh = radius
            for v in range(n_out):
                d_s2[sh + radius, x[i], v] += d_m[t, v]


cdef double _row_logprob(double[:, ::1] m, double[:, ::1] t_table,
                         int step, int prev, int target, int n_out):
    cdef double mx = m[step, 0] + t_table[prev, 0]
    cdef double z = 0.0
    cdef double val
    cdef int v
    for v in range(1, n_out):
        val = m[step, v] + t_table[prev, v]
        if val > mx:
            mx = val
    for v in range(n_out):
        z += exp(m[step, v] + t_table[prev, v] - mx)
    return m[step, target] + t_table[prev, target] - mx - log(z)


def step_logprob(double[:, ::1] m, double[:, ::1] t_table, const long[::1] ys,
                 int bos, int eos, bint terminated):
    cdef int n_out = t_table.shape[1]
    cdef int prev = bos
    cdef double lp = 0.0
    cdef int step
    for step in range(ys.shape[0]):
        lp += _row_logprob(m, t_table, step, prev, ys[step], n_out)
        prev = ys[step]
    if terminated:
        lp += _row_logprob(m, t_table, ys.shape[0], prev, eos, n_out)
    return lp


def step_grad(double[:, ::1] m, double[:, ::1] t_table, const long[::1] ys,
              int bos, int eos, bint terminated, double weight,
              double[:, ::1] d_m, double[:, ::1] d_t):
    cdef int n_out = t_table.shape[1]
    cdef int n_steps = ys.shape[0] + (1 if terminated else 0)
    cdef int prev = bos
    cdef double lp = 0.0
    cdef double mx, z, val, g
    cdef int step, v, target
    for step in range(n_steps):
        target = ys[step] if step < ys.shape[0] else eos
        mx = m[step, 0] + t_table[prev, 0]
        for v in range(1, n_out):
            val = m[step, v] + t_table[prev, v]
            if val > mx:
                mx = val
        z = 0.0
        for v in range(n_out):
            z += exp(m[step, v] + t_table[prev, v] - mx)
        lp += m[step, target] + t_table[prev, target] - mx - log(z)
        for v in range(n_out):
            g = -weight * exp(m[step, v] + t_table[prev, v] - mx) / z
            if v == target:
                g += weight
            d_m[step, v] += g
            d_t[prev, v] += g
        prev = target
    return lp


def sample_steps(double[:, ::1] m, double[:, ::1] t_table, int bos, int eos,
                 int max_len, double[::1] uniforms):
    cdef int n_out = t_table.shape[1]
    cdef int prev = bos
    cdef int step, v, tok
    cdef double mx, z, val, acc, u
    ys = []
    probs_arr = np.empty(n_out, dtype=np.float64)
    cdef double[::1] probs = probs_arr
    for step in range(max_len + 1):
        mx = m[step, 0] + t_table[prev, 0]
        for v in range(1, n_out):
            val = m[step, v] + t_table[prev, v]
            if val > mx:
                mx = val
        z = 0.0
        for v in range(n_out):
            probs[v] = exp(m[step, v] + t_table[prev, v] - mx)
            z += probs[v]
        u = uniforms[step] * z
        acc = 0.0
        tok = n_out - 1
        for v in range(n_out):
            acc += probs[v]
            if acc > u:
                tok = v
                break
        if tok == eos:
            return ys, True
        if step == max_len:
            return ys, False
        ys.append(tok)
        prev = tok
    return ys, False

# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled hot loops. Semantics match ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def auction_pass(const double[:, :] q, const double[:] lam, const double[:] alpha,
                 const double[:] b2):
    cdef Py_ssize_t n = q.shape[0], m = q.shape[1], i, j, k
    winners_arr = np.empty(n, dtype=np.int64)
    counts_arr = np.zeros(m, dtype=np.int64)
    cdef cnp.int64_t[:] winners = winners_arr
    cdef cnp.int64_t[:] counts = counts_arr
    cdef double best, bid, qval = 0.0, rtb = 0.0, hinge = 0.0
    for i in range(n):
        k = -1
        best = -INFINITY
        for j in range(m):
            bid = lam[j] * q[i, j] + alpha[j]
            if bid > best:
                best = bid
                k = j
        if k >= 0 and best > b2[i]:
            winners[i] = k
            counts[k] += 1
            qval += lam[k] * q[i, k]
            hinge += best - b2[i]
        else:
            winners[i] = -1
            rtb += b2[i]
    return winners_arr, counts_arr, qval, rtb, hinge


def msvv_pass(const double[:, :] q, const double[:] lam, const double[:] penalty,
              const double[:] b2, const double[:] demand, cnp.int64_t[:] delivered):
    cdef Py_ssize_t n = q.shape[0], m = q.shape[1], i, j, k
    winners_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[:] winners = winners_arr
    cdef double rtb_scale = 1.0 - exp(-1.0)
    cdef double best, bid, x, qval = 0.0, rtb = 0.0
    for i in range(n):
        best = b2[i] * rtb_scale
        k = -1
        for j in range(m):
            if demand[j] > 0:
                x = delivered[j] / demand[j]
                if x > 1.0:
                    x = 1.0
            else:
                x = 1.0
            bid = (penalty[j] + lam[j] * q[i, j]) * (1.0 - exp(x - 1.0))
            if bid > best:
                best = bid
                k = j
        winners[i] = k
        if k >= 0:
            delivered[k] += 1
            qval += lam[k] * q[i, k]
        else:
            rtb += b2[i]
    return winners_arr, qval, rtb


def rule_assignment(const double[:, :] u, const double[:] price):
    cdef Py_ssize_t n = u.shape[0], m = u.shape[1], i, j, k
    assign_arr = np.empty(n, dtype=np.int64)
    beta_arr = np.zeros(n)
    cdef cnp.int64_t[:] assign = assign_arr
    cdef double[:] beta = beta_arr
    cdef double best, v
    for i in range(n):
        k = -1
        best = -INFINITY
        for j in range(m):
            v = u[i, j] - price[j]
            if v > best:
                best = v
                k = j
        if k >= 0 and best > 0.0:
            assign[i] = k
            beta[i] = best
        else:
            assign[i] = -1
    return assign_arr, beta_arr


def transport_ssp(u_in, cap_in, price=None):
    u_full = np.asarray(u_in, dtype=np.float64)
    cdef Py_ssize_t n = u_full.shape[0], m = u_full.shape[1]
    assign_full = np.full(n, -1, dtype=np.int64)
    if n == 0 or m == 0:
        return assign_full
    cand = np.flatnonzero(u_full.max(axis=1) > 0.0)
    uc_arr = np.ascontiguousarray(u_full[cand])
    cdef double[:, :] uc = uc_arr
    cdef Py_ssize_t nc = cand.size
    if price is None:
        phi_c_arr = np.maximum(uc_arr.max(axis=0), 0.0) if nc else np.zeros(m)
    else:
        phi_c_arr = np.array(price, dtype=np.float64)
    cdef double[:] phi_c = phi_c_arr
    a_arr, beta_arr = rule_assignment(uc_arr, phi_c_arr)
    cdef cnp.int64_t[:] a = a_arr
    phi_i_arr = -beta_arr
    cdef double[:] phi_i = phi_i_arr
    cap_arr = np.ascontiguousarray(cap_in, dtype=np.int64)
    used_arr = np.bincount(a_arr[a_arr >= 0], minlength=m).astype(np.int64)
    if np.any(used_arr > cap_arr):
        raise ValueError("warm-start prices over-fill a contract")
    cdef cnp.int64_t[:] supply = cap_arr - used_arr
    cdef cnp.int64_t[:] short = np.zeros(m, dtype=np.int64)
    cdef double phi_z = 0.0, phi_t = 0.0
    cdef double[:] dist_c = np.empty(m)
    cdef cnp.int64_t[:] done = np.zeros(m, dtype=np.int64)
    cdef cnp.int64_t[:] pred_c = np.empty(m, dtype=np.int64)
    cdef double[:] dimp = np.empty(nc)
    cdef cnp.int64_t[:] pred_i = np.empty(nc, dtype=np.int64)
    cdef Py_ssize_t i, j, k, jj, s, pred_t, pred_z, pc
    cdef double dist_t, dist_z, dj, cd, td, kd, zd
    cdef bint z_done
    for s in range(m):
        while supply[s] > 0:
            for j in range(m):
                dist_c[j] = INFINITY
                done[j] = 0
                pred_c[j] = -1
            dist_c[s] = 0.0
            pred_c[s] = -2
            for i in range(nc):
                dimp[i] = INFINITY
                pred_i[i] = -1
            dist_z = INFINITY
            pred_z = -1
            z_done = False
            dist_t = INFINITY
            pred_t = -1
            while True:
                j = -1
                dj = INFINITY
                for jj in range(m):
                    if not done[jj] and dist_c[jj] < dj:
                        dj = dist_c[jj]
                        j = jj
                if not z_done and dist_z < dj:
                    if dist_t <= dist_z:
                        break
                    z_done = True
                    for k in range(m):
                        if short[k] > 0 and not done[k]:
                            kd = dist_z + phi_z - phi_c[k]
                            if kd < dist_c[k]:
                                dist_c[k] = kd
                                pred_c[k] = -3
                    continue
                if j < 0 or dist_t <= dj:
                    break
                done[j] = 1
                zd = dj + phi_c[j] - phi_z
                if not z_done and zd < dist_z:
                    dist_z = zd
                    pred_z = j
                    td = zd + phi_z - phi_t
                    if td < dist_t:
                        dist_t = td
                        pred_t = -2
                for i in range(nc):
                    if a[i] == j:
                        continue
                    cd = dj - uc[i, j] + phi_c[j] - phi_i[i]
                    if cd < dimp[i]:
                        dimp[i] = cd
                        pred_i[i] = j
                        k = a[i]
                        if k < 0:
                            td = cd + phi_i[i] - phi_t
                            if td < dist_t:
                                dist_t = td
                                pred_t = i
                        elif not done[k]:
                            kd = cd + uc[i, k] + phi_i[i] - phi_c[k]
                            if kd < dist_c[k]:
                                dist_c[k] = kd
                                pred_c[k] = i
            for j in range(m):
                phi_c[j] += dist_c[j] if dist_c[j] < dist_t else dist_t
            for i in range(nc):
                phi_i[i] += dimp[i] if dimp[i] < dist_t else dist_t
            phi_z += dist_z if dist_z < dist_t else dist_t
            phi_t += dist_t
            if pred_t == -2 and pred_z == s and pred_c[s] == -2:
                short[s] += supply[s]
                supply[s] = 0
                continue
            if pred_t == -2:
                j = pred_z
                short[j] += 1
            else:
                j = pred_i[pred_t]
                a[pred_t] = j
            while True:
                pc = pred_c[j]
                if pc == -2:
                    break
                if pc == -3:
                    short[j] -= 1
                    j = pred_z
                    short[j] += 1
                else:
                    j = pred_i[pc]
                    a[pc] = j
            supply[s] -= 1
    assign_full[cand] = a_arr
    return assign_full

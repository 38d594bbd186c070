"""Numpy implementations of the hot loops.

These mirror ``_ckernels.pyx`` one to one and are used when the compiled
extension is unavailable (or when ``IMPALLOC_PURE=1``).
"""

import math

import numpy as np


def auction_pass(q, lam, alpha, b2):
    """Allocate a block of impressions with constant bid offsets.

    Returns ``(winners, counts, quality_value, rtb_revenue, hinge)`` where
    ``winners[i]`` is the winning contract index or -1 for RTB.
    """
    n, m = q.shape
    counts = np.zeros(m, dtype=np.int64)
    if n == 0:
        return np.empty(0, dtype=np.int64), counts, 0.0, 0.0, 0.0
    if m == 0:
        return np.full(n, -1, dtype=np.int64), counts, 0.0, float(b2.sum()), 0.0
    quality = q * lam
    bids = quality + alpha
    k = np.argmax(bids, axis=1)
    rows = np.arange(n)
    best = bids[rows, k]
    win = best > b2
    winners = np.where(win, k, -1).astype(np.int64)
    counts += np.bincount(k[win], minlength=m)
    qval = float(quality[rows[win], k[win]].sum())
    rtb = float(b2[~win].sum())
    hinge = float((best[win] - b2[win]).sum())
    return winners, counts, qval, rtb, hinge


def msvv_pass(q, lam, penalty, b2, demand, delivered):
    """Sequential MSVV allocation; ``delivered`` is updated in place."""
    n, m = q.shape
    winners = np.full(n, -1, dtype=np.int64)
    rtb_scale = 1.0 - math.exp(-1.0)
    qval = 0.0
    rtb = 0.0
    for i in range(n):
        best = b2[i] * rtb_scale
        k = -1
        for j in range(m):
            if demand[j] > 0:
                x = min(1.0, delivered[j] / demand[j])
            else:
                x = 1.0
            bid = (penalty[j] + lam[j] * q[i, j]) * (1.0 - math.exp(x - 1.0))
            if bid > best:
                best = bid
                k = j
        winners[i] = k
        if k >= 0:
            delivered[k] += 1
            qval += lam[k] * q[i, k]
        else:
            rtb += b2[i]
    return winners, qval, rtb


def rule_assignment(u, price):
    """Give each impression to its best ``u - price`` contract when that is positive."""
    n, m = u.shape
    if m == 0:
        return np.full(n, -1, dtype=np.int64), np.zeros(n)
    s = u - price
    k = np.argmax(s, axis=1)
    best = s[np.arange(n), k]
    win = best > 0.0
    return np.where(win, k, -1).astype(np.int64), np.where(win, best, 0.0)


def transport_ssp(u, cap, price=None):
    """Max-weight assignment of impressions to capacitated contracts.

    Maximizes ``sum u[i, assign[i]]`` with every impression used at most
    once and contract ``j`` taking at most ``cap[j]`` impressions. Each
    contract supplies ``cap[j]`` units that end either on an impression or
    on a shortfall node of zero value; successive shortest paths route the
    units. ``price`` (contract duals, >= 0) warm-starts from the rule
    allocation it induces, which must not exceed any capacity.
    """
    u = np.asarray(u, dtype=float)
    n, m = u.shape
    assign = np.full(n, -1, dtype=np.int64)
    if n == 0 or m == 0:
        return assign
    cap = np.asarray(cap, dtype=np.int64)
    umax = u.max(axis=1)
    cand = np.flatnonzero(umax > 0.0)
    uc = np.ascontiguousarray(u[cand])
    nc = cand.size
    if price is None:
        phi_c = np.maximum(uc.max(axis=0), 0.0) if nc else np.zeros(m)
    else:
        phi_c = np.asarray(price, dtype=float).copy()
    a, beta = rule_assignment(uc, phi_c)
    phi_i = -beta
    used = np.bincount(a[a >= 0], minlength=m)
    if np.any(used > cap):
        raise ValueError("warm-start prices over-fill a contract")
    supply = cap - used
    short = np.zeros(m, dtype=np.int64)
    phi_z = 0.0
    phi_t = 0.0
    rows = np.arange(nc)
    inf = math.inf
    for s in range(m):
        while supply[s] > 0:
            dist_c = np.full(m, inf)
            dist_c[s] = 0.0
            pred_c = np.full(m, -1, dtype=np.int64)
            pred_c[s] = -2
            done = np.zeros(m, dtype=bool)
            dimp = np.full(nc, inf)
            pred_i = np.full(nc, -1, dtype=np.int64)
            dist_z, pred_z, z_done = inf, -1, False
            dist_t, pred_t = inf, -1
            while True:
                masked = np.where(done, inf, dist_c)
                j = int(np.argmin(masked))
                dj = masked[j]
                if not z_done and dist_z < dj:
                    if dist_t <= dist_z:
                        break
                    z_done = True
                    for k in np.flatnonzero((short > 0) & ~done):
                        kd = dist_z + phi_z - phi_c[k]
                        if kd < dist_c[k]:
                            dist_c[k] = kd
                            pred_c[k] = -3
                    continue
                if dj == inf or dist_t <= dj:
                    break
                done[j] = True
                zd = dj + phi_c[j] - phi_z
                if not z_done and zd < dist_z:
                    dist_z, pred_z = zd, j
                    td = zd + phi_z - phi_t
                    if td < dist_t:
                        dist_t, pred_t = td, -2
                if nc == 0:
                    continue
                cand_d = dj - uc[:, j] + phi_c[j] - phi_i
                better = (cand_d < dimp) & (a != j)
                if not better.any():
                    continue
                idx = rows[better]
                dimp[idx] = cand_d[better]
                pred_i[idx] = j
                owner = a[idx]
                free = owner < 0
                if free.any():
                    fi = idx[free]
                    td = dimp[fi] + phi_i[fi] - phi_t
                    p = int(np.argmin(td))
                    if td[p] < dist_t:
                        dist_t, pred_t = float(td[p]), int(fi[p])
                held = ~free
                if held.any():
                    hi = idx[held]
                    ho = owner[held]
                    live = ~done[ho]
                    hi, ho = hi[live], ho[live]
                    kd = dimp[hi] + uc[hi, ho] + phi_i[hi] - phi_c[ho]
                    order = np.lexsort((kd, ho))
                    ho_s = ho[order]
                    first = np.ones(ho_s.size, dtype=bool)
                    first[1:] = ho_s[1:] != ho_s[:-1]
                    for pos in np.flatnonzero(first):
                        k = int(ho_s[pos])
                        v = kd[order[pos]]
                        if v < dist_c[k]:
                            dist_c[k] = v
                            pred_c[k] = int(hi[order[pos]])
            phi_c += np.minimum(dist_c, dist_t)
            phi_i += np.minimum(dimp, dist_t)
            phi_z += min(dist_z, dist_t)
            phi_t += dist_t
            if pred_t == -2 and pred_z == s and pred_c[s] == -2:
                # later units of s cannot beat the direct shortfall route
                short[s] += supply[s]
                supply[s] = 0
                continue
            if pred_t == -2:
                j = pred_z
                short[j] += 1
            else:
                j = int(pred_i[pred_t])
                a[pred_t] = j
            while True:
                pc = int(pred_c[j])
                if pc == -2:
                    break
                if pc == -3:
                    short[j] -= 1
                    j = pred_z
                    short[j] += 1
                else:
                    j = int(pred_i[pc])
                    a[pc] = j
            supply[s] -= 1
    assign[cand] = a
    return assign

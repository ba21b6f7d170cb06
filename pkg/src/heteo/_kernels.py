"""Hot numeric kernels with numba and pure-numpy twins.

Each kernel has a *_nb (numba @njit) and a *_np (vectorized numpy)
implementation; the public dispatcher picks one at import time based on
HETEO_DISABLE_NUMBA. Both twins implement identical tie-breaking so the
chosen split structure agrees across backends; floating-point sums may
differ in the last ulps between backends (BLAS vs sequential loops).

benchmarks/bench_kernels.py times the twins against each other.
"""

import numpy as np

from ._backend import NUMBA_ENABLED, njit

NO_SPLIT = -1


# ---------------------------------------------------------------------------
# Causal-forest split scan
#
# For one node: given the structure half (used to score splits) and the
# estimation half (whose arm counts gate admissibility), return the best
# (feature, threshold, score). Candidate features arrive sorted ascending;
# scores tie-break to the lowest feature index, then lowest threshold,
# via strict > comparisons over an ascending scan.


@njit(cache=True, nogil=True)
def _split_scan_nb(xs, ws, ys, xe, we, min_tr, min_ct, tau_parent):
    n_s, m = xs.shape
    n_e = xe.shape[0]
    tot_t = 0
    tot_c = 0
    tot_ty = 0.0
    tot_cy = 0.0
    for i in range(n_s):
        if ws[i] == 1:
            tot_t += 1
            tot_ty += ys[i]
        else:
            tot_c += 1
            tot_cy += ys[i]
    tot_et = 0
    tot_ec = 0
    for i in range(n_e):
        if we[i] == 1:
            tot_et += 1
        else:
            tot_ec += 1

    best_feat = NO_SPLIT
    best_thr = 0.0
    best_score = -1.0
    for j in range(m):
        col_s = np.ascontiguousarray(xs[:, j])
        order_s = np.argsort(col_s, kind="mergesort")
        col_e = np.ascontiguousarray(xe[:, j])
        order_e = np.argsort(col_e, kind="mergesort")

        lt = 0
        lc = 0
        lty = 0.0
        lcy = 0.0
        k_e = 0
        le_t = 0
        le_c = 0
        for i in range(n_s - 1):
            idx = order_s[i]
            if ws[idx] == 1:
                lt += 1
                lty += ys[idx]
            else:
                lc += 1
                lcy += ys[idx]
            x_here = col_s[idx]
            x_next = col_s[order_s[i + 1]]
            if x_next <= x_here:
                continue
            thr = 0.5 * (x_here + x_next)
            while k_e < n_e and col_e[order_e[k_e]] <= thr:
                if we[order_e[k_e]] == 1:
                    le_t += 1
                else:
                    le_c += 1
                k_e += 1
            rt = tot_t - lt
            rc = tot_c - lc
            if lt < min_tr or lc < min_ct or rt < min_tr or rc < min_ct:
                continue
            if (le_t < min_tr or le_c < min_ct
                    or tot_et - le_t < min_tr or tot_ec - le_c < min_ct):
                continue
            tau_l = lty / lt - lcy / lc
            tau_r = (tot_ty - lty) / rt - (tot_cy - lcy) / rc
            dl = tau_l - tau_parent
            dr = tau_r - tau_parent
            score = (lt + lc) * dl * dl + (rt + rc) * dr * dr
            if score > best_score:
                best_score = score
                best_feat = j
                best_thr = thr
    return best_feat, best_thr, best_score


def _split_scan_np(xs, ws, ys, xe, we, min_tr, min_ct, tau_parent):
    n_s, m = xs.shape
    ws_b = ws.astype(bool)
    we_b = we.astype(bool)
    tot_t = int(ws_b.sum())
    tot_c = n_s - tot_t
    tot_et = int(we_b.sum())
    tot_ec = we.shape[0] - tot_et

    best_feat = NO_SPLIT
    best_thr = 0.0
    best_score = -1.0
    for j in range(m):
        col = xs[:, j]
        order = np.argsort(col, kind="stable")
        xsj = col[order]
        wj = ws_b[order]
        yj = ys[order]
        cum_t = np.cumsum(wj)
        cum_ty = np.cumsum(np.where(wj, yj, 0.0))
        cum_c = np.cumsum(~wj)
        cum_cy = np.cumsum(np.where(wj, 0.0, yj))
        distinct = xsj[:-1] < xsj[1:]
        if not distinct.any():
            continue
        thr = 0.5 * (xsj[:-1] + xsj[1:])
        lt = cum_t[:-1]
        lc = cum_c[:-1]
        rt = tot_t - lt
        rc = tot_c - lc
        xet = np.sort(xe[we_b, j])
        xec = np.sort(xe[~we_b, j])
        le_t = np.searchsorted(xet, thr, side="right")
        le_c = np.searchsorted(xec, thr, side="right")
        valid = (
            distinct
            & (lt >= min_tr) & (lc >= min_ct) & (rt >= min_tr) & (rc >= min_ct)
            & (le_t >= min_tr) & (le_c >= min_ct)
            & (tot_et - le_t >= min_tr) & (tot_ec - le_c >= min_ct)
        )
        if not valid.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            tau_l = cum_ty[:-1] / lt - cum_cy[:-1] / lc
            tau_r = (cum_ty[-1] - cum_ty[:-1]) / rt - (cum_cy[-1] - cum_cy[:-1]) / rc
        dl = tau_l - tau_parent
        dr = tau_r - tau_parent
        score = np.where(valid, (lt + lc) * dl * dl + (rt + rc) * dr * dr, -np.inf)
        k = int(np.argmax(score))  # first max -> lowest threshold
        if score[k] > best_score:
            best_score = float(score[k])
            best_feat = j
            best_thr = float(thr[k])
    return best_feat, best_thr, best_score


# ---------------------------------------------------------------------------
# Tree traversal: feature[node] < 0 marks a leaf; tau holds leaf values.


@njit(cache=True, nogil=True)
def _traverse_nb(feature, threshold, left, right, tau, X):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = tau[node]
    return out


def _traverse_np(feature, threshold, left, right, tau, X):
    n = X.shape[0]
    node = np.zeros(n, dtype=np.int64)
    active = np.where(feature[node] >= 0)[0]
    while active.size:
        nd = node[active]
        f = feature[nd]
        goleft = X[active, f] <= threshold[nd]
        node[active] = np.where(goleft, left[nd], right[nd])
        active = active[feature[node[active]] >= 0]
    return tau[node]


# ---------------------------------------------------------------------------
# Weighted lasso coordinate descent (cyclic, soft-thresholding).
#
# Minimizes sum_i v_i (u_i - b0 - x_i beta)^2 + lam * ||beta||_1 with an
# unpenalized intercept. Convergence is gated on the KKT residual of that
# objective (kkt_tol, gradient units); between full cyclic passes the scan
# cycles the current active set until it stabilizes, which is where the
# iterations go on correlated designs. Every pass, full or active, counts
# toward max_sweeps. Returns (beta, b0, per-pass objectives, converged, kkt).


@njit(cache=True, nogil=True)
def _cd_lasso_nb(X, u, v, lam, beta_init, intercept_init, kkt_tol, max_sweeps):
    n, d = X.shape
    beta = beta_init.copy()
    b0 = intercept_init
    z = np.zeros(d)
    zsum = 0.0
    for j in range(d):
        s = 0.0
        for i in range(n):
            s += v[i] * X[i, j] * X[i, j]
        z[j] = s
        zsum += s
    vsum = 0.0
    for i in range(n):
        vsum += v[i]
    r = np.empty(n)
    for i in range(n):
        pred = b0
        for j in range(d):
            pred += X[i, j] * beta[j]
        r[i] = u[i] - pred
    inner_gate = kkt_tol / (2.0 * zsum + vsum + 1.0)

    objectives = np.empty(max_sweeps)
    active = np.empty(d, dtype=np.int64)
    sweeps = 0
    converged = False
    kkt = np.inf

    while sweeps < max_sweeps:
        # full pass
        max_delta = 0.0
        num = 0.0
        for i in range(n):
            num += v[i] * r[i]
        delta0 = num / vsum
        b0 += delta0
        for i in range(n):
            r[i] -= delta0
        if abs(delta0) > max_delta:
            max_delta = abs(delta0)
        for j in range(d):
            if z[j] <= 0.0:
                continue
            rho = 0.0
            for i in range(n):
                rho += v[i] * X[i, j] * r[i]
            rho += z[j] * beta[j]
            mag = abs(rho) - 0.5 * lam
            if mag <= 0.0:
                new_b = 0.0
            else:
                new_b = mag / z[j] if rho > 0.0 else -mag / z[j]
            delta = new_b - beta[j]
            if delta != 0.0:
                for i in range(n):
                    r[i] -= X[i, j] * delta
                beta[j] = new_b
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        obj = 0.0
        for i in range(n):
            obj += v[i] * r[i] * r[i]
        pen = 0.0
        for j in range(d):
            pen += abs(beta[j])
        objectives[sweeps] = obj + lam * pen
        sweeps += 1

        # KKT residual from the maintained residual vector
        gnum = 0.0
        for i in range(n):
            gnum += v[i] * r[i]
        kkt = abs(2.0 * gnum)
        for j in range(d):
            g = 0.0
            for i in range(n):
                g += v[i] * X[i, j] * r[i]
            g = -2.0 * g
            if beta[j] == 0.0:
                viol = abs(g) - lam
                if viol > kkt:
                    kkt = viol
            else:
                s = 1.0 if beta[j] > 0.0 else -1.0
                viol = abs(g + lam * s)
                if viol > kkt:
                    kkt = viol
        if kkt <= kkt_tol:
            converged = True
            break

        # active-set passes until the set stabilizes
        m = 0
        for j in range(d):
            if beta[j] != 0.0:
                active[m] = j
                m += 1
        while m > 0 and sweeps < max_sweeps:
            max_delta = 0.0
            num = 0.0
            for i in range(n):
                num += v[i] * r[i]
            delta0 = num / vsum
            b0 += delta0
            for i in range(n):
                r[i] -= delta0
            if abs(delta0) > max_delta:
                max_delta = abs(delta0)
            for a in range(m):
                j = active[a]
                rho = 0.0
                for i in range(n):
                    rho += v[i] * X[i, j] * r[i]
                rho += z[j] * beta[j]
                mag = abs(rho) - 0.5 * lam
                if mag <= 0.0:
                    new_b = 0.0
                else:
                    new_b = mag / z[j] if rho > 0.0 else -mag / z[j]
                delta = new_b - beta[j]
                if delta != 0.0:
                    for i in range(n):
                        r[i] -= X[i, j] * delta
                    beta[j] = new_b
                    if abs(delta) > max_delta:
                        max_delta = abs(delta)
            obj = 0.0
            for i in range(n):
                obj += v[i] * r[i] * r[i]
            pen = 0.0
            for j in range(d):
                pen += abs(beta[j])
            objectives[sweeps] = obj + lam * pen
            sweeps += 1
            if max_delta <= inner_gate:
                break
    return beta, b0, objectives[:sweeps], converged, kkt


def _cd_lasso_np(X, u, v, lam, beta_init, intercept_init, kkt_tol, max_sweeps):
    n, d = X.shape
    beta = beta_init.copy()
    b0 = float(intercept_init)
    vX = v[:, None] * X
    z = np.einsum("ij,ij->j", vX, X)
    vsum = float(v.sum())
    inner_gate = kkt_tol / (2.0 * float(z.sum()) + vsum + 1.0)
    r = u - b0 - X @ beta
    objectives = []
    converged = False
    kkt = np.inf

    def one_pass(indices):
        nonlocal b0, r
        max_delta = 0.0
        delta0 = float(v @ r) / vsum
        b0 += delta0
        r = r - delta0
        max_delta = abs(delta0)
        for j in indices:
            zj = z[j]
            if zj <= 0.0:
                continue
            rho = float(vX[:, j] @ r) + zj * beta[j]
            mag = abs(rho) - 0.5 * lam
            new_b = 0.0 if mag <= 0.0 else np.sign(rho) * mag / zj
            delta = new_b - beta[j]
            if delta != 0.0:
                r = r - X[:, j] * delta
                beta[j] = new_b
                max_delta = max(max_delta, abs(delta))
        objectives.append(float(v @ (r * r)) + lam * float(np.abs(beta).sum()))
        return max_delta

    sweeps = 0
    while sweeps < max_sweeps:
        one_pass(range(d))
        sweeps += 1
        grad = -2.0 * (vX.T @ r)
        kkt = abs(2.0 * float(v @ r))
        zero = beta == 0.0
        if zero.any():
            kkt = max(kkt, float(np.maximum(np.abs(grad[zero]) - lam, 0.0).max()))
        if (~zero).any():
            kkt = max(kkt, float(np.abs(grad[~zero] + lam * np.sign(beta[~zero])).max()))
        if kkt <= kkt_tol:
            converged = True
            break
        active = np.where(beta != 0.0)[0]
        while active.size and sweeps < max_sweeps:
            max_delta = one_pass(active)
            sweeps += 1
            if max_delta <= inner_gate:
                break
    return beta, b0, np.array(objectives), converged, kkt


# ---------------------------------------------------------------------------
# Dispatch

if NUMBA_ENABLED:
    split_scan = _split_scan_nb
    traverse = _traverse_nb
    cd_lasso = _cd_lasso_nb
else:
    split_scan = _split_scan_np
    traverse = _traverse_np
    cd_lasso = _cd_lasso_np

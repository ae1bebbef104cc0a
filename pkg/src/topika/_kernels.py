"""Numba kernels for the per-token collapsed updates.

These are the hot loops: counts mutate after every token, so the sweeps are
inherently sequential and gain nothing from numpy vectorization. Every kernel
mirrors a pure-Python reference step in collapsed_inference; equivalence is
pinned by tests. Kernels release the GIL so the parallel trainer can overlap
shard sweeps on threads.

Count removal can leave tiny negative values from float rounding; conditionals
clamp at zero while the stored counts are left to self-correct on the add.
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def cvb0_sweep(token_word, token_doc, gamma, n_wk, n_kj, n_k, alpha, eta, remove_current):
    num_tokens, K = gamma.shape
    weta = n_wk.shape[0] * eta
    u = np.empty(K)
    max_change = 0.0
    for i in range(num_tokens):
        w = token_word[i]
        j = token_doc[i]
        if remove_current:
            for k in range(K):
                g = gamma[i, k]
                n_wk[w, k] -= g
                n_kj[k, j] -= g
                n_k[k] -= g
        total = 0.0
        for k in range(K):
            a = n_wk[w, k]
            if a < 0.0:
                a = 0.0
            b = n_kj[k, j]
            if b < 0.0:
                b = 0.0
            c = n_k[k]
            if c < 0.0:
                c = 0.0
            u[k] = (a + eta) / (c + weta) * (b + alpha)
            total += u[k]
        if total <= 0.0:
            for k in range(K):
                u[k] = 1.0
            total = float(K)
        if remove_current:
            for k in range(K):
                g_new = u[k] / total
                diff = g_new - gamma[i, k]
                if diff < 0.0:
                    diff = -diff
                if diff > max_change:
                    max_change = diff
                gamma[i, k] = g_new
                n_wk[w, k] += g_new
                n_kj[k, j] += g_new
                n_k[k] += g_new
        else:
            for k in range(K):
                g_new = u[k] / total
                d = g_new - gamma[i, k]
                ad = -d if d < 0.0 else d
                if ad > max_change:
                    max_change = ad
                gamma[i, k] = g_new
                n_wk[w, k] += d
                n_kj[k, j] += d
                n_k[k] += d
    return max_change


@njit(**_JIT)
def cvb_sweep(
    token_word, token_doc, gamma, n_wk, n_kj, n_k, v_wk, v_kj, v_k, alpha, eta, remove_current, cap
):
    num_tokens, K = gamma.shape
    weta = n_wk.shape[0] * eta
    u = np.empty(K)
    max_change = 0.0
    overflow = 0
    for i in range(num_tokens):
        w = token_word[i]
        j = token_doc[i]
        if remove_current:
            for k in range(K):
                g = gamma[i, k]
                gv = g * (1.0 - g)
                n_wk[w, k] -= g
                n_kj[k, j] -= g
                n_k[k] -= g
                v_wk[w, k] -= gv
                v_kj[k, j] -= gv
                v_k[k] -= gv
        total = 0.0
        for k in range(K):
            a = n_wk[w, k]
            if a < 0.0:
                a = 0.0
            b = n_kj[k, j]
            if b < 0.0:
                b = 0.0
            c = n_k[k]
            if c < 0.0:
                c = 0.0
            va = v_wk[w, k]
            if va < 0.0:
                va = 0.0
            vb = v_kj[k, j]
            if vb < 0.0:
                vb = 0.0
            vc = v_k[k]
            if vc < 0.0:
                vc = 0.0
            an = a + eta
            bn = b + alpha
            cn = c + weta
            expo = -vb / (2.0 * bn * bn) - va / (2.0 * an * an) + vc / (2.0 * cn * cn)
            if expo > cap:
                expo = cap
                overflow += 1
            elif expo < -cap:
                expo = -cap
                overflow += 1
            u[k] = an / cn * bn * np.exp(expo)
            total += u[k]
        if not remove_current:
            for k in range(K):
                g = gamma[i, k]
                gv = g * (1.0 - g)
                n_wk[w, k] -= g
                n_kj[k, j] -= g
                n_k[k] -= g
                v_wk[w, k] -= gv
                v_kj[k, j] -= gv
                v_k[k] -= gv
        if total <= 0.0:
            for k in range(K):
                u[k] = 1.0
            total = float(K)
        for k in range(K):
            g_new = u[k] / total
            diff = g_new - gamma[i, k]
            if diff < 0.0:
                diff = -diff
            if diff > max_change:
                max_change = diff
            gamma[i, k] = g_new
            gv_new = g_new * (1.0 - g_new)
            n_wk[w, k] += g_new
            n_kj[k, j] += g_new
            n_k[k] += g_new
            v_wk[w, k] += gv_new
            v_kj[k, j] += gv_new
            v_k[k] += gv_new
    return max_change, overflow


@njit(**_JIT)
def cgs_sweep(token_word, token_doc, z, n_wk, n_kj, n_k, alpha, eta, uniforms):
    num_tokens = z.shape[0]
    K = n_k.shape[0]
    weta = n_wk.shape[0] * eta
    u = np.empty(K)
    changed = 0
    for i in range(num_tokens):
        w = token_word[i]
        j = token_doc[i]
        old = z[i]
        n_wk[w, old] -= 1.0
        n_kj[old, j] -= 1.0
        n_k[old] -= 1.0
        total = 0.0
        for k in range(K):
            u[k] = (n_wk[w, k] + eta) / (n_k[k] + weta) * (n_kj[k, j] + alpha)
            total += u[k]
        r = uniforms[i] * total
        acc = 0.0
        new = K - 1
        for k in range(K):
            acc += u[k]
            if r < acc:
                new = k
                break
        z[i] = new
        n_wk[w, new] += 1.0
        n_kj[new, j] += 1.0
        n_k[new] += 1.0
        if new != old:
            changed += 1
    return changed


@njit(**_JIT)
def pcvb0_chunk(token_word, token_doc, gamma, start, end, n_wk_local, n_k_local, n_kj, alpha, eta):
    """Parallel shard chunk: no current-token removal, word-side counts local.

    Document-side counts are written directly because shards own disjoint
    documents; word-side mass accumulates in the worker's private copy and is
    reconciled by the caller at sync points.
    """
    K = gamma.shape[1]
    weta = n_wk_local.shape[0] * eta
    u = np.empty(K)
    max_change = 0.0
    for i in range(start, end):
        w = token_word[i]
        j = token_doc[i]
        total = 0.0
        for k in range(K):
            a = n_wk_local[w, k]
            if a < 0.0:
                a = 0.0
            b = n_kj[k, j]
            if b < 0.0:
                b = 0.0
            c = n_k_local[k]
            if c < 0.0:
                c = 0.0
            u[k] = (a + eta) / (c + weta) * (b + alpha)
            total += u[k]
        if total <= 0.0:
            for k in range(K):
                u[k] = 1.0
            total = float(K)
        for k in range(K):
            g_new = u[k] / total
            d = g_new - gamma[i, k]
            ad = -d if d < 0.0 else d
            if ad > max_change:
                max_change = ad
            gamma[i, k] = g_new
            n_wk_local[w, k] += d
            n_k_local[k] += d
            n_kj[k, j] += d
    return max_change


# --- fold-in kernels: word-topic side frozen, only document counts evolve -----


@njit(**_JIT)
def foldin_cvb0_sweep(phi, token_word, token_doc, gamma, n_kj, alpha, remove_current):
    num_tokens, K = gamma.shape
    u = np.empty(K)
    max_change = 0.0
    for i in range(num_tokens):
        w = token_word[i]
        j = token_doc[i]
        if remove_current:
            for k in range(K):
                n_kj[k, j] -= gamma[i, k]
        total = 0.0
        for k in range(K):
            b = n_kj[k, j]
            if b < 0.0:
                b = 0.0
            u[k] = phi[w, k] * (b + alpha)
            total += u[k]
        if not remove_current:
            for k in range(K):
                n_kj[k, j] -= gamma[i, k]
        if total <= 0.0:
            for k in range(K):
                u[k] = 1.0
            total = float(K)
        for k in range(K):
            g_new = u[k] / total
            diff = g_new - gamma[i, k]
            if diff < 0.0:
                diff = -diff
            if diff > max_change:
                max_change = diff
            gamma[i, k] = g_new
            n_kj[k, j] += g_new
    return max_change


@njit(**_JIT)
def foldin_cvb_sweep(phi, token_word, token_doc, gamma, n_kj, v_kj, alpha, remove_current, cap):
    num_tokens, K = gamma.shape
    u = np.empty(K)
    max_change = 0.0
    overflow = 0
    for i in range(num_tokens):
        w = token_word[i]
        j = token_doc[i]
        if remove_current:
            for k in range(K):
                g = gamma[i, k]
                n_kj[k, j] -= g
                v_kj[k, j] -= g * (1.0 - g)
        total = 0.0
        for k in range(K):
            b = n_kj[k, j]
            if b < 0.0:
                b = 0.0
            vb = v_kj[k, j]
            if vb < 0.0:
                vb = 0.0
            bn = b + alpha
            expo = -vb / (2.0 * bn * bn)
            if expo < -cap:
                expo = -cap
                overflow += 1
            u[k] = phi[w, k] * bn * np.exp(expo)
            total += u[k]
        if not remove_current:
            for k in range(K):
                g = gamma[i, k]
                n_kj[k, j] -= g
                v_kj[k, j] -= g * (1.0 - g)
        if total <= 0.0:
            for k in range(K):
                u[k] = 1.0
            total = float(K)
        for k in range(K):
            g_new = u[k] / total
            diff = g_new - gamma[i, k]
            if diff < 0.0:
                diff = -diff
            if diff > max_change:
                max_change = diff
            gamma[i, k] = g_new
            n_kj[k, j] += g_new
            v_kj[k, j] += g_new * (1.0 - g_new)
    return max_change, overflow


@njit(**_JIT)
def foldin_cgs_sweep(phi, token_word, token_doc, z, n_kj, alpha, uniforms):
    num_tokens = z.shape[0]
    K = n_kj.shape[0]
    u = np.empty(K)
    changed = 0
    for i in range(num_tokens):
        w = token_word[i]
        j = token_doc[i]
        old = z[i]
        n_kj[old, j] -= 1.0
        total = 0.0
        for k in range(K):
            u[k] = phi[w, k] * (n_kj[k, j] + alpha)
            total += u[k]
        r = uniforms[i] * total
        acc = 0.0
        new = K - 1
        for k in range(K):
            acc += u[k]
            if r < acc:
                new = k
                break
        z[i] = new
        n_kj[new, j] += 1.0
        if new != old:
            changed += 1
    return changed

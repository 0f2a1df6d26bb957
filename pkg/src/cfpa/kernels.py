"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is picked once at import time from the CFPA_BACKEND environment
variable: "numba" (require numba), "numpy" (force the fallback), or "auto"
(default: numba when importable). Both implementations of every kernel stay
importable for tests and benchmarks under their private names.

Array conventions used throughout the package:
  rho : (K, L) power amplitude coefficients, rho[k, l] for user k at AP l
  C   : (K, K, L, L) real symmetric interference blocks, C[k, i] is the
        L x L second-moment block coupling user i's powers into user k's SINR
"""

import os
import warnings

import numpy as np

_EPS = np.finfo(np.float64).eps
# Per-AP cap scaling is skipped inside this gate so projection is idempotent
# bitwise; the residual cap excess is <= 4 ulp, far below the 1e-12 allowance.
CAP_GATE_FACTOR = 1.0 + 4.0 * _EPS


def _select_backend():
    requested = os.environ.get("CFPA_BACKEND", "auto").strip().lower()
    if requested not in ("auto", "numba", "numpy"):
        raise ValueError(f"CFPA_BACKEND must be auto|numba|numpy, got {requested!r}")
    if requested == "numpy":
        return "numpy", None
    try:
        import numba
    except ImportError:
        if requested == "numba":
            raise
        warnings.warn("numba unavailable, falling back to pure-numpy kernels")
        return "numpy", None
    return "numba", numba


BACKEND, _numba = _select_backend()


# ---------------------------------------------------------------------------
# Smoothed norm (Huber-style knee at mu): value and gradient factor.
# ---------------------------------------------------------------------------

def smoothed_norm(r, mu):
    """Smoothed |.| surrogate psi_mu(r) for r >= 0 and its gradient factor.

    psi(r) = r^2/(2 mu) on [0, mu], r - mu/2 beyond; the factor c is such
    that grad psi(||x||) = c * x, i.e. 1/mu inside the knee, 1/r outside,
    and 0 at r = 0. Works elementwise on arrays.
    """
    r = np.asarray(r, dtype=np.float64)
    inner = r <= mu
    psi = np.where(inner, r * r / (2.0 * mu), r - 0.5 * mu)
    safe_r = np.where(r > 0.0, r, 1.0)
    factor = np.where(inner, 1.0 / mu, 1.0 / safe_r)
    factor = np.where(r == 0.0, 0.0, factor)
    if psi.ndim == 0:
        return float(psi), float(factor)
    return psi, factor


# ---------------------------------------------------------------------------
# Quadratic forms q_k = x^T C_k x and block products (C_k x).
# ---------------------------------------------------------------------------

def _quad_forms_numpy(C, rho):
    Cx = np.matmul(C, rho[np.newaxis, :, :, np.newaxis])[..., 0]
    return np.einsum("kil,il->k", Cx, rho)


def _quad_forms_grad_numpy(C, rho):
    Cx = np.matmul(C, rho[np.newaxis, :, :, np.newaxis])[..., 0]
    q = np.einsum("kil,il->k", Cx, rho)
    return q, Cx


# ---------------------------------------------------------------------------
# Fused penalized-cost evaluations. These are the solver's per-iteration hot
# path; the numpy versions compose the same arithmetic from vector ops.
# ---------------------------------------------------------------------------

def _power_terms_numpy(rho, w_obj, nl_model, kappa, inv_eta, mu):
    norms = np.sqrt(np.einsum("kl,kl->l", rho, rho))
    if nl_model:
        psi, factor = smoothed_norm(norms, mu)
        power = kappa * float(np.sum(psi))
        grad = (w_obj * kappa) * factor[None, :] * rho
    else:
        power = inv_eta * float(np.sum(norms * norms))
        grad = (2.0 * w_obj * inv_eta) * rho
    return power, grad


def _cost_numpy(C, b, s, sigma2, rho, lam, w_obj, nl_model, kappa, inv_eta, mu):
    q = _quad_forms_numpy(C, rho)
    bx = np.einsum("kl,kl->k", b, rho)
    g = np.sqrt(q + sigma2) - s * bx
    pen = float(np.sum(np.maximum(g, 0.0) ** 2))
    power, _ = _power_terms_numpy(rho, w_obj, nl_model, kappa, inv_eta, mu)
    return w_obj * power + lam * pen


def _cost_grad_numpy(C, b, s, sigma2, rho, lam, w_obj, nl_model, kappa,
                     inv_eta, mu):
    q, Cx = _quad_forms_grad_numpy(C, rho)
    bx = np.einsum("kl,kl->k", b, rho)
    root = np.sqrt(q + sigma2)
    g = root - s * bx
    hinge = np.maximum(g, 0.0)
    power, grad = _power_terms_numpy(rho, w_obj, nl_model, kappa, inv_eta, mu)
    value = w_obj * power + lam * float(np.sum(hinge ** 2))
    coef = 2.0 * lam * hinge
    grad = grad + np.einsum("k,kil->il", coef / root, Cx)
    grad -= (coef * s)[:, None] * b
    return value, grad


if BACKEND == "numba":
    from numba import njit, prange

    @njit(parallel=True, cache=True)
    def _quad_forms_numba(C, rho):
        K, _, L, _ = C.shape
        q = np.zeros(K)
        for k in prange(K):
            acc = 0.0
            for i in range(K):
                for l in range(L):
                    s = 0.0
                    for m in range(L):
                        s += C[k, i, l, m] * rho[i, m]
                    acc += rho[i, l] * s
            q[k] = acc
        return q

    @njit(parallel=True, cache=True)
    def _quad_forms_grad_numba(C, rho):
        K, _, L, _ = C.shape
        q = np.zeros(K)
        Cx = np.zeros((K, K, L))
        for k in prange(K):
            acc = 0.0
            for i in range(K):
                for l in range(L):
                    s = 0.0
                    for m in range(L):
                        s += C[k, i, l, m] * rho[i, m]
                    Cx[k, i, l] = s
                    acc += rho[i, l] * s
            q[k] = acc
        return q, Cx

    @njit(cache=True)
    def _power_value_nb(rho, nl_model, kappa, inv_eta, mu):
        K, L = rho.shape
        power = 0.0
        for l in range(L):
            nsq = 0.0
            for k in range(K):
                nsq += rho[k, l] * rho[k, l]
            if nl_model:
                n = np.sqrt(nsq)
                if n <= mu:
                    power += kappa * n * n / (2.0 * mu)
                else:
                    power += kappa * (n - 0.5 * mu)
            else:
                power += inv_eta * nsq
        return power

    @njit(parallel=True, cache=True)
    def _cost_numba(C, b, s, sigma2, rho, lam, w_obj, nl_model, kappa,
                    inv_eta, mu):
        K, L = rho.shape
        pen = 0.0
        qs = np.zeros(K)
        for k in prange(K):
            q = 0.0
            for i in range(K):
                for l in range(L):
                    acc = 0.0
                    for m in range(L):
                        acc += C[k, i, l, m] * rho[i, m]
                    q += rho[i, l] * acc
            qs[k] = q
        for k in range(K):
            bx = 0.0
            for l in range(L):
                bx += b[k, l] * rho[k, l]
            g = np.sqrt(qs[k] + sigma2) - s[k] * bx
            if g > 0.0:
                pen += g * g
        return w_obj * _power_value_nb(rho, nl_model, kappa, inv_eta, mu) + lam * pen

    @njit(parallel=True, cache=True)
    def _cost_grad_numba(C, b, s, sigma2, rho, lam, w_obj, nl_model, kappa,
                         inv_eta, mu):
        K, L = rho.shape
        qs = np.zeros(K)
        Cx = np.zeros((K, K, L))
        for k in prange(K):
            q = 0.0
            for i in range(K):
                for l in range(L):
                    acc = 0.0
                    for m in range(L):
                        acc += C[k, i, l, m] * rho[i, m]
                    Cx[k, i, l] = acc
                    q += rho[i, l] * acc
            qs[k] = q
        grad = np.zeros((K, L))
        power = 0.0
        for l in range(L):
            nsq = 0.0
            for k in range(K):
                nsq += rho[k, l] * rho[k, l]
            n = np.sqrt(nsq)
            if nl_model:
                if n == 0.0:
                    factor = 0.0
                elif n <= mu:
                    power += kappa * n * n / (2.0 * mu)
                    factor = kappa / mu
                else:
                    power += kappa * (n - 0.5 * mu)
                    factor = kappa / n
                for k in range(K):
                    grad[k, l] = w_obj * factor * rho[k, l]
            else:
                power += inv_eta * nsq
                for k in range(K):
                    grad[k, l] = w_obj * 2.0 * inv_eta * rho[k, l]
        pen = 0.0
        for k in range(K):
            bx = 0.0
            for l in range(L):
                bx += b[k, l] * rho[k, l]
            root = np.sqrt(qs[k] + sigma2)
            g = root - s[k] * bx
            if g > 0.0:
                pen += g * g
                coef = 2.0 * lam * g
                cr = coef / root
                for i in range(K):
                    for l in range(L):
                        grad[i, l] += cr * Cx[k, i, l]
                cs = coef * s[k]
                for l in range(L):
                    grad[k, l] -= cs * b[k, l]
        value = w_obj * power + lam * pen
        return value, grad


def quad_forms(C, rho):
    """q[k] = sum_i rho_i^T C[k,i] rho_i for all users k."""
    if BACKEND == "numba":
        return _quad_forms_numba(C, rho)
    return _quad_forms_numpy(C, rho)


def quad_forms_grad(C, rho):
    """Same as quad_forms but also returns the block products Cx[k,i] = C[k,i] rho_i."""
    if BACKEND == "numba":
        return _quad_forms_grad_numba(C, rho)
    return _quad_forms_grad_numpy(C, rho)


def penalized_cost_value(C, b, s, sigma2, rho, lam, w_obj, nl_model, kappa,
                         inv_eta, mu):
    """Smoothed power (weighted) plus lam * sum of squared constraint hinges."""
    if BACKEND == "numba":
        return _cost_numba(C, b, s, float(sigma2), rho, float(lam), float(w_obj),
                           bool(nl_model), float(kappa), float(inv_eta), float(mu))
    return _cost_numpy(C, b, s, sigma2, rho, lam, w_obj, nl_model, kappa,
                       inv_eta, mu)


def penalized_cost_grad(C, b, s, sigma2, rho, lam, w_obj, nl_model, kappa,
                        inv_eta, mu):
    """Value and gradient of the penalized cost, as (float, (K, L) array)."""
    if BACKEND == "numba":
        return _cost_grad_numba(C, b, s, float(sigma2), rho, float(lam),
                                float(w_obj), bool(nl_model), float(kappa),
                                float(inv_eta), float(mu))
    return _cost_grad_numpy(C, b, s, sigma2, rho, lam, w_obj, nl_model, kappa,
                            inv_eta, mu)


# ---------------------------------------------------------------------------
# Exhaustive lattice scan used by the grid-search oracle.
#
# Points are enumerated in ascending lexicographic order of the stacked
# vector x (user-major layout, coordinate d maps to user d // L, AP d % L).
# Each point is first clamped per AP onto the cap ball (same rule as the
# solver projection), then tested for g_k <= 0 for every user. The scan
# returns the lex rank of the first point attaining the best objective, so
# ties resolve to the lexicographically smallest lattice point.
# ---------------------------------------------------------------------------

def _scan_chunk_numpy(C, b, s, sigma2, grid, K, L, cap, cap_gate, nl_model,
                      kappa, inv_eta, codes):
    D = K * L
    G = grid.shape[0]
    idx = np.stack(np.unravel_index(codes, (G,) * D), axis=1)
    pts = grid[idx].reshape(-1, K, L)
    norms = np.sqrt(np.einsum("nkl,nkl->nl", pts, pts))
    scale = np.where(norms > cap_gate, cap / np.where(norms > 0, norms, 1.0), 1.0)
    proj = pts * scale[:, None, :]
    Cx = np.einsum("kilm,nim->nkil", C, proj)
    q = np.einsum("nkil,nil->nk", Cx, proj)
    bx = np.einsum("kl,nkl->nk", b, proj)
    g = np.sqrt(q + sigma2) - s[None, :] * bx
    feasible = np.all(g <= 0.0, axis=1)
    pnorm = np.where(norms > cap_gate, cap, norms)
    if nl_model:
        obj = kappa * pnorm.sum(axis=1)
    else:
        obj = inv_eta * (pnorm * pnorm).sum(axis=1)
    obj = np.where(feasible, obj, np.inf)
    k = int(np.argmin(obj))
    return float(obj[k]), int(codes[k])


def _grid_scan_numpy(C, b, s, sigma2, grid, K, L, cap, cap_gate, nl_model,
                     kappa, inv_eta):
    D = K * L
    G = grid.shape[0]
    total = G ** D
    best_val = np.inf
    best_code = -1
    chunk = 1 << 17
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total), dtype=np.int64)
        val, code = _scan_chunk_numpy(C, b, s, sigma2, grid, K, L, cap,
                                      cap_gate, nl_model, kappa, inv_eta, codes)
        if val < best_val:
            best_val = val
            best_code = code
    return best_val, best_code, total


if BACKEND == "numba":

    @njit(parallel=True, cache=True)
    def _grid_scan_numba(C, b, s, sigma2, grid, K, L, cap, cap_gate, nl_model,
                         kappa, inv_eta):
        D = K * L
        G = grid.shape[0]
        inner = G ** (D - 1)
        slab_vals = np.full(G, np.inf)
        slab_codes = np.full(G, -1, dtype=np.int64)
        for i0 in prange(G):
            idx = np.zeros(D, dtype=np.int64)
            idx[0] = i0
            rho = np.zeros((K, L))
            proj = np.zeros((K, L))
            best_v = np.inf
            best_c = np.int64(-1)
            for step in range(inner):
                for d in range(D):
                    rho[d // L, d % L] = grid[idx[d]]
                # per-AP clamp onto the cap ball
                obj = 0.0
                for l in range(L):
                    nsq = 0.0
                    for k in range(K):
                        nsq += rho[k, l] * rho[k, l]
                    n = np.sqrt(nsq)
                    if n > cap_gate:
                        sc = cap / n
                        n = cap
                    else:
                        sc = 1.0
                    for k in range(K):
                        proj[k, l] = rho[k, l] * sc
                    if nl_model:
                        obj += kappa * n
                    else:
                        obj += inv_eta * n * n
                if obj < best_v:
                    ok = True
                    for k in range(K):
                        q = 0.0
                        for i in range(K):
                            for l in range(L):
                                acc = 0.0
                                for m in range(L):
                                    acc += C[k, i, l, m] * proj[i, m]
                                q += proj[i, l] * acc
                        bx = 0.0
                        for l in range(L):
                            bx += b[k, l] * proj[k, l]
                        if np.sqrt(q + sigma2) - s[k] * bx > 0.0:
                            ok = False
                            break
                    if ok:
                        code = np.int64(i0)
                        for d in range(1, D):
                            code = code * G + idx[d]
                        best_v = obj
                        best_c = code
                # odometer over idx[1:]; idx[0] stays fixed in this slab
                for d in range(D - 1, 0, -1):
                    idx[d] += 1
                    if idx[d] < G:
                        break
                    idx[d] = 0
            slab_vals[i0] = best_v
            slab_codes[i0] = best_c
        best_val = np.inf
        best_code = np.int64(-1)
        for i0 in range(G):
            if slab_vals[i0] < best_val:
                best_val = slab_vals[i0]
                best_code = slab_codes[i0]
        return best_val, best_code, G ** D


def grid_scan(C, b, s, sigma2, grid, K, L, cap, nl_model, kappa, inv_eta):
    """Scan the full lattice grid^(K*L); returns (best_val, lex code, points).

    best_val is +inf and code -1 when no lattice point is feasible. The value
    is only used for ordering; callers recompute the exact objective from the
    decoded point.
    """
    cap_gate = cap * CAP_GATE_FACTOR
    C = np.ascontiguousarray(C)
    b = np.ascontiguousarray(b)
    s = np.ascontiguousarray(s)
    grid = np.ascontiguousarray(grid)
    args = (C, b, s, float(sigma2), grid, int(K), int(L), float(cap),
            float(cap_gate), bool(nl_model), float(kappa), float(inv_eta))
    if BACKEND == "numba":
        val, code, total = _grid_scan_numba(*args)
        return float(val), int(code), int(total)
    return _grid_scan_numpy(*args)

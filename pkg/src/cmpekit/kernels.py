"""Hot numeric kernels with a numba path and a pure-numpy path.

Polynomials reach this module in compressed form: ``term_ptr`` (K+1 offsets)
and ``term_idx`` (flattened variable indices) describe K monomials, and a
weight array of shape ``(K,)`` or ``(B, K)`` carries the coefficients. Callers
use the dispatching functions at the bottom of the module; the ``_nb`` and
``_np`` implementations are exposed for the benchmark and the parity tests.
"""
import numpy as np

from ._accel import njit, use_numba


# ---------------------------------------------------------------------------
# numba implementations


@njit
def _eval_nb(Y, term_ptr, term_idx, W):
    B = Y.shape[0]
    K = term_ptr.shape[0] - 1
    out = np.zeros(B)
    for b in range(B):
        s = 0.0
        for k in range(K):
            p = W[b, k]
            for t in range(term_ptr[k], term_ptr[k + 1]):
                p *= Y[b, term_idx[t]]
            s += p
        out[b] = s
    return out


@njit
def _grad_nb(Y, term_ptr, term_idx, W):
    B, n = Y.shape
    K = term_ptr.shape[0] - 1
    out = np.zeros((B, n))
    for b in range(B):
        for k in range(K):
            lo = term_ptr[k]
            hi = term_ptr[k + 1]
            for t in range(lo, hi):
                p = W[b, k]
                for s in range(lo, hi):
                    if s != t:
                        p *= Y[b, term_idx[s]]
                out[b, term_idx[t]] += p
    return out


@njit
def _condition_nb(X, ev_ptr, ev_idx, w, target, K):
    B = X.shape[0]
    T = w.shape[0]
    out = np.zeros((B, K))
    for b in range(B):
        for t in range(T):
            p = w[t]
            for s in range(ev_ptr[t], ev_ptr[t + 1]):
                p *= X[b, ev_idx[s]]
            out[b, target[t]] += p
    return out


@njit
def _zeta_nb(C, n):
    out = C.copy()
    B = out.shape[0]
    M = out.shape[1]
    for bit in range(n):
        step = 1 << bit
        for b in range(B):
            for m in range(M):
                if m & step:
                    out[b, m] += out[b, m ^ step]
    return out


@njit
def _gibbs_nb(z, term_ptr, term_idx, w, var_ptr, var_terms, U, record_every, out):
    n = z.shape[0]
    S = U.shape[0]
    r = 0
    for s in range(S):
        for i in range(n):
            delta = 0.0
            for a in range(var_ptr[i], var_ptr[i + 1]):
                k = var_terms[a]
                p = w[k]
                for t in range(term_ptr[k], term_ptr[k + 1]):
                    j = term_idx[t]
                    if j != i:
                        p *= z[j]
                delta += p
            prob = 1.0 / (1.0 + np.exp(-delta))
            z[i] = 1.0 if U[s, i] < prob else 0.0
        if record_every > 0 and (s + 1) % record_every == 0:
            for i in range(n):
                out[r, i] = z[i]
            r += 1
    return r


# ---------------------------------------------------------------------------
# numpy implementations


def _degree_groups(term_ptr, term_idx):
    """Yield ``(cols, idx)`` with ``idx`` of shape (len(cols), d) per degree d."""
    deg = np.diff(term_ptr)
    for d in np.unique(deg):
        cols = np.flatnonzero(deg == d)
        if d == 0:
            yield cols, np.zeros((cols.size, 0), dtype=np.int64)
            continue
        starts = term_ptr[cols]
        idx = term_idx[starts[:, None] + np.arange(d)[None, :]]
        yield cols, idx


def _eval_np(Y, term_ptr, term_idx, W):
    out = np.zeros(Y.shape[0])
    for cols, idx in _degree_groups(term_ptr, term_idx):
        if idx.shape[1] == 0:
            out += W[:, cols].sum(axis=1)
        else:
            out += (W[:, cols] * Y[:, idx].prod(axis=2)).sum(axis=1)
    return out


def _grad_np(Y, term_ptr, term_idx, W):
    out = np.zeros_like(Y, dtype=float)
    for cols, idx in _degree_groups(term_ptr, term_idx):
        d = idx.shape[1]
        if d == 0:
            continue
        vals = Y[:, idx]  # (B, K_d, d)
        for p in range(d):
            others = np.delete(vals, p, axis=2).prod(axis=2)
            np.add.at(out, (slice(None), idx[:, p]), W[:, cols] * others)
    return out


def _condition_np(X, ev_ptr, ev_idx, w, target, K):
    out = np.zeros((X.shape[0], K))
    for cols, idx in _degree_groups(ev_ptr, ev_idx):
        if idx.shape[1] == 0:
            contrib = np.broadcast_to(w[cols], (X.shape[0], cols.size))
        else:
            contrib = w[cols] * X[:, idx].prod(axis=2)
        np.add.at(out, (slice(None), target[cols]), contrib)
    return out


def _zeta_np(C, n):
    out = np.array(C, dtype=float, copy=True)
    B, M = out.shape
    for bit in range(n):
        step = 1 << bit
        view = out.reshape(B, M // (2 * step), 2, step)
        view[:, :, 1, :] += view[:, :, 0, :]
    return out


def _gibbs_np(z, term_ptr, term_idx, w, var_ptr, var_terms, U, record_every, out):
    n = z.shape[0]
    incident = []
    for i in range(n):
        ks = var_terms[var_ptr[i]:var_ptr[i + 1]]
        others = [term_idx[term_ptr[k]:term_ptr[k + 1]] for k in ks]
        others = [o[o != i] for o in others]
        incident.append((w[ks], others))
    r = 0
    for s in range(U.shape[0]):
        for i in range(n):
            wk, others = incident[i]
            if wk.size:
                prods = np.array([z[o].prod() for o in others])
                delta = float(np.sum(wk * prods))
            else:
                delta = 0.0
            prob = 1.0 / (1.0 + np.exp(-delta))
            z[i] = 1.0 if U[s, i] < prob else 0.0
        if record_every > 0 and (s + 1) % record_every == 0:
            out[r] = z
            r += 1
    return r


# ---------------------------------------------------------------------------
# dispatch


def _as_weights(W, B):
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = np.broadcast_to(W, (B, W.shape[0]))
    return np.ascontiguousarray(W)


def poly_eval(Y, term_ptr, term_idx, W):
    """Values of K-term polynomials at the rows of ``Y`` (shape ``(B, n)``)."""
    Y = np.ascontiguousarray(Y, dtype=float)
    W = _as_weights(W, Y.shape[0])
    fn = _eval_nb if use_numba() else _eval_np
    return fn(Y, term_ptr, term_idx, W)


def poly_grad(Y, term_ptr, term_idx, W):
    """Exact partial derivatives of the multilinear extension, shape ``(B, n)``."""
    Y = np.ascontiguousarray(Y, dtype=float)
    W = _as_weights(W, Y.shape[0])
    fn = _grad_nb if use_numba() else _grad_np
    return fn(Y, term_ptr, term_idx, W)


def condition_weights(X, ev_ptr, ev_idx, w, target, K):
    """Per-row coefficients after substituting evidence rows ``X``.

    Original term ``t`` contributes ``w[t] * prod(X[:, ev_idx[t]])`` to output
    column ``target[t]``.
    """
    X = np.ascontiguousarray(X, dtype=float)
    fn = _condition_nb if use_numba() else _condition_np
    return fn(X, ev_ptr, ev_idx, np.ascontiguousarray(w, dtype=float),
              np.ascontiguousarray(target, dtype=np.int64), int(K))


def subset_sums(C, n):
    """Zeta transform over the subset lattice: ``out[m] = sum_{s subset of m} C[s]``."""
    C = np.ascontiguousarray(C, dtype=float)
    fn = _zeta_nb if use_numba() else _zeta_np
    return fn(C, int(n))


def gibbs_sweeps(z, term_ptr, term_idx, w, var_ptr, var_terms, U, record_every, out):
    """Run ``len(U)`` single-site sweeps in place; store every ``record_every``-th state."""
    fn = _gibbs_nb if use_numba() else _gibbs_np
    return fn(z, term_ptr, term_idx, np.ascontiguousarray(w, dtype=float),
              var_ptr, var_terms, np.ascontiguousarray(U), int(record_every), out)

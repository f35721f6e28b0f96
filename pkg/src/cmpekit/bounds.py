"""Exact and relaxed minimisation over {0,1}^n plus the bounds behind alpha.

Elimination works on table factors built from polynomial terms. With the
bucket scope limited to ``ibound`` variables, :func:`mini_bucket_min` splits
oversized buckets and returns a lower bound; :func:`bucket_elim_min` refuses
instead of splitting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .polymodel import BatchPolynomial, CmpeInstance, MultilinearPolynomial, evaluate

ALPHA_MARGIN = 0.01
# Up to this many query variables the Lagrangian inner problem is solved by
# enumerating all 2**n points once and reusing the tables for every multiplier.
ENUM_LIMIT = 16
# Penalty weights whose minimisers of f + lam*g seed the feasible pool for p_upper.
PENALTY_GRID = (0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)


class EliminationError(ValueError):
    pass


@dataclass(frozen=True)
class EliminationOrder:
    order: tuple
    ibound: int

    def __post_init__(self):
        order = tuple(int(v) for v in self.order)
        if sorted(order) != list(range(len(order))):
            raise ValueError("order must be a permutation of 0..n-1")
        if self.ibound < 1:
            raise ValueError("ibound must be >= 1")
        object.__setattr__(self, "order", order)

    @classmethod
    def min_fill(cls, p: MultilinearPolynomial, ibound: int):
        return cls(min_fill_order(p.n_vars, p.interaction_edges()), ibound)


def min_fill_order(n_vars, edges):
    """Greedy min-fill; ties go to the smaller variable index."""
    adj = {v: set() for v in range(n_vars)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    remaining = set(range(n_vars))
    order = []
    while remaining:
        best, best_fill = None, None
        for v in sorted(remaining):
            nb = sorted(adj[v])
            fill = sum(1 for i in range(len(nb)) for j in range(i + 1, len(nb)) if nb[j] not in adj[nb[i]])
            if best_fill is None or fill < best_fill:
                best, best_fill = v, fill
        nb = list(adj[best])
        for i in range(len(nb)):
            for j in range(i + 1, len(nb)):
                adj[nb[i]].add(nb[j])
                adj[nb[j]].add(nb[i])
        for u in nb:
            adj[u].discard(best)
        del adj[best]
        remaining.discard(best)
        order.append(best)
    return tuple(order)


# ---------------------------------------------------------------------------
# table factors


def _poly_factors(p: MultilinearPolynomial):
    """Split into a constant and table factors; lower-order terms join a covering factor."""
    const = 0.0
    factors = []  # [scope (ascending tuple), table]
    for key in sorted(p.terms, key=lambda k: (-len(k), k)):
        w = p.terms[key]
        if not key:
            const += w
            continue
        host = next((f for f in factors if set(key) <= set(f[0])), None)
        if host is None:
            host = [key, np.zeros((2,) * len(key))]
            factors.append(host)
        sl = tuple(1 if v in key else slice(None) for v in host[0])
        host[1][sl] += w
    return const, [(tuple(s), t) for s, t in factors]


def _expand(scope, table, union):
    shape = [2 if v in scope else 1 for v in union]
    return table.reshape(shape)


def _combine(factors):
    union = tuple(sorted(set().union(*(s for s, _ in factors))))
    total = np.zeros((2,) * len(union))
    for s, t in factors:
        total = total + _expand(s, t, union)
    return union, total


def _partition(bucket, ibound):
    minis = []
    for fac in sorted(bucket, key=lambda f: (-len(f[0]), f[0])):
        for mb in minis:
            if len(mb[0] | set(fac[0])) <= ibound:
                mb[0].update(fac[0])
                mb[1].append(fac)
                break
        else:
            minis.append([set(fac[0]), [fac]])
    return [m[1] for m in minis]


def _eliminate(p: MultilinearPolynomial, elim: EliminationOrder, exact: bool):
    n = p.n_vars
    if len(elim.order) != n:
        raise ValueError(f"order covers {len(elim.order)} variables, polynomial has {n}")
    pos = {v: i for i, v in enumerate(elim.order)}
    const, factors = _poly_factors(p)
    buckets = [[] for _ in range(n)]
    for fac in factors:
        buckets[min(pos[v] for v in fac[0])].append(fac)
    kept = []
    for i, v in enumerate(elim.order):
        bucket = buckets[i]
        if not bucket:
            kept.append([])
            continue
        size = len(set().union(*(s for s, _ in bucket)))
        if exact:
            if size > elim.ibound:
                raise EliminationError(
                    f"bucket of variable {v} spans {size} variables > ibound {elim.ibound}: "
                    "exact elimination infeasible, use mini_bucket")
            groups = [bucket]
        else:
            groups = _partition(bucket, elim.ibound)
        funcs = []
        for grp in groups:
            scope, table = _combine(grp)
            funcs.append((scope, table))
            msg = table.min(axis=scope.index(v))
            rest = tuple(u for u in scope if u != v)
            if rest:
                buckets[min(pos[u] for u in rest)].append((rest, msg))
            else:
                const += float(msg)
        kept.append(funcs)
    return const, kept


def _decode(elim: EliminationOrder, kept):
    y = np.zeros(len(elim.order))
    for i in reversed(range(len(elim.order))):
        v = elim.order[i]
        cost = np.zeros(2)
        for scope, table in kept[i]:
            idx = tuple(slice(None) if u == v else int(y[u]) for u in scope)
            cost += table[idx]
        y[v] = 1.0 if cost[1] < cost[0] else 0.0
    return y


def max_bucket_scope(p: MultilinearPolynomial, order: Sequence[int]):
    """Largest bucket scope (eliminated variable included) of exact elimination."""
    pos = {v: i for i, v in enumerate(order)}
    scopes = [set(k) for k in p.terms if k]
    buckets = [[] for _ in order]
    for s in scopes:
        buckets[min(pos[v] for v in s)].append(s)
    width = 0
    for i, v in enumerate(order):
        if not buckets[i]:
            continue
        union = set().union(*buckets[i])
        width = max(width, len(union))
        rest = union - {v}
        if rest:
            buckets[min(pos[u] for u in rest)].append(rest)
    return width


def bucket_elim_min(p: MultilinearPolynomial, order: EliminationOrder):
    """Exact ``(min, argmin)`` over {0,1}^n by bucket elimination."""
    const, kept = _eliminate(p, order, exact=True)
    return const, _decode(order, kept)


def mini_bucket_solve(p: MultilinearPolynomial, order: EliminationOrder):
    """Mini-bucket lower bound together with the greedily decoded assignment."""
    const, kept = _eliminate(p, order, exact=False)
    return const, _decode(order, kept)


def mini_bucket_single(p: MultilinearPolynomial, order: EliminationOrder) -> float:
    """One mini-bucket pass at ``order.ibound``."""
    return _eliminate(p, order, exact=False)[0]


def mini_bucket_min(p: MultilinearPolynomial, order: EliminationOrder) -> float:
    """Lower bound on ``min_y p(y)``; exact whenever no bucket needs splitting.

    Greedy partitioning alone can get looser as the i-bound grows, so this
    keeps the best pass over every i-bound up to ``order.ibound``.
    """
    top = min(order.ibound, max(1, max_bucket_scope(p, order.order)))
    return max(_eliminate(p, EliminationOrder(order.order, i), exact=False)[0] for i in range(1, top + 1))


# ---------------------------------------------------------------------------
# alpha bounds


def _bits(index, n):
    return np.array([(index >> (n - 1 - j)) & 1 for j in range(n)], dtype=float)


def _as_batch(p: MultilinearPolynomial):
    return BatchPolynomial(list(p.terms), p.n_vars, np.array([list(p.terms.values())], dtype=float))


def step_size(k, eta0):
    return eta0 / math.sqrt(k + 1)


def lagrangian_lower_bound_q(inst: CmpeInstance, steps: int = 200, eta0: float = 1.0, mu0: float = 0.0,
                             ibound: int = 4, inner: str = "auto", candidates: Optional[list] = None):
    """Lower bound on ``q* = min{f + g : g > 0}`` and the multiplier attaining it.

    Maximises ``min_y f(y) + (1 - mu) g(y)`` over ``mu >= 0`` by projected
    subgradient steps ``mu <- max(0, mu - eta_k g(y_k))``. ``inner`` picks the
    inner solver: ``enumerate`` (|Y| <= 24), ``exact`` bucket elimination,
    ``minibucket``, or ``auto``. Feasible inner minimisers are appended to
    ``candidates`` when a list is given.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    f, g = inst.f, inst.g
    n = f.n_vars
    if inner == "auto":
        if n <= ENUM_LIMIT:
            inner = "enumerate"
        else:
            order = EliminationOrder.min_fill(f + g, ibound)
            inner = "exact" if max_bucket_scope(f + g, order.order) <= ibound else "minibucket"
    if inner == "enumerate":
        if n > 24:
            raise ValueError("enumeration limited to 24 variables")
        fv = _as_batch(f).all_values()[0]
        gv = _as_batch(g).all_values()[0]

        def solve(mu):
            vals = fv + (1.0 - mu) * gv
            i = int(np.argmin(vals))
            return float(vals[i]), _bits(i, n), float(gv[i])
    elif inner in ("exact", "minibucket"):
        order = EliminationOrder.min_fill(f + g, ibound)
        run = bucket_elim_min if inner == "exact" else mini_bucket_solve

        def solve(mu):
            val, y = run(f + g.scale(1.0 - mu), order)
            return val, y, evaluate(g, y)
    else:
        raise ValueError(f"unknown inner solver {inner!r}")

    mu = float(mu0)
    best, best_mu = -math.inf, mu
    for k in range(steps):
        val, y, gy = solve(mu)
        if val > best:
            best, best_mu = val, mu
        if candidates is not None and gy <= 0:
            candidates.append(y)
        mu = max(0.0, mu - step_size(k, eta0) * gy)
    return best, best_mu


def feasible_upper_bound_p(inst: CmpeInstance, candidates, fallback: Optional[float] = None):
    """Best objective among rounded feasible candidates, else ``(fallback or u_f, None)``."""
    best, witness = None, None
    for c in candidates:
        y = (np.asarray(c, dtype=float) >= 0.5).astype(float)
        if evaluate(inst.g, y) <= 0:
            fy = evaluate(inst.f, y)
            if best is None or fy < best:
                best, witness = fy, y
    if best is None:
        return (inst.u_f if fallback is None else float(fallback)), None
    return best, witness


def compute_alpha(p_upper, q_lower, u_f, l_f, margin=ALPHA_MARGIN):
    if not p_upper > 0:
        raise ValueError(f"p_upper must be positive, got {p_upper}")
    cap = u_f / l_f
    if q_lower > 0:
        return min(p_upper / q_lower * (1.0 + margin), cap)
    return cap


@dataclass(frozen=True)
class AlphaBound:
    p_upper: float
    q_lower: float
    alpha: float
    mu_star: float
    feasible_witness: Optional[np.ndarray] = None


def mpe_upper_bound(inst: CmpeInstance, ibound: int = 4):
    """Upper bound on ``max_y f(y)``: exact by enumeration for small |Y|, else mini-buckets."""
    if inst.n_y <= ENUM_LIMIT:
        return min(inst.u_f, float(_as_batch(inst.f).all_values()[0].max()))
    neg = -inst.f
    return min(inst.u_f, -mini_bucket_min(neg, EliminationOrder.min_fill(neg, ibound)))


def penalty_candidates(inst: CmpeInstance, ibound: int = 4, grid=PENALTY_GRID):
    """Minimisers of ``f + lam * g`` over ``grid``; large ``lam`` pushes toward feasibility."""
    n = inst.n_y
    if n <= ENUM_LIMIT:
        fv = _as_batch(inst.f).all_values()[0]
        gv = _as_batch(inst.g).all_values()[0]
        return [_bits(int(np.argmin(fv + lam * gv)), n) for lam in grid]
    out = []
    for lam in grid:
        p = inst.f + inst.g.scale(lam)
        out.append(mini_bucket_solve(p, EliminationOrder.min_fill(p, ibound))[1])
    return out


def alpha_bound(inst: CmpeInstance, steps: int = 200, eta0: float = 1.0, ibound: int = 4,
                inner: str = "auto") -> AlphaBound:
    cands = penalty_candidates(inst, ibound)
    q_lower, mu = lagrangian_lower_bound_q(inst, steps, eta0, ibound=ibound, inner=inner, candidates=cands)
    p_upper, witness = feasible_upper_bound_p(inst, cands, fallback=mpe_upper_bound(inst, ibound))
    return AlphaBound(p_upper, q_lower, compute_alpha(p_upper, q_lower, inst.u_f, inst.l_f), mu, witness)


def alpha_bounds_batch(F: BatchPolynomial, G: BatchPolynomial, u_f, l_f, steps=200, eta0=1.0, mu0=0.0):
    """Vectorised :func:`alpha_bound` for many instances with |Y| <= ENUM_LIMIT.

    Runs the same subgradient recursion per row on enumerated value tables.
    The unconstrained fallback for ``p_upper`` is the exact ``max f``.
    Returns a dict of arrays: p_upper, q_lower, alpha, mu_star, witness_index
    (-1 when no feasible point was visited).
    """
    if F.n_vars > ENUM_LIMIT:
        raise ValueError(f"batched bounds need |Y| <= {ENUM_LIMIT}")
    fv, gv = F.all_values(), G.all_values()
    N = fv.shape[0]
    rows = np.arange(N)
    mu = np.full(N, float(mu0))
    best = np.full(N, -np.inf)
    best_mu = mu.copy()
    p_up = np.minimum(np.asarray(u_f, dtype=float) * np.ones(N), fv.max(axis=1))
    wit = np.full(N, -1, dtype=np.int64)

    def offer(i):
        fy, gy = fv[rows, i], gv[rows, i]
        imp = (gy <= 0) & ((fy < p_up) | ((wit < 0) & (fy <= p_up)))
        p_up[imp] = fy[imp]
        wit[imp] = i[imp]

    for lam in PENALTY_GRID:
        offer((fv + lam * gv).argmin(axis=1))
    for k in range(steps):
        vals = fv + (1.0 - mu)[:, None] * gv
        i = vals.argmin(axis=1)
        val = vals[rows, i]
        better = val > best
        best = np.where(better, val, best)
        best_mu = np.where(better, mu, best_mu)
        gy = gv[rows, i]
        offer(i)
        mu = np.maximum(0.0, mu - step_size(k, eta0) * gy)
    u_f = np.broadcast_to(np.asarray(u_f, dtype=float), (N,))
    l_f = np.broadcast_to(np.asarray(l_f, dtype=float), (N,))
    alpha = np.array([compute_alpha(p_up[j], best[j], u_f[j], l_f[j]) for j in range(N)])
    return {"p_upper": p_up, "q_lower": best, "alpha": alpha, "mu_star": best_mu, "witness_index": wit}

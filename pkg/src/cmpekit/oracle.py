"""Exact CMPE solutions: exhaustive scan for small |Y|, depth-first branch and bound beyond."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bounds import EliminationOrder, _as_batch, _bits, lagrangian_lower_bound_q, min_fill_order, mini_bucket_single
from .polymodel import CmpeInstance, evaluate

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
BUDGET_EXHAUSTED = "budget_exhausted"
BRUTE_LIMIT = 24


@dataclass(frozen=True)
class OracleResult:
    status: str
    y_star: Optional[np.ndarray]
    p_star: Optional[float]
    nodes_expanded: int


def _tables(inst: CmpeInstance):
    if inst.n_y > BRUTE_LIMIT:
        raise ValueError(f"|Y|={inst.n_y} exceeds the enumeration guard ({BRUTE_LIMIT}); "
                         "use branch_and_bound_cmpe")
    return _as_batch(inst.f).all_values()[0], _as_batch(inst.g).all_values()[0]


def brute_force_cmpe(inst: CmpeInstance) -> OracleResult:
    """Scan all of {0,1}^|Y|; ties go to the lexicographically smallest assignment."""
    fv, gv = _tables(inst)
    feasible = gv <= 0
    if not feasible.any():
        return OracleResult(INFEASIBLE, None, None, fv.size)
    i = int(np.argmin(np.where(feasible, fv, np.inf)))
    return OracleResult(OPTIMAL, _bits(i, inst.n_y), float(fv[i]), fv.size)


def brute_force_qstar(inst: CmpeInstance) -> float:
    """``min {f + g : g > 0}``, or ``inf`` when every point is feasible."""
    fv, gv = _tables(inst)
    infeasible = gv > 0
    if not infeasible.any():
        return math.inf
    return float((fv + gv)[infeasible].min())


def branch_and_bound_cmpe(inst: CmpeInstance, node_budget: int = 10**6, ibound: int = 3,
                          mu: Optional[float] = None) -> OracleResult:
    """Depth-first search over the query variables in min-fill order.

    A node is cut when the mini-bucket bound of the conditioned ``g`` is
    positive (no feasible completion) or when the larger of the mini-bucket
    bounds on ``f`` and ``f + mu*g`` reaches the incumbent; ``mu >= 0``
    keeps the second a valid bound on feasible completions. Children are
    visited cheapest-first by ``f + max(0, g)`` with the rest held at 0.5.
    """
    if node_budget < 1:
        raise ValueError("node_budget must be >= 1")
    f, g, n = inst.f, inst.g, inst.n_y
    if mu is None:
        mu = lagrangian_lower_bound_q(inst, steps=50, ibound=ibound)[1] if n > 0 else 0.0
    mu = max(0.0, float(mu))
    order = min_fill_order(n, (f + g).interaction_edges())
    best = [math.inf, None]
    nodes = 0
    exhausted = False

    def lower(fc, gc):
        k = fc.n_vars
        if k == 0:
            return fc.constant, gc.constant
        lb_f = mini_bucket_single(fc, EliminationOrder.min_fill(fc, ibound))
        lag = fc + gc.scale(mu)
        lb_l = mini_bucket_single(lag, EliminationOrder.min_fill(lag, ibound))
        lb_g = mini_bucket_single(gc, EliminationOrder.min_fill(gc, ibound))
        return max(lb_f, lb_l), lb_g

    def visit(partial):
        nonlocal nodes, exhausted
        if nodes >= node_budget:
            exhausted = True
            return
        nodes += 1
        depth = len(partial)
        if depth == n:
            y = np.array([partial[j] for j in range(n)], dtype=float)
            if evaluate(g, y) <= 0:
                fy = evaluate(f, y)
                if fy < best[0]:
                    best[0], best[1] = fy, y
            return
        fc = f.condition(partial)
        gc = g.condition(partial)
        lb, lb_g = lower(fc, gc)
        if lb_g > 1e-9 * (1.0 + abs(lb_g)):
            return
        if lb - 1e-9 * (1.0 + abs(lb)) >= best[0]:
            return
        v = order[depth]
        scores = []
        for val in (0, 1):
            a = np.full(n, 0.5)
            for j, x in partial.items():
                a[j] = x
            a[v] = val
            scores.append(evaluate(f, a) + max(0.0, evaluate(g, a)))
        for val in ((0, 1) if scores[0] <= scores[1] else (1, 0)):
            partial[v] = val
            visit(partial)
            del partial[v]
            if exhausted:
                return

    visit({})
    if exhausted:
        return OracleResult(BUDGET_EXHAUSTED, best[1], None if best[1] is None else best[0], nodes)
    if best[1] is None:
        return OracleResult(INFEASIBLE, None, None, nodes)
    return OracleResult(OPTIMAL, best[1], best[0], nodes)


def solve(inst: CmpeInstance, node_budget: int = 10**6) -> OracleResult:
    """Enumeration up to 20 query variables, branch and bound beyond."""
    if inst.n_y <= 20:
        return brute_force_cmpe(inst)
    return branch_and_bound_cmpe(inst, node_budget)

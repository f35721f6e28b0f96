"""Binary Markov networks and their multilinear-polynomial weight functions.

A :class:`MultilinearPolynomial` maps sorted index tuples to weights; the
empty tuple holds the constant. Networks are read from UAI ``MARKOV`` files,
compiled to polynomials with :func:`to_polynomial`, conditioned on evidence and
evaluated on continuous relaxations of 0/1 assignments.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels


class UaiParseError(ValueError):
    """Malformed UAI input; ``line`` is 1-based."""

    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# polynomials


def _compile_terms(keys):
    ptr = np.zeros(len(keys) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(k) for k in keys])
    idx = np.fromiter((i for k in keys for i in k), dtype=np.int64, count=int(ptr[-1]))
    return ptr, idx


@dataclass(frozen=True, eq=False)
class MultilinearPolynomial:
    """Sum of ``w_I * prod_{i in I} z_i`` over a canonical set of index tuples."""

    n_vars: int
    terms: Mapping[tuple, float]

    def __post_init__(self):
        merged = {}
        for key, w in dict(self.terms).items():
            key = tuple(int(i) for i in key)
            if len(set(key)) != len(key):
                raise ValueError(f"term {key} repeats a variable")
            if any(i < 0 or i >= self.n_vars for i in key):
                raise ValueError(f"term {key} out of range for n_vars={self.n_vars}")
            key = tuple(sorted(key))
            merged[key] = merged.get(key, 0.0) + float(w)
        clean = {k: merged[k] for k in sorted(merged, key=lambda k: (len(k), k)) if merged[k] != 0.0}
        object.__setattr__(self, "terms", MappingProxyType(clean))

    @classmethod
    def from_pairs(cls, n_vars, pairs: Iterable[tuple[Sequence[int], float]]):
        acc = {}
        for key, w in pairs:
            key = tuple(sorted(int(i) for i in key))
            if len(set(key)) != len(key):
                raise ValueError(f"term {key} repeats a variable")
            acc[key] = acc.get(key, 0.0) + float(w)
        return cls(n_vars, acc)

    @classmethod
    def constant_poly(cls, n_vars, c):
        return cls(n_vars, {(): float(c)})

    @property
    def constant(self):
        return self.terms.get((), 0.0)

    @cached_property
    def compiled(self):
        keys = list(self.terms)
        ptr, idx = _compile_terms(keys)
        w = np.array([self.terms[k] for k in keys], dtype=float)
        return ptr, idx, w

    def abs_weight_sum(self):
        return float(sum(abs(w) for w in self.terms.values()))

    def max_degree(self):
        return max((len(k) for k in self.terms), default=0)

    def interaction_edges(self):
        edges = set()
        for key in self.terms:
            for a in range(len(key)):
                for b in range(a + 1, len(key)):
                    edges.add((key[a], key[b]))
        return edges

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return MultilinearPolynomial.from_pairs(self.n_vars, [*self.terms.items(), ((), other)])
        if other.n_vars != self.n_vars:
            raise ValueError("n_vars mismatch")
        return MultilinearPolynomial.from_pairs(self.n_vars, [*self.terms.items(), *other.terms.items()])

    __radd__ = __add__

    def __neg__(self):
        return self.scale(-1.0)

    def __sub__(self, other):
        return self + (-other if not isinstance(other, (int, float)) else -float(other))

    def scale(self, c):
        return MultilinearPolynomial(self.n_vars, {k: c * w for k, w in self.terms.items()})

    def evaluate(self, a):
        return evaluate(self, a)

    def gradient(self, a):
        return gradient(self, a)

    def condition(self, evidence):
        return condition(self, evidence)[0]

    def __repr__(self):
        parts = [f"{w:+g}" + "".join(f"*z{i}" for i in k) for k, w in self.terms.items()]
        return f"MultilinearPolynomial(n_vars={self.n_vars}, {' '.join(parts) or '0'})"


def _rows(p_n, a):
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    A = a[None, :] if single else a
    if A.ndim != 2 or A.shape[1] != p_n:
        raise ValueError(f"assignment length {A.shape[-1]} != n_vars {p_n}")
    return A, single


def evaluate(p: MultilinearPolynomial, a):
    """Weight of ``a`` (one assignment or a ``(B, n)`` batch)."""
    A, single = _rows(p.n_vars, a)
    ptr, idx, w = p.compiled
    out = kernels.poly_eval(A, ptr, idx, w)
    return float(out[0]) if single else out


def gradient(p: MultilinearPolynomial, a):
    A, single = _rows(p.n_vars, a)
    ptr, idx, w = p.compiled
    out = kernels.poly_grad(A, ptr, idx, w)
    return out[0] if single else out


def condition(p: MultilinearPolynomial, evidence: Mapping[int, float]):
    """Substitute ``evidence`` and reindex the remaining variables.

    Returns ``(polynomial, y_index_map)`` where ``y_index_map[j]`` is the
    original index of local variable ``j``.
    """
    for i in evidence:
        if not 0 <= int(i) < p.n_vars:
            raise ValueError(f"evidence index {i} out of range for n_vars={p.n_vars}")
    ev = {int(i): float(v) for i, v in evidence.items()}
    y_map = tuple(i for i in range(p.n_vars) if i not in ev)
    local = {orig: j for j, orig in enumerate(y_map)}
    pairs = []
    for key, w in p.terms.items():
        for i in key:
            if i in ev:
                w *= ev[i]
        if w == 0.0:
            continue
        pairs.append((tuple(local[i] for i in key if i not in ev), w))
    return MultilinearPolynomial.from_pairs(len(y_map), pairs), y_map


class BatchPolynomial:
    """Polynomials sharing one term list but carrying per-row weights ``W[b, k]``."""

    def __init__(self, keys, n_vars, W):
        self.keys = [tuple(k) for k in keys]
        self.n_vars = int(n_vars)
        self.W = np.asarray(W, dtype=float)
        if self.W.ndim != 2 or self.W.shape[1] != len(self.keys):
            raise ValueError("weight matrix must be (B, K)")
        self.ptr, self.idx = _compile_terms(self.keys)

    def __len__(self):
        return self.W.shape[0]

    def _check(self, Y):
        Y = np.asarray(Y, dtype=float)
        if Y.shape != (len(self), self.n_vars):
            raise ValueError(f"expected assignments of shape {(len(self), self.n_vars)}, got {Y.shape}")
        return Y

    def evaluate(self, Y):
        return kernels.poly_eval(self._check(Y), self.ptr, self.idx, self.W)

    def gradient(self, Y):
        return kernels.poly_grad(self._check(Y), self.ptr, self.idx, self.W)

    def take(self, rows):
        out = BatchPolynomial.__new__(BatchPolynomial)
        out.keys, out.n_vars, out.ptr, out.idx = self.keys, self.n_vars, self.ptr, self.idx
        out.W = self.W[rows]
        return out

    def row(self, b):
        return MultilinearPolynomial(self.n_vars, dict(zip(self.keys, self.W[b])))

    def abs_weight_sums(self):
        return np.abs(self.W).sum(axis=1)

    def constant_column(self):
        try:
            return self.keys.index(())
        except ValueError:
            return None

    def affine(self, scale, shift):
        """Row-wise ``scale * p + shift[b]`` (``shift`` scalar or length B)."""
        keys = list(self.keys)
        W = scale * self.W
        c = self.constant_column()
        if c is None:
            keys = [()] + keys
            W = np.concatenate([np.zeros((W.shape[0], 1)), W], axis=1)
            c = 0
        W[:, c] += shift
        return BatchPolynomial(keys, self.n_vars, W)

    def all_values(self):
        """Values at all ``2**n`` discrete points per row (index bit ``n-1-j`` is variable j)."""
        n = self.n_vars
        masks = np.array([sum(1 << (n - 1 - j) for j in k) for k in self.keys], dtype=np.int64)
        C = np.zeros((len(self), 1 << n))
        np.add.at(C, (slice(None), masks), self.W)
        return kernels.subset_sums(C, n)


def condition_batch(p: MultilinearPolynomial, evidence_vars: Sequence[int], X):
    """Condition ``p`` on many evidence rows at once.

    ``X[b, e]`` is the value of variable ``evidence_vars[e]`` in row ``b``. The
    result is indexed by the remaining variables in ascending order.
    """
    ev_vars = [int(v) for v in evidence_vars]
    ev_pos = {v: e for e, v in enumerate(ev_vars)}
    y_map = [i for i in range(p.n_vars) if i not in ev_pos]
    local = {orig: j for j, orig in enumerate(y_map)}
    ykeys, target, ev_terms, weights = {}, [], [], []
    for key, w in p.terms.items():
        yk = tuple(local[i] for i in key if i not in ev_pos)
        target.append(ykeys.setdefault(yk, len(ykeys)))
        ev_terms.append(tuple(ev_pos[i] for i in key if i in ev_pos))
        weights.append(w)
    keys = list(ykeys)
    ev_ptr, ev_idx = _compile_terms(ev_terms)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    W = kernels.condition_weights(X, ev_ptr, ev_idx, np.array(weights), np.array(target, dtype=np.int64), len(keys))
    return BatchPolynomial(keys, len(y_map), W), tuple(y_map)


# ---------------------------------------------------------------------------
# Markov networks


@dataclass(frozen=True, eq=False)
class Potential:
    scope: tuple
    table: np.ndarray  # flat, row-major over scope (last variable fastest)


@dataclass(frozen=True, eq=False)
class MarkovNetwork:
    n_vars: int
    cardinalities: tuple
    potentials: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.cardinalities) != self.n_vars:
            raise ValueError("one cardinality per variable required")
        if any(c != 2 for c in self.cardinalities):
            raise ValueError("only binary variables are supported")
        for pot in self.potentials:
            if len(set(pot.scope)) != len(pot.scope):
                raise ValueError(f"scope {pot.scope} has duplicates")
            if any(not 0 <= v < self.n_vars for v in pot.scope):
                raise ValueError(f"scope {pot.scope} out of range")
            if len(pot.table) != 2 ** len(pot.scope):
                raise ValueError(f"table length mismatch for scope {pot.scope}")

    def weight(self, z):
        """Direct table-sum weight of a 0/1 assignment."""
        total = 0.0
        for pot in self.potentials:
            idx = 0
            for v in pot.scope:
                idx = 2 * idx + int(z[v])
            total += pot.table[idx]
        return total


def to_polynomial(net: MarkovNetwork) -> MultilinearPolynomial:
    """Expand every table into monomials and merge.

    The multilinear coefficients of one table are its Moebius transform: along
    each scope axis the "1" slice becomes the difference of the "1" and "0"
    slices.
    """
    pairs = []
    for pot in net.potentials:
        k = len(pot.scope)
        coef = np.asarray(pot.table, dtype=float).reshape((2,) * k).copy() if k else np.asarray(pot.table, dtype=float).copy()
        for ax in range(k):
            sl1 = [slice(None)] * k
            sl0 = [slice(None)] * k
            sl1[ax], sl0[ax] = 1, 0
            coef[tuple(sl1)] -= coef[tuple(sl0)]
        flat = coef.reshape(-1)
        for cfg in range(flat.size):
            if flat[cfg] == 0.0:
                continue
            key = tuple(pot.scope[j] for j in range(k) if (cfg >> (k - 1 - j)) & 1)
            pairs.append((key, flat[cfg]))
    return MultilinearPolynomial.from_pairs(net.n_vars, pairs)


_TOKEN = re.compile(r"\S+")


def _tokens(text):
    for lineno, line in enumerate(text.splitlines(), start=1):
        for m in _TOKEN.finditer(line):
            yield m.group(0), lineno


def parse_uai(text: str, log_space: bool = True) -> MarkovNetwork:
    """Parse a UAI ``MARKOV`` file.

    Table entries are natural-log weights unless ``log_space`` is False, in
    which case they must be positive probabilities/potentials and are logged.
    """
    toks = _tokens(text)
    last = [0]

    def nxt(what):
        try:
            tok, line = next(toks)
        except StopIteration:
            raise UaiParseError(f"unexpected end of file while reading {what}", last[0] + 1) from None
        last[0] = line
        return tok, line

    def nxt_int(what):
        tok, line = nxt(what)
        try:
            return int(tok), line
        except ValueError:
            raise UaiParseError(f"malformed token {tok!r} (expected integer {what})", line) from None

    def nxt_float(what):
        tok, line = nxt(what)
        try:
            return float(tok), line
        except ValueError:
            raise UaiParseError(f"malformed token {tok!r} (expected number {what})", line) from None

    kind, line = nxt("preamble")
    if kind.upper() != "MARKOV":
        raise UaiParseError(f"unsupported preamble {kind!r}; expected MARKOV", line)
    n_vars, line = nxt_int("variable count")
    if n_vars < 0:
        raise UaiParseError("negative variable count", line)
    cards = []
    for _ in range(n_vars):
        c, line = nxt_int("cardinality")
        if c != 2:
            raise UaiParseError(f"cardinality {c} != 2 (only binary variables supported)", line)
        cards.append(c)
    n_cliques, line = nxt_int("clique count")
    scopes = []
    for _ in range(n_cliques):
        size, line = nxt_int("scope size")
        scope = []
        for _ in range(size):
            v, line = nxt_int("scope variable")
            if not 0 <= v < n_vars:
                raise UaiParseError(f"scope variable {v} out of range", line)
            scope.append(v)
        if len(set(scope)) != len(scope):
            raise UaiParseError(f"scope {scope} has duplicate variables", line)
        scopes.append(tuple(scope))
    pots = []
    for scope in scopes:
        n_entries, line = nxt_int("table size")
        if n_entries != 2 ** len(scope):
            raise UaiParseError(
                f"table length mismatch: scope {list(scope)} needs {2 ** len(scope)} entries, got {n_entries}", line)
        vals = []
        for _ in range(n_entries):
            v, line = nxt_float("table entry")
            if not log_space:
                if v <= 0.0:
                    raise UaiParseError(f"non-positive entry {v} in probability-space table", line)
                v = math.log(v)
            vals.append(v)
        pots.append(Potential(scope, np.array(vals, dtype=float)))
    extra = next(toks, None)
    if extra is not None:
        raise UaiParseError(f"trailing token {extra[0]!r}", extra[1])
    return MarkovNetwork(n_vars, tuple(cards), tuple(pots))


def read_uai(path, log_space=True):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_uai(fh.read(), log_space=log_space)


def format_uai(net: MarkovNetwork) -> str:
    """Serialise in log space; ``repr`` floats round-trip exactly."""
    lines = ["MARKOV", str(net.n_vars), " ".join(str(c) for c in net.cardinalities), str(len(net.potentials))]
    for pot in net.potentials:
        lines.append(" ".join(str(v) for v in (len(pot.scope), *pot.scope)))
    lines.append("")
    for pot in net.potentials:
        lines.append(str(len(pot.table)))
        lines.append(" ".join(repr(float(v)) for v in pot.table))
        lines.append("")
    return "\n".join(lines)


def write_uai(net, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_uai(net))


def parse_evidence(text: str) -> dict:
    """UAI evidence: ``count idx val idx val ...`` (one sample)."""
    toks = text.split()
    if not toks:
        return {}
    try:
        count = int(toks[0])
        pairs = [int(t) for t in toks[1:1 + 2 * count]]
    except ValueError as exc:
        raise ValueError(f"malformed evidence: {exc}") from None
    if len(pairs) != 2 * count:
        raise ValueError("evidence count does not match the number of pairs")
    return {pairs[2 * i]: pairs[2 * i + 1] for i in range(count)}


def format_evidence(evidence: Mapping[int, int]) -> str:
    items = sorted(evidence.items())
    return " ".join(str(v) for v in (len(items), *[x for kv in items for x in kv]))


# ---------------------------------------------------------------------------
# CMPE instances


@dataclass(frozen=True, eq=False)
class CmpeInstance:
    """``minimize f(y) s.t. g(y) <= 0`` with ``f = f_shift - h_x`` and ``g = t_x - q``."""

    f: MultilinearPolynomial
    g: MultilinearPolynomial
    evidence: Mapping[int, float]
    q: float
    f_shift: float
    y_index_map: tuple
    l_f: float
    u_f: float

    @property
    def n_y(self):
        return self.f.n_vars

    def h_value(self, y):
        """Objective in the original maximisation units."""
        return self.f_shift - evaluate(self.f, y)


def _discrete_range(p: MultilinearPolynomial):
    vals = BatchPolynomial(list(p.terms), p.n_vars, np.array([list(p.terms.values())])).all_values()[0]
    return float(vals.min()), float(vals.max())


def build_instance(m1: MarkovNetwork, m2: MarkovNetwork, evidence: Mapping[int, float], q: float,
                   f_shift: float | None = None) -> CmpeInstance:
    """Build the minimisation form of a CMPE query.

    With the default shift ``1 + sum|w(h_x)|`` the objective is at least 1 on
    the whole cube, so ``l_f = 1`` and ``u_f = f_shift + sum|w(h_x)|``. A
    custom ``f_shift`` gets exact discrete bounds (|Y| <= 20) and must keep
    ``f`` positive.
    """
    if m1.n_vars != m2.n_vars:
        raise ValueError(f"variable-count mismatch: {m1.n_vars} vs {m2.n_vars}")
    h_x, y_map = condition(to_polynomial(m1), evidence)
    t_x, _ = condition(to_polynomial(m2), evidence)
    return instance_from_polynomials(h_x, t_x, evidence, q, y_map, f_shift)


def instance_from_polynomials(h_x, t_x, evidence, q, y_map, f_shift=None):
    total = h_x.abs_weight_sum()
    if f_shift is None:
        f_shift = 1.0 + total
        l_f, u_f = 1.0, f_shift + total
    else:
        if h_x.n_vars > 20:
            l_f, u_f = f_shift - total, f_shift + total
        else:
            lo, hi = _discrete_range(h_x)
            l_f, u_f = f_shift - hi, f_shift - lo
        if l_f <= 0:
            raise ValueError(f"f_shift={f_shift} leaves the objective non-positive (l_f={l_f})")
    f = MultilinearPolynomial.from_pairs(h_x.n_vars, [*((k, -w) for k, w in h_x.terms.items()), ((), f_shift)])
    g = MultilinearPolynomial.from_pairs(t_x.n_vars, [*t_x.terms.items(), ((), -float(q))])
    return CmpeInstance(f, g, MappingProxyType(dict(evidence)), float(q), float(f_shift), tuple(y_map),
                        float(l_f), float(u_f))

"""Benchmark construction: perturbed constraint network, Gibbs evidence samples, percentile thresholds.

A dataset is one objective network ``m1``, one constraint network ``m2``
(``m1`` plus Gaussian noise on every table entry), a fixed evidence subset
and one threshold ``q`` shared by every example. Examples differ only in
their evidence values, which are projections of Gibbs samples from ``m1``.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from . import kernels
from .polymodel import (BatchPolynomial, CmpeInstance, MarkovNetwork, MultilinearPolynomial, Potential,
                        build_instance, condition, condition_batch, evaluate, format_uai, instance_from_polynomials,
                        read_uai, to_polynomial)

PERCENTILES = (10, 30, 60, 80, 90)
DATASET_FORMAT = "cmpekit-dataset"
BURN_IN = 1000
THINNING = 10
_CHUNK = 1 << 20  # uniforms drawn per chunk


@dataclass
class DatasetSpec:
    model: Optional[str] = None
    model2: Optional[str] = None
    noise_var: float = 0.1
    evidence_frac: float = 0.6
    percentile: int = 80
    n_samples: int = 10000
    n_train: Optional[int] = None
    seed: int = 0
    burn_in: int = BURN_IN
    thinning: int = THINNING
    q_samples: int = 100

    def __post_init__(self):
        if not 0.0 < self.evidence_frac < 1.0:
            raise ValueError("evidence fraction must lie strictly between 0 and 1")
        if self.percentile not in PERCENTILES:
            raise ValueError(f"percentile must be one of {PERCENTILES}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.noise_var < 0:
            raise ValueError("noise variance must be >= 0")
        if self.n_train is None:
            self.n_train = int(round(0.9 * self.n_samples))
        if not 0 <= self.n_train <= self.n_samples:
            raise ValueError("n_train must lie in [0, n_samples]")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def perturb_model(m1: MarkovNetwork, noise_var: float, seed) -> MarkovNetwork:
    """Add independent N(0, noise_var) noise to every table entry, potentials in file order."""
    if noise_var < 0:
        raise ValueError("noise variance must be >= 0")
    rng = _rng(seed)
    sd = math.sqrt(noise_var)
    pots = tuple(Potential(p.scope, np.asarray(p.table, dtype=float) + rng.normal(0.0, sd, size=len(p.table)))
                 for p in m1.potentials)
    return MarkovNetwork(m1.n_vars, m1.cardinalities, pots)


def _incidence(p: MultilinearPolynomial):
    ptr, idx, w = p.compiled
    per_var = [[] for _ in range(p.n_vars)]
    for k in range(len(w)):
        for t in range(ptr[k], ptr[k + 1]):
            per_var[idx[t]].append(k)
    var_ptr = np.zeros(p.n_vars + 1, dtype=np.int64)
    var_ptr[1:] = np.cumsum([len(v) for v in per_var])
    var_terms = np.array([k for v in per_var for k in v], dtype=np.int64)
    return ptr, idx, w, var_ptr, var_terms


def gibbs_chain(p: MultilinearPolynomial, n: int, burn_in: int = BURN_IN, thinning: int = THINNING,
                seed=0, init=None):
    """``n`` states of a systematic-scan Gibbs chain on ``P(z) ~ exp(p(z))``.

    Site ``i`` is set to 1 with probability ``sigmoid(p(z_i=1) - p(z_i=0))``.
    After ``burn_in`` sweeps every ``thinning``-th sweep is kept.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if thinning < 1 or burn_in < 0:
        raise ValueError("thinning must be >= 1 and burn_in >= 0")
    rng = _rng(seed)
    nv = p.n_vars
    out = np.zeros((n, nv))
    if nv == 0:
        return out
    z = rng.integers(0, 2, size=nv).astype(float) if init is None else np.array(init, dtype=float)
    ptr, idx, w, var_ptr, var_terms = _incidence(p)
    dummy = np.zeros((0, nv))
    per_chunk = max(1, _CHUNK // nv)
    left = burn_in
    while left:
        s = min(left, per_chunk)
        kernels.gibbs_sweeps(z, ptr, idx, w, var_ptr, var_terms, rng.random((s, nv)), 0, dummy)
        left -= s
    per_chunk = max(1, per_chunk // thinning)
    done = 0
    while done < n:
        k = min(n - done, per_chunk)
        U = rng.random((k * thinning, nv))
        kernels.gibbs_sweeps(z, ptr, idx, w, var_ptr, var_terms, U, thinning, out[done:done + k])
        done += k
    return out


def gibbs_sample(net: MarkovNetwork, n: int, burn_in: int = BURN_IN, thinning: int = THINNING, seed=0):
    return gibbs_chain(to_polynomial(net), n, burn_in, thinning, seed)


def order_statistic(values, percentile):
    """The ``ceil(percentile/100 * len)``-th smallest value, 1-indexed."""
    v = np.sort(np.asarray(values, dtype=float))
    k = max(1, math.ceil(percentile / 100.0 * len(v)))
    return float(v[k - 1])


def select_q(m2: MarkovNetwork, evidence, percentile, seed, n_samples=100, burn_in=BURN_IN,
             thinning=THINNING):
    """Threshold from sorted constraint weights of Gibbs draws of Y given ``evidence``."""
    if percentile not in PERCENTILES:
        raise ValueError(f"percentile must be one of {PERCENTILES}")
    t_x, _ = condition(to_polynomial(m2), evidence)
    ys = gibbs_chain(t_x, n_samples, burn_in, thinning, seed)
    return order_statistic(evaluate(t_x, ys), percentile)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class InstanceBatch:
    """Conditioned problems for a block of examples under the default objective shift."""

    F: BatchPolynomial
    G: BatchPolynomial
    f_shift: np.ndarray
    l_f: np.ndarray
    u_f: np.ndarray

    def h_values(self, Y):
        return self.f_shift - self.F.evaluate(Y)

    def __len__(self):
        return len(self.F)


@dataclass
class Dataset:
    m1: MarkovNetwork
    m2: MarkovNetwork
    evidence_vars: tuple
    X: np.ndarray
    q: float
    spec: DatasetSpec
    seeds: dict = field(default_factory=dict)

    @property
    def n_train(self):
        return self.spec.n_train

    @property
    def query_vars(self):
        ev = set(self.evidence_vars)
        return tuple(i for i in range(self.m1.n_vars) if i not in ev)

    def __len__(self):
        return self.X.shape[0]

    def split(self, name):
        if name == "train":
            return np.arange(self.n_train)
        if name == "test":
            return np.arange(self.n_train, len(self))
        if name == "all":
            return np.arange(len(self))
        raise ValueError(f"unknown split {name!r}")

    @cached_property
    def h(self):
        return to_polynomial(self.m1)

    @cached_property
    def t(self):
        return to_polynomial(self.m2)

    def batch(self, rows=None) -> InstanceBatch:
        X = self.X if rows is None else self.X[rows]
        H, _ = condition_batch(self.h, self.evidence_vars, X)
        T, _ = condition_batch(self.t, self.evidence_vars, X)
        f_shift = 1.0 + H.abs_weight_sums()
        F = H.affine(-1.0, f_shift)
        G = T.affine(1.0, -self.q)
        return InstanceBatch(F, G, f_shift, np.ones(len(F)), 2.0 * f_shift - 1.0)

    def evidence(self, i):
        return {v: float(x) for v, x in zip(self.evidence_vars, self.X[i])}

    def instance(self, i) -> CmpeInstance:
        return build_instance(self.m1, self.m2, self.evidence(i), self.q)


def build_dataset(spec: DatasetSpec, m1: Optional[MarkovNetwork] = None, m2: Optional[MarkovNetwork] = None):
    """Sample a dataset. Seeds for each stage are spawned from ``spec.seed``."""
    if m1 is None:
        if spec.model is None:
            raise ValueError("a base network is required")
        m1 = read_uai(spec.model)
    if m2 is None and spec.model2 is not None:
        m2 = read_uai(spec.model2)
    if m2 is not None and m2.n_vars != m1.n_vars:
        raise ValueError("constraint network has a different variable count")
    s_noise, s_ev, s_gibbs, s_q = (int(c.generate_state(1)[0]) for c in np.random.SeedSequence(spec.seed).spawn(4))
    if m2 is None:
        m2 = perturb_model(m1, spec.noise_var, s_noise)
    n = m1.n_vars
    k = int(math.floor(spec.evidence_frac * n))
    ev_vars = tuple(sorted(int(v) for v in np.random.default_rng(s_ev).choice(n, size=k, replace=False)))
    samples = gibbs_sample(m1, spec.n_samples, spec.burn_in, spec.thinning, s_gibbs)
    X = samples[:, list(ev_vars)]
    ev0 = {v: float(x) for v, x in zip(ev_vars, X[0])}
    q = select_q(m2, ev0, spec.percentile, s_q, spec.q_samples, spec.burn_in, spec.thinning)
    seeds = {"master": spec.seed, "noise": s_noise, "evidence_subset": s_ev, "gibbs": s_gibbs, "q": s_q}
    return Dataset(m1, m2, ev_vars, X, q, spec, seeds)


def write_dataset(ds: Dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "model1.uai"), "w") as fh:
        fh.write(format_uai(ds.m1))
    with open(os.path.join(out_dir, "model2.uai"), "w") as fh:
        fh.write(format_uai(ds.m2))
    with open(os.path.join(out_dir, "dataset.jsonl"), "w") as fh:
        for i in range(len(ds)):
            rec = {"example_id": i, "split": "train" if i < ds.n_train else "test",
                   "evidence": [int(b) for b in ds.X[i]], "q": ds.q, "percentile": ds.spec.percentile}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {"format": DATASET_FORMAT, "version": 1, "spec": asdict(ds.spec), "seeds": ds.seeds,
                "evidence_vars": list(ds.evidence_vars), "query_vars": list(ds.query_vars), "q": ds.q,
                "n_train": ds.n_train, "n_test": len(ds) - ds.n_train,
                "model1": "model1.uai", "model2": "model2.uai"}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def read_dataset(out_dir) -> Dataset:
    path = os.path.join(out_dir, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{out_dir}: no manifest.json (run the gen stage first)")
    with open(path) as fh:
        man = json.load(fh)
    if man.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: not a dataset manifest")
    m1 = read_uai(os.path.join(out_dir, man["model1"]))
    m2 = read_uai(os.path.join(out_dir, man["model2"]))
    rows = []
    with open(os.path.join(out_dir, "dataset.jsonl")) as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line)["evidence"])
    X = np.array(rows, dtype=float).reshape(len(rows), len(man["evidence_vars"]))
    return Dataset(m1, m2, tuple(man["evidence_vars"]), X, float(man["q"]), DatasetSpec(**man["spec"]),
                   man["seeds"])


# ---------------------------------------------------------------------------
# synthetic networks and instances


def grid_network(rows: int, cols: int, seed, scale: float = 1.0) -> MarkovNetwork:
    """Pairwise grid with unary and edge tables drawn from ``scale * U(0, 1)``."""
    rng = _rng(seed)
    n = rows * cols
    pots = [Potential((i,), scale * rng.random(2)) for i in range(n)]
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                pots.append(Potential((i, i + 1), scale * rng.random(4)))
            if r + 1 < rows:
                pots.append(Potential((i, i + cols), scale * rng.random(4)))
    return MarkovNetwork(n, (2,) * n, tuple(pots))


def random_pairwise_poly(rng, n, density=0.4, scale=1.0):
    pairs = [((), 3.0 * scale * rng.normal())]
    pairs += [((i,), scale * rng.normal()) for i in range(n)]
    pairs += [((i, j), scale * rng.normal()) for i in range(n) for j in range(i + 1, n) if rng.random() < density]
    return MultilinearPolynomial.from_pairs(n, pairs)


def random_pairwise_instance(rng, n_y, density=0.4, f_shift=None, infeasible_prob=0.05):
    """Random pairwise objective and constraint over ``n_y`` query variables.

    ``q`` is a random quantile of the constraint's values over the cube, or
    below its minimum with probability ``infeasible_prob``.
    """
    rng = _rng(rng)
    h = random_pairwise_poly(rng, n_y, density)
    t = random_pairwise_poly(rng, n_y, density)
    tv = BatchPolynomial(list(t.terms), n_y, np.array([list(t.terms.values())])).all_values()[0]
    if rng.random() < infeasible_prob:
        q = float(tv.min()) - 1.0
    else:
        q = float(np.quantile(tv, rng.uniform(0.02, 0.9)))
    return instance_from_polynomials(h, t, {}, q, tuple(range(n_y)), f_shift)

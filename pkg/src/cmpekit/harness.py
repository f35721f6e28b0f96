"""Pipeline stages behind the command line: labels, bounds, training, evaluation, comparison tables.

Every stage reads and writes plain files in a dataset directory:

``dataset.jsonl`` / ``manifest.json``  written by ``gen``
``labels.jsonl``                        oracle solutions, one per example
``bounds.jsonl``                        alpha bounds, one per example
checkpoint JSON (+ ``.log.json``)       written by ``train``
report JSON                             written by ``eval``

Wall-clock timings go to ``*.timing.json`` sidecars so that checkpoints and
reports depend only on seeds and inputs.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np

from . import bounds as bnd
from . import losses as L
from . import neuralnet as nn
from . import oracle
from .bounds import _bits
from .datagen import Dataset

LOSS_NAMES = ("mse", "mae", "sl-pen", "ssl-pen", "pdl", "ss-cmpe", "ss-cmpe-pen")
SUPERVISED = ("mse", "mae", "sl-pen")
BETA_GRID = (0.1, 1.0, 2.0, 5.0, 10.0, 20.0)
RHO_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
VIOLATION_FLAG = 0.15
ENUM_LABEL_LIMIT = 20
CSV_COLUMNS = ("method", "gap_mean", "gap_std", "viol_mean", "viol_std", "train_s", "infer_s")


class MissingArtifact(RuntimeError):
    pass


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _read_jsonl(path, stage):
    if not os.path.exists(path):
        raise MissingArtifact(f"{path} not found; run the `{stage}` subcommand first")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _timing_path(path):
    return os.path.splitext(path)[0] + ".timing.json"


def _chunks(n, size):
    for lo in range(0, n, size):
        yield np.arange(lo, min(n, lo + size))


def _map(fn, items, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# oracle labels


def _label_record(i, status, y, p_star, f_shift):
    rec = {"example_id": int(i), "status": status, "y_star": None, "p_star": None, "h_value": None}
    if y is not None:
        rec["y_star"] = [int(b) for b in y]
        rec["p_star"] = float(p_star)
        rec["h_value"] = float(f_shift - p_star)
    return rec


def _bb_label(args):
    ds, i, budget = args
    inst = ds.instance(i)
    res = oracle.branch_and_bound_cmpe(inst, budget)
    return _label_record(i, res.status, res.y_star, res.p_star, inst.f_shift)


def compute_labels(ds: Dataset, rows=None, workers=1, node_budget=10**6):
    """Exact solutions: batched enumeration for |Y| <= 20, branch and bound above."""
    rows = ds.split("all") if rows is None else np.asarray(rows)
    n = len(ds.query_vars)
    if n > ENUM_LABEL_LIMIT:
        return _map(_bb_label, [(ds, int(i), node_budget) for i in rows], workers)
    out = []
    for part in _chunks(len(rows), max(1, (1 << 22) >> n)):
        sel = rows[part]
        b = ds.batch(sel)
        fv, gv = b.F.all_values(), b.G.all_values()
        masked = np.where(gv <= 0, fv, np.inf)
        idx = masked.argmin(axis=1)
        for j, i in enumerate(sel):
            k = int(idx[j])
            if np.isfinite(masked[j, k]):
                out.append(_label_record(i, oracle.OPTIMAL, _bits(k, n), fv[j, k], b.f_shift[j]))
            else:
                out.append(_label_record(i, oracle.INFEASIBLE, None, None, b.f_shift[j]))
    return out


# ---------------------------------------------------------------------------
# alpha bounds


def _bound_record(i, p_upper, q_lower, alpha, mu):
    return {"example_id": int(i), "p_upper": float(p_upper), "q_lower": float(q_lower), "alpha": float(alpha),
            "mu_star": float(mu)}


def _single_bound(args):
    ds, i, steps, ibound = args
    ab = bnd.alpha_bound(ds.instance(i), steps=steps, ibound=ibound)
    return _bound_record(i, ab.p_upper, ab.q_lower, ab.alpha, ab.mu_star)


def compute_bounds(ds: Dataset, rows=None, steps=200, ibound=4, workers=1):
    rows = ds.split("all") if rows is None else np.asarray(rows)
    n = len(ds.query_vars)
    if n > bnd.ENUM_LIMIT:
        return _map(_single_bound, [(ds, int(i), steps, ibound) for i in rows], workers)
    out = []
    for part in _chunks(len(rows), max(1, (1 << 21) >> n)):
        sel = rows[part]
        b = ds.batch(sel)
        r = bnd.alpha_bounds_batch(b.F, b.G, b.u_f, b.l_f, steps=steps)
        for j, i in enumerate(sel):
            out.append(_bound_record(i, r["p_upper"][j], r["q_lower"][j], r["alpha"][j], r["mu_star"][j]))
    return out


def labels_array(ds: Dataset, labels):
    """``(Y*, optimal mask, h*)`` indexed by example id."""
    n = len(ds)
    Y = np.zeros((n, len(ds.query_vars)))
    ok = np.zeros(n, dtype=bool)
    hstar = np.full(n, np.nan)
    for rec in labels:
        i = rec["example_id"]
        if rec["status"] == oracle.OPTIMAL:
            Y[i] = rec["y_star"]
            ok[i] = True
            hstar[i] = rec["h_value"]
    return Y, ok, hstar


def bounds_arrays(ds: Dataset, records):
    n = len(ds)
    out = {k: np.full(n, np.nan) for k in ("p_upper", "q_lower", "alpha", "mu_star")}
    for rec in records:
        for k in out:
            out[k][rec["example_id"]] = rec[k]
    return out


# ---------------------------------------------------------------------------
# training


def _round(Y):
    return (np.asarray(Y) >= 0.5).astype(float)


def method_name(cfg: nn.TrainConfig):
    name = cfg.loss
    if cfg.loss in ("ss-cmpe", "ss-cmpe-pen") and cfg.beta is not None:
        name += f"[beta={cfg.beta:g}]"
    if cfg.loss in ("sl-pen", "ssl-pen", "ss-cmpe-pen", "pdl"):
        name += f"[rho={cfg.rho:g}]"
    return name


def _loss(cfg, ctx, Y, label):
    name = cfg.loss
    if name == "mse":
        return L.loss_mse(Y, label)
    if name == "mae":
        return L.loss_mae(Y, label)
    if name == "sl-pen":
        return L.loss_supervised_penalty(ctx, Y, label)
    if name == "ssl-pen":
        return L.loss_ssl_penalty(ctx, Y)
    if name == "pdl":
        return L.loss_pdl_primal(ctx, Y)
    if name == "ss-cmpe":
        return L.loss_sscmpe(ctx, Y) if cfg.beta is None else L.loss_sscmpe_smooth(ctx, Y)
    if name == "ss-cmpe-pen":
        return L.loss_sscmpe_pen(ctx, Y) if cfg.beta is None else L.loss_sscmpe_smooth(ctx, Y, rho=cfg.rho)
    raise ValueError(f"unknown loss {name!r}; choose from {', '.join(LOSS_NAMES)}")


def _minibatches(rng, rows, size):
    perm = rows[rng.permutation(len(rows))]
    for lo in range(0, len(perm), size):
        yield perm[lo:lo + size]


def train_loop(cfg: nn.TrainConfig, ds: Dataset, bounds=None, labels=None, rows=None):
    """Train one network; returns ``(model, adam_state, log, state)``.

    ``state`` carries the per-example tables (lambda, mu, refreshed p_upper
    and alpha) and, for ``pdl``, the dual network.
    """
    if cfg.loss not in LOSS_NAMES:
        raise ValueError(f"unknown loss {cfg.loss!r}; choose from {', '.join(LOSS_NAMES)}")
    rows = ds.split("train") if rows is None else np.asarray(rows)
    rng = np.random.default_rng(cfg.seed)
    n_in, n_out = len(ds.evidence_vars), len(ds.query_vars)
    model = nn.init_mlp((n_in, *cfg.hidden, n_out), rng)
    adam = nn.init_adam(model, cfg.lr, patience=cfg.patience)
    decay = True if cfg.lr_decay is None else cfg.lr_decay
    N = len(ds)

    Ystar = ok = None
    if cfg.loss in SUPERVISED:
        if labels is None:
            raise MissingArtifact(f"loss {cfg.loss} needs oracle labels; run the `oracle` subcommand first")
        Ystar, ok, _ = labels_array(ds, labels)
        rows = rows[ok[rows]]
    alpha = p_upper = q_lower = None
    batch = ds.batch()
    if cfg.loss in ("ss-cmpe", "ss-cmpe-pen"):
        if bounds is None:
            raise MissingArtifact(f"loss {cfg.loss} needs alpha bounds; run the `bounds` subcommand first")
        b = bounds_arrays(ds, bounds)
        alpha, p_upper, q_lower = b["alpha"].copy(), b["p_upper"].copy(), b["q_lower"].copy()
        if np.isnan(alpha[rows]).any():
            raise MissingArtifact("alpha bounds do not cover every training example; rerun `bounds`")
    lam = np.full(N, float(cfg.lam_init))
    mu = np.full(N, float(cfg.mu_init))
    if cfg.loss == "pdl":
        lam[:] = max(cfg.lam_init, cfg.rho)
        dual = nn.init_mlp((n_in, 128, 1), rng, output="identity")
        dual_adam = nn.init_adam(dual, cfg.lr, patience=cfg.patience)
    g_seen = np.zeros(N)

    log = []
    X = ds.X
    for epoch in range(cfg.epochs):
        if cfg.loss == "pdl":
            mu[rows] = np.maximum(0.0, nn.forward(dual, X[rows])[:, 0])
        total, count = 0.0, 0
        for r in _minibatches(rng, rows, cfg.batch_size):
            Y, cache = nn.forward(model, X[r], return_cache=True)
            F, G = batch.F.take(r), batch.G.take(r)
            ctx = L.LossContext(F, G, alpha=1.0 if alpha is None else alpha[r],
                                beta=0.0 if cfg.beta is None else cfg.beta, rho=cfg.rho, lam=lam[r], mu=mu[r])
            val, grad = _loss(cfg, ctx, Y, None if Ystar is None else Ystar[r])
            nn.adam_step(adam, model, nn.backward(model, X[r], grad / len(r), cache))
            total += float(np.sum(val))
            count += len(r)
            if cfg.loss in ("sl-pen", "ssl-pen"):
                g_seen[r] = G.evaluate(Y)
            if p_upper is not None:
                Yr = _round(Y)
                fr, gr = F.evaluate(Yr), G.evaluate(Yr)
                better = (gr <= 0) & (fr < p_upper[r])
                if better.any():
                    idx = r[better]
                    p_upper[idx] = fr[better]
                    alpha[idx] = [bnd.compute_alpha(p_upper[i], q_lower[i], batch.u_f[i], batch.l_f[i])
                                  for i in idx]
        if cfg.loss in ("sl-pen", "ssl-pen"):
            lam[rows] = np.minimum(lam[rows] + cfg.rho * np.maximum(0.0, g_seen[rows]), cfg.lam_max)
        if cfg.loss == "pdl":
            _pdl_dual_phase(cfg, ds, batch, model, dual, dual_adam, rows, lam, mu, rng)
            if (epoch + 1) % cfg.pdl_every == 0:
                lam[rows] = np.minimum(lam[rows] * cfg.pdl_growth, cfg.lam_max)
        mean = total / max(count, 1)
        log.append({"epoch": epoch + 1, "loss": mean, "lr": adam.lr})
        if decay:
            nn.lr_plateau(adam, [e["loss"] for e in log])
            if cfg.loss == "pdl":
                dual_adam.lr = adam.lr

    state = {"lam": lam, "mu": mu, "alpha": alpha, "p_upper": p_upper, "rng": rng}
    if cfg.loss == "pdl":
        state["dual"] = dual
    return model, adam, log, state


def _pdl_dual_phase(cfg, ds, batch, model, dual, dual_adam, rows, lam, mu, rng):
    """Fit the multiplier network to ``max(0, mu + lam * g(yhat))`` with the primal frozen."""
    Y = nn.forward(model, ds.X[rows])
    G = batch.G.take(rows)
    target = np.zeros(len(ds))
    target[rows] = np.maximum(0.0, mu[rows] + lam[rows] * G.evaluate(Y))
    for r in _minibatches(rng, rows, cfg.batch_size):
        out, cache = nn.forward(dual, ds.X[r], return_cache=True)
        _, grad = L.loss_pdl_dual(out[:, 0], target[r])
        nn.adam_step(dual_adam, dual, nn.backward(dual, ds.X[r], grad[:, None] / len(r), cache))


def predict(model, ds: Dataset, rows):
    return _round(nn.forward(model, ds.X[rows]))


# ---------------------------------------------------------------------------
# evaluation


def evaluate_predictions(ds: Dataset, rows, Yhat, labels, method="model"):
    """Gap and violation report for 0/1 predictions on ``rows``.

    Examples whose oracle status is not optimal are excluded and counted.
    ``gap = (h* - h(yhat)) / |h*|`` in the original maximisation units.
    """
    if labels is None:
        raise MissingArtifact("evaluation needs oracle labels; run the `oracle` subcommand first")
    Ystar, ok, hstar = labels_array(ds, labels)
    have = {rec["example_id"] for rec in labels}
    missing = [int(i) for i in rows if int(i) not in have]
    if missing:
        raise MissingArtifact(f"no oracle label for {len(missing)} evaluated examples (first id {missing[0]})")
    rows = np.asarray(rows)
    keep = ok[rows]
    b = ds.batch(rows)
    Yhat = _round(Yhat)
    hv = b.h_values(Yhat)
    gv = b.G.evaluate(Yhat)
    records = []
    gaps, viol = [], []
    for j, i in enumerate(rows):
        if not keep[j]:
            continue
        hs = hstar[i]
        gap = (hs - hv[j]) / max(abs(hs), 1e-12)
        v = bool(gv[j] > 0)
        gaps.append(gap)
        viol.append(v)
        records.append({"example_id": int(i), "y": [int(x) for x in Yhat[j]], "h_value": float(hv[j]),
                        "p_star_h": float(hs), "gap": float(gap), "violated": v, "g_value": float(gv[j])})
    gaps = np.array(gaps)
    viol = np.array(viol, dtype=float)
    feas = gaps[viol == 0]
    agg = {
        "n_eval": int(len(records)),
        "n_excluded_infeasible": int((~keep).sum()),
        "gap_mean": float(gaps.mean()) if len(gaps) else math.nan,
        "gap_std": float(gaps.std()) if len(gaps) else math.nan,
        "gap_feasible_mean": float(feas.mean()) if len(feas) else math.nan,
        "gap_feasible_std": float(feas.std()) if len(feas) else math.nan,
        "viol_mean": float(viol.mean()) if len(viol) else math.nan,
        "viol_std": float(viol.std()) if len(viol) else math.nan,
    }
    agg["flagged"] = bool(agg["viol_mean"] > VIOLATION_FLAG)
    return {"method": method, "aggregates": agg, "records": records}


def evaluate_model(model, ds: Dataset, labels, rows=None, method="model"):
    rows = ds.split("test") if rows is None else np.asarray(rows)
    t0 = time.perf_counter()
    Yhat = predict(model, ds, rows)
    infer_s = time.perf_counter() - t0
    report = evaluate_predictions(ds, rows, Yhat, labels, method)
    return report, infer_s


def compare_reports(paths):
    """CSV text with one row per report (timings from sidecars when present)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for path in paths:
        if not os.path.exists(path):
            raise MissingArtifact(f"{path} not found; run the `eval` subcommand first")
        with open(path) as fh:
            rep = json.load(fh)
        timing = {}
        tp = _timing_path(path)
        if os.path.exists(tp):
            with open(tp) as fh:
                timing = json.load(fh)
        a = rep["aggregates"]
        w.writerow([rep["method"], repr(a["gap_mean"]), repr(a["gap_std"]), repr(a["viol_mean"]),
                    repr(a["viol_std"]), timing.get("train_s", ""), timing.get("infer_s", "")])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# beta selection


def validation_split(ds: Dataset, frac=0.1):
    train = ds.split("train")
    k = max(1, int(round(frac * len(train))))
    return train[:-k], train[-k:]


def discrete_sscmpe(ds: Dataset, rows, Yhat, alpha):
    """Mean piecewise consistent loss of rounded outputs (lower is better, needs no labels)."""
    b = ds.batch(rows)
    ctx = L.LossContext(b.F, b.G, alpha=alpha[rows])
    return float(np.mean(L.loss_sscmpe(ctx, _round(Yhat))[0]))


def select_beta(cfg: nn.TrainConfig, ds: Dataset, bounds, grid=BETA_GRID, epochs=None, frac=0.1):
    """Pick beta by the discrete loss on a held-out tail of the training split."""
    fit, val = validation_split(ds, frac)
    alpha = bounds_arrays(ds, bounds)["alpha"]
    scores = {}
    for beta in grid:
        c = nn.TrainConfig(**{**asdict(cfg), "beta": beta, "epochs": cfg.epochs if epochs is None else epochs})
        model, _, _, _ = train_loop(c, ds, bounds, rows=fit)
        scores[beta] = discrete_sscmpe(ds, val, nn.forward(model, ds.X[val]), alpha)
    best = min(grid, key=lambda b: (scores[b], b))
    return best, scores


# ---------------------------------------------------------------------------
# checkpoints


def save_training(path, cfg, model, adam, log, state, train_s=None):
    extra = {"config": asdict(cfg), "method": method_name(cfg), "log": log}
    if "dual" in state:
        extra["dual"] = nn.model_to_dict(state["dual"])
    nn.save_checkpoint(path, model, adam, state.get("rng"), extra)
    _write_json(os.path.splitext(path)[0] + ".log.json", log)
    if train_s is not None:
        _write_json(_timing_path(path), {"train_s": train_s})


def load_training(path):
    if not os.path.exists(path):
        raise MissingArtifact(f"{path} not found; run the `train` subcommand first")
    model, _, _, extra = nn.load_checkpoint(path)
    train_s = None
    tp = _timing_path(path)
    if os.path.exists(tp):
        with open(tp) as fh:
            train_s = json.load(fh).get("train_s")
    return model, extra, train_s

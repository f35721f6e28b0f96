"""``cmpekit`` command line: gen, oracle, bounds, train, eval, compare."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import harness as H
from . import neuralnet as nn
from .datagen import DatasetSpec, build_dataset, grid_network, read_dataset, write_dataset
from .polymodel import UaiParseError, read_uai


def _grid(text):
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWSxCOLS, got {text!r}") from None
    return r, c


def build_parser():
    p = argparse.ArgumentParser(prog="cmpekit", description="Constrained MPE: data, oracles, bounds, neural solvers")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="sample a CMPE dataset")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="objective network (UAI MARKOV file)")
    src.add_argument("--grid", type=_grid, help="synthesise a ROWSxCOLS pairwise grid instead of --model")
    g.add_argument("--model2", help="constraint network; default is --model plus Gaussian noise")
    g.add_argument("--prob-space", action="store_true", help="UAI tables hold probabilities, not log values")
    g.add_argument("--q-percentile", type=int, default=80)
    g.add_argument("--evidence-frac", type=float, default=0.6)
    g.add_argument("--noise-var", type=float, default=0.1)
    g.add_argument("--n", type=int, default=10000)
    g.add_argument("--n-train", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="dataset directory")

    o = sub.add_parser("oracle", help="exact labels for every example")
    o.add_argument("--data", required=True)
    o.add_argument("--workers", type=int, default=1)
    o.add_argument("--out")

    b = sub.add_parser("bounds", help="alpha bounds for every example")
    b.add_argument("--data", required=True)
    b.add_argument("--ibound", type=int, default=4)
    b.add_argument("--steps", type=int, default=200)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out")

    t = sub.add_parser("train", help="train a network under one loss")
    t.add_argument("--data", required=True)
    t.add_argument("--loss", required=True, choices=H.LOSS_NAMES)
    t.add_argument("--beta", type=float)
    t.add_argument("--rho", type=float, default=1.0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--batch", type=int, default=128)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path (JSON)")

    e = sub.add_parser("eval", help="gap / violation report on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True, help="report path (JSON)")

    c = sub.add_parser("compare", help="CSV table from several reports")
    c.add_argument("--reports", nargs="+", required=True)
    c.add_argument("--out", help="CSV path; stdout when omitted")
    return p


def _gen(a):
    if a.grid:
        m1 = grid_network(*a.grid, seed=a.seed)
    else:
        m1 = read_uai(a.model, log_space=not a.prob_space)
    m2 = read_uai(a.model2, log_space=not a.prob_space) if a.model2 else None
    spec = DatasetSpec(model=a.model, model2=a.model2, noise_var=a.noise_var, evidence_frac=a.evidence_frac,
                       percentile=a.q_percentile, n_samples=a.n, n_train=a.n_train, seed=a.seed)
    ds = build_dataset(spec, m1, m2)
    write_dataset(ds, a.out)
    print(f"wrote {len(ds)} examples to {a.out} (q={ds.q:.6g}, |X|={len(ds.evidence_vars)}, |Y|={len(ds.query_vars)})")


def _oracle(a):
    ds = read_dataset(a.data)
    t0 = time.perf_counter()
    labels = H.compute_labels(ds, workers=a.workers)
    out = a.out or os.path.join(a.data, "labels.jsonl")
    H._write_jsonl(out, labels)
    H._write_json(H._timing_path(out), {"oracle_s": time.perf_counter() - t0})
    n_inf = sum(r["status"] != "optimal" for r in labels)
    print(f"wrote {len(labels)} labels to {out} ({n_inf} not optimal)")


def _bounds(a):
    ds = read_dataset(a.data)
    t0 = time.perf_counter()
    recs = H.compute_bounds(ds, steps=a.steps, ibound=a.ibound, workers=a.workers)
    out = a.out or os.path.join(a.data, "bounds.jsonl")
    H._write_jsonl(out, recs)
    H._write_json(H._timing_path(out), {"bounds_s": time.perf_counter() - t0})
    print(f"wrote {len(recs)} bound records to {out}")


def _train(a):
    ds = read_dataset(a.data)
    cfg = nn.TrainConfig(epochs=a.epochs, batch_size=a.batch, seed=a.seed, loss=a.loss, lr=a.lr, beta=a.beta,
                         rho=a.rho)
    labels = bounds = None
    if a.loss in H.SUPERVISED:
        labels = H._read_jsonl(os.path.join(a.data, "labels.jsonl"), "oracle")
    if a.loss in ("ss-cmpe", "ss-cmpe-pen"):
        bounds = H._read_jsonl(os.path.join(a.data, "bounds.jsonl"), "bounds")
    t0 = time.perf_counter()
    model, adam, log, state = H.train_loop(cfg, ds, bounds, labels)
    H.save_training(a.out, cfg, model, adam, log, state, train_s=time.perf_counter() - t0)
    last = f"{log[-1]['loss']:.6g}" if log else "n/a"
    print(f"trained {H.method_name(cfg)} for {cfg.epochs} epochs, final loss {last}; checkpoint {a.out}")


def _eval(a):
    ds = read_dataset(a.data)
    labels = H._read_jsonl(os.path.join(a.data, "labels.jsonl"), "oracle")
    model, extra, train_s = H.load_training(a.checkpoint)
    report, infer_s = H.evaluate_model(model, ds, labels, method=extra.get("method", "model"))
    H._write_json(a.out, report)
    H._write_json(H._timing_path(a.out), {"train_s": train_s, "infer_s": infer_s})
    agg = report["aggregates"]
    print(f"{report['method']}: gap {agg['gap_mean']:.4g} (feasible-only {agg['gap_feasible_mean']:.4g}), "
          f"violations {agg['viol_mean']:.4g} over {agg['n_eval']} examples")


def _compare(a):
    text = H.compare_reports(a.reports)
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


COMMANDS = {"gen": _gen, "oracle": _oracle, "bounds": _bounds, "train": _train, "eval": _eval,
            "compare": _compare}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.cmd](args)
    except (H.MissingArtifact, FileNotFoundError) as exc:
        print(f"cmpekit {args.cmd}: {exc}", file=sys.stderr)
        return 1
    except (UaiParseError, ValueError, json.JSONDecodeError) as exc:
        print(f"cmpekit {args.cmd}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

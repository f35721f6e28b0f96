import json

import numpy as np
import pytest

from cmpekit import harness as H
from cmpekit import neuralnet as nn
from cmpekit.cli import main
from cmpekit.datagen import DatasetSpec, build_dataset, grid_network
from cmpekit.oracle import brute_force_cmpe
from cmpekit.polymodel import evaluate

SMALL = dict(hidden=(16, 16), batch_size=16)


@pytest.fixture(scope="module")
def grid_ds():
    net = grid_network(3, 3, seed=4)
    return build_dataset(DatasetSpec(n_samples=120, seed=4, burn_in=50, q_samples=50), net)


@pytest.fixture(scope="module")
def labels(grid_ds):
    return H.compute_labels(grid_ds)


@pytest.fixture(scope="module")
def bounds(grid_ds):
    return H.compute_bounds(grid_ds, steps=50)


def test_labels_match_brute_force(grid_ds, labels):
    for rec in labels[::7]:
        res = brute_force_cmpe(grid_ds.instance(rec["example_id"]))
        assert rec["status"] == res.status
        if res.status == "optimal":
            assert rec["y_star"] == [int(v) for v in res.y_star]
            assert rec["p_star"] == pytest.approx(res.p_star)


def test_bounds_cover_examples(grid_ds, labels, bounds):
    for lab, bd in zip(labels, bounds):
        assert lab["example_id"] == bd["example_id"]
        if lab["status"] == "optimal":
            assert bd["p_upper"] >= lab["p_star"] - 1e-9
        assert bd["alpha"] > 0


def test_oracle_outputs_score_perfectly(grid_ds, labels):
    rows = grid_ds.split("test")
    Y, ok, _ = H.labels_array(grid_ds, labels)
    rep = H.evaluate_predictions(grid_ds, rows, Y[rows], labels, "oracle")
    agg = rep["aggregates"]
    assert agg["n_eval"] == ok[rows].sum()
    assert agg["gap_mean"] == pytest.approx(0.0, abs=1e-12)
    assert agg["viol_mean"] == 0.0
    assert not agg["flagged"]


def test_violation_rate_recomputable(grid_ds, labels, rng):
    rows = grid_ds.split("all")
    Yhat = rng.uniform(size=(len(rows), len(grid_ds.query_vars)))
    rep = H.evaluate_predictions(grid_ds, rows, Yhat, labels)
    recs = rep["records"]
    assert rep["aggregates"]["viol_mean"] == pytest.approx(np.mean([r["violated"] for r in recs]))
    for r in recs[:10]:
        inst = grid_ds.instance(r["example_id"])
        assert r["violated"] == (evaluate(inst.g, r["y"]) > 0)
        assert r["h_value"] == pytest.approx(inst.h_value(r["y"]))


def test_half_rounds_up(grid_ds, labels):
    rows = grid_ds.split("test")
    rep = H.evaluate_predictions(grid_ds, rows, np.full((len(rows), len(grid_ds.query_vars)), 0.5), labels)
    assert all(all(b == 1 for b in r["y"]) for r in rep["records"])


def test_missing_labels(grid_ds, labels):
    with pytest.raises(H.MissingArtifact):
        H.evaluate_predictions(grid_ds, [0, 1], np.zeros((2, 3)), None)
    with pytest.raises(H.MissingArtifact):
        H.evaluate_predictions(grid_ds, [0, 1], np.zeros((2, 3)), labels[1:])


def test_toy_mpe_output_is_infeasible(pair, toy):
    ds = build_dataset(DatasetSpec(n_samples=10, seed=0, burn_in=10, q_samples=10), pair[0], pair[1])
    ds.X[:] = 1.0
    ds.evidence_vars = (0, 1)
    ds.q = 20.0
    labels = H.compute_labels(ds)
    assert labels[0]["y_star"] == [0, 1] and labels[0]["h_value"] == 11
    rep = H.evaluate_predictions(ds, [0], np.zeros((1, 2)), labels)
    r = rep["records"][0]
    assert r["violated"] and r["h_value"] == 16
    assert r["gap"] == pytest.approx((11 - 16) / 11)
    assert np.isnan(rep["aggregates"]["gap_feasible_mean"])


def test_zero_epochs_returns_initialisation(grid_ds, bounds):
    cfg = nn.TrainConfig(epochs=0, seed=3, **SMALL)
    model, _, log, _ = H.train_loop(cfg, grid_ds, bounds)
    init = nn.init_mlp((len(grid_ds.evidence_vars), 16, 16, len(grid_ds.query_vars)), np.random.default_rng(3))
    assert log == []
    assert all(np.array_equal(a, b) for a, b in zip(model.params, init.params))


@pytest.mark.parametrize("loss", H.LOSS_NAMES)
def test_every_loss_trains(grid_ds, labels, bounds, loss):
    cfg = nn.TrainConfig(epochs=3, loss=loss, beta=2.0 if loss == "ss-cmpe" else None, seed=1, **SMALL)
    model, adam, log, state = H.train_loop(cfg, grid_ds, bounds, labels)
    assert len(log) == 3 and all(np.isfinite(e["loss"]) for e in log)
    assert adam.t > 0
    if loss == "pdl":
        assert "dual" in state and state["dual"].layer_dims[1] == 128


def test_training_is_deterministic(grid_ds, bounds):
    cfg = nn.TrainConfig(epochs=2, seed=9, **SMALL)
    a = H.train_loop(cfg, grid_ds, bounds)[0]
    b = H.train_loop(cfg, grid_ds, bounds)[0]
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


def test_p_upper_never_increases(grid_ds, bounds):
    start = H.bounds_arrays(grid_ds, bounds)
    cfg = nn.TrainConfig(epochs=4, seed=2, **SMALL)
    _, _, _, state = H.train_loop(cfg, grid_ds, bounds)
    rows = grid_ds.split("train")
    assert np.all(state["p_upper"][rows] <= start["p_upper"][rows])
    ratio = state["p_upper"][rows] / start["q_lower"][rows]
    pos = start["q_lower"][rows] > 0
    assert np.all(state["alpha"][rows][pos] >= np.minimum(ratio[pos], (grid_ds.batch(rows).u_f)[pos]) - 1e-12)


def test_missing_prerequisites(grid_ds):
    with pytest.raises(H.MissingArtifact, match="bounds"):
        H.train_loop(nn.TrainConfig(epochs=1, **SMALL), grid_ds)
    with pytest.raises(H.MissingArtifact, match="oracle"):
        H.train_loop(nn.TrainConfig(epochs=1, loss="mse", **SMALL), grid_ds)
    with pytest.raises(ValueError):
        H.train_loop(nn.TrainConfig(epochs=1, loss="nope", **SMALL), grid_ds)


def test_select_beta_picks_from_grid(grid_ds, bounds):
    best, scores = H.select_beta(nn.TrainConfig(seed=0, **SMALL), grid_ds, bounds, grid=(1.0, 10.0), epochs=2)
    assert best in (1.0, 10.0) and set(scores) == {1.0, 10.0}


# ---------------------------------------------------------------------------
# command line


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    from conftest import DATA
    d = tmp_path_factory.mktemp("toy")
    assert run("gen", "--model", DATA / "example_m1.uai", "--model2", DATA / "example_m2.uai", "--q-percentile", 80,
               "--n", 100, "--seed", 7, "--out", d) == 0
    return d


def test_cli_pipeline(toy_dir, capsys):
    d = toy_dir
    assert run("oracle", "--data", d) == 0
    assert run("bounds", "--data", d, "--steps", 30) == 0
    assert run("train", "--data", d, "--loss", "ss-cmpe", "--beta", 10, "--epochs", 5, "--out", d / "m.json") == 0
    assert (d / "m.log.json").exists()
    assert run("eval", "--data", d, "--checkpoint", d / "m.json", "--out", d / "r.json") == 0
    rep = json.loads((d / "r.json").read_text())
    assert rep["method"] == "ss-cmpe[beta=10]"
    assert run("compare", "--reports", d / "r.json", d / "r.json", "--out", d / "t.csv") == 0
    lines = (d / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(H.CSV_COLUMNS)
    assert len(lines) == 3 and lines[1].startswith("ss-cmpe[beta=10],")


def test_cli_missing_artifacts(tmp_path, toy_dir, capsys):
    assert run("oracle", "--data", tmp_path) == 1
    assert "gen" in capsys.readouterr().err
    fresh = tmp_path / "fresh"
    from conftest import DATA
    run("gen", "--model", DATA / "example_m1.uai", "--n", 20, "--seed", 1, "--out", fresh)
    assert run("train", "--data", fresh, "--loss", "ss-cmpe", "--epochs", 1, "--out", tmp_path / "x.json") == 1
    assert "bounds" in capsys.readouterr().err
    assert run("eval", "--data", fresh, "--checkpoint", tmp_path / "none.json", "--out", tmp_path / "r.json") == 1


def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["train", "--bogus"])
    assert ei.value.code == 2
    with pytest.raises(SystemExit) as ei:
        main(["gen", "--grid", "4by4", "--out", "x"])
    assert ei.value.code == 2


def test_cli_bad_model_file(tmp_path, capsys):
    bad = tmp_path / "bad.uai"
    bad.write_text("MARKOV\n2\n2 2\n1\n2 0 1\n\n3\n0.1 0.2 0.3\n")
    assert run("gen", "--model", bad, "--out", tmp_path / "o") == 1
    assert "line 7" in capsys.readouterr().err


def test_cli_grid_generation(tmp_path):
    assert run("gen", "--grid", "3x3", "--n", 30, "--seed", 2, "--out", tmp_path) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert len(man["evidence_vars"]) == 5 and man["n_train"] == 27

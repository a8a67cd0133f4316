"""Acceptance criteria 1 to 11, one test each.

Every test ends in ``criterion(...)``, which prints a PASS/FAIL line; the lines
are repeated in the terminal summary under "acceptance criteria".
"""
import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from cascnn import experiments as ex
from cascnn import tensor as T
from cascnn.cli import main as cli_main
from cascnn.config import load_config
from cascnn.data import Sample
from cascnn.evaluation import metrics
from cascnn.gradcheck import check_gradients
from cascnn.model import CasCnn, ModelConfig
from cascnn.odad import Level, OdadTable, build_masks, classify_level
from cascnn.training import masked_mse, sample_loss
from gradient_cases import OP_CASES
from oracles import conv2d_loop

REPO = Path(__file__).resolve().parents[1]
SMALL = {"n_stations": 6, "n_days": 8, "history_days": 3, "flow_steps": 3, "filters_layer1": 4, "max_epochs": 3,
         "patience": 2}


def write_config(path, values):
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


def random_sample(n, x, y, rng):
    return Sample(rng.uniform(size=(x, n, n)), rng.uniform(size=(y, n)), rng.uniform(size=(y, n)),
                  rng.uniform(size=(n, n)), day=x, interval=y)


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """The default synthetic dataset (20 stations, 15 weekdays, seed 0) and a full training run on it."""
    root = tmp_path_factory.mktemp("desk")
    cfg = load_config()
    started = time.perf_counter()
    ex.synthesize(cfg, root / "data")
    ex.ingest_dataset(cfg, root / "data", root / "ingest")
    _, state, _ = ex.train_variant(cfg, root / "ingest", "full", root / "run")
    summary = ex.evaluate_run(root / "run")
    return {"root": root, "state": state, "summary": summary, "seconds": time.perf_counter() - started}


def test_criterion_01_gradient_fidelity(criterion):
    started = time.perf_counter()
    worst = {}
    for builder in OP_CASES:
        for seed in range(12):
            loss_fn, tensors = builder(np.random.default_rng(seed))
            err = max(check_gradients(loss_fn, tensors, step=1e-5).values())
            worst[builder.__name__] = max(worst.get(builder.__name__, 0.0), err)
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        model = CasCnn(ModelConfig(n=4, x=2, y=2, filters_layer1=4), rng)
        for p in model.parameters():
            p.values[...] = rng.normal(scale=0.5, size=p.shape)
        sample = random_sample(4, 2, 2, rng)
        mask = rng.uniform(size=(4, 4)) < 0.7
        mask[0, 0] = True
        err = max(check_gradients(lambda: sample_loss(model, sample, mask), model.parameters()).values())
        worst["cascnn n=4"] = max(worst.get("cascnn n=4", 0.0), err)
    seconds = time.perf_counter() - started
    top = max(worst, key=worst.get)
    criterion(1, "gradient fidelity", max(worst.values()) < 1e-4 and seconds < 60,
              f"{len(OP_CASES) * 12 + 3} trials, worst {worst[top]:.2e} in {top}, {seconds:.1f} s")


def test_criterion_02_masked_gradient_exactness(criterion):
    bad = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        mask = rng.uniform(size=(n, n)) < 0.5
        mask.flat[rng.integers(n * n)] = True
        target = rng.normal(size=(n, n))
        pred = T.Tensor(rng.normal(size=(n, n)), requires_grad=True)
        grads = []
        for fill in (0.0, float(rng.normal(scale=1e4))):
            pred.grad = None
            masked_mse(pred, np.where(mask, target, fill), mask).backward()
            grads.append(pred.grad.copy())
        if np.any(grads[0][~mask] != 0.0) or grads[0].tobytes() != grads[1].tobytes():
            bad.append(("triple", seed))
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        model = CasCnn(ModelConfig(n=4, x=2, y=2, filters_layer1=4), rng)
        sample = random_sample(4, 2, 2, rng)
        mask = rng.uniform(size=(4, 4)) < 0.5
        mask[rng.integers(4), rng.integers(4)] = True
        snapshots = []
        for fill in (0.0, float(rng.normal(scale=1e4))):
            other = Sample(sample.history, sample.inflow_win, sample.outflow_win,
                           np.where(mask, sample.target, fill), sample.day, sample.interval)
            model.zero_grad()
            sample_loss(model, other, mask).backward()
            snapshots.append(b"".join(p.grad.tobytes() for p in model.parameters()))
        if snapshots[0] != snapshots[1]:
            bad.append(("model", seed))
    criterion(2, "masked-gradient exactness", not bad, f"100 triples + 100 model runs, {len(bad)} violations")


def test_criterion_03_conservation(criterion, desk_run, tmp_path):
    checked, problems = [], []
    datasets = [("default seed 0", desk_run["root"] / "ingest")]
    for seed in range(5):
        cfg = load_config(None, [f"seed={seed}", "n_stations=8", "n_days=4"])
        ex.synthesize(cfg, tmp_path / f"d{seed}")
        ex.ingest_dataset(cfg, tmp_path / f"d{seed}", tmp_path / f"i{seed}")
        datasets.append((f"n=8 seed {seed}", tmp_path / f"i{seed}"))
    for name, path in datasets:
        arrays = np.load(path / "tensors.npz")
        od, inflow, outflow = arrays["od"], arrays["inflow"], arrays["outflow"]
        if not np.array_equal(inflow, od.sum(axis=3)):
            problems.append(f"{name}: row sums")
        if int(outflow.sum()) != int(inflow.sum()):
            problems.append(f"{name}: totals {int(outflow.sum())} vs {int(inflow.sum())}")
        checked.append(int(inflow.sum()))
    criterion(3, "conservation", not problems,
              f"{len(datasets)} datasets, {sum(checked)} trips" + (f"; {problems}" if problems else ""))


def test_criterion_04_convolution_oracle(criterion):
    worst = 0.0
    rng = np.random.default_rng(4)
    for _ in range(200):
        c_in, c_out = (int(v) for v in rng.integers(1, 4, size=2))
        h, w = (int(v) for v in rng.integers(1, 8, size=2))
        k = int(rng.choice([1, 3, 5]))
        x, wt, b = rng.normal(size=(c_in, h, w)), rng.normal(size=(c_out, c_in, k, k)), rng.normal(size=c_out)
        got = T.conv2d_same(x, wt, b).values
        want = np.array(conv2d_loop(x.tolist(), wt.tolist(), b.tolist()))
        worst = max(worst, float(np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-300)))
    criterion(4, "convolution oracle", worst < 1e-12, f"200 shapes, worst relative error {worst:.1e}")


def test_criterion_05_metric_correctness(criterion):
    r = metrics(np.array([[[1.0, 5.0]]]), np.array([[[2.0, 4.0]]]), np.ones((1, 1, 2), dtype=bool))
    example = abs(r.rmse - 1) <= 1e-12 and abs(r.mae - 1) <= 1e-12 and abs(r.wmape - 1 / 3) <= 1e-12
    rng = np.random.default_rng(5)
    identity_gap, power_mean_ok, reports = 0.0, True, 0
    for _ in range(1000):
        s = int(rng.integers(1, 6))
        preds = rng.uniform(0, 30, size=(s, 4, 4))
        targets = rng.poisson(rng.uniform(0, 8), size=(s, 4, 4)).astype(float)
        masks = rng.uniform(size=(s, 4, 4)) < rng.uniform(0.1, 1)
        if not masks.any():
            continue
        rep = metrics(preds, targets, masks)
        reports += 1
        power_mean_ok &= rep.rmse >= rep.mae
        pos = masks & (targets > 0)
        if pos.any():
            mae_pos = np.mean(np.abs(preds - targets)[pos])
            identity_gap = max(identity_gap, abs(rep.wmape - mae_pos * pos.sum() / targets[pos].sum()))
    ok = example and identity_gap <= 1e-12 and power_mean_ok
    criterion(5, "metric correctness", ok,
              f"example RMSE {r.rmse} MAE {r.mae} WMAPE {r.wmape:.4f}; {reports} reports, identity gap {identity_gap:.1e}")


def test_criterion_06_odad_mask_semantics(criterion):
    boundary = [
        classify_level(0.0) is Level.LOWEST,
        classify_level(2.0) is Level.LOW,
        classify_level(6.01) is Level.HIGHEST,
        classify_level(1e6) is Level.HIGHEST,
    ]
    cells = build_masks(OdadTable(np.array([[[0.0, 2.0, np.nextafter(2.0, 3.0), 2.5, 7.0]]]), 1)).mask.ravel()
    boundary.append(cells.tolist() == [False, False, True, True, True])
    rng = np.random.default_rng(6)
    violations = 0
    for _ in range(500):
        a = rng.exponential(3.0, size=(int(rng.integers(1, 5)), 5, 5))
        a[rng.uniform(size=a.shape) < 0.3] = 0.0
        low, high = sorted(rng.uniform(-1, 8, size=2))
        table = OdadTable(a, 1)
        violations += int(np.sum(build_masks(table, high).mask & ~build_masks(table, low).mask))
    criterion(6, "ODAD and mask semantics", all(boundary) and violations == 0,
              f"{sum(boundary)}/5 boundary cases, 500 random tables, {violations} monotonicity violations")


def test_criterion_07_desk_scale_learning(criterion, desk_run):
    state, summary = desk_run["state"], desk_run["summary"]
    model_mse, ha_mse = summary["test_masked_mse_normalized"], summary["ha_test_masked_mse_normalized"]
    early = state.stop_reason.startswith("early stopping")
    ok = early and model_mse < ha_mse and desk_run["seconds"] < 600
    criterion(7, "desk-scale learning beats historical average", ok,
              f"test masked MSE {model_mse:.6f} vs HA {ha_mse:.6f}; {state.stop_reason}; "
              f"best epoch {state.best_epoch}; {desk_run['seconds']:.0f} s")


def test_criterion_08_ablation_harness(criterion, tmp_path):
    config = write_config(tmp_path / "ablations.cfg", SMALL)
    done = subprocess.run([sys.executable, str(REPO / "scripts" / "run_ablations.py"), "--config", str(config),
                           "--out", str(tmp_path / "out")], capture_output=True, text=True)
    table = tmp_path / "out" / "comparison.csv"
    rows = list(csv.reader(table.open())) if table.exists() else []
    labels = [r[0] for r in rows[1:]]
    want = [ex.VARIANT_LABELS[v] for v in ("full", "no_split", "no_mask", "no_ca", "no_inflow", "no_outflow", "cnn2d")]
    numeric = all(float(v) >= 0 for r in rows[1:] for v in r[1:]) if rows else False
    ok = done.returncode == 0 and rows and rows[0] == ["model", "RMSE", "MAE", "WMAPE"] and labels == want and numeric
    criterion(8, "ablation harness", bool(ok), f"{len(labels)} rows: {', '.join(labels)}" if labels else done.stderr[-300:])


def test_criterion_09_determinism(criterion, tmp_path):
    config = write_config(tmp_path / "run.cfg", SMALL)
    assert cli_main(["synth", "--config", str(config), "--out", str(tmp_path / "data")]) == 0
    assert cli_main(["ingest", "--config", str(config), "--data", str(tmp_path / "data"),
                     "--out", str(tmp_path / "ingest")]) == 0
    for name in ("a", "b"):
        subprocess.run([sys.executable, "-m", "cascnn.cli", "train", "--config", str(config),
                        "--ingest", str(tmp_path / "ingest"), "--out", str(tmp_path / name)], check=True)
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("loss_history.csv", "checkpoint.bin", "checkpoint.json")}
    criterion(9, "determinism of two train invocations", all(same.values()),
              ", ".join(f"{f} {'identical' if v else 'DIFFERS'}" for f, v in same.items()))


def test_criterion_10_gate_locality(criterion):
    rng = np.random.default_rng(10)
    model = CasCnn(ModelConfig(n=20), rng)
    model.params["gate.w"].values[...] = rng.normal(size=20)
    sample = random_sample(20, 5, 5, rng)
    base = model.predict(sample)
    wrong = []
    for i in range(20):
        bumped = sample.inflow_win.copy()
        bumped[:, i] += rng.uniform(0.1, 1.0)
        pred = model.predict(Sample(sample.history, bumped, sample.outflow_win, sample.target, 5, 5))
        changed = [r for r in range(20) if pred[r].tobytes() != base[r].tobytes()]
        if changed != [i]:
            wrong.append((i, changed))
    criterion(10, "gate locality", not wrong, f"20 stations perturbed, {len(wrong)} leaked")


def test_criterion_11_interpretability_artifact(criterion, desk_run, capsys):
    run = desk_run["root"] / "run"
    code = cli_main(["eval", str(run), "--interpret"])
    lines = (run / "interpretability.csv").read_text().splitlines() if (run / "interpretability.csv").exists() else []
    body = [row.split(",") for row in lines[1:21]]
    pairs_ok = len(body) == 20 and all(len(r) == 5 and float(r[1]) >= 0 for r in body)
    r_line = lines[-1].split(",") if lines else []
    interp = json.loads((run / "metrics.json").read_text()).get("interpretability", {})
    ok = (code == 0 and lines and lines[0] == "station,inflow_volume,w,inflow_norm,w_norm" and pairs_ok
          and r_line[:1] == ["pearson_r"] and interp.get("sign") in ("negative", "positive", "zero", "n/a"))
    criterion(11, "interpretability artifact", bool(ok),
              f"20 (inflow volume, w) pairs, pearson r = {interp.get('pearson_r')}, sign {interp.get('sign')}")

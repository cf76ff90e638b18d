import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import FIXTURES
from ipnets.cli import main
from ipnets.core_data import ValidationError
from ipnets.data_io import SynthConfig, generate_synthetic, write_dataset
from ipnets.harness import (ExperimentConfig, ablation_table, load_trained, run_ablation, run_cv,
                            run_eval, run_train)
from ipnets.metrics import roc_auc
from ipnets.train import Checkpoint


def small_cases(n=50, seed=0, task="classification"):
    return generate_synthetic(SynthConfig(n_cases=n, D=3, seed=seed, task=task))


def quick(tmp_path, **kw):
    base = dict(T=9, hidden_size=8, batch_size=8, max_epochs=3, patience=5, out_dir=str(tmp_path))
    base.update(kw)
    return ExperimentConfig(**base)


def read_log(path):
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


@pytest.mark.parametrize("model", ["proposed", "gru-d"])
def test_train_smoke(tmp_path, model):
    cfg = quick(tmp_path, model=model, lr=1e-2)
    run_train(cfg, small_cases())
    rows = read_log(tmp_path / "train_log.csv")
    assert len(rows) == 3 * math.ceil(40 / 8)
    assert all(math.isfinite(r[k]) for r in rows for k in r)
    assert rows[-1]["total"] < rows[0]["total"]
    assert [r["step"] for r in rows] == list(range(1, len(rows) + 1))
    for r in rows:
        parts = r["supervised"] + r["reconstruction"] + r["reg_I"] + r["reg_P"]
        assert r["total"] == pytest.approx(parts, rel=1e-12)
    if model == "gru-d":
        assert all(r["reconstruction"] == 0 and r["reg_I"] == 0 for r in rows)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"] == json.loads(json.dumps(cfg.__dict__))
    assert manifest["command"] == "train"


def test_patience_zero_stops_at_first_non_improvement(tmp_path):
    cfg = quick(tmp_path, max_epochs=30, patience=0, lr=5e-2)
    trained = run_train(cfg, small_cases())
    st = trained.checkpoint.state
    hist = st.val_history
    first_bad = next(i for i in range(1, len(hist)) if hist[i] >= min(hist[:i]))
    assert st.stopped_early and len(hist) == first_bad + 1


def test_resume_is_bit_identical(tmp_path):
    cases = small_cases()
    full = run_train(quick(tmp_path / "full", max_epochs=4), cases)
    run_train(quick(tmp_path / "part", max_epochs=2), cases)
    resumed = run_train(quick(tmp_path / "part", max_epochs=4), cases,
                        resume_path=tmp_path / "part" / "checkpoint.npz")
    a = Checkpoint.load(tmp_path / "full" / "checkpoint.npz")
    b = Checkpoint.load(tmp_path / "part" / "checkpoint.npz")
    assert a.arrays.keys() == b.arrays.keys()
    for k in a.arrays:
        assert np.array_equal(a.arrays[k], b.arrays[k]), k
    assert a.state == b.state
    assert (tmp_path / "full" / "train_log.csv").read_text() == \
        (tmp_path / "part" / "train_log.csv").read_text()
    assert full.checkpoint.state == resumed.checkpoint.state


def test_eval_reloads_checkpoint(tmp_path):
    cases = small_cases()
    trained = run_train(quick(tmp_path, model="gru-s"), cases)
    report = run_eval(tmp_path / "checkpoint.npz", cases)
    assert report.metrics["auc"] == roc_auc(trained.predict(cases), [c.target.cls for c in cases])
    assert np.array_equal(load_trained(tmp_path / "checkpoint.npz").predict(cases),
                          trained.predict(cases))


def test_mean_model_checkpoint_roundtrip(tmp_path):
    cases = small_cases(task="regression")
    trained = run_train(quick(tmp_path, model="mean-linreg", task="regression"), cases)
    again = load_trained(tmp_path / "checkpoint.npz")
    np.testing.assert_allclose(again.predict(cases), trained.predict(cases), rtol=1e-12)


def test_cv_report_shape_and_determinism(tmp_path):
    cases = small_cases(40)
    cfg = quick(tmp_path / "a", max_epochs=1)
    r1 = run_cv(cfg, cases, k=2)
    r2 = run_cv(replace(cfg, out_dir=str(tmp_path / "b")), cases, k=2)
    assert [f.fold for f in r1.folds] == [0, 1]
    assert len(r1.table().splitlines()) == 4
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert r1.to_json() == r2.to_json()


def test_cv_on_fixture_files(tmp_path):
    cases = small_cases(12)
    write_dataset(cases, tmp_path / "o.csv", tmp_path / "l.csv", names_path=tmp_path / "n.txt")
    cfg = quick(tmp_path, model="mean-logreg", obs_path=str(tmp_path / "o.csv"),
                labels_path=str(tmp_path / "l.csv"), names_path=str(tmp_path / "n.txt"))
    rep = run_cv(cfg, k=2)
    assert len(rep.folds) == 2 and set(rep.summary()) == {"auc", "auprc", "ce_loss"}


def test_ablation_rows(tmp_path):
    reports = run_ablation(quick(tmp_path, max_epochs=1), ["SI", "I", "SI,T,I"], small_cases(30), k=2)
    assert list(reports) == ["SI", "I", "SI,T,I"]
    lines = ablation_table(reports).splitlines()
    assert len(lines) == 4
    assert len({len(line.split()) for line in lines[1:]}) == 1


def test_ablation_rejects_empty_subset(tmp_path):
    with pytest.raises(ValidationError):
        run_ablation(quick(tmp_path), [""], small_cases(10), k=2)


def test_config_validation():
    with pytest.raises(ValidationError):
        ExperimentConfig(model="mean-logreg", task="regression")
    with pytest.raises(ValidationError):
        ExperimentConfig(channels="")
    with pytest.raises(ValidationError):
        ExperimentConfig(kappa=1.0)
    with pytest.raises(ValidationError):
        ExperimentConfig.from_mapping({"no_such_key": 1})


def test_config_precedence(tmp_path):
    f = tmp_path / "exp.cfg"
    f.write_text("# comment\nlr = 0.01\nhidden_size=16\n")
    cfg = ExperimentConfig.from_file(f)
    assert cfg.lr == 0.01 and cfg.hidden_size == 16 and cfg.T == 49
    assert ExperimentConfig.from_mapping({"lr": "0.5"}, cfg).lr == 0.5


# --- CLI ---------------------------------------------------------------------

@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    res = CliRunner().invoke(main, ["synth-gen", "--out", str(out), "--n-cases", "24", "--dims", "3",
                                    "--seed", "4"])
    assert res.exit_code == 0, res.output
    return out


def data_flags(d):
    return ["--obs", str(d / "observations.csv"), "--labels", str(d / "labels.csv"),
            "--names", str(d / "names.txt")]


def test_cli_train_eval_cv(tmp_path, dataset):
    r = CliRunner()
    run = tmp_path / "run"
    res = r.invoke(main, ["train", *data_flags(dataset), "--model", "gru-m", "--grid-points", "9",
                          "--hidden-size", "4", "--max-epochs", "1", "--out", str(run)])
    assert res.exit_code == 0, res.output
    assert {"checkpoint.npz", "train_log.csv", "manifest.json"} <= {p.name for p in run.iterdir()}
    res = r.invoke(main, ["eval", "--checkpoint", str(run / "checkpoint.npz"), *data_flags(dataset),
                          "--out", str(tmp_path / "ev")])
    assert res.exit_code == 0, res.output
    assert "auc" in json.loads((tmp_path / "ev" / "eval_report.json").read_text())["metrics"]
    res = r.invoke(main, ["cv", *data_flags(dataset), "--model", "mean-logreg", "-k", "2",
                          "--out", str(tmp_path / "cv")])
    assert res.exit_code == 0, res.output
    assert "mean" in res.output


def test_cli_config_file_overridden_by_flags(tmp_path, dataset):
    cfgfile = tmp_path / "c.cfg"
    cfgfile.write_text("model = gru-f\nmax_epochs = 1\nhidden_size = 4\nT = 9\n")
    res = CliRunner().invoke(main, ["train", "--config", str(cfgfile), *data_flags(dataset),
                                    "--model", "mean-logreg", "--out", str(tmp_path / "o")])
    assert res.exit_code == 0, res.output
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["config"]["model"] == "mean-logreg" and m["config"]["hidden_size"] == 4


def test_cli_exit_codes(tmp_path, dataset):
    r = CliRunner()
    res = r.invoke(main, ["train", *data_flags(dataset), "--model", "nope", "--out", str(tmp_path)])
    assert res.exit_code == 1
    bad = FIXTURES / "bad_row_obs.csv"
    res = r.invoke(main, ["cv", "--obs", str(bad), "--labels", str(FIXTURES / "tiny_labels.csv"),
                          "--dims", "3", "--model", "mean-logreg", "--out", str(tmp_path)])
    assert res.exit_code == 1 and "bad_row_obs.csv:3" in res.output
    res = r.invoke(main, ["ablate", *data_flags(dataset), "--subset", ",", "--out", str(tmp_path)])
    assert res.exit_code == 1
    res = r.invoke(main, ["eval", "--checkpoint", str(FIXTURES / "names.txt"), *data_flags(dataset),
                          "--out", str(tmp_path)])
    assert res.exit_code == 2


def test_divergence_keeps_last_good_checkpoint(tmp_path, monkeypatch):
    from ipnets import models
    from ipnets.train import DivergenceError

    real_loss = models.NeuralModel.loss
    calls = {"n": 0}

    def flaky(self, params, data, idx, y, mask_seed=None):
        bd = real_loss(self, params, data, idx, y, mask_seed)
        calls["n"] += 1
        # epoch 0 is 5 steps plus one validation batch; blow up inside epoch 1
        if calls["n"] == 8:
            bd.total = bd.total * float("nan")
        return bd

    monkeypatch.setattr(models.NeuralModel, "loss", flaky)
    with pytest.raises(DivergenceError, match="epoch 1"):
        run_train(quick(tmp_path, model="gru-m"), small_cases())
    ckpt = Checkpoint.load(tmp_path / "checkpoint.npz")
    assert ckpt.state.epoch == 1 and ckpt.state.best_epoch == 0

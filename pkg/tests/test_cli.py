import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from neurogame.cli import main
from neurogame.config import ConfigError, builder_kwargs, load_config, parse_config
from neurogame.layer import NeurogameLayerConfig
from neurogame.models import load_checkpoint
from neurogame.training import bracket_table, prediction_metrics

SMALL_RUN = """
model: {model}
seed: 3
epochs: {epochs}
batch_size: 32
output_dir: {out}
dataset: {{kind: synth-bars, n_samples: {n}, image_size: {size}, noise: 0.3, seed: 7}}
model_options: {options}
"""


def write_cfg(tmp_path, name="run", model="neurogame-gender", epochs=2, n=120, size=12, options="{hidden: [16, 8]}", extra=""):
    out = tmp_path / name
    path = tmp_path / f"{name}.yaml"
    path.write_text(SMALL_RUN.format(model=model, epochs=epochs, out=out, n=n, size=size, options=options) + extra)
    return path, out


def run_cli(args, capsys):
    code = main([str(a) for a in args])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


# -- config ------------------------------------------------------------------


def test_config_defaults():
    cfg = parse_config("model: mlp-gender\n")
    assert cfg.batch_size == 64 and cfg.epochs == 50 and cfg.config_version == 1
    cfg = parse_config("model: cnn-agegender\n")
    assert cfg.batch_size == 32 and cfg.epochs == 100 and cfg.dataset.with_age
    assert parse_config("").model == "neurogame-gender"


@pytest.mark.parametrize(
    "text,field",
    [
        ("bogus: 1", "bogus"),
        ("dataset: {kind: synth-bars, colour: red}", "dataset.colour"),
        ("neurogame: {topp: 0.5}", "neurogame.topp"),
        ("batch_size: 0", "batch_size"),
        ("epochs: two", "epochs"),
        ("model: resnet", "model"),
        ("config_version: 2", "config_version"),
        ("dataset: {split: [0.5, 0.5]}", "dataset.split"),
        ("dataset: {kind: utkface}", "dataset.path"),
        ("neurogame: {top_p: 1.5}", "neurogame"),
        ("model: mlp-gender\nmodel_options: {filters: 3}", "model_options.filters"),
    ],
)
def test_config_errors_name_the_field(text, field):
    with pytest.raises(ConfigError, match=f"field '{field}"):
        builder_kwargs(parse_config(text))


def test_config_yaml_error_has_line_and_column():
    with pytest.raises(ConfigError, match=r"cfg.yaml:3:9: mapping values"):
        parse_config("model: mlp-gender\nseed: 1\n  epochs: 2\nlr: 3\n", "cfg.yaml")


def test_config_layer_config_and_seed_override(tmp_path, monkeypatch):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 5\nneurogame: {top_p: 3, block: [2, 3], alpha: 0.5}\n")
    cfg = load_config(path)
    lc = cfg.neurogame.layer_config(cfg.seed)
    assert isinstance(lc, NeurogameLayerConfig) and lc.top_p == 3 and lc.block == (2, 3)
    assert lc.energy.alpha == 0.5 and cfg.seed == 5
    monkeypatch.setenv("NEUROGAME_SEED", "11")
    assert load_config(path).seed == 11
    monkeypatch.setenv("NEUROGAME_SEED", "x")
    with pytest.raises(ConfigError):
        load_config(path)


# -- metrics -----------------------------------------------------------------


def test_prediction_metrics_and_brackets():
    pg = np.array([0.9, 0.2, 0.6, 0.4])
    g = np.array([1.0, 0.0, 0.0, 0.0])
    pa = np.array([1.0, 30.0, 50.0, 110.0])
    a = np.array([2.0, 25.0, 55.0, 101.0])
    m = prediction_metrics(pg, g, pa, a)
    assert m["acc_gender"] == 0.75
    assert m["acc_ageclass"] == 0.75  # 30 vs 25 fall in different brackets
    assert m["acc_joint"] == 0.5
    rows = bracket_table(pg, g, pa, a)
    assert len(rows) == 14 and rows[0]["class"] == "[0, 2]" and rows[-1]["class"] == "[100, 116]"
    assert rows[0] == {"class": "[0, 2]", "n": 1, "gender": 100.0, "age": 100.0, "gender_and_age": 100.0}
    assert rows[8]["gender"] == 0.0 and rows[8]["age"] == 100.0
    assert rows[1]["n"] == 0 and rows[1]["gender"] is None


# -- train / eval / inspect --------------------------------------------------


def test_train_smoke_five_epochs(tmp_path, capsys):
    cfg, out = write_cfg(tmp_path, epochs=5)
    code, stdout, _ = run_cli(["train", "--config", cfg], capsys)
    assert code == 0 and "run written" in stdout
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "split", "loss_gender", "loss_age", "acc_gender", "acc_ageclass", "acc_joint", "seconds"]
    for split_name in ("train", "val"):
        epochs = [int(r["epoch"]) for r in rows if r["split"] == split_name]
        assert epochs == [1, 2, 3, 4, 5]
    assert all(r["loss_age"] == "" and r["seconds"] == "" for r in rows)
    assert (out / "model.ckpt").is_file() and (out / "config.resolved.yaml").is_file()
    assert load_config(out / "config.resolved.yaml").model == "neurogame-gender"
    assert len((out / "timings.csv").read_text().splitlines()) == 6
    _, header = load_checkpoint(out / "model.ckpt")
    assert header["iteration"] == 1 + 5 * 3  # 96 training samples, batch 32


def test_record_seconds_and_diagnostics(tmp_path, capsys):
    cfg, out = write_cfg(tmp_path, epochs=1, extra="record_seconds: true\ndiagnostics_every: 2\n")
    assert run_cli(["train", "--config", cfg], capsys)[0] == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert float(rows[0]["seconds"]) > 0
    recs = [json.loads(line) for line in (out / "diagnostics.jsonl").read_text().splitlines()]
    assert recs and {r["iteration"] for r in recs} == {2.0}


def test_eval_own_training_set_and_json(tmp_path, capsys):
    cfg, out = write_cfg(tmp_path, epochs=4, n=200)
    assert run_cli(["train", "--config", cfg], capsys)[0] == 0
    val_acc = load_checkpoint(out / "model.ckpt")[1]["extra"]["val_metrics"]["acc_gender"]
    code, stdout, _ = run_cli(["eval", "--checkpoint", out / "model.ckpt", "--split", "train"], capsys)
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["acc_gender"] >= val_acc - 0.02
    assert json.loads(stdout.splitlines()[0])["n"] == 160


def test_eval_agegender_brackets(tmp_path, capsys):
    cfg, out = write_cfg(
        tmp_path, model="neurogame-agegender", epochs=1, n=64, size=16, options="{filters: [3], dense: [8]}"
    )
    assert run_cli(["train", "--config", cfg], capsys)[0] == 0
    target = tmp_path / "m.json"
    code, stdout, _ = run_cli(["eval", "--checkpoint", out / "model.ckpt", "--out", target], capsys)
    assert code == 0
    metrics = json.loads(target.read_text())
    assert len(metrics["brackets"]) == 14
    assert {"acc_gender", "acc_ageclass", "acc_joint", "loss_age"} <= set(metrics)
    assert "Gender and Age %" in stdout and "[100, 116]" in stdout


def test_inspect_shapley(tmp_path, capsys):
    cfg, out = write_cfg(tmp_path, epochs=1)
    assert run_cli(["train", "--config", cfg], capsys)[0] == 0
    img = tmp_path / "gray.png"
    Image.fromarray(np.full((12, 12), 128, np.uint8)).save(img)
    code, stdout, _ = run_cli(["inspect-shapley", "--checkpoint", out / "model.ckpt", "--image", img, "--iteration", 9], capsys)
    assert code == 0
    report = json.loads(stdout)
    assert json.loads(json.dumps(report)) == report and report["iteration"] == 9
    layer = report["layers"][0]
    assert sum(r["kept_count"] for r in layer["records"]) == layer["mask_population"]
    for rec in layer["records"]:
        # the conv of a uniform image is uniform per channel, so coalitions tie
        assert np.ptp(rec["payoffs"]) <= 1e-12 * max(1.0, abs(rec["payoffs"][0]))

    # the same image through a forward pass gives the same population
    model, _ = load_checkpoint(out / "model.ckpt")
    model.iteration = 9
    x = np.asarray(Image.open(img), dtype=np.float32)[None, :, :, None] / 255
    model.forward(x)
    assert int(model.neurogame_layers()[0].last_mask.mask.sum()) == layer["mask_population"]


def test_error_paths(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: mlp-gender\nepochs: [\n")
    code, _, err = run_cli(["train", "--config", bad], capsys)
    assert code == 2 and err.startswith("neurogame: error[config]: ") and err.count("\n") == 1
    assert "bad.yaml:3" in err

    typo = tmp_path / "typo.yaml"
    typo.write_text("modle: mlp-gender\n")
    code, _, err = run_cli(["train", "--config", typo], capsys)
    assert code == 2 and "field 'modle'" in err

    missing = tmp_path / "missing.yaml"
    missing.write_text(f"output_dir: {tmp_path / 'o'}\ndataset: {{kind: utkface, path: {tmp_path / 'nowhere'}}}\n")
    code, _, err = run_cli(["train", "--config", missing], capsys)
    assert code == 3 and err.startswith("neurogame: error[dataset]")

    diverge, _ = write_cfg(tmp_path, name="div", epochs=2, extra="learning_rate: 1.0e+30\n")
    code, _, err = run_cli(["train", "--config", diverge], capsys)
    assert code == 4 and err.startswith("neurogame: error[divergence]") and err.count("\n") == 1

    code, _, err = run_cli(["eval", "--checkpoint", bad], capsys)
    assert code == 5 and "error[checkpoint]" in err
    code, _, err = run_cli(["frobnicate"], capsys)
    assert code == 2 and err.startswith("neurogame: error[usage]")


def test_eval_and_inspect_errors(tmp_path, capsys):
    cfg, out = write_cfg(tmp_path, model="mlp-gender", epochs=1)
    assert run_cli(["train", "--config", cfg], capsys)[0] == 0
    ckpt = out / "model.ckpt"
    code, _, err = run_cli(["eval", "--checkpoint", ckpt, "--data", "synth-bars:size=16,n=20"], capsys)
    assert code == 5 and "error[shape]" in err
    empty = tmp_path / "empty.csv"
    empty.write_text("path,gender,age\n")
    code, _, err = run_cli(["eval", "--checkpoint", ckpt, "--data", empty], capsys)
    assert code == 3 and "error[dataset]" in err
    img = tmp_path / "x.png"
    Image.fromarray(np.zeros((12, 12), np.uint8)).save(img)
    code, _, err = run_cli(["inspect-shapley", "--checkpoint", ckpt, "--image", img], capsys)
    assert code == 6 and "error[model]" in err


def test_threads_env(tmp_path, capsys, monkeypatch):
    cfg, _ = write_cfg(tmp_path, epochs=1)
    monkeypatch.setenv("NEUROGAME_THREADS", "zero")
    assert run_cli(["train", "--config", cfg], capsys)[0] == 2
    monkeypatch.setenv("NEUROGAME_THREADS", "1")
    assert run_cli(["train", "--config", cfg], capsys)[0] == 0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "neurogame", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "inspect-shapley" in proc.stdout

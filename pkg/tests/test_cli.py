import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from styledub.cli import RunManifest, main
from styledub.params import read_sequence

DATA = Path(__file__).parent / "data"
TRAIN_FLAGS = ["--epochs", "1", "--train-frames", "120", "--gen-width", "128"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--frames", "150", "--seed", "3", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def model(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m.dstw"
    assert main(["train", str(corpus / "source.csv"), str(corpus / "target.csv"), *TRAIN_FLAGS,
                 "--out", str(out)]) == 0
    return out


def test_synth_outputs(corpus, tmp_path):
    for name in ("source", "target", "oracle"):
        assert read_sequence(corpus / f"{name}.csv").frames.shape == (150, 64)
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 3
    again = tmp_path / "again"
    assert main(["synth", "--frames", "150", "--seed", "3", "--out", str(again)]) == 0
    for name in ("source", "target", "oracle"):
        assert (again / f"{name}.csv").read_bytes() == (corpus / f"{name}.csv").read_bytes()


def test_synth_default_frames(tmp_path):
    assert main(["synth", "--out", str(tmp_path)]) == 0
    assert read_sequence(tmp_path / "source.csv").frames.shape == (2000, 64)


def test_synth_missing_spec(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    out = tmp_path / "out"
    assert main(["synth", "--source-spec", str(missing), "--out", str(out)]) != 0
    assert str(missing) in capsys.readouterr().err
    assert not (out / "source.csv").exists()


def test_train_outputs(model):
    lines = Path(str(model) + ".history.csv").read_text().splitlines()
    assert lines[0] == "iter,L_cc,L_adv_d,L_adv_g,L_me,L_total"
    assert len(lines) - 1 == 1 * ((120 - 7 + 1) // 16)
    manifest = RunManifest.read(str(model) + ".manifest.json")
    assert manifest.config["gen_width"] == 128 and manifest.config["epochs"] == 1


def test_train_is_byte_identical(corpus, model, tmp_path):
    out = tmp_path / "m2.dstw"
    assert main(["train", str(corpus / "source.csv"), str(corpus / "target.csv"), *TRAIN_FLAGS,
                 "--out", str(out)]) == 0
    assert out.read_bytes() == model.read_bytes()
    assert Path(str(out) + ".history.csv").read_bytes() == Path(str(model) + ".history.csv").read_bytes()


def test_train_config_file_overridden_by_flags(corpus, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 5, "train_frames": 120, "gen_width": 128, "batch_size": 32}))
    out = tmp_path / "m.dstw"
    assert main(["train", str(corpus / "source.csv"), str(corpus / "target.csv"), "--config", str(cfg),
                 "--epochs", "1", "--out", str(out)]) == 0
    manifest = RunManifest.read(str(out) + ".manifest.json")
    assert manifest.config["epochs"] == 1 and manifest.config["batch_size"] == 32


def test_train_corrupt_csv(corpus, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    rows = (corpus / "source.csv").read_text().splitlines()
    cells = rows[4].split(",")
    cells[6] = "abc"
    rows[4] = ",".join(cells)
    bad.write_text("\n".join(rows) + "\n")
    out = tmp_path / "m.dstw"
    assert main(["train", str(bad), str(corpus / "target.csv"), *TRAIN_FLAGS, "--out", str(out)]) == 1
    err = capsys.readouterr().err
    assert "row 5" in err and "column 7" in err
    assert not out.exists() and not Path(str(out) + ".history.csv").exists()


def test_translate_interpolate_eval(corpus, model, tmp_path, capsys):
    tr = tmp_path / "tr.csv"
    assert main(["translate", str(model), str(corpus / "source.csv"), "--direction", "st", "--out", str(tr)]) == 0
    assert read_sequence(tr).frames.shape == (150, 64)
    blend = tmp_path / "blend.csv"
    assert main(["interpolate", str(corpus / "source.csv"), str(tr), "--alpha", "0", "--out", str(blend)]) == 0
    assert np.array_equal(read_sequence(blend).frames, read_sequence(corpus / "source.csv").frames)
    capsys.readouterr()
    assert main(["eval", str(corpus / "source.csv"), str(tr), "--checkpoint", str(model)]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert {"mouth_cosine", "amplitude_ratio", "mean_distance", "var_distance"} <= set(metrics)


def test_interpolate_bad_alpha(corpus, tmp_path):
    out = tmp_path / "x.csv"
    src = str(corpus / "source.csv")
    assert main(["interpolate", src, src, "--alpha", "2", "--out", str(out)]) == 1
    assert not out.exists()


def test_composite_golden(tmp_path):
    out = tmp_path / "out.ppm"
    args = ["composite", str(DATA / "fg.ppm"), str(DATA / "bg.ppm"), str(DATA / "mask.pgm"),
            "--radius", "2", "--sigma", "1.5", "--out", str(out)]
    assert main(args) == 0
    assert out.read_bytes() == (DATA / "golden.ppm").read_bytes()


def test_rerun_reproduces_outputs(corpus, model, tmp_path):
    tr = tmp_path / "tr.csv"
    assert main(["translate", str(model), str(corpus / "source.csv"), "--out", str(tr)]) == 0
    first = tr.read_bytes()
    manifest_path = Path(str(tr) + ".manifest.json")
    manifest = RunManifest.read(manifest_path)
    assert RunManifest(**manifest.to_dict()) == manifest
    tr.unlink()
    assert main(["rerun", str(manifest_path)]) == 0
    assert tr.read_bytes() == first


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "styledub", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()

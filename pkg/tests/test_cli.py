import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from PIL import Image

from quantunet.cli import main
from quantunet.errors import ReportError
from quantunet.report import emit_report, read_table

SVG = "{http://www.w3.org/2000/svg}"


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["gen-synth", "--n", "200", "--seed", "7", "--img-size", "32", "--out", str(root / "d")]) == 0
    return root / "d"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    argv = ["train", "--data", str(dataset), "--out", str(out), "--epochs", "2", "--base", "8", "--img-size", "32"]
    assert main(argv) == 0
    return out


def test_gen_synth_layout(dataset):
    for cls in ("benign", "malignant", "normal"):
        assert any((dataset / cls).glob("*.png"))
    assert len([p for p in dataset.rglob("*.png") if "_mask" not in p.name]) == 200


def test_train_outputs(trained):
    assert len(_rows(trained / "metrics.csv")) == 2
    assert len(_rows(trained / "layer_bitwidths.csv")) == 46
    cfg = json.loads((trained / "effective-config.json").read_text())
    assert cfg["epochs"] == 2 and cfg["base_channels"] == 8 and cfg["lam"] == 0.25
    assert (trained / "best.ckpt").is_file()


def test_rerun_from_effective_config_is_identical(trained, tmp_path):
    assert main(["train", "--config", str(trained / "effective-config.json"), "--out", str(tmp_path)]) == 0
    for name in ("metrics.csv", "layer_bitwidths.csv", "loss_components.csv"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_flags_override_config(trained, tmp_path, dataset):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 5, "base_channels": 2, "img_size": 16, "data": str(dataset)}))
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--out", str(tmp_path / "o")]) == 0
    eff = json.loads((tmp_path / "o" / "effective-config.json").read_text())
    assert eff["epochs"] == 1 and eff["base_channels"] == 2 and eff["img_size"] == 16


def test_lambda_zero_has_zero_bitwidth_term(dataset, tmp_path):
    argv = ["train", "--data", str(dataset), "--epochs", "1", "--base", "2", "--img-size", "16", "--lambda", "0"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert all(float(r["bitwidth_term"]) == 0.0 for r in _rows(tmp_path / "a" / "loss_components.csv"))


def test_eval(trained, dataset, capsys):
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--config",
                 str(trained / "effective-config.json"), "--split", "val"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["split"] == "val" and 0 <= report["dice"] <= 1


def test_export_then_infer(trained, dataset, tmp_path, capsys):
    model = tmp_path / "m.qunt"
    assert main(["export", "--checkpoint", str(trained / "best.ckpt"), "--out", str(model),
                 "--config", str(trained / "effective-config.json")]) == 0
    size = json.loads(capsys.readouterr().out)
    assert size["file_bytes"] == model.stat().st_size
    image = sorted((dataset / "benign").glob("benign_*[0-9].png"))[0]
    assert main(["infer", "--model", str(model), "--image", str(image), "--out", str(tmp_path / "inf")]) == 0
    mask = np.asarray(Image.open(tmp_path / "inf" / f"{image.stem}_mask.png"))
    assert mask.shape == (32, 32) and set(np.unique(mask)) <= {0, 255}
    prob = np.load(tmp_path / "inf" / f"{image.stem}_prob.npy")
    assert prob.shape == (32, 32) and np.all((prob >= 0) & (prob <= 1))


def test_report(trained, tmp_path):
    assert main(["report", str(trained), "--out", str(tmp_path)]) == 0
    tree = ET.parse(tmp_path / "accuracy_bitwidth.svg")
    lines = tree.getroot().findall(f"{SVG}polyline")
    assert len(lines) == 3
    assert all(len(p.get("points").split()) == 2 for p in lines)
    layers = ET.parse(tmp_path / "layer_bitwidths.svg").getroot().findall(f"{SVG}polyline")
    assert len(layers) == 23
    assert len(ET.parse(tmp_path / "loss_components.svg").getroot().findall(f"{SVG}polyline")) == 3


def _copy_logs(src, dst):
    dst.mkdir(exist_ok=True)
    for name in ("metrics.csv", "layer_bitwidths.csv", "loss_components.csv"):
        (dst / name).write_bytes((src / name).read_bytes())
    return dst


def test_report_missing_column(trained, tmp_path):
    d = _copy_logs(trained, tmp_path / "logs")
    text = (d / "metrics.csv").read_text().replace("val_dice", "dice_val")
    (d / "metrics.csv").write_text(text)
    with pytest.raises(ReportError, match="val_dice"):
        emit_report(d)
    assert not list(d.glob("*.svg"))


def test_report_header_only(trained, tmp_path):
    d = _copy_logs(trained, tmp_path / "logs")
    (d / "loss_components.csv").write_text("epoch,bce,dice,bitwidth_term\n")
    with pytest.raises(ReportError, match="no data rows"):
        emit_report(d)
    assert not list(d.glob("*.svg"))


def test_report_bad_value_names_line(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("epoch,x\n1,0.5\n2,oops\n")
    with pytest.raises(ReportError, match=r"m\.csv: line 3: column 'x'"):
        read_table(p, ["epoch", "x"])


def test_report_cli_failure_exit_code(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and "metrics.csv" in err


@pytest.mark.parametrize("argv", [["bogus"], ["train", "--nope"], []])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_failure_exit_1(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "error" in err


def test_missing_data_flag(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 1
    assert "--data" in capsys.readouterr().err


def test_bad_thread_setting(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("QUNET_THREADS", "many")
    assert main(["report", str(tmp_path)]) == 1
    assert "QUNET_THREADS" in capsys.readouterr().err


def test_thread_cap(monkeypatch, trained, tmp_path):
    monkeypatch.setenv("QUNET_THREADS", "1")
    assert main(["report", str(trained), "--out", str(tmp_path)]) == 0

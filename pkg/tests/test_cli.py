import csv
import json
from pathlib import Path

import numpy as np
import pytest

from petkit import cli
from petkit import tensor as T
from petkit.config import load_config
from petkit.tensor import ConfigError

TINY = """
mode = "train-32bit"
seed = 0

[backbone]
preset = "mini"

[strategy]
kind = "{kind}"
{extra}

[task]
n_classes = 3
samples_per_class = 10
wave_length = {length}
snr_db = 30.0

[train]
lr_grid = [1e-3, 1e-4]
epochs = 2
batch_size = 8
"""


def write_config(tmp_path, kind="chapter", extra="", length=400, body=None, name="run.toml"):
    path = tmp_path / name
    path.write_text(body if body is not None else TINY.format(kind=kind, extra=extra, length=length))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def only_dir(root):
    dirs = [p for p in Path(root).iterdir() if p.is_dir()]
    assert len(dirs) == 1
    return dirs[0]


HUBERT_CHAPTER = 'preset = "hubert-base-shape"'


# ------------------------------------------------------------------ params

def test_params_report_has_top_n_subrows(tmp_path, capsys):
    text = TINY.format(kind="chapter", extra="", length=400).replace('preset = "mini"', HUBERT_CHAPTER)
    cfg = write_config(tmp_path, body=text)
    assert cli.main(["params", "--config", cfg, "--out", str(tmp_path / "out"), "--convention", "weights-only"]) == 0
    rows = read_csv(only_dir(tmp_path / "out") / "params.csv")
    sub = {r["component"]: int(r["count"]) for r in rows if r["kind"] == "subtotal"}
    assert [sub[f"cnn.top{n}"] for n in range(1, 6)] == [524_288, 1_048_576, 1_835_008, 2_621_440, 3_407_872]
    assert "cnn.top5" in capsys.readouterr().out


def test_params_frozen_is_zero(tmp_path):
    cfg = write_config(tmp_path, kind="frozen")
    assert cli.main(["params", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    lines = (only_dir(tmp_path / "out") / "params.jsonl").read_text().splitlines()
    totals = [json.loads(l) for l in lines if json.loads(l)["component"] == "trainable_total"]
    assert len(totals) == 2 and all(t["count"] == 0 for t in totals)


@pytest.mark.parametrize("body", [
    "[backbone\npreset = 'mini'",
    "[backbone]\npreset = 'mini'\ncolour = 'red'\n",
    "[strategy]\nkind = 'chapter'\n[strategy.cnn]\ntop = 3\n",
    "[train]\nepochs = 'many'\n",
    "mode = 'fast'\n",
    "[strategy]\nkind = 'lora'\n",
    "[strategy]\nkind = 'cnn_adapter'\n[strategy.cnn]\ntop_n = 9\n",
    "[[sweep.strategy]]\nkind = 'frozen'\n[sweep]\njobs = 0\n",
])
def test_bad_config_exits_2_without_files(tmp_path, body, capsys):
    cfg = write_config(tmp_path, body=body)
    out = tmp_path / "out"
    assert cli.main(["params", "--config", cfg, "--out", str(out)]) == 2
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["params", "--config", str(tmp_path / "nope.toml")]) == 2


def test_shipped_configs_parse():
    root = Path(__file__).resolve().parent.parent / "configs"
    paths = sorted(root.glob("*.toml"))
    assert paths
    for p in paths:
        load_config(p)


def test_inline_backbone(tmp_path):
    body = """
[backbone]
n_layers = 1
hidden = 8
n_heads = 2
ff_dim = 16
[[backbone.conv_blocks]]
in_channels = 1
out_channels = 4
kernel = 4
stride = 2
"""
    cfg = load_config(write_config(tmp_path, body=body))
    assert cfg.backbone_name == "inline" and cfg.backbone.conv_channels == 4
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, body=body.replace("ff_dim = 16\n", "")))


# ------------------------------------------------------------------ gradcheck

SMALL_EXTRA = "[strategy.houlsby]\nbottleneck = 4\n[strategy.cnn]\ntop_n = 1\ncompression = 4"


def test_gradcheck_passes_on_small_chapter(tmp_path, capsys):
    cfg = write_config(tmp_path, extra=SMALL_EXTRA, length=120)
    assert cli.main(["gradcheck", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and " at " in out


def test_gradcheck_catches_corrupted_backward(tmp_path, monkeypatch, capsys):
    cfg = write_config(tmp_path, extra=SMALL_EXTRA, length=120)
    real = T._gelu_derivative
    monkeypatch.setattr(T, "_gelu_derivative", lambda x: 1.1 * real(x))
    assert cli.main(["gradcheck", "--config", cfg]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_zero_tolerance_fails(tmp_path):
    cfg = write_config(tmp_path, extra=SMALL_EXTRA, length=120)
    assert cli.main(["gradcheck", "--config", cfg, "--tolerance", "0"]) == 1


# ------------------------------------------------------------------ train / sweep / report

DETERMINISTIC_FILES = ("records.jsonl", "metrics.csv", "summary.csv")


def test_train_twice_identical(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    a, b = sorted(p for p in out.iterdir())
    assert a != b
    for name in DETERMINISTIC_FILES:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    records = [json.loads(l) for l in (a / "records.jsonl").read_text().splitlines()]
    assert len(records) == 2 and sum(r["best"] for r in records) == 1
    assert len(read_csv(a / "metrics.csv")) == 2 * 2


def test_train_nan_exits_1(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, kind="frozen")

    def broken(*a, **k):
        raise T.NumericError("non-finite logits")

    monkeypatch.setattr(T, "softmax_cross_entropy", broken)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "out")]) == 1


SWEEP = """
[backbone]
preset = "mini"
[task]
n_classes = 3
samples_per_class = 20
[train]
lr_grid = [1e-3]
epochs = 1
[sweep]
fractions = [1.0, 0.5]
seeds = [0, 1]
[[sweep.strategy]]
kind = "frozen"
[[sweep.strategy]]
kind = "chapter"
[sweep.strategy.cnn]
top_n = 1
"""


def test_sweep_record_count(tmp_path):
    cfg = write_config(tmp_path, body=SWEEP)
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    run = only_dir(tmp_path / "out")
    assert len((run / "records.jsonl").read_text().splitlines()) == 2 * 2 * 2
    table = read_csv(run / "sweep.csv")
    assert len(table) == 4
    assert {"strategy", "fraction", "test_acc_mean", "test_acc_sd", "gap_mean", "gap_sd"} <= set(table[0])


def test_sweep_without_table_is_config_error(tmp_path):
    assert cli.main(["sweep", "--config", write_config(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_report_rows_sorted_and_params_single_sourced(tmp_path):
    runs = tmp_path / "runs"
    for kind, extra in (("chapter", ""), ("frozen", ""), ("houlsby", "[strategy.houlsby]\nbottleneck = 4")):
        cfg = write_config(tmp_path, kind=kind, extra=extra, name=f"{kind}.toml")
        assert cli.main(["train", "--config", cfg, "--out", str(runs)]) == 0
        if kind == "chapter":
            assert cli.main(["params", "--config", cfg, "--out", str(tmp_path / "params"),
                             "--convention", "all"]) == 0
    assert cli.main(["report", str(runs), "--out", str(tmp_path / "report")]) == 0
    rows = read_csv(only_dir(tmp_path / "report") / "report.csv")
    params = [int(r["trainable_total"]) for r in rows]
    assert len(rows) == 3 and params == sorted(params) and params[0] == 0
    counted = {r["component"]: int(r["count"]) for r in read_csv(only_dir(tmp_path / "params") / "params.csv")}
    chapter = next(r for r in rows if r["kind"] == "chapter")
    assert int(chapter["trainable_total"]) == counted["trainable_total"]


def test_report_single_run(tmp_path):
    cfg = write_config(tmp_path, kind="frozen")
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "runs")]) == 0
    assert cli.main(["report", str(tmp_path / "runs"), "--out", str(tmp_path / "rep")]) == 0
    assert len(read_csv(only_dir(tmp_path / "rep") / "report.csv")) == 1


def test_report_empty_dir_exits_2(tmp_path):
    (tmp_path / "empty").mkdir()
    assert cli.main(["report", str(tmp_path / "empty")]) == 2
    assert cli.main(["report", str(tmp_path / "missing")]) == 2


def test_new_run_dir_never_reuses(tmp_path):
    a = cli.new_run_dir(tmp_path, "x")
    b = cli.new_run_dir(tmp_path, "x")
    assert a != b and a.exists() and b.exists()

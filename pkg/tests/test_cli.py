import json
import re

import pytest

from tlora_lab.cli import main
from tlora_lab.runio import INCOMPLETE, read_csv

SMALL = {
    "model": {"d_model": 16, "n_heads": 2, "n_layers": 2},
    "synth": {"n_examples": 64, "n_val": 32, "vocab_size": 12, "seq_len": 4},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def run_train(tmp_path, cfg_file, name, *extra):
    out = tmp_path / name
    code = main(["train", "--config", cfg_file, "--out", str(out), "--rank", "4", "--epochs", "2", *extra])
    assert code == 0
    return out


def test_params_reference_rows(capsys):
    assert main(["params", "--rank", "8", "--json"]) == 0
    row = json.loads(capsys.readouterr().out)["rows"][0]
    assert (row["tlora"], row["lora"], row["improvement"]) == (3120, 786432, 252)
    assert main(["params"]) == 0
    text = capsys.readouterr().out
    assert "49,200" in text and "3,145,728" in text and "64x" in text and "12,336" in text


def test_params_hand_case(capsys):
    assert main(["params", "--rank", "1", "--d", "2", "--k", "2", "--layers", "1", "--sites-per-layer", "1", "--json"]) == 0
    row = json.loads(capsys.readouterr().out)["rows"][0]
    assert (row["tlora"], row["lora"], row["improvement"]) == (2, 4, 2)


def test_params_rejects_nonpositive():
    assert main(["params", "--d", "0"]) == 2


def test_train_writes_complete_run(tmp_path, cfg_file):
    out = run_train(tmp_path, cfg_file, "run", "--seed", "7")
    assert not (out / INCOMPLETE).exists()
    for rel in ("config.json", "metrics.csv", "base_model.bin", "data/train.tsv", "data/val.tsv", "weights/manifest.json"):
        assert (out / rel).exists(), rel
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["seed"] == 7 and cfg["rank"] == 4 and cfg["method"] == "tlora"
    assert cfg["train"]["learning_rate"] == 1e-3 and cfg["train"]["batch_size"] == 32
    assert cfg["adapter"]["dropout_p"] == 0.5
    assert len(cfg["dataset_fingerprint"]) == 64
    assert "adapter/layers.1.attn.value" in cfg["seed_derivations"]


def test_train_defaults_visible_in_config(tmp_path):
    p = tmp_path / "w.json"
    p.write_text(json.dumps({**SMALL, "model": {"d_model": 32, "n_heads": 2, "n_layers": 1}}))
    out = tmp_path / "d"
    assert main(["train", "--config", str(p), "--out", str(out), "--epochs", "1"]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["adapter"]["rank"] == 32
    assert cfg["train"] == {**cfg["train"], "batch_size": 32, "learning_rate": 0.001, "schedule": "linear", "weight_decay": 0.01}


def test_flags_override_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({**SMALL, "train": {"learning_rate": 0.5, "epochs": 9}, "seed": 3}))
    out = tmp_path / "o"
    assert main(["train", "--config", str(p), "--out", str(out), "--lr", "0.002", "--epochs", "1", "--rank", "2"]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["train"]["learning_rate"] == 0.002 and cfg["train"]["epochs"] == 1 and cfg["seed"] == 3


def test_env_seed_fallback(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("TLORA_LAB_SEED", "11")
    out = run_train(tmp_path, cfg_file, "env")
    assert json.loads((out / "config.json").read_text())["seed"] == 11


def test_same_command_twice_gives_identical_metrics(tmp_path, cfg_file):
    a = run_train(tmp_path, cfg_file, "a", "--seed", "5")
    b = run_train(tmp_path, cfg_file, "b", "--seed", "5")
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    run_train(tmp_path, cfg_file, "a", "--seed", "5")  # rerun into the same directory
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_frozen_method_is_chance_level(tmp_path, cfg_file):
    out = tmp_path / "f"
    assert main(["train", "--config", cfg_file, "--out", str(out), "--method", "frozen"]) == 0
    _, rows = read_csv(out / "metrics.csv")
    assert len(rows) == 1 and abs(float(rows[0]["val_acc"]) - 0.5) <= 0.15


def test_usage_and_data_errors(tmp_path, cfg_file, capsys):
    assert main(["train", "--out", str(tmp_path / "x"), "--method", "nope"]) == 2
    assert main(["train", "--out", str(tmp_path / "x"), "--task", "weird"]) == 2
    assert main(["train", "--config", cfg_file, "--out", str(tmp_path / "x"), "--rank", "99"]) == 2
    bad = tmp_path / "bad.tsv"
    bad.write_text("text_a\ttext_b\tlabel\na\tb\t7\n")
    assert main(["train", "--config", cfg_file, "--out", str(tmp_path / "y"), "--task", f"tsv:{bad}"]) == 3
    assert main(["analyze", "--run", str(tmp_path / "missing")]) == 4
    (tmp_path / "junk").mkdir()
    (tmp_path / "junk" / "keep.txt").write_text("x")
    assert main(["train", "--config", cfg_file, "--out", str(tmp_path / "junk")]) == 4
    assert (tmp_path / "junk" / "keep.txt").exists()


def test_tsv_task(tmp_path, cfg_file):
    p = tmp_path / "d.tsv"
    rows = ["text_a\ttext_b\tlabel"] + [f"tok{i % 5} x\ty tok{i % 3}\t{i % 2}" for i in range(20)]
    p.write_text("\n".join(rows) + "\n")
    out = tmp_path / "t"
    assert main(["train", "--config", cfg_file, "--out", str(out), "--task", f"tsv:{p}", "--epochs", "1", "--rank", "2"]) == 0
    assert len((out / "data" / "val.tsv").read_text().splitlines()) == 1 + 4


def test_analyze_untrained_run(tmp_path, cfg_file):
    out = tmp_path / "u"
    assert main(["train", "--config", cfg_file, "--out", str(out), "--epochs", "0", "--rank", "4"]) == 0
    assert main(["analyze", "--run", str(out)]) == 0
    hist = json.loads((out / "reports" / "histograms.json").read_text())
    for site in hist["sites"].values():
        assert site["B"]["counts"] == [16] and site["B"]["std"] == 0.0
    tl = json.loads((out / "reports" / "norm_timeline.json").read_text())
    assert all(s["alpha"] == [1.0] and s["b_norm"] == [0.0] for s in tl["sites"].values())


def test_analyze_reports_are_deterministic(tmp_path, cfg_file):
    out = run_train(tmp_path, cfg_file, "r")
    assert main(["analyze", "--run", str(out)]) == 0
    first = {p.name: p.read_bytes() for p in (out / "reports").iterdir()}
    assert main(["analyze", "--run", str(out)]) == 0
    assert first == {p.name: p.read_bytes() for p in (out / "reports").iterdir()}
    _, rows = read_csv(out / "reports" / "norm_timeline.csv")
    assert len(rows) == 2 + 1
    _, rows = read_csv(out / "reports" / "scaling_timeline.csv")
    assert len(rows) == 2 + 1
    hm = json.loads(first["heatmap_v.json"])
    assert hm["grid"][0][0] == hm["grid"][-1][0]


def test_compare_self_and_untrained(tmp_path, cfg_file, capsys):
    out = run_train(tmp_path, cfg_file, "s")
    capsys.readouterr()
    assert main(["compare", "--run-a", str(out), "--run-b", str(out)]) == 0
    rep = json.loads(capsys.readouterr().out)
    for s in rep["similarity"]["sites"]:
        assert abs(s["cosine"] - 1.0) < 1e-12 and s["max_abs_diff"] == 0.0
    u1, u2 = tmp_path / "u1", tmp_path / "u2"
    for u in (u1, u2):
        assert main(["train", "--config", cfg_file, "--out", str(u), "--epochs", "0", "--rank", "4"]) == 0
    capsys.readouterr()
    assert main(["compare", "--run-a", str(u1), "--run-b", str(u2), "--out", str(tmp_path / "cmp")]) == 0
    rep = json.loads((tmp_path / "cmp" / "compare.json").read_text())
    assert {s["cosine"] for s in rep["similarity"]["sites"]} == {"undefined"}


def test_compare_refuses_different_datasets(tmp_path, cfg_file):
    a = run_train(tmp_path, cfg_file, "a", "--seed", "1")
    b = run_train(tmp_path, cfg_file, "b", "--seed", "2")
    assert main(["compare", "--run-a", str(a), "--run-b", str(b)]) == 3
    assert main(["compare", "--run-a", str(a), "--run-b", str(b), "--force", "--out", str(tmp_path / "c")]) == 0


def test_compare_shape_mismatch_names_site(tmp_path, cfg_file, capsys):
    a = run_train(tmp_path, cfg_file, "a")
    p = tmp_path / "wide.json"
    p.write_text(json.dumps({**SMALL, "model": {"d_model": 8, "n_heads": 2, "n_layers": 2}}))
    b = tmp_path / "b"
    assert main(["train", "--config", str(p), "--out", str(b), "--epochs", "1", "--rank", "2"]) == 0
    assert main(["compare", "--run-a", str(a), "--run-b", str(b)]) == 3
    assert "layers.0.attn.query" in capsys.readouterr().err


def test_plots(tmp_path, cfg_file):
    out = run_train(tmp_path, cfg_file, "p")
    svg = tmp_path / "loss.svg"
    assert main(["plot", "--run", str(out), "--what", "loss", "--out", str(svg)]) == 0
    text = svg.read_text()
    assert text.startswith("<svg") and text.count("<polyline") == 2
    assert main(["plot", "--run", str(out), "--what", "norms", "--out", str(tmp_path / "n.svg")]) == 4
    assert main(["analyze", "--run", str(out)]) == 0
    for what in ("norms", "alphas", "spectrum", "hist"):
        a, b = tmp_path / f"{what}1.svg", tmp_path / f"{what}2.svg"
        assert main(["plot", "--run", str(out), "--what", what, "--out", str(a)]) == 0
        assert main(["plot", "--run", str(out), "--what", what, "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
    assert len(re.findall("<polyline", (tmp_path / "norms1.svg").read_text())) == 4


def test_spectrum_plot_of_zero_update_has_placeholder(tmp_path, cfg_file):
    out = tmp_path / "z"
    assert main(["train", "--config", cfg_file, "--out", str(out), "--epochs", "0", "--rank", "4"]) == 0
    assert main(["analyze", "--run", str(out)]) == 0
    svg = tmp_path / "s.svg"
    assert main(["plot", "--run", str(out), "--what", "spectrum", "--out", str(svg)]) == 0
    text = svg.read_text()
    assert "no nonzero eigenvalues" in text and "<polyline" not in text

import json
import subprocess
import sys

import pytest

from gliopipe.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, apply_overrides, main
from gliopipe.config import ConfigError
from gliopipe.metrics import read_metrics_csv
from gliopipe.volcore import load_cohort, load_mask, load_volume

TINY = ["--set", "model.stages=2", "--set", "model.channels=[2,4]", "--set", "model.se_ratio=2",
        "--set", "model.classifier_channels=[2,2,4,4,4,4]", "--set", "model.image_shape=[16,16,16]"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cohort") / "data"
    assert main(["-q", "synthesize", "--n", "8", "--dims", "16", "16", "16", "--seed", "7", "--out", str(d)]) == 0
    return d


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synthesize_layout(tmp_path):
    out = tmp_path / "s"
    assert main(["-q", "synthesize", "--n", "4", "--dims", "16", "16", "16", "--seed", "7", "--out", str(out)]) == 0
    rows = (out / "manifest.csv").read_text().splitlines()
    assert rows[0] == "case_id,grade" and len(rows) == 5
    assert len([p for p in out.iterdir() if p.is_dir()]) == 4
    again = tmp_path / "s2"
    main(["-q", "synthesize", "--n", "4", "--dims", "16", "16", "16", "--seed", "7", "--out", str(again)])
    assert tree(out) == tree(again)
    cases = load_cohort(out)
    assert [cid for cid, _ in cases] == ["case_000", "case_001", "case_002", "case_003"]


def test_synthesize_grade_ratio(tmp_path):
    out = tmp_path / "big"
    assert main(["-q", "synthesize", "--n", "100", "--dims", "16", "16", "16", "--seed", "3", "--out", str(out)]) == 0
    grades = [r.split(",")[1] for r in (out / "manifest.csv").read_text().splitlines()[1:]]
    assert abs(grades.count("HGG") / 100 - 0.75) <= 0.10


def test_seed_env_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("GLIOPIPE_SEED", "7")
    main(["-q", "synthesize", "--n", "2", "--dims", "16", "16", "16", "--seed", "99", "--out", str(tmp_path / "a")])
    monkeypatch.delenv("GLIOPIPE_SEED")
    main(["-q", "synthesize", "--n", "2", "--dims", "16", "16", "16", "--seed", "7", "--out", str(tmp_path / "b")])
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_preprocess(tmp_path, data_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preprocess": {"s_roi": 2, "s_d": 1}}))
    assert main(["-q", "preprocess", "--case", str(data_dir / "case_000"), "--config", str(cfg),
                 "--out", str(tmp_path / "p")]) == 0
    v = load_volume(tmp_path / "p" / "fused.gvol")
    m = load_mask(tmp_path / "p" / "mask.gvol")
    assert v.dims == m.dims == (12, 12, 14)
    assert 0.0 <= v.data.min() and v.data.max() <= 1.0


def test_train_then_evaluate_consistent(tmp_path, data_dir, capsys):
    run = tmp_path / "run"
    assert main(["-q", "train", "--task", "segment", "--data", str(data_dir), "--out", str(run),
                 "--epochs", "2", *TINY]) == 0
    for name in ("metrics.csv", "metrics.jsonl", "curves.svg", "model.ckpt", "config.json"):
        assert (run / name).is_file()
    rows = read_metrics_csv((run / "metrics.csv").read_text())
    last_val = [r for r in rows if r["split"] == "val"][-1]
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["train"]["epochs"] == 2 and cfg["model"]["channels"] == [2, 4]

    # re-score exactly the validation cases -> the logged numbers come back
    val_dir = tmp_path / "val"
    val_dir.mkdir()
    lines = (data_dir / "manifest.csv").read_text().splitlines()
    keep = [l for l in lines[1:] if l.split(",")[0] in cfg["split"]["val"]]
    (val_dir / "manifest.csv").write_text("\n".join([lines[0]] + keep) + "\n")
    for l in keep:
        (val_dir / l.split(",")[0]).symlink_to(data_dir / l.split(",")[0])
    capsys.readouterr()
    assert main(["-q", "evaluate", "--checkpoint", str(run), "--data", str(val_dir)]) == 0
    agg = json.loads(capsys.readouterr().out)
    assert agg["dice"] == pytest.approx(last_val["dice"], abs=1e-12)
    assert agg["loss"] == pytest.approx(last_val["loss"], rel=1e-12)
    assert (run / "eval" / "per_case.csv").read_text().count("\n") == len(keep) + 1


def test_train_rerun_identical(tmp_path, data_dir):
    for d in ("a", "b"):
        assert main(["-q", "train", "--task", "segment", "--data", str(data_dir), "--out", str(tmp_path / d),
                     "--epochs", "1", *TINY]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_classify_evaluate_confusion(tmp_path, data_dir, capsys):
    run = tmp_path / "cls"
    assert main(["-q", "train", "--task", "classify", "--data", str(data_dir), "--out", str(run),
                 "--epochs", "1", "--set", "train.boost_rounds=3", *TINY]) == 0
    capsys.readouterr()
    assert main(["-q", "evaluate", "--checkpoint", str(run), "--data", str(data_dir), "--task", "classify"]) == 0
    agg = json.loads(capsys.readouterr().out)
    text = (run / "eval" / "confusion.csv").read_text().splitlines()
    assert text[0] == "actual\\predicted,LGG,HGG"
    counts = {r.split(",")[0]: sum(map(int, r.split(",")[1:])) for r in text[1:]}
    grades = [l.split(",")[1] for l in (data_dir / "manifest.csv").read_text().splitlines()[1:]]
    assert counts == {"LGG": grades.count("LGG"), "HGG": grades.count("HGG")}
    assert agg["n_cases"] == 8


def test_export_plots(tmp_path, data_dir):
    run = tmp_path / "run"
    main(["-q", "train", "--task", "segment", "--data", str(data_dir), "--out", str(run), "--epochs", "2", *TINY])
    assert main(["-q", "export-plots", "--metrics", str(run / "metrics.csv"), "--out", str(tmp_path / "c.svg")]) == 0
    assert (tmp_path / "c.svg").read_bytes() == (run / "curves.svg").read_bytes()
    bad = tmp_path / "bad.csv"
    bad.write_text("epoch,split\n1,train\n")
    assert main(["-q", "export-plots", "--metrics", str(bad), "--out", str(tmp_path / "x.svg")]) == EXIT_IO


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(tmp_path, data_dir):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"train": {"lr": 0.1, "momentum": 0.9}}')
    assert main(["-q", "train", "--task", "segment", "--data", str(data_dir), "--out", str(tmp_path / "o"),
                 "--config", str(cfg)]) == EXIT_CONFIG
    cfg.write_text("{not json")
    assert main(["-q", "train", "--task", "segment", "--data", str(data_dir), "--out", str(tmp_path / "o"),
                 "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["-q", "train", "--task", "segment", "--data", str(tmp_path / "missing"),
                 "--out", str(tmp_path / "o")]) == EXIT_IO
    assert main(["-q", "evaluate", "--checkpoint", str(tmp_path / "none"), "--data", str(data_dir)]) == EXIT_IO
    assert main(["-q", "train", "--task", "segment", "--data", str(data_dir), "--out", str(tmp_path / "o"),
                 "--epochs", "3", "--lr", "1e300", *TINY]) == EXIT_NUMERIC


def test_profile_mismatch_is_config_error(tmp_path, data_dir):
    run = tmp_path / "run"
    main(["-q", "train", "--task", "segment", "--data", str(data_dir), "--out", str(run), "--epochs", "1", *TINY])
    cfg = json.loads((run / "config.json").read_text())
    cfg["model"]["channels"] = [2, 8]
    (run / "config.json").write_text(json.dumps(cfg))
    assert main(["-q", "evaluate", "--checkpoint", str(run), "--data", str(data_dir)]) == EXIT_CONFIG


def test_overrides():
    d = apply_overrides({"train": {"lr": 1}}, ["train.lr=0.5", "seed=3", "model.gat=false"])
    assert d == {"train": {"lr": 0.5}, "seed": 3, "model": {"gat": False}}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["a.b.c=1"])


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "gliopipe.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for sub in ("synthesize", "preprocess", "train", "evaluate", "export-plots"):
        assert sub in r.stdout

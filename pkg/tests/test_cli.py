import json

import pytest

from boneage.cli import CliError, main, parse_ablation


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "7", "--count", "64", "--image-size", "64", "--out", str(root / "d")]) == 0
    train_argv = ["train", "--manifest", str(root / "d/manifest.jsonl"), "--out", str(root / "run"),
                  "--epochs", "1", "--channels", "8", "--batch-size", "16"]
    assert main(train_argv) == 0
    return root, train_argv


def test_synth_then_train_artifacts(workspace):
    root, _ = workspace
    for rel in ("d/manifest.jsonl", "d/hidden_scores.jsonl", "d/config.json",
                "run/checkpoint", "run/log.csv", "run/config.json"):
        assert (root / rel).is_file(), rel
    assert (root / "run/log.csv").read_text().splitlines()[0] == "epoch,lr,train_loss,val_mad"
    cfg = json.loads((root / "run/config.json").read_text())
    assert cfg["command"] == "train" and cfg["model"]["backbone"]["out_channels"] == 8


def test_train_is_byte_reproducible(workspace, tmp_path):
    root, argv = workspace
    argv = list(argv)
    argv[argv.index("--out") + 1] = str(tmp_path / "again")
    assert main(argv) == 0
    for name in ("checkpoint", "log.csv"):
        assert (root / "run" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_eval_reports_single_mad(workspace, tmp_path, capsys):
    root, _ = workspace
    argv = ["eval", "--checkpoint", str(root / "run/checkpoint"), "--manifest", str(root / "d/manifest.jsonl"),
            "--scores", str(root / "d/hidden_scores.jsonl"), "--out", str(tmp_path)]
    assert main(argv) == 0
    mad_lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("MAD ")]
    assert len(mad_lines) == 1 and float(mad_lines[0].split()[1]) >= 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["mad_months"] >= 0 and len(report["roi_spearman"]) == 17
    assert (tmp_path / "roi_scores.csv").read_text().count("\n") == 1 + 17 * 64
    assert (tmp_path / "roi_scores.svg").read_text().startswith("<svg")


def test_eval_without_scores_skips_plots(workspace, tmp_path):
    root, _ = workspace
    assert main(["eval", "--checkpoint", str(root / "run/checkpoint"), "--manifest", str(root / "d/manifest.jsonl"),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "report.json").exists() and not (tmp_path / "roi_scores.svg").exists()


def test_predict_writes_records(workspace, tmp_path):
    root, _ = workspace
    assert main(["predict", "--checkpoint", str(root / "run/checkpoint"),
                 "--manifest", str(root / "d/manifest.jsonl"), "--out", str(tmp_path)]) == 0
    recs = [json.loads(ln) for ln in (tmp_path / "predictions.jsonl").read_text().splitlines()]
    assert len(recs) == 64
    assert all(abs(r["age"] - sum(r["weighted_scores"])) < 1e-9 for r in recs)
    assert set(recs[0]) == {"sample_id", "age", "scores", "weighted_scores", "feature_attention",
                            "context_attention"}


def test_ablate_writes_six_rows(workspace, tmp_path):
    root, _ = workspace
    argv = ["ablate", "--manifest", str(root / "d/manifest.jsonl"), "--out", str(tmp_path), "--epochs", "1",
            "--channels", "4", "--seeds", "0", "--batch-size", "16"]
    assert main(argv) == 0
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert len(lines) == 1 + 6
    assert lines[6].split(",")[2:5] == ["agconv", "1", "1"]


def test_inspect_prints_counts_and_schema(capsys):
    assert main(["inspect", "--channels", "8"]) == 0
    out = capsys.readouterr().out
    assert "head_plus_dgam" in out and "17 ROIs" in out and "group D: D1 D2" in out


def test_bad_path_exits_nonzero(tmp_path, capsys):
    assert main(["train", "--manifest", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o")]) != 0
    assert "missing.jsonl" in capsys.readouterr().err
    assert not (tmp_path / "o" / "checkpoint").exists()


def test_unknown_command_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code != 0
    assert "invalid choice" in capsys.readouterr().err


def test_parse_ablation():
    assert parse_ablation("agconv,pa,ca") == {"grouping": "agconv", "use_pa": True, "use_ca": True}
    assert parse_ablation("rgconv") == {"grouping": "rgconv", "use_pa": False, "use_ca": False}
    assert parse_ablation(None) == {}
    with pytest.raises(CliError):
        parse_ablation("agconv,rgconv")
    with pytest.raises(CliError):
        parse_ablation("attention")

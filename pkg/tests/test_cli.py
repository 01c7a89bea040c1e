"""End-to-end CLI coverage, run in process so exit codes and output are
directly observable."""

import os

import pytest

from alignrefine import cli
from alignrefine import harness as hz
from alignrefine import synthdata as sd
from alignrefine.alignkit import Vocab
from conftest import TINY_TASK

TINY_TOML = """\
master_seed = 5
[task]
num_labels = 6
feature_dim = 4
train_size = 40
dev_size = 12
test_size = 12
max_length = 5
[first_pass]
layers = 1
dim = 16
heads = 2
ffn_mult = 2
[refiner]
layers = 1
dim = 16
heads = 2
ffn_mult = 2
train_steps = 2
infer_steps = 2
[train_first_pass]
max_steps = 25
eval_interval = 10
warmup_steps = 5
batch_size = 4
[train_refiner]
max_steps = 8
eval_interval = 4
warmup_steps = 4
batch_size = 2
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny corpora plus both checkpoints, built through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "task.json"
    spec_path.write_text(sd.TaskSpec(**TINY_TASK).to_json())
    config = root / "exp.toml"
    config.write_text(TINY_TOML)
    data = root / "data"
    assert cli.main(["gen-data", "--spec", str(spec_path), "--out", str(data),
                     "--seed", "5"]) == 0
    fp_dir, ref_dir = root / "fp", root / "ref"
    assert cli.main(["train-first-pass", "--config", str(config),
                     "--data", str(data), "--out", str(fp_dir),
                     "--fixed-clock", "--quiet"]) == 0
    assert cli.main(["train-refiner", "--config", str(config),
                     "--data", str(data), "--out", str(ref_dir),
                     "--first-pass", str(fp_dir / "first_pass"),
                     "--fixed-clock", "--quiet"]) == 0
    return {
        "root": root,
        "config": str(config),
        "spec": str(spec_path),
        "data": str(data),
        "fp": str(fp_dir / "first_pass"),
        "ref": str(ref_dir / "refiner"),
    }


def test_no_arguments_prints_usage(capsys):
    assert cli.main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_bad_flags_exit_one(capsys):
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["gen-data", "--nope"]) == 1
    err = capsys.readouterr().err
    assert "error" in err


def test_config_default_flags_are_exclusive(pipeline, tmp_path, capsys):
    base = ["train-first-pass", "--data", pipeline["data"], "--out", str(tmp_path)]
    assert cli.main(base + ["--config", pipeline["config"], "--default"]) == 1
    assert "exactly one" in capsys.readouterr().err
    assert cli.main(base) == 1
    assert "exactly one" in capsys.readouterr().err


def test_gen_data_reports_and_reproduces(pipeline, tmp_path, capsys):
    for split in ("train", "dev", "test"):
        assert os.path.exists(os.path.join(pipeline["data"], f"{split}.tsv"))
    again = tmp_path / "again"
    assert cli.main(["gen-data", "--spec", pipeline["spec"], "--out", str(again),
                     "--seed", "5"]) == 0
    out = capsys.readouterr().out
    assert "train: 40 utterances, hash " in out
    for split in ("train", "dev", "test"):
        a = open(os.path.join(pipeline["data"], f"{split}.tsv"), "rb").read()
        b = open(again / f"{split}.tsv", "rb").read()
        assert a == b


def test_gen_data_rejects_bad_spec(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["gen-data", "--spec", str(bad), "--out", str(tmp_path / "d")]) == 1
    assert "bad task spec" in capsys.readouterr().err


def test_decode_report(pipeline, capsys):
    assert cli.main(["decode", "--first", pipeline["fp"], "--refiner",
                     pipeline["ref"], "--data", pipeline["data"],
                     "--split", "dev", "--utt", "dev-00003"]) == 0
    out = capsys.readouterr().out
    assert "utt dev-00003:" in out
    assert "ref      :" in out and "alignment:" in out
    assert "step 1   :" in out and "step 2   :" in out
    for line in out.splitlines():
        line = line.strip()
        if line and not line.startswith(("utt", "ref", "alignment", "first", "step")):
            assert line == "exact match" or line.startswith("S=")


def test_decode_without_refiner(pipeline, capsys):
    assert cli.main(["decode", "--first", pipeline["fp"], "--data",
                     pipeline["data"], "--split", "dev",
                     "--utt", "dev-00000"]) == 0
    out = capsys.readouterr().out
    assert "first    :" in out and "step 1" not in out


def test_decode_unknown_utterance(pipeline, capsys):
    assert cli.main(["decode", "--first", pipeline["fp"], "--data",
                     pipeline["data"], "--split", "dev",
                     "--utt", "dev-ec999"]) == 2
    assert "no utterance" in capsys.readouterr().err


def test_diff_line_markers():
    vocab = Vocab(6)
    assert cli._diff_line((1, 2), (1, 2), vocab) == "exact match"
    subbed = cli._diff_line((1, 2), (3, 2), vocab)
    assert subbed.startswith("S=1 I=0 D=0") and "[S 1->3]" in subbed
    dropped = cli._diff_line((1, 2), (1,), vocab)
    assert dropped.startswith("S=0 I=0 D=1") and "[D 2]" in dropped
    added = cli._diff_line((1,), (1, 2), vocab)
    assert added.startswith("S=0 I=1 D=0") and "[I 2]" in added


def test_evaluate_writes_csv_and_plot(pipeline, tmp_path, capsys):
    csv = tmp_path / "m.csv"
    svg = tmp_path / "wer.svg"
    assert cli.main(["evaluate", "--first", pipeline["fp"], "--refiner",
                     pipeline["ref"], "--data", pipeline["data"],
                     "--split", "dev", "--fixed-clock",
                     "--out", str(csv), "--plot", str(svg)]) == 0
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert lines[0] == hz.metrics_header(2)
    row = lines[1].split(",")
    assert row[1] == "dev" and row[-1] == "0.0"
    body = open(csv).read().splitlines()
    assert body[0] == hz.metrics_header(2) and len(body) == 2
    chart = open(svg).read()
    assert chart.startswith("<svg") and "dev WER by refinement step" in chart


def test_evaluate_plot_requires_refiner(pipeline, tmp_path, capsys):
    assert cli.main(["evaluate", "--first", pipeline["fp"], "--data",
                     pipeline["data"], "--split", "dev",
                     "--plot", str(tmp_path / "x.svg")]) == 1
    assert "--refiner" in capsys.readouterr().err


def test_evaluate_missing_data_exits_two(pipeline, tmp_path, capsys):
    assert cli.main(["evaluate", "--first", pipeline["fp"], "--data",
                     str(tmp_path / "nowhere"), "--split", "dev"]) == 2


def test_task_mismatch_detected(pipeline, tmp_path, capsys):
    other = sd.TaskSpec(**{**TINY_TASK, "max_length": 4})
    spec_path = tmp_path / "other.json"
    spec_path.write_text(other.to_json())
    data2 = tmp_path / "data2"
    assert cli.main(["gen-data", "--spec", str(spec_path), "--out", str(data2),
                     "--seed", "5"]) == 0
    assert cli.main(["train-first-pass", "--config", pipeline["config"],
                     "--data", str(data2), "--out", str(tmp_path / "fp2"),
                     "--quiet"]) == 1
    assert "does not match" in capsys.readouterr().err


def test_ablate_grid(pipeline, tmp_path, capsys):
    out = tmp_path / "abl"
    args = ["ablate", "--config", pipeline["config"], "--data", pipeline["data"],
            "--out", str(out), "--first-pass", pipeline["fp"],
            "--fixed-clock", "--quiet"]
    assert cli.main(args + ["--grid", "refiner.mask_prob=0,0.1"]) == 0
    table = open(out / "ablation.csv").read().splitlines()
    assert len(table) == 3
    assert table[0].startswith("config_id,step,")
    assert cli.main(args + ["--grid", "refiner.mask_prob"]) == 1
    assert cli.main(args + ["--grid", ";"]) == 1
    err = capsys.readouterr().err
    assert "grid" in err


def test_verify_suite_runs(capsys):
    assert cli.main(["verify", "--suite", "rnnt-oracle"]) == 0
    out = capsys.readouterr().out
    assert "overall: PASS" in out


def test_verify_unknown_suite(capsys):
    assert cli.main(["verify", "--suite", "mystery"]) == 1
    assert "unknown suite" in capsys.readouterr().err

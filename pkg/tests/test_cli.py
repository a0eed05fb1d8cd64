import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from sspo.cli import main
from sspo.model import ModelConfig, PolicyParams, load_checkpoint
from sspo.synth import TaskSpec, teacher_trace

FIX = Path(__file__).parent / "fixtures"
SMALL = ["--n-train", "64", "--n-val", "16", "--n-test", "16"]
MODEL = ["--enc-dim", "16", "--dec-dim", "16"]
# sha256 of sft_log.jsonl from the seed-0 reference run below, frozen once
REFERENCE_SFT_LOG = "44f96e2925e4a9ad463fcd15d91ab5bb75fa51f128f46ae415885834c3868b0e"


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--out-dir", d, *SMALL) == 0
    return d


@pytest.fixture(scope="module")
def sft_dir(tmp_path_factory, data_dir):
    d = tmp_path_factory.mktemp("sft")
    assert run("sft", "--data-dir", data_dir, "--out-dir", d, "--sft-epochs", 2, "--sft-lr", 2e-3, *MODEL) == 0
    return d


def test_gen_data_files_and_counts(data_dir):
    counts = {s: len((data_dir / f"{s}.jsonl").read_text().splitlines()) for s in ("train", "val", "test")}
    assert counts == {"train": 64, "val": 16, "test": 16}
    manifest = json.loads((data_dir / "gen_data_manifest.json").read_text())
    assert manifest["subcommand"] == "gen-data"
    assert manifest["outputs"]["train.jsonl"] == sha(data_dir / "train.jsonl")


def test_gen_data_default_counts(tmp_path):
    assert run("gen-data", "--out-dir", tmp_path) == 0
    assert len((tmp_path / "train.jsonl").read_text().splitlines()) == 2000


def test_gen_data_deterministic(tmp_path, data_dir):
    assert run("gen-data", "--out-dir", tmp_path, *SMALL) == 0
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "task.json"):
        assert sha(tmp_path / name) == sha(data_dir / name)


def test_gen_data_infeasible(tmp_path, capsys):
    assert run("gen-data", "--out-dir", tmp_path, "--min-labels", 9) == 1
    assert capsys.readouterr().err.startswith("error[config]:")


def test_clean_fixture(tmp_path, capsys):
    assert run("clean", "--input", FIX / "raw_10.jsonl", "--out-dir", tmp_path) == 0
    assert "7 kept" in capsys.readouterr().err
    assert (tmp_path / "clean.jsonl").read_bytes() == (FIX / "golden_clean.jsonl").read_bytes()
    assert json.loads((tmp_path / "clean_report.json").read_text())["kept"] == 7
    again = tmp_path / "again"
    assert run("clean", "--input", tmp_path / "clean.jsonl", "--out-dir", again) == 0
    assert sha(again / "clean.jsonl") == sha(tmp_path / "clean.jsonl")


def test_clean_errors(tmp_path, capsys):
    assert run("clean", "--input", tmp_path / "missing.jsonl", "--out-dir", tmp_path) == 1
    assert capsys.readouterr().err.startswith("error[input]:")
    assert run("clean", "--input", FIX / "raw_alias.jsonl", "--out-dir", tmp_path) == 1
    assert "waveform" in capsys.readouterr().err
    args = ["--alias", "av=conduction", "--alias", "waveform=morphology", "--alias", "summary=impression"]
    assert run("clean", "--input", FIX / "raw_alias.jsonl", "--out-dir", tmp_path, *args) == 0


def test_sft_outputs_and_reference_log(sft_dir):
    assert sha(sft_dir / "sft_log.jsonl") == REFERENCE_SFT_LOG
    report = json.loads((sft_dir / "sft_eval.json").read_text())
    assert {"micro_f1", "sample_f1", "ssv", "mean_structure"} <= set(report)
    params, extra = load_checkpoint(sft_dir / "sft.ckpt")
    assert extra["train_config"]["sft_epochs"] == 2
    assert params.cfg.enc_dim == 16


def test_sft_zero_epochs_is_initialization(tmp_path, data_dir):
    assert run("sft", "--data-dir", data_dir, "--out-dir", tmp_path, "--epochs", 0, "--skip-eval", *MODEL) == 0
    params, extra = load_checkpoint(tmp_path / "sft.ckpt")
    init = PolicyParams.init(ModelConfig(vocab_size=params.cfg.vocab_size, enc_dim=16, dec_dim=16))
    assert params.flatten().tobytes() == init.flatten().tobytes()
    assert extra["train_config"]["sft_epochs"] == 0


def test_sspo_requires_checkpoint(tmp_path, data_dir, capsys):
    with pytest.raises(SystemExit) as exc:
        run("sspo", "--data-dir", data_dir, "--out-dir", tmp_path)
    assert exc.value.code == 2
    assert run("sspo", "--data-dir", data_dir, "--out-dir", tmp_path, "--sft-checkpoint", tmp_path / "nope") == 1
    assert "error[input]" in capsys.readouterr().err


def _sspo(out, data_dir, sft_dir):
    return run("sspo", "--data-dir", data_dir, "--out-dir", out, "--sft-checkpoint", sft_dir / "sft.ckpt",
               "--rl-epochs", 1, "--rl-queries", 8, "--max-new", 40)


def test_sspo_deterministic(tmp_path, data_dir, sft_dir):
    assert _sspo(tmp_path / "a", data_dir, sft_dir) == 0
    assert _sspo(tmp_path / "b", data_dir, sft_dir) == 0
    for name in ("sspo.ckpt", "sspo_log.jsonl", "sspo_eval.json"):
        assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)
    log = [json.loads(l) for l in (tmp_path / "a" / "sspo_log.jsonl").read_text().splitlines()]
    assert len(log) == 2 and {"mean_total", "mean_struct", "mean_dice", "kl_mean"} <= set(log[0])
    m = json.loads((tmp_path / "a" / "sspo_manifest.json").read_text())
    assert m["config"]["rl_queries"] == 8
    assert m["outputs"]["sspo.ckpt"] == sha(tmp_path / "a" / "sspo.ckpt")


def test_eval_teacher_replay(tmp_path, data_dir, capsys):
    assert run("eval", "--data-dir", data_dir, "--out-dir", tmp_path, "--replay-teacher", "--judge", "stub") == 0
    report = json.loads((tmp_path / "eval_report.json").read_text())
    assert report["micro_f1"] == 1.0 and report["ssv"] == 100.0
    assert report["judge"] == {"ssv": 100.0, "gtfa": 50.0, "sd": 50.0, "dlc": 50.0, "es": 50.0}
    assert "micro" in capsys.readouterr().out


def test_eval_untrained_checkpoint(tmp_path, data_dir):
    init = tmp_path / "init"
    assert run("sft", "--data-dir", data_dir, "--out-dir", init, "--epochs", 0, "--skip-eval", *MODEL) == 0
    assert run("eval", "--data-dir", data_dir, "--out-dir", tmp_path, "--checkpoint", init / "sft.ckpt") == 0
    assert json.loads((tmp_path / "eval_report.json").read_text())["ssv"] < 50.0
    first = sha(tmp_path / "eval_report.json")
    assert run("eval", "--data-dir", data_dir, "--out-dir", tmp_path, "--checkpoint", init / "sft.ckpt") == 0
    assert sha(tmp_path / "eval_report.json") == first


def test_eval_needs_a_source(tmp_path, data_dir, capsys):
    assert run("eval", "--data-dir", data_dir, "--out-dir", tmp_path) == 1
    assert capsys.readouterr().err.startswith("error[input]:")


PERFECT = teacher_trace(["MI", "CD"], TaskSpec())


@pytest.mark.parametrize(
    "text,truth,expected",
    [
        (PERFECT, "MI,CD", ("1.0000", "1.0000", "2.0000")),
        ("<think><rhythm>a</rhythm></think>", "MI", (None, "0.0000", None)),
        (PERFECT, "MI,HYP", ("1.0000", "0.5000", "1.5000")),
    ],
)
def test_score_trace(tmp_path, capsys, text, truth, expected):
    f = tmp_path / "t.txt"
    f.write_text(text)
    assert run("score-trace", "--trace-file", f, "--truth", truth) == 0
    lines = dict(l.split() for l in capsys.readouterr().out.splitlines())
    for key, want in zip(("structure", "diagnosis", "total"), expected):
        if want is not None:
            assert lines[key] == want


def test_score_trace_stdin():
    out = subprocess.run([sys.executable, "-m", "sspo", "score-trace", "--truth", "MI,CD"], input=PERFECT,
                         capture_output=True, text=True, check=True)
    assert out.stdout.splitlines()[-1] == "total 2.0000"


def test_config_file_overrides_defaults(tmp_path, data_dir):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults for a quick run\nsft_epochs = 0\nskip-eval = true\nenc_dim=16\ndec_dim=16\n")
    assert run("sft", "--data-dir", data_dir, "--out-dir", tmp_path, "--config", cfg) == 0
    m = json.loads((tmp_path / "sft_manifest.json").read_text())
    assert m["config"]["sft_epochs"] == 0 and m["config"]["skip_eval"] is True
    # explicit flags beat the file
    assert run("sft", "--data-dir", data_dir, "--out-dir", tmp_path, "--config", cfg, "--sft-epochs", 1) == 0
    assert json.loads((tmp_path / "sft_manifest.json").read_text())["config"]["sft_epochs"] == 1
    cfg.write_text("bogus_key = 1\n")
    assert run("sft", "--data-dir", data_dir, "--out-dir", tmp_path, "--config", cfg) == 1


def test_inspect(tmp_path, sft_dir, data_dir, capsys):
    assert run("inspect", sft_dir / "sft.ckpt") == 0
    assert "parameters:" in capsys.readouterr().out
    assert run("inspect", data_dir) == 0
    assert json.loads(capsys.readouterr().out.splitlines()[0]) == {"train": 64, "val": 16, "test": 16}


def test_manifest_rerun_reproduces(tmp_path, data_dir):
    m = json.loads((data_dir / "gen_data_manifest.json").read_text())
    c = m["config"]
    assert run("gen-data", "--out-dir", tmp_path, "--seed", c["seed"], "--n-train", c["n_train"], "--n-val",
               c["n_val"], "--n-test", c["n_test"]) == 0
    again = json.loads((tmp_path / "gen_data_manifest.json").read_text())
    assert again["outputs"] == m["outputs"]

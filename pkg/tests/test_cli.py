import json
import subprocess
import sys

import pytest
import yaml

from conftest import write_copy_manifest
from mtlnmt.cli import EXIT_DATA, EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, build_parser, main
from mtlnmt.corpus import read_lines, write_lines
from mtlnmt.scheduling import TemperatureSchedule, pair_sampling_probs, temperature_at

TINY = dict(
    tasks=["MT", "MLM", "DAE"],
    vocab_size=60,
    batch_tokens=80,
    model=dict(layers_enc=1, layers_dec=1, d_model=16, d_ff=32, heads=2, dropout=0.0),
    optim=dict(accumulation=1, warmup_steps=5, peak_lr=3e-3, max_updates=6),
)


@pytest.fixture
def run_dir(tmp_path):
    manifest, sents = write_copy_manifest(tmp_path)
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(TINY))
    write_lines(tmp_path / "src.txt", sents[:4])
    return tmp_path


def test_help_lists_documented_flags(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for flag in ["prepare-data", "train", "backtranslate", "translate", "score-bleu", "inspect-schedule",
                 "run-experiment", "--manifest", "--config", "--seed", "--out", "--model", "--mono", "--src",
                 "--tgt-lang", "--beam", "--alpha", "--hyp", "--ref", "--workers", "--format", "--preset"]:
        assert flag in text, flag


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train"])
    assert e.value.code == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["inspect-schedule"]) == EXIT_USAGE
    assert main(["run-experiment", "--preset", "nope", "--out", "x"]) == EXIT_USAGE


def test_data_errors_exit_2(tmp_path, capsys):
    assert main(["score-bleu", "--hyp", str(tmp_path / "missing"), "--ref", str(tmp_path / "missing")]) == EXIT_DATA
    write_lines(tmp_path / "h", ["a", "b"])
    write_lines(tmp_path / "r", ["a"])
    assert main(["score-bleu", "--hyp", str(tmp_path / "h"), "--ref", str(tmp_path / "r")]) == EXIT_DATA
    (tmp_path / "bad.yaml").write_text("format: other/1\n")
    assert main(["prepare-data", "--manifest", str(tmp_path / "bad.yaml"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_score_bleu(tmp_path, capsys):
    write_lines(tmp_path / "h", ["the cat on the mat"])
    write_lines(tmp_path / "r", ["the cat sat on the mat"])
    assert main(["score-bleu", "--hyp", str(tmp_path / "h"), "--ref", str(tmp_path / "r"), "--json"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["score"] == pytest.approx(40.9365, abs=1e-3)


def test_inspect_schedule_machine_readable(capsys):
    assert main(["inspect-schedule", "--sizes", "a=9,b=1", "--epochs", "7", "--format", "json"]) == EXIT_OK
    rows = json.loads(capsys.readouterr().out)
    s = TemperatureSchedule(1, 5, 5)
    for r in rows:
        assert r["T"] == temperature_at(s, r["k"])
        assert r["p[a]"] == pair_sampling_probs({"a": 9, "b": 1}, r["T"])["a"]
    assert main(["inspect-schedule", "--sizes", "a=9,b=1", "--format", "tsv"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split("\t")[0] == "k" and len(lines) == 11


def test_inspect_schedule_matches_training_log(run_dir, capsys):
    out = run_dir / "run"
    assert main(["train", "--manifest", str(run_dir / "manifest.yaml"), "--config", str(run_dir / "cfg.yaml"),
                 "--seed", "1", "--out", str(out), "--updates", "30"]) == EXIT_OK
    capsys.readouterr()
    log = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    epochs = max(r["k"] for r in log)
    assert main(["inspect-schedule", "--manifest", str(run_dir / "manifest.yaml"), "--config", str(out / "config.yaml"),
                 "--epochs", str(epochs), "--format", "json"]) == EXIT_OK
    table = {r["k"]: r for r in json.loads(capsys.readouterr().out)}
    for r in log:
        assert r["T"] == table[r["k"]]["T"]
        assert r["R_dae"] == table[r["k"]]["R_dae"]


def test_prepare_train_translate_backtranslate(run_dir, capsys):
    m = str(run_dir / "manifest.yaml")
    assert main(["prepare-data", "--manifest", m, "--out", str(run_dir / "prep"), "--vocab-size", "60",
                 "--workers", "2", "--dump-noised", "2"]) == EXIT_OK
    stats = json.loads((run_dir / "prep" / "stats.json").read_text())
    assert stats["pairs"] == {"xx-en": 40}
    noised = [json.loads(l) for l in read_lines(run_dir / "prep" / "noised.jsonl")]
    assert {n["task"] for n in noised} == {"MLM", "DAE"}

    out = run_dir / "run"
    assert main(["train", "--manifest", m, "--config", str(run_dir / "cfg.yaml"), "--seed", "0", "--out", str(out),
                 "--vocab", str(run_dir / "prep" / "vocab.txt"), "--valid", f"xx-en:{run_dir}/src.txt:{run_dir}/src.txt",
                 "--eval-every", "3"]) == EXIT_OK
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 6
    ckpt = str(out / "checkpoint_last.pt")
    capsys.readouterr()
    assert main(["translate", "--model", ckpt, "--src", str(run_dir / "src.txt"), "--tgt-lang", "en",
                 "--beam", "2", "--out", str(run_dir / "hyp.txt")]) == EXIT_OK
    assert len(read_lines(run_dir / "hyp.txt")) == 4
    assert main(["translate", "--model", ckpt, "--src", str(run_dir / "src.txt"), "--tgt-lang", "zz"]) == EXIT_USAGE
    assert main(["backtranslate", "--model", ckpt, "--mono", str(run_dir / "src.txt"), "--out", str(run_dir / "bt"),
                 "--mono-lang", "en", "--synth-lang", "xx", "--beam", "1"]) == EXIT_OK
    counts = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert counts["pairs"] + counts["skipped"] == 4
    assert len(read_lines(run_dir / "bt.en")) == counts["pairs"]


def test_train_resume_cli_matches_uninterrupted(run_dir):
    m = str(run_dir / "manifest.yaml")
    cfg = str(run_dir / "cfg.yaml")
    assert main(["train", "--manifest", m, "--config", cfg, "--seed", "2", "--out", str(run_dir / "full"),
                 "--updates", "8"]) == EXIT_OK
    assert main(["train", "--manifest", m, "--config", cfg, "--seed", "2", "--out", str(run_dir / "part"),
                 "--updates", "4"]) == EXIT_OK
    assert main(["train", "--manifest", m, "--config", cfg, "--out", str(run_dir / "part"),
                 "--resume", str(run_dir / "part" / "checkpoint_last.pt"), "--updates", "8"]) == EXIT_OK
    assert (run_dir / "full" / "metrics.jsonl").read_bytes() == (run_dir / "part" / "metrics.jsonl").read_bytes()


def test_config_precedence(tmp_path):
    from mtlnmt.cli import build_train_config

    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"batch_tokens": 77, "optim": {"max_updates": 5}}))
    cfg = build_train_config("toy-mtl", str(tmp_path / "c.yaml"), 0, None)
    assert cfg.batch_tokens == 77 and cfg.optim.max_updates == 5
    assert cfg.tasks == ("MT", "MLM", "DAE")
    cfg = build_train_config("toy-mtl", str(tmp_path / "c.yaml"), 0, 9)
    assert cfg.optim.max_updates == 9


def test_run_experiment_threshold_exit(tmp_path, monkeypatch, capsys):
    import mtlnmt.experiments as ex

    fake = {"toy-baseline": 0.50, "toy-mtl": 0.51}

    def fake_run(name, seed, out_dir=None, updates=None):
        return {"preset": name, "seed": seed, "focus_valid_acc": fake[name]}

    monkeypatch.setattr(ex, "run_experiment", fake_run)
    assert main(["run-experiment", "--preset", "toy-mtl", "--out", str(tmp_path)]) == EXIT_THRESHOLD
    fake["toy-mtl"] = 0.60
    assert main(["run-experiment", "--preset", "toy-mtl", "--out", str(tmp_path)]) == EXIT_OK
    assert "toy-baseline" in (tmp_path / "summary.txt").read_text()


def test_console_script_exit_code(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mtlnmt.cli", "score-bleu", "--hyp", str(tmp_path / "x"),
                        "--ref", str(tmp_path / "y")], capture_output=True, text=True)
    assert r.returncode == EXIT_DATA
    assert "data error" in r.stderr


def test_parser_builds():
    assert "run-experiment" in build_parser().format_help()


def test_train_presets_selectable():
    from mtlnmt.cli import build_train_config

    large = build_train_config("large", None, 0, None)
    assert large.model["d_model"] == 1024 and large.optim.accumulation == 16 and large.batch_tokens == 4096
    desk = build_train_config("desk", None, 0, 7)
    assert desk.model["d_model"] == 64 and desk.optim.max_updates == 7
    assert desk.mlm_schedule.Rm == 0.20 and desk.dae_schedule.Rm == 0.40

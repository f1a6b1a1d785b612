import json

import pytest

from lyric_transfer.__main__ import build_parser, main
from lyric_transfer.lib.config import RUN_METADATA_FILE


def last_error_record(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def transcripts(tmp_path):
    ref, hyp = tmp_path / "ref.txt", tmp_path / "hyp.txt"
    ref.write_text("a\tLA\nb\tOH OH OH OH OH OH OH OH OH\n", encoding="utf-8")
    hyp.write_text("a\tLA\nb\t\n", encoding="utf-8")
    return ref, hyp


def test_every_subcommand_is_registered():
    subparsers = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(subparsers.choices) == {"normalize", "segment", "stats", "subset", "dedup", "pretrain", "finetune",
                                       "transfer", "lm-train", "decode", "eval", "synth", "ablate"}


def test_bad_flag_value_is_rejected_by_argparse():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["decode", "--checkpoint", "m", "--manifest", "x", "--profile", "unknown"])


def test_eval_prints_both_conventions_and_records_the_run(transcripts, tmp_path, capsys):
    ref, hyp = transcripts
    out = tmp_path / "run"
    assert main(["eval", "--ref", str(ref), "--hyp", str(hyp), "--output-dir", str(out), "--seed", "3"]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed == ["WER (utterance-averaged): 0.5000", "WER (pooled): 0.9000"]
    metadata = json.loads((out / RUN_METADATA_FILE).read_text(encoding="utf-8"))
    assert metadata["command"] == "eval"
    assert metadata["seed"] == 3
    assert set(metadata["inputs"]) == {str(ref), str(hyp)}
    assert (out / "wer.csv").is_file()


def test_config_error_exits_2_with_json_record(transcripts, tmp_path, capsys):
    ref, hyp = transcripts
    code = main(["eval", "--ref", str(ref), "--hyp", str(hyp), "--output-dir", str(tmp_path),
                 "--set", "decode.lambda_b=2"])
    assert code == 2
    record = last_error_record(capsys)
    assert record["error"] == "ConfigError"
    assert record["key"] == "decode.lambda_b"


def test_missing_config_file(transcripts, tmp_path, capsys):
    ref, hyp = transcripts
    code = main(["eval", "--ref", str(ref), "--hyp", str(hyp), "--output-dir", str(tmp_path),
                 "--config", str(tmp_path / "absent.json")])
    assert code == 2
    assert last_error_record(capsys)["key"] == "config"


def test_negative_seed_is_a_config_error(transcripts, tmp_path, capsys):
    ref, hyp = transcripts
    assert main(["eval", "--ref", str(ref), "--hyp", str(hyp), "--output-dir", str(tmp_path), "--seed", "-1"]) == 2
    assert last_error_record(capsys)["key"] == "seed"


def test_unexpected_failure_exits_1(tmp_path, capsys):
    code = main(["eval", "--ref", str(tmp_path / "missing.txt"), "--hyp", str(tmp_path / "missing.txt"),
                 "--output-dir", str(tmp_path)])
    assert code == 1
    assert last_error_record(capsys)["error"] == "FileNotFoundError"


def test_normalize_files(fixtures_dir, tmp_path):
    output = tmp_path / "normalized.txt"
    code = main(["normalize", "--input", str(fixtures_dir / "normalize_input.txt"), "--output", str(output),
                 "--mark-dropped", "--output-dir", str(tmp_path)])
    assert code == 0
    assert output.read_text(encoding="utf-8") == (fixtures_dir / "normalize_expected.txt").read_text(encoding="utf-8")


def test_synth_then_stats(tmp_path, capsys):
    out = tmp_path / "corpus"
    assert main(["synth", "--output-dir", str(out), "--dataset", "toy",
                 "--set", 'synth.splits={"train": 3}', "--set", "synth.lm_lines=0"]) == 0
    assert (out / "train.jsonl").is_file()
    capsys.readouterr()
    assert main(["stats", str(out / "train.jsonl"), "--output-dir", str(tmp_path / "stats")]) == 0
    assert "toy/train" in capsys.readouterr().out

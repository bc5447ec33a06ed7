import json

import pytest

from numcode import cli
from numcode import experiment as ex
from numcode.synthdrive import make_split, read_jsonl, write_jsonl

SMALL = ["--steps", "3", "--n-train", "6", "--n-test", "3"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_config_precedence_and_aliases(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# comment\ntask = traj\nlambda = 0.5\nsteps = 7\nencoding = xval\n")
    cfg = ex.resolve_config(ex.read_config_file(f), {"steps": 9, "seed": None})
    assert (cfg.task, cfg.lam, cfg.steps, cfg.variant) == ("traj", 0.5, 9, "xval")
    assert cfg.config_hash() == ex.resolve_config(ex.read_config_file(f), {"steps": 9}).config_hash()
    assert cfg.config_hash() != ex.resolve_config(ex.read_config_file(f)).config_hash()


@pytest.mark.parametrize("values", [
    {"variant": "text", "encoding": "drivecode"},
    {"task": "lanes"},
    {"bogus": 1},
    {"steps": "many"},
    {"task": "speed", "task_kind": "trajectory"},
    {"d": 30},
    {"lam": -1},
])
def test_config_errors(values):
    with pytest.raises(ex.ConfigError):
        ex.resolve_config(values)


def test_bad_config_line(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("steps 5\n")
    with pytest.raises(ex.ConfigError, match="c.cfg:1"):
        ex.read_config_file(f)


def test_cli_config_error_exit_code(capsys):
    code, _, err = run(capsys, "train", "--variant", "text", "--encoding", "drivecode")
    assert code == 2 and err.startswith("error:")


def test_data_error_names_line_and_dialogue(tmp_path):
    train_path, _ = make_split(3, 1, 0, tmp_path)
    recs = read_jsonl(train_path)
    recs[1]["turns"][0]["text"] += " <number_token> 4"
    bad = tmp_path / "bad.jsonl"
    write_jsonl(bad, recs)
    with pytest.raises(ex.DataError, match=r"bad.jsonl:2: dialogue 'speed-train-1'"):
        ex.prepare_examples(ex.load_records(bad), "drivecode", ex.CharVocab(), str(bad))
    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"id": 1}\n{nope\n')
    with pytest.raises(ex.DataError, match="broken.jsonl:2"):
        ex.load_records(broken)


def test_pipeline_end_to_end(tmp_path, capsys):
    data, run_dir = tmp_path / "data", tmp_path / "run"
    assert run(capsys, "gen-data", "--task", "copy", *SMALL, "--out-dir", str(data))[0] == 0
    code, out, _ = run(capsys, "train", "--task", "copy", *SMALL, "--data", str(data / "train.jsonl"),
                       "--out-dir", str(run_dir))
    assert code == 0
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["n_examples"] == 6 and manifest["config"]["steps"] == 3
    assert len((run_dir / "loss.csv").read_text().splitlines()) == 4

    code, _, _ = run(capsys, "generate", "--checkpoint", str(run_dir), "--data", str(data / "test.jsonl"),
                     "--max-steps", "8", "--out-dir", str(tmp_path / "gen"))
    assert code == 0
    preds = read_jsonl(tmp_path / "gen" / "predictions.jsonl")
    assert len(preds) == 3 and all(p["steps"] <= 8 for p in preds)

    code, out, _ = run(capsys, "eval", "--pred", str(tmp_path / "gen" / "predictions.jsonl"),
                       "--data", str(data / "test.jsonl"), "--out-dir", str(tmp_path / "ev"))
    assert code == 0
    assert json.loads(out)["fields"][0]["n"] == 3


def test_eval_ground_truth_scores_perfectly(tmp_path, capsys):
    _, test_path = make_split(1, 5, 2, tmp_path, task="traj")
    code, out, _ = run(capsys, "eval", "--pred", str(test_path), "--data", str(test_path),
                       "--out-dir", str(tmp_path / "ev"))
    assert code == 0
    for f in json.loads(out)["fields"]:
        assert f["mae"] == 0.0 and f["A_0.1"] == 100.0


def test_eval_counts_parse_failures():
    recs = [{"id": "a", "task": "speed", "turns": [{"role": "assistant", "text": "speed 4.00 m/s"}]}]
    rep = ex.evaluate([{"id": "a", "text": "no idea"}], recs, "speed")
    assert rep.notes["parse_failures"] == 1
    assert rep.fields[0].mae == 4.0


def test_compare_writes_four_rows(tmp_path, capsys):
    code, out, _ = run(capsys, "compare", "--task", "copy", "--steps", "2", "--n-train", "4",
                       "--n-test", "2", "--max-steps", "4", "--out-dir", str(tmp_path))
    assert code == 0
    rows = json.loads(out)["rows"]
    assert [r["variant"] for r in rows] == ["drivecode", "variant", "text", "xval"]
    assert len((tmp_path / "compare.csv").read_text().splitlines()) == 5


def test_bench_identity(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--task", "traj", "--n", "5", "--out-dir", str(tmp_path))
    assert code == 0
    rows = {r["variant"]: r for r in json.loads(out)["rows"]}
    assert all(r["identity_ok"] for r in rows.values())
    assert rows["drivecode"]["numeric_steps"] == 30
    assert rows["text"]["numeric_steps"] == rows["text"]["formatted_digit_steps"]


def test_manifest_replay_reproduces_config(tmp_path, capsys):
    run(capsys, "train", "--task", "copy", *SMALL, "--seed", "4", "--out-dir", str(tmp_path / "a"))
    run(capsys, "train", "--config", str(tmp_path / "a" / "manifest.json"), "--out-dir", str(tmp_path / "b"))
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a["config_hash"] == b["config_hash"]
    assert a["checkpoint_checksum"] == b["checkpoint_checksum"]


def test_corrupt_checkpoint_reported(tmp_path, capsys):
    run(capsys, "train", "--task", "copy", *SMALL, "--out-dir", str(tmp_path))
    ckpt = tmp_path / "model.ckpt"
    raw = bytearray(ckpt.read_bytes())
    raw[-20] ^= 0x01
    ckpt.write_bytes(bytes(raw))
    code, _, err = run(capsys, "generate", "--checkpoint", str(tmp_path), "--out-dir", str(tmp_path / "g"))
    assert code == 2 and "checksum" in err.lower()

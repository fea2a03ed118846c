import json
import os
from pathlib import Path

import numpy as np
import pytest

from protodet import cli, detector
from protodet.data import manifest_digest


SPEC_SMALL = {"image_size": 128, "n_objects": [1, 2],
              "size_ranges": {"small": [12, 20], "medium": [36, 56]},
              "bucket_weights": {"small": 0.5, "medium": 0.5}}


def run(argv):
    with pytest.raises(SystemExit) as e:
        cli.main(argv)
    return e.value.code


def make_dataset(tmp_path, count=3, test_count=2):
    tmp_path.mkdir(parents=True, exist_ok=True)
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(SPEC_SMALL))
    root = tmp_path / "data"
    code = run(["synth", "--out", str(root), "--seed", "5",
                "--count", str(count), "--test-count", str(test_count),
                "--spec", str(spec_path)])
    assert code == 0
    return root


def train_tiny(tmp_path, root, out_name="run", extra=()):
    out = tmp_path / out_name
    code = run(["train", "--dataset", str(root), "--out", str(out),
                "--epochs", "1", "--batch-size", "2", *extra])
    assert code == 0
    return out


# --- usage errors --------------------------------------------------------------

def test_no_subcommand_usage_error():
    assert run([]) == 1


def test_unknown_subcommand_usage_error():
    assert run(["frobnicate"]) == 1


def test_missing_required_flag_usage_error():
    assert run(["synth"]) == 1


def test_missing_spec_file_usage_error(tmp_path):
    assert run(["synth", "--out", str(tmp_path / "d"),
                "--spec", str(tmp_path / "nope.json")]) == 1


# --- synth ----------------------------------------------------------------------

def test_synth_deterministic_digest(tmp_path, capsys):
    a = make_dataset(tmp_path / "a")
    b = make_dataset(tmp_path / "b")
    assert manifest_digest(a) == manifest_digest(b)


def test_synth_refuses_non_empty_dir(tmp_path):
    root = make_dataset(tmp_path)
    spec_path = tmp_path / "spec.json"
    assert run(["synth", "--out", str(root), "--spec", str(spec_path)]) == 1
    assert run(["synth", "--out", str(root), "--spec", str(spec_path),
                "--force"]) == 0


def test_synth_writes_fog_and_dark_splits(tmp_path):
    root = make_dataset(tmp_path)
    manifest = json.loads((root / "manifest.json").read_text())
    assert set(manifest["splits"]) == {"train", "test", "train_fog", "test_fog",
                                       "train_dark", "test_dark"}
    assert manifest["splits"]["train_fog"]["degradation"]["kind"] == "fog"
    assert (root / "resolved_config.json").exists()


def test_synth_unknown_spec_keys_rejected(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({"image_sizee": 128}))
    assert run(["synth", "--out", str(tmp_path / "d"),
                "--spec", str(spec_path)]) == 2


# --- fog ------------------------------------------------------------------------

def test_fog_command_adds_split(tmp_path):
    root = make_dataset(tmp_path)
    assert run(["fog", "--dataset", str(root), "--split", "test",
                "--fog-beta", "0.2"]) == 0
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["splits"]["test_fog"]["degradation"]["beta"] == 0.2


# --- train ----------------------------------------------------------------------

def test_train_writes_outputs(tmp_path):
    root = make_dataset(tmp_path)
    out = train_tiny(tmp_path, root)
    assert (out / "checkpoint.json").exists()
    assert (out / "checkpoint.bin").exists()
    assert (out / "resolved_config.json").exists()
    lines = [json.loads(x) for x in
             (out / "train_log.jsonl").read_text().splitlines()]
    assert {x["component"] for x in lines} >= {"total", "cls", "reg", "dfl"}


def test_train_missing_dataset_exit_2(tmp_path):
    assert run(["train", "--dataset", str(tmp_path / "none"),
                "--out", str(tmp_path / "o")]) == 2


def test_train_unknown_config_key_exit_2(tmp_path):
    root = make_dataset(tmp_path)
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"learning_rat": 0.1}))
    assert run(["train", "--dataset", str(root), "--out", str(tmp_path / "o"),
                "--config", str(bad)]) == 2


def test_train_ablation_flags(tmp_path):
    root = make_dataset(tmp_path)
    out = train_tiny(tmp_path, root, "ablate",
                     extra=["--no-rpc", "--no-pr", "--no-splgs"])
    cfg = json.loads((out / "resolved_config.json").read_text())["train_config"]
    assert (cfg["use_rpc"], cfg["use_pr"], cfg["use_splgs"]) \
        == (False, False, False)
    lines = [json.loads(x) for x in
             (out / "train_log.jsonl").read_text().splitlines()]
    assert all(x["value"] == 0.0 for x in lines if x["component"].startswith("rpc"))


def test_train_resume_continues_steps(tmp_path):
    root = make_dataset(tmp_path)
    out = train_tiny(tmp_path, root)
    first = [json.loads(x)["step"] for x in
             (out / "train_log.jsonl").read_text().splitlines()]
    out2 = tmp_path / "resumed"
    code = run(["train", "--dataset", str(root), "--out", str(out2),
                "--epochs", "1", "--batch-size", "2",
                "--resume", str(out / "checkpoint")])
    assert code == 0
    steps = [json.loads(x)["step"] for x in
             (out2 / "train_log.jsonl").read_text().splitlines()]
    assert min(steps) == max(first) + 1


def test_train_reproducible_bit_exact(tmp_path):
    root = make_dataset(tmp_path)
    a = train_tiny(tmp_path, root, "runa")
    b = train_tiny(tmp_path, root, "runb")
    assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()
    assert (a / "train_log.jsonl").read_text() == (b / "train_log.jsonl").read_text()


# --- eval -----------------------------------------------------------------------

def zero_checkpoint(tmp_path, image_size=128):
    cfg = detector.TrainConfig(image_size=image_size)
    params = detector.init_params(cfg)
    for name, t in params.items():
        if not name.endswith(".proto"):   # keep prototype rows non-zero
            t.data = np.zeros_like(t.data)
    prefix = str(tmp_path / "zero")
    detector.save_checkpoint(prefix, params, cfg)
    return prefix


def test_eval_zero_model_auc_half(tmp_path):
    root = make_dataset(tmp_path)
    prefix = zero_checkpoint(tmp_path)
    out = tmp_path / "eval"
    assert run(["eval", "--checkpoint", prefix, "--dataset", str(root),
                "--split", "test", "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["auc_ft"] == pytest.approx(0.5)  # all scores tie at 0.5
    assert metrics["map50"] == 0.0
    csv_text = (out / "per_class.csv").read_text()
    assert csv_text.splitlines()[0] == "class,ap50"


def test_eval_missing_checkpoint_exit_2(tmp_path):
    root = make_dataset(tmp_path)
    assert run(["eval", "--checkpoint", str(tmp_path / "nope"),
                "--dataset", str(root), "--out", str(tmp_path / "e")]) == 2


def test_eval_level_flag(tmp_path):
    root = make_dataset(tmp_path)
    prefix = zero_checkpoint(tmp_path)
    out = tmp_path / "eval1"
    assert run(["eval", "--checkpoint", prefix, "--dataset", str(root),
                "--split", "test", "--out", str(out), "--level", "1"]) == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["level"] == 1


# --- visualize --------------------------------------------------------------------

def test_visualize_outputs_and_determinism(tmp_path):
    root = make_dataset(tmp_path)
    prefix = zero_checkpoint(tmp_path)
    out = tmp_path / "viz"
    argv = ["visualize", "--checkpoint", prefix, "--dataset", str(root),
            "--split", "test", "--index", "0", "--class-index", "1",
            "--out", str(out)]
    assert run(argv) == 0
    pgms = sorted(p.name for p in out.glob("*.pgm"))
    assert pgms == ["response_class1_level1.pgm", "response_class1_level2.pgm",
                    "response_class1_level3.pgm", "saliency_class1.pgm"]
    assert (out / "overlay_class1.ppm").exists()
    # zero model -> constant 0.5 scores -> uniform gray
    raw = (out / "saliency_class1.pgm").read_bytes()
    body = raw[raw.index(b"255\n") + 4:]
    assert set(body) == {128}
    before = {p.name: p.read_bytes() for p in out.iterdir()}
    assert run(argv) == 0
    after = {p.name: p.read_bytes() for p in out.iterdir()}
    assert before == after


def test_visualize_bad_class_lists_valid(tmp_path, capsys):
    root = make_dataset(tmp_path)
    prefix = zero_checkpoint(tmp_path)
    assert run(["visualize", "--checkpoint", prefix, "--dataset", str(root),
                "--split", "test", "--class-index", "9",
                "--out", str(tmp_path / "v")]) == 2
    err = capsys.readouterr().err
    assert "[1, 2, 3]" in err


# --- self-check commands -------------------------------------------------------------

def test_check_grads_command(capsys):
    assert run(["check-grads", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_oracle_command(capsys):
    assert run(["oracle", "--trials", "50"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2


# --- golden checkpoint -------------------------------------------------------

GOLDEN = Path(__file__).parent / "golden"


def test_eval_reproduces_golden_metrics(tmp_path):
    # the golden dataset is fully determined by these synth arguments
    root = tmp_path / "data"
    assert run(["synth", "--out", str(root), "--seed", "5",
                "--count", "6", "--test-count", "4"]) == 0
    out = tmp_path / "eval"
    assert run(["eval", "--checkpoint", str(GOLDEN / "checkpoint"),
                "--dataset", str(root), "--out", str(out)]) == 0
    got = json.loads((out / "metrics.json").read_text())
    want = json.loads((GOLDEN / "metrics.json").read_text())
    assert set(got) == set(want)
    for key, ref in want.items():
        if isinstance(ref, dict):
            assert set(got[key]) == set(ref)
            for k2, v2 in ref.items():
                assert abs(got[key][k2] - v2) < 1e-6
        else:
            assert abs(got[key] - ref) < 1e-6

import json

import numpy as np
import pytest

from recurvsr import data as D
from recurvsr.cli import MANIFEST_NAME, main

TINY = ["--set", "model.base_channels=4", "--set", "model.channel_multipliers=[1,2]", "--set", "model.num_groups=2",
        "--set", "total_epochs=1", "--set", "max_steps_per_epoch=2", "--set", "lr=1e-3",
        "--set", "ae_steps=2", "--set", "denoiser_steps=2"]


def stderr_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def manifest(d):
    return [json.loads(line) for line in (d / MANIFEST_NAME).read_text().splitlines()]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scenes = root / "scenes.json"
    scenes.write_text(json.dumps({"sampler": {"height": 32, "width": 32, "num_frames": 8, "sprite_size": [8, 14]}}))
    assert main(["gen-data", "--scenes", str(scenes), "--out", str(root / "data"), "--count", "2", "--seed", "3"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--seed", "1"] + TINY) == 0
    return root


def test_gen_data_layout_and_manifest(run):
    clips = D.list_clip_dirs(run / "data")
    assert [c.name for c in clips] == ["clip_000", "clip_001"]
    tc = D.load_training_clip(clips[0])
    assert tc.hr.frames.shape == (8, 32, 32, 3) and tc.lr.frames.shape == (8, 8, 8, 3)
    rec = manifest(run / "data")[-1]
    assert rec["command"] == "gen-data" and rec["exit_code"] == 0 and rec["seed"] == 3


def test_train_writes_checkpoint_and_resolved_config(run):
    cfg = json.loads((run / "run" / "config.json").read_text())
    assert cfg["train"]["seed"] == 1 and cfg["model"]["base_channels"] == 4
    assert (run / "run" / "ckpt_epoch_0001" / "state.pt").exists()
    rec = manifest(run / "run")[-1]
    assert rec["config"]["train"]["max_steps_per_epoch"] == 2
    steps = [json.loads(x) for x in (run / "run" / "metrics.jsonl").read_text().splitlines()[1:]]
    assert len(steps) == 1 and all("loss_total" in s for s in steps)


def test_infer_eval_profile_pipeline(run, capsys):
    assert main(["infer", "--ckpt", str(run / "run"), "--in", str(run / "data"), "--out", str(run / "sr")]) == 0
    sr = D.load_clip(run / "sr" / "clip_000")
    assert sr.frames.shape == (8, 32, 32, 3)
    out = run / "eval" / "report.json"
    assert main(["eval", "--sr", str(run / "sr"), "--gt", str(run / "data"), "--use-gt-flows",
                 "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert len(report["clips"]) == 2 and report["clips"][0]["flow_source"] == "ground-truth"
    assert (run / "eval" / "summary.csv").read_text().count("\n") == 3
    single = run / "eval" / "one.json"
    assert main(["eval", "--sr", str(run / "sr" / "clip_000"), "--gt", str(run / "data" / "clip_000"),
                 "--quantize8", "--out", str(single)]) == 0
    assert json.loads(single.read_text())["clip_id"] == "clip_000"
    assert main(["profile", "--clip", str(run / "sr" / "clip_000"), "--row", "5",
                 "--out", str(run / "eval" / "prof.png")]) == 0
    assert (run / "eval" / "prof.png").exists()
    assert [r["command"] for r in manifest(run / "eval")] == ["eval", "eval", "profile"]


def test_non_recurrent_inference_differs(run):
    a, b = run / "sr_rec", run / "sr_tf"
    clip = str(run / "data" / "clip_001")
    assert main(["infer", "--ckpt", str(run / "run"), "--in", clip, "--out", str(a)]) == 0
    assert main(["infer", "--ckpt", str(run / "run"), "--in", clip, "--out", str(b), "--no-recurrent"]) == 0
    assert not np.array_equal(D.load_clip(a).frames, D.load_clip(b).frames)


def test_resume_finished_run_is_noop(run):
    before = (run / "run" / "metrics.jsonl").read_bytes()
    assert main(["train", "--data", str(run / "data"), "--out", str(run / "run"), "--resume", str(run / "run")]) == 0
    assert (run / "run" / "metrics.jsonl").read_bytes() == before
    rec = manifest(run / "run")[-1]
    assert rec["config"]["model"]["base_channels"] == 4


def test_missing_data_exit_2(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert stderr_json(capsys)["exit_code"] == 2


def test_empty_data_dir_exit_2(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o"), "--no-latent-disc"]) == 2
    assert stderr_json(capsys)["error"] == "ContractError"


def test_unknown_override_exit_2(run, tmp_path, capsys):
    assert main(["train", "--data", str(run / "data"), "--out", str(tmp_path / "o"), "--set", "bogus=1"]) == 2
    assert "bogus" in stderr_json(capsys)["message"]


def test_bad_config_json_exit_2(run, tmp_path, capsys):
    bad = tmp_path / "c.json"
    bad.write_text("{nope")
    assert main(["train", "--config", str(bad), "--data", str(run / "data"), "--out", str(tmp_path / "o")]) == 2


def test_indivisible_input_reports_padding(run, tmp_path, capsys):
    D.save_clip(D.VideoClip(np.zeros((3, 10, 8, 3), np.float32)), tmp_path / "odd")
    assert main(["infer", "--ckpt", str(run / "run"), "--in", str(tmp_path / "odd"), "--out", str(tmp_path / "o")]) == 2
    err = stderr_json(capsys)
    assert err["pad_rows"] == 2 and err["pad_cols"] == 0 and err["required_multiple"] == 4


def test_eval_frame_count_mismatch_exit_2(run, tmp_path, capsys):
    D.save_clip(D.VideoClip(np.zeros((3, 32, 32, 3), np.float32)), tmp_path / "short")
    code = main(["eval", "--sr", str(tmp_path / "short"), "--gt", str(run / "data" / "clip_000"),
                 "--out", str(tmp_path / "r.json")])
    assert code == 2 and stderr_json(capsys)["error"] == "ContractError"

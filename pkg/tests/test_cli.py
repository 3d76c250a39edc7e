import json
import os

import numpy as np
import pytest

from scanpose import cli, evalsim, pipeline, training


def tiny_config_doc(**kw):
    doc = {
        "seed": 7,
        "num_scenes": 3,
        "scene": {"num_actors": 1, "num_cameras": 3, "image_width": 64,
                  "image_height": 48, "num_joints": 6, "feature_dim": 8,
                  "joint_noise_mm": 60.0},
        "pipeline": {"num_layers": 1, "num_tokens": 6, "num_points": 2,
                     "d_state": 2, "head_hidden": 8, "ffn_hidden": 8},
        "train": {"steps": 4, "learning_rate": 1e-3, "val_fraction": 0.34},
    }
    doc.update(kw)
    return doc


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def run(argv):
    return cli.main(argv)


def test_generate_is_idempotent_per_seed(tmp_path):
    cfg = write_config(tmp_path, tiny_config_doc())
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    assert run(["generate", "--config", cfg, "--out", str(out1)]) == 0
    assert run(["generate", "--config", cfg, "--out", str(out2)]) == 0
    m1 = (out1 / "scenes_manifest.json").read_bytes()
    m2 = (out2 / "scenes_manifest.json").read_bytes()
    assert m1 == m2
    for name in sorted(os.listdir(out1)):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_generate_zero_scenes_ok(tmp_path):
    cfg = write_config(tmp_path, tiny_config_doc(num_scenes=0))
    out = tmp_path / "empty"
    assert run(["generate", "--config", cfg, "--out", str(out)]) == 0
    doc = json.loads((out / "scenes_manifest.json").read_text())
    assert doc["count"] == 0 and doc["scenes"] == []


def test_generate_count_matches_request(tmp_path):
    cfg = write_config(tmp_path, tiny_config_doc(num_scenes=4))
    out = tmp_path / "scenes"
    assert run(["generate", "--config", cfg, "--out", str(out)]) == 0
    manifests = [n for n in os.listdir(out) if n.endswith(".json")
                 and n.startswith("scene_")]
    assert len(manifests) == 4
    loaded = cli.load_scene_dir(str(out))
    assert len(loaded) == 4


def test_generate_with_workers_matches_serial(tmp_path):
    cfg = write_config(tmp_path, tiny_config_doc(num_scenes=3))
    serial = tmp_path / "serial"
    parallel = tmp_path / "parallel"
    assert run(["generate", "--config", cfg, "--out", str(serial)]) == 0
    assert run(["generate", "--config", cfg, "--out", str(parallel),
                "--workers", "3"]) == 0
    for name in sorted(os.listdir(serial)):
        assert (serial / name).read_bytes() == (parallel / name).read_bytes()


def test_train_zero_lr_keeps_initial_params(tmp_path):
    doc = tiny_config_doc()
    doc["train"]["learning_rate"] = 0.0
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "run"
    assert run(["train", "--config", cfg, "--out", str(out)]) == 0
    params, pipe_cfg, meta = pipeline.load_model(str(out / "model.bin"))
    expect = pipeline.init_params(pipe_cfg, rng_seed=7)
    for k in expect:
        assert np.array_equal(params[k], expect[k])
    assert (out / "metrics.csv").exists()
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,pose_loss,cls_loss,val_mpjpe_mm,ap25"
    assert (out / "loss_curve.svg").exists()


def test_train_resume_continues_epoch_numbering(tmp_path):
    doc = tiny_config_doc(num_scenes=2)
    doc["train"]["steps"] = 2  # 1 train scene -> 2 epochs
    doc["train"]["val_fraction"] = 0.5
    cfg = write_config(tmp_path, doc)
    first = tmp_path / "first"
    assert run(["train", "--config", cfg, "--out", str(first)]) == 0
    rows = training.read_metrics_csv(str(first / "metrics.csv"))
    assert [r["epoch"] for r in rows] == [0, 1]
    second = tmp_path / "second"
    assert run(["train", "--config", cfg, "--out", str(second),
                "--resume", str(first / "model.bin")]) == 0
    rows2 = training.read_metrics_csv(str(second / "metrics.csv"))
    assert [r["epoch"] for r in rows2] == [0, 1, 2, 3]


def test_eval_reports_match_library_oracle(tmp_path):
    cfg_doc = tiny_config_doc()
    cfg = write_config(tmp_path, cfg_doc)
    scenes_dir = tmp_path / "scenes"
    run_dir = tmp_path / "run"
    eval_dir = tmp_path / "eval"
    assert run(["generate", "--config", cfg, "--out", str(scenes_dir)]) == 0
    assert run(["train", "--config", cfg, "--out", str(run_dir),
                "--scenes", str(scenes_dir)]) == 0
    assert run(["eval", "--model", str(run_dir / "model.bin"),
                "--scenes", str(scenes_dir), "--out", str(eval_dir)]) == 0
    params, pipe_cfg, _ = pipeline.load_model(str(run_dir / "model.bin"))
    scenes = cli.load_scene_dir(str(scenes_dir))
    reports, _, _ = training.evaluate_model(params, pipe_cfg, scenes)
    for i, rep in enumerate(reports):
        doc = json.loads((eval_dir / f"report_default_scene{i:03d}.json").read_text())
        assert doc["map"] == pytest.approx(rep.map)
        if rep.mpjpe_defined:
            assert doc["mpjpe_mm"] == pytest.approx(rep.mpjpe_mm)


def test_eval_on_val_split_reproduces_logged_metrics(tmp_path):
    cfg_doc = tiny_config_doc()
    cfg = write_config(tmp_path, cfg_doc)
    scenes_dir = tmp_path / "scenes"
    run_dir = tmp_path / "run"
    assert run(["generate", "--config", cfg, "--out", str(scenes_dir)]) == 0
    assert run(["train", "--config", cfg, "--out", str(run_dir),
                "--scenes", str(scenes_dir)]) == 0
    rows = training.read_metrics_csv(str(run_dir / "metrics.csv"))
    params, pipe_cfg, _ = pipeline.load_model(str(run_dir / "model.bin"))
    scenes = cli.load_scene_dir(str(scenes_dir))
    run_cfg = cli.load_config(cfg)
    _, val_scenes = training.split_scenes(scenes, run_cfg.train.val_fraction)
    _, val_mpjpe, val_ap25 = training.evaluate_model(params, pipe_cfg, val_scenes)
    # identical code path, identical numbers
    assert val_mpjpe == rows[-1]["val_mpjpe_mm"] or (
        np.isnan(val_mpjpe) and np.isnan(rows[-1]["val_mpjpe_mm"]))
    assert val_ap25 == rows[-1]["ap25"]


def test_eval_camera_override_emits_reports_and_sweep(tmp_path):
    cfg = write_config(tmp_path, tiny_config_doc())
    scenes_dir = tmp_path / "scenes"
    run_dir = tmp_path / "run"
    eval_dir = tmp_path / "eval"
    assert run(["generate", "--config", cfg, "--out", str(scenes_dir)]) == 0
    assert run(["train", "--config", cfg, "--out", str(run_dir),
                "--scenes", str(scenes_dir)]) == 0
    assert run(["eval", "--model", str(run_dir / "model.bin"),
                "--scenes", str(scenes_dir), "--out", str(eval_dir),
                "--cameras", "3,4"]) == 0
    assert (eval_dir / "report_cam3.csv").exists()
    assert (eval_dir / "report_cam4.csv").exists()
    assert (eval_dir / "sweep.csv").exists()
    assert (eval_dir / "ap_vs_cameras.svg").exists()
    svg = (eval_dir / "ap_vs_cameras.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg


def test_ablate_emits_four_rows_deterministically(tmp_path):
    doc = tiny_config_doc()
    doc["train"]["steps"] = 2
    cfg = write_config(tmp_path, doc)
    out1 = tmp_path / "ab1"
    out2 = tmp_path / "ab2"
    assert run(["ablate", "--config", cfg, "--out", str(out1)]) == 0
    assert run(["ablate", "--config", cfg, "--out", str(out2)]) == 0
    table = (out1 / "ablation.csv").read_text().splitlines()
    assert table[0] == "variant,val_mpjpe_mm,ap25,pose_loss,cls_loss"
    assert [line.split(",")[0] for line in table[1:]] == list(cli.VARIANT_ORDER)
    assert (out1 / "ablation.csv").read_bytes() == (out2 / "ablation.csv").read_bytes()


def test_config_error_exits_2_and_writes_nothing(tmp_path):
    bad = write_config(tmp_path, {"bogus_key": 1})
    out = tmp_path / "nothing"
    assert run(["generate", "--config", bad, "--out", str(out)]) == 2
    assert not out.exists()
    bad2 = write_config(tmp_path, tiny_config_doc(num_scenes=-1), "bad2.json")
    assert run(["generate", "--config", bad2, "--out", str(out)]) == 2
    assert not out.exists()


def test_unknown_section_key_rejected(tmp_path):
    doc = tiny_config_doc()
    doc["scene"]["not_a_field"] = 3
    cfg = write_config(tmp_path, doc)
    assert run(["generate", "--config", cfg, "--out", str(tmp_path / "x")]) == 2


def test_set_overrides_apply_and_validate(tmp_path):
    cfg = write_config(tmp_path, tiny_config_doc())
    out = tmp_path / "ovr"
    assert run(["generate", "--config", cfg, "--out", str(out),
                "--set", "num_scenes=2"]) == 0
    assert json.loads((out / "scenes_manifest.json").read_text())["count"] == 2
    assert run(["generate", "--config", cfg, "--out", str(tmp_path / "y"),
                "--set", "scene.bogus=1"]) == 2


def test_runtime_error_exits_3(tmp_path):
    cfg = write_config(tmp_path, tiny_config_doc())
    scenes_dir = tmp_path / "scenes"
    assert run(["generate", "--config", cfg, "--out", str(scenes_dir)]) == 0
    missing = str(tmp_path / "missing_model.bin")
    assert run(["eval", "--model", missing, "--scenes", str(scenes_dir),
                "--out", str(tmp_path / "z")]) == 3


def test_seed_flag_overrides_config_seed(tmp_path):
    cfg = write_config(tmp_path, tiny_config_doc())
    a = tmp_path / "s1"
    b = tmp_path / "s2"
    assert run(["generate", "--config", cfg, "--out", str(a), "--seed", "21"]) == 0
    assert run(["generate", "--config", cfg, "--out", str(b), "--seed", "22"]) == 0
    da = json.loads((a / "scenes_manifest.json").read_text())
    db = json.loads((b / "scenes_manifest.json").read_text())
    assert da["seed"] == 21 and db["seed"] == 22
    assert da["scenes"][0]["seed"] == 21

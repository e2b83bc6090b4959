import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from maskprior.cli import main
from maskprior.config import PipelineConfig, VlmConfig, load_config
from maskprior.pipeline import run_pipeline
from maskprior.scene_io import load_prior_mask_images, load_scene
from test_vlm import MockResponse, MockSession


def test_run_pipeline_writes_all_artifacts(synth_result, tmp_path):
    scene_dir, _ = synth_result
    out = tmp_path / "out"
    manifest = run_pipeline(scene_dir, out, PipelineConfig())
    assert (out / "priors" / "priors.json").is_file()
    assert (out / "report.csv").is_file()
    assert (out / "report.txt").is_file()
    assert (out / "run_manifest.json").is_file()
    assert (out / "points_filtered.bin").is_file()
    assert manifest["points_kept"] <= manifest["points_total"]
    assert manifest["config"]["cd_threshold"] == 0.2


def test_filtered_points_drop_transient_surface(synth_result, tmp_path):
    scene_dir, result = synth_result
    manifest = run_pipeline(scene_dir, tmp_path / "out", PipelineConfig())
    assert manifest["points_kept"] < manifest["points_total"]


def test_vlm_promotion_only_adds_static_area(synth_result, tmp_path):
    scene_dir, result = synth_result
    base_out = tmp_path / "base"
    run_pipeline(scene_dir, base_out, PipelineConfig())
    base_maps = load_prior_mask_images(base_out / "priors")

    # mock VLM calls every candidate static
    def all_static_response(call):
        prompt = call["json"]["messages"][0]["content"][0]["text"]
        ids_line = next(l for l in prompt.splitlines() if l.startswith("Identifiers"))
        ids = [s.strip() for s in ids_line.split(":")[1].split(",")]
        body = "\n".join(f"{i}: static - permanent structure" for i in ids)
        return MockResponse(200, payload={"choices": [{"message": {"content": body}}]})

    class DynamicSession:
        def __init__(self):
            self.calls = []

        def post(self, url, json=None, headers=None, timeout=None):
            call = {"url": url, "json": json, "headers": headers}
            self.calls.append(call)
            return all_static_response(call)

    config = PipelineConfig(
        min_region_pixels=200,
        vlm=VlmConfig(mode="http", url="http://mock/v1", model="m", backoff=0.0),
    )
    vlm_out = tmp_path / "vlm"
    session = DynamicSession()
    manifest = run_pipeline(scene_dir, vlm_out, config, vlm_session=session)
    assert session.calls, "expected at least one VLM query"
    vlm_maps = load_prior_mask_images(vlm_out / "priors")
    for view, base in base_maps.items():
        assert (vlm_maps[view] | ~base).all()  # static area only grows
    promoted = [
        cls for cls in manifest["classifications"].values() if cls == "vlm-static"
    ]
    assert promoted


def test_vlm_off_equals_matching_only(synth_result, tmp_path):
    scene_dir, _ = synth_result
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    run_pipeline(scene_dir, out_a, PipelineConfig())
    run_pipeline(scene_dir, out_b, PipelineConfig(vlm=VlmConfig(mode="off")))
    for rel in ("priors/priors.json", "report.csv"):
        assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes()


def test_missing_attention_aborts_with_attention_exit_code(synth_result, tmp_path, capsys):
    scene_dir, _ = synth_result
    broken = tmp_path / "noatt"
    shutil.copytree(scene_dir, broken)
    manifest_path = broken / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["attention"] = []
    manifest_path.write_text(json.dumps(manifest))
    shutil.rmtree(broken / "attention")
    code = main(["run", "--scene", str(broken), "--out", str(tmp_path / "out")])
    assert code == 3
    assert "attention" in capsys.readouterr().err


def test_cli_run_and_determinism(synth_result, tmp_path):
    scene_dir, _ = synth_result
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["run", "--scene", str(scene_dir), "--out", str(out_a), "--jobs", "2"]) == 0
    assert main(["run", "--scene", str(scene_dir), "--out", str(out_b), "--jobs", "2"]) == 0
    files_a = sorted(p.relative_to(out_a) for p in out_a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(out_b) for p in out_b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes(), rel


def test_jobs_setting_does_not_change_results(synth_result, tmp_path):
    scene_dir, _ = synth_result
    out_a = tmp_path / "j1"
    out_b = tmp_path / "j4"
    assert main(["run", "--scene", str(scene_dir), "--out", str(out_a), "--jobs", "1"]) == 0
    assert main(["run", "--scene", str(scene_dir), "--out", str(out_b), "--jobs", "4"]) == 0
    # everything but the echoed jobs value must match
    for rel in ("priors/priors.json", "report.csv", "points_filtered.bin"):
        assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes(), rel


def test_cli_validation_error_exit_code(tmp_path, capsys):
    code = main(["run", "--scene", str(tmp_path / "missing"), "--out", str(tmp_path / "o")])
    assert code == 5  # manifest missing -> load error


def test_cli_synth_eval_sample_views(tmp_path, capsys):
    scene_dir = tmp_path / "scene"
    assert main([
        "synth", "--out", str(scene_dir), "--seed", "11", "--views", "4",
        "--entities", "5", "--transients", "1",
    ]) == 0
    scene = load_scene(scene_dir)
    assert scene.N == 4

    out = tmp_path / "run"
    assert main(["run", "--scene", str(scene_dir), "--out", str(out)]) == 0

    eval_out = tmp_path / "eval"
    assert main([
        "eval", "--scene", str(scene_dir), "--priors", str(out / "priors"),
        "--out", str(eval_out), "--gt-masks", str(scene_dir / "gt_transient"),
    ]) == 0
    csv_text = (eval_out / "report.csv").read_text()
    assert "iou" in csv_text.splitlines()[0]

    assert main(["sample-views", "--scene", str(scene_dir), "--k", "2", "--seed", "0"]) == 0
    payload = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert len(payload["selected"]) == 2


def test_cli_warmup_sim(tmp_path):
    from maskprior.synth import WarmupFixtureSpec, generate_warmup_frames

    frames_dir = tmp_path / "frames"
    generate_warmup_frames(WarmupFixtureSpec(seed=5, num_frames=2), out_dir=frames_dir)
    out = tmp_path / "sim"
    assert main([
        "warmup-sim", "--frames", str(frames_dir), "--out", str(out),
        "--iters", "30", "--warmup-iters", "10", "--mask-every", "10",
    ]) == 0
    rows = (out / "losses.csv").read_text().splitlines()
    assert len(rows) == 31
    assert rows[0].startswith("iteration,")
    masks = sorted((out / "masks").glob("iter_*.png"))
    assert len(masks) == 3
    # during warm-up the mask equals the prior; afterwards it is learned
    from PIL import Image

    prior = np.asarray(Image.open(frames_dir / "prior.png")) > 0
    m10 = np.asarray(Image.open(out / "masks" / "iter_000010.png")) > 0
    assert np.array_equal(m10, prior)


def test_config_precedence_flags_over_file(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"recall_threshold": 0.7, "seed": 5}))
    cfg = load_config(cfg_file, {"recall_threshold": 0.9, "jobs": None})
    assert cfg.recall_threshold == 0.9  # flag wins
    assert cfg.seed == 5  # file wins over default
    assert cfg.jobs == 4  # default preserved when flag unset


def test_config_rejects_unknown_keys(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"not_a_key": 1}))
    with pytest.raises(ValueError, match="unknown config keys"):
        load_config(cfg_file, {})


def test_run_manifest_echoes_effective_config(synth_result, tmp_path):
    scene_dir, _ = synth_result
    config = PipelineConfig(recall_threshold=0.6, seed=9)
    run_pipeline(scene_dir, tmp_path / "out", config)
    manifest = json.loads((tmp_path / "out" / "run_manifest.json").read_text())
    assert manifest["config"]["recall_threshold"] == 0.6
    assert manifest["config"]["seed"] == 9
    assert manifest["config"]["vlm"]["mode"] == "off"

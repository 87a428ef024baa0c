import json

import pytest

from facessd.cli import apply_overrides, build_parser, load_run_config, main
from facessd.errors import UsageError
from facessd.models import HeadConfig, LrStage, Phase, RunConfig, SyntheticSpec, TaskName, TrainConfig

from .conftest import TINY_SCALE


def run(argv):
    return main(["--log-level", "error", *argv])


def tiny_run_config() -> RunConfig:
    def phase_cfg(phase):
        return TrainConfig(
            phase=phase, lr_schedule=[LrStage(iterations=1, lr=1e-3)], batch_size=2, num_workers=1
        )

    return RunConfig(
        channel_scale=TINY_SCALE,
        head=HeadConfig.for_task(TaskName.SMILE),
        data=SyntheticSpec(num_images=6, faces_per_image=(1, 2), face_size_range=(0.25, 0.45), seed=3),
        detection=phase_cfg(Phase.DETECTION),
        analysis=phase_cfg(Phase.ANALYSIS),
    )


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(tiny_run_config().model_dump_json(indent=2))
    assert run(["gen", "--config", str(config), "--out", str(root / "data")]) == 0
    assert run([
        "train", "--config", str(config), "--phase", "detection",
        "--data", str(root / "data"), "--out", str(root / "runs"),
    ]) == 0
    return root


def test_gen_writes_dataset(workspace):
    data = workspace / "data"
    assert (data / "annotations.txt").is_file()
    assert len(list((data / "images").glob("*.ppm"))) == 6
    manifest = json.loads((data / "manifest.json").read_text())
    assert list(manifest["splits"].values()).count("test") == 2


def test_gen_from_spec_file(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(SyntheticSpec(num_images=3, faces_per_image=(1, 1), seed=1).model_dump_json())
    assert run(["gen", "--spec", str(spec), "--seed", "4", "--out", str(tmp_path / "d")]) == 0
    assert "generated 3 images" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["spec"]["seed"] == 4


def test_train_writes_weights_and_log(workspace):
    runs = workspace / "runs"
    assert (runs / "detection.fssd").is_file()
    assert (runs / "detection_log.csv").is_file()
    assert (runs / "checkpoints" / "detection_iter000001.fssd").is_file()


def test_eval_reports_metrics(workspace, capsys):
    code = run([
        "eval", "--config", str(workspace / "run.json"), "--weights", str(workspace / "runs" / "detection.fssd"),
        "--data", str(workspace / "data"), "--out", str(workspace / "eval"),
    ])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    keys = [line.split(":")[0] for line in lines]
    assert keys == sorted(keys)
    assert {"ap", "eer", "num_gt", "smile_accuracy"} <= set(keys)
    assert (workspace / "eval" / "eval_test.txt").is_file()
    assert (workspace / "eval" / "eval_test.csv").is_file()


def test_eval_rejects_missing_head(workspace, capsys):
    code = run([
        "eval", "--weights", str(workspace / "runs" / "detection.fssd"),
        "--data", str(workspace / "data"), "--task", "va",
    ])
    assert code == 2
    assert capsys.readouterr().err.startswith("error: config: weights have no va head")


def test_eval_tune_needs_val_split(workspace, capsys):
    code = run([
        "eval", "--weights", str(workspace / "runs" / "detection.fssd"), "--data", str(workspace / "data"), "--tune",
    ])
    assert code == 2
    assert "val split" in capsys.readouterr().err


def test_predict_writes_detections_and_heatmaps(workspace, tmp_path):
    image = workspace / "data" / "images" / "img00005.ppm"
    out = tmp_path / "pred.txt"
    code = run([
        "predict", "--weights", str(workspace / "runs" / "detection.fssd"), "--image", str(image),
        "--out", str(out), "--dump-heatmaps", str(tmp_path / "maps" / "img00005"),
    ])
    assert code == 0
    for line in out.read_text().splitlines():
        fields = line.split()
        assert fields[0] == "img00005" and len(fields) == 1 + 4 + 1 + 1
    assert (tmp_path / "maps" / "img00005_s1_face.pgm").is_file()
    assert (tmp_path / "maps" / "img00005_s6_smile.pgm").is_file()


def test_missing_inputs_exit_with_code_2(tmp_path, capsys):
    assert run(["eval", "--data", str(tmp_path)]) == 2
    assert capsys.readouterr().err.splitlines()[-1] == "error: config: weights file is required"
    assert run(["train", "--phase", "detection", "--data", str(tmp_path)]) == 2
    assert capsys.readouterr().err.startswith("error: config: no dataset at")


def test_bad_config_files(tmp_path, capsys):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert run(["gen", "--config", str(broken), "--out", str(tmp_path / "d")]) == 2
    assert capsys.readouterr().err.startswith("error: config:")

    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"channel_scale": "1/8", "colour": "red"}))
    assert run(["gen", "--config", str(unknown), "--out", str(tmp_path / "d")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: config:") and "colour" in err


def test_bad_annotations_report_position(workspace, tmp_path, capsys):
    broken = tmp_path / "data"
    broken.mkdir()
    (broken / "annotations.txt").write_text("image img00000\nface 0.5 0.5 0.2 0.2 7 - 0 0\n")
    (broken / "manifest.json").write_text(json.dumps({"num_attributes": 8}))
    code = run(["eval", "--weights", str(workspace / "runs" / "detection.fssd"), "--data", str(broken)])
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error: dataset: ") and "annotations.txt:2:22" in err


def test_overrides_reach_every_section():
    args = build_parser().parse_args([
        "train", "--seed", "11", "--threads", "3", "--data", "d", "--out", "o", "--weights", "w.fssd", "--pipeline",
    ])
    cfg = apply_overrides(load_run_config(None), args)
    assert (cfg.seed, cfg.data.seed, cfg.detection.seed, cfg.analysis.seed, cfg.augment.seed) == (11, 11, 11, 11, 11)
    assert cfg.detection.num_workers == cfg.analysis.num_workers == 3
    assert (str(cfg.paths.data_dir), str(cfg.paths.out_dir), str(cfg.paths.weights)) == ("d", "o", "w.fssd")


def test_phase_and_pipeline_are_exclusive():
    with pytest.raises(UsageError, match="not allowed with"):
        build_parser().parse_args(["train", "--phase", "detection", "--pipeline"])


@pytest.mark.parametrize("argv", [
    ["train", "--phase", "bogus"],
    ["train", "--phase", "detection", "--pipeline"],
    ["eval", "--weights"],
    [],
])
def test_bad_arguments_print_one_error_line(argv, capsys):
    assert run(argv) == 2
    captured = capsys.readouterr()
    lines = captured.err.strip().splitlines()
    assert len(lines) == 1
    assert lines[0].startswith("error: usage: ")
    assert "usage:" not in lines[0][len("error: usage: "):]
    assert captured.out == ""

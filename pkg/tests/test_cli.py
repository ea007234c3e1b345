import json

import numpy as np
import pytest

from cli import build_parser, load_config, main
from exit_code import ExitCode
from formats import write_ply


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().out


class TestArguments:
    def test_flags_override_config_file(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"N": 2, "schedule": {"K": 2}}))
        args = build_parser().parse_args(["render", "--config", str(tmp_path / "c.json"), "-N", "3", "--no-spade"])
        config = load_config(args)
        assert config.N == 3
        assert config.schedule.K == 2
        assert config.model.use_spade is False
        assert config.model.use_recurrence is True

    def test_preset_then_flags(self):
        config = load_config(build_parser().parse_args(["schedule", "--preset", "dtu", "--delta1", "8.0"]))
        assert config.schedule.delta1 == 8.0
        assert config.scaling.d1_min == 425.0


class TestSchedule:
    def test_dtu_preset(self, capsys):
        code, out = run(capsys, "schedule", "--preset", "dtu")
        assert code == ExitCode.SUCCESS
        report = json.loads(out)
        assert report["M"] == [48, 24, 12]
        assert report["delta"] == [10.6, 5.3, 2.65]
        assert report["resolutions"] == ["1/16", "1/4", "1"]
        assert report["f"] == 1.0

    def test_depth_range(self, capsys):
        code, out = run(capsys, "schedule", "--d-min", "1", "--d-max", "10")
        assert code == ExitCode.SUCCESS
        report = json.loads(out)
        assert report["delta"][0] == 18.75
        assert report["f"] == 100.0

    def test_nothing_to_derive_from(self, capsys):
        assert run(capsys, "schedule")[0] == ExitCode.USAGE_ERROR


class TestErrors:
    @pytest.mark.parametrize("argv", [
        [],
        ["explode"],
        ["schedule", "--M1", "50"],
        ["schedule", "--backend", "stereo"],
        ["render"],
        ["render", "--dataset", "/nonexistent/dataset"],
    ])
    def test_usage_errors_exit_1(self, capsys, argv):
        assert main(argv) == ExitCode.USAGE_ERROR

    def test_empty_prediction_exits_2(self, capsys, tmp_path):
        write_ply(tmp_path / "pred.ply", np.zeros((0, 3)), np.zeros((0, 3)))
        write_ply(tmp_path / "gt.ply", np.eye(3), np.zeros((3, 3)))
        code = main(["eval-pc", "--pred", str(tmp_path / "pred.ply"), "--gt", str(tmp_path / "gt.ply"),
                     "--output", str(tmp_path / "out")])
        assert code == ExitCode.RUNTIME_ERROR


@pytest.mark.slow
class TestEndToEnd:
    def test_synth_render_fuse_evaluate(self, capsys, tmp_path):
        data, out = str(tmp_path / "data"), str(tmp_path / "out")
        common = ["--dataset", data, "--output", out]
        assert run(capsys, "synth-gen", "--scenes", "1", "--views", "5", "--size", "64", *common)[0] == 0
        assert run(capsys, "render", "--dump-stages", *common)[0] == 0
        rendered = tmp_path / "out" / "render"
        assert len(list(rendered.glob("[0-9]" * 8 + ".png"))) == 5
        assert (rendered / "00000000_stage1.pfm").exists()
        assert (tmp_path / "out" / "config.resolved.json").exists()

        code, report = run(capsys, "eval-nvs", *common)
        assert code == 0
        report = json.loads(report)
        assert report["mean"]["lpips"] == "not supported"
        assert report["mean"]["psnr_db"] > 10

        assert run(capsys, "fuse", "--tau-p", "0", "--S", "1", *common)[0] == 0
        code, scores = run(capsys, "eval-pc", *common)
        assert code == 0
        assert 0 <= json.loads(scores)["f_score"] <= 1

    def test_render_path(self, capsys, tmp_path):
        data, out = str(tmp_path / "data"), str(tmp_path / "out")
        common = ["--dataset", data, "--output", out]
        assert run(capsys, "synth-gen", "--views", "3", "--size", "32", *common)[0] == 0
        code, report = run(capsys, "render-path", "--steps", "2", "-Q", "2", "-N", "2", *common)
        assert code == 0
        assert json.loads(report)["rendered"] == 5

    def test_reruns_are_byte_identical(self, capsys, tmp_path):
        data = str(tmp_path / "data")
        run(capsys, "synth-gen", "--views", "3", "--size", "32", "--dataset", data)
        for name in ("a", "b"):
            run(capsys, "render", "--dataset", data, "--output", str(tmp_path / name))
        for png in (tmp_path / "a" / "render").iterdir():
            assert png.read_bytes() == (tmp_path / "b" / "render" / png.name).read_bytes()

    def test_grad_check(self, capsys, tmp_path):
        code, report = run(capsys, "grad-check", "--shapes", "1", "--output", str(tmp_path))
        assert code == 0
        assert json.loads(report)["failed"] == []
        assert (tmp_path / "grad_check.json").exists()

"""
Tests for the CLI entry point: argument parsing, configuration merging,
exit codes and the synth → fit → render → mesh → eval → summary chain.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import pytest
import yaml

from usm import cli
from usm.cli import _build_parser, _merge_args, main
from usm.config import RayConfig, RunConfig
from usm.decoder import build_decoder
from usm.errors import NumericalAbortError
from usm.renderer import RayBounds
from usm.storage import load_result_json, read_metrics_csv, read_pfm


@pytest.fixture(autouse=True)
def restore_logging():
    """``main`` reconfigures the root logger; undo it after each test."""
    root = logging.getLogger()
    saved = (root.handlers[:], root.level)
    yield
    for handler in root.handlers:
        if handler not in saved[0]:
            handler.close()
    root.handlers, root.level = saved


@pytest.fixture
def config_file(tmp_path: Path) -> Path:
    """Settings small enough for the whole command chain to run in a unit test."""
    path = tmp_path / "config.yaml"
    path.write_text(yaml.dump({
        "latent_dim": 8,
        "log_level": "WARNING",
        "synth": {"views": 2, "width": 32, "height": 32, "focal": 32.0},
        "optim": {
            "iters": 2,
            "subsample": 200,
            "es": {"sample_count": 32},
            "ray": {"samples_per_ray": 16, "sobol_count": 8, "pixels_per_view": 16},
        },
    }))
    return path


def _run(config_file: Path, *argv: str) -> int:
    return main([*argv[:1], "--config", str(config_file), *argv[1:]])


@pytest.fixture
def scene(tmp_path: Path, config_file: Path) -> Path:
    out = tmp_path / "scene"
    assert _run(config_file, "synth", "--out", str(out), "--shape", "ellipsoid:0.2,0,-0.2") == 0
    return out


@pytest.fixture
def result(tmp_path: Path, config_file: Path, scene: Path) -> Path:
    out = tmp_path / "result.json"
    assert _run(config_file, "fit", "--scene", str(scene), "--out", str(out)) == 0
    return out


# ── Argument parser ───────────────────────────────────────────────────────────


class TestArgumentParser:
    @pytest.fixture
    def parser(self):
        return _build_parser()

    def test_version_flag_exists(self, parser) -> None:
        with pytest.raises(SystemExit) as exc_info:
            parser.parse_args(["--version"])
        assert exc_info.value.code == 0

    def test_config_default(self, parser) -> None:
        args = parser.parse_args(["summary", "m.csv"])
        assert args.config == "config.yaml"
        assert args.metrics == "m.csv"

    def test_sphere_shape(self, parser) -> None:
        args = parser.parse_args(["synth", "--out", "s"])
        assert args.shape == [0.0, 0.0, 0.0]
        assert args.pose is None

    def test_ellipsoid_shape(self, parser) -> None:
        args = parser.parse_args(["synth", "--out", "s", "--shape", "ellipsoid:0.5,0,-0.5"])
        assert args.shape == [0.5, 0.0, -0.5]

    def test_pose_flag(self, parser) -> None:
        args = parser.parse_args(["synth", "--out", "s", "--pose", "1,2,3,0,0,0.5,1,1,2"])
        np.testing.assert_array_equal(args.pose.t, [1, 2, 3])
        np.testing.assert_array_equal(args.pose.s, [1, 1, 2])

    def test_render_defaults(self, parser) -> None:
        args = parser.parse_args(["render", "-r", "r.json", "-s", "scene", "--depth", "d.pfm", "--std", "s.pfm"])
        assert args.view == 0
        assert args.beta_csv is None

    def test_eval_defaults(self, parser) -> None:
        args = parser.parse_args(["eval", "-r", "r.json", "-s", "scene"])
        assert (args.points, args.resolution, args.grid) == (10000, 64, 64)


class TestMergeArgs:
    @pytest.fixture
    def parser(self):
        return _build_parser()

    def test_seed_goes_to_synth_for_synth(self, parser) -> None:
        cfg = _merge_args(RunConfig(), parser.parse_args(["synth", "--out", "s", "--seed", "7"]))
        assert cfg.synth.seed == 7
        assert cfg.optim.seed == 0

    def test_seed_goes_to_optimiser_otherwise(self, parser) -> None:
        cfg = _merge_args(RunConfig(), parser.parse_args(["fit", "-s", "x", "-o", "r.json", "--seed", "7"]))
        assert cfg.optim.seed == 7

    def test_fit_overrides(self, parser) -> None:
        args = parser.parse_args([
            "fit", "-s", "x", "-o", "r.json", "--iters", "5", "--lr", "0.1",
            "--lambda-r", "0", "--decoder", "mlp:w.bin", "--threads", "2",
        ])
        cfg = _merge_args(RunConfig(), args)
        assert (cfg.optim.iters, cfg.optim.lr, cfg.optim.lambda_r) == (5, 0.1, 0.0)
        assert cfg.decoder == "mlp:w.bin"
        assert cfg.threads == 2

    def test_synth_overrides(self, parser) -> None:
        args = parser.parse_args(["synth", "--out", "s", "--views", "4", "--size", "64", "48", "--noise", "0.01"])
        cfg = _merge_args(RunConfig(), args)
        assert (cfg.synth.views, cfg.synth.width, cfg.synth.height, cfg.synth.noise) == (4, 64, 48, 0.01)


# ── main() exit codes ─────────────────────────────────────────────────────────


class TestMainExitCodes:
    def test_no_command(self) -> None:
        assert main([]) == 1

    def test_missing_required_option(self, config_file: Path) -> None:
        assert _run(config_file, "synth") == 1

    def test_bad_shape(self, config_file: Path, tmp_path: Path) -> None:
        assert _run(config_file, "synth", "--out", str(tmp_path), "--shape", "cube") == 1

    def test_invalid_configuration(self, tmp_path: Path) -> None:
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.dump({"optim": {"lr": -1.0}}))
        assert main(["summary", "m.csv", "--config", str(bad)]) == 1

    def test_missing_scene(self, config_file: Path, tmp_path: Path) -> None:
        assert _run(config_file, "fit", "--scene", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r.json")) == 2

    def test_missing_metrics(self, config_file: Path, tmp_path: Path) -> None:
        assert _run(config_file, "summary", str(tmp_path / "absent.csv")) == 2

    def test_numerical_abort(self, config_file: Path, scene: Path, tmp_path: Path, mocker) -> None:
        mocker.patch("usm.cli.fit", side_effect=NumericalAbortError("L2D", 5))
        assert _run(config_file, "fit", "--scene", str(scene), "--out", str(tmp_path / "r.json")) == 3
        assert not (tmp_path / "r.json").exists()

    def test_view_out_of_range(self, config_file: Path, result: Path, scene: Path, tmp_path: Path) -> None:
        code = _run(
            config_file, "render", "--result", str(result), "--scene", str(scene), "--view", "9",
            "--depth", str(tmp_path / "d.pfm"), "--std", str(tmp_path / "s.pfm"),
        )
        assert code == 2

    def test_eval_without_ground_truth(self, config_file: Path, result: Path, scene: Path) -> None:
        manifest = scene / "manifest.json"
        data = json.loads(manifest.read_text())
        del data["ground_truth"]
        manifest.write_text(json.dumps(data))
        assert _run(config_file, "eval", "--result", str(result), "--scene", str(scene)) == 2


# ── Command chain ─────────────────────────────────────────────────────────────


class TestCommands:
    def test_synth_writes_scene(self, scene: Path, capsys) -> None:
        manifest = json.loads((scene / "manifest.json").read_text())
        assert len(manifest["frames"]) == 2
        assert manifest["ground_truth"]["latent"][:3] == [0.2, 0.0, -0.2]
        assert len(manifest["ground_truth"]["latent"]) == 8

    def test_synth_summary_printed(self, config_file: Path, tmp_path: Path, capsys) -> None:
        assert _run(config_file, "synth", "--out", str(tmp_path / "s"), "--views", "1") == 0
        out = capsys.readouterr().out
        assert "SCENE WRITTEN" in out
        assert "manifest.json" in out

    def test_fit_writes_result_and_history(self, config_file: Path, scene: Path, tmp_path: Path) -> None:
        out, history = tmp_path / "r.json", tmp_path / "h.csv"
        assert _run(config_file, "fit", "-s", str(scene), "-o", str(out), "--history", str(history)) == 0
        stored = load_result_json(out)
        assert stored.iterations == 2
        assert stored.decoder == "analytic"
        assert stored.z.dim == 8
        assert stored.config["optim"]["iters"] == 2
        assert len(history.read_text().splitlines()) == 3

    def test_fit_with_initial_pose_and_no_iterations(self, config_file: Path, scene: Path, tmp_path: Path) -> None:
        pose_file = tmp_path / "init.txt"
        pose_file.write_text((scene / "gt_pose.txt").read_text())
        out = tmp_path / "r.json"
        code = _run(config_file, "fit", "-s", str(scene), "-o", str(out), "--init-pose", str(pose_file), "--iters", "0")
        assert code == 0
        stored = load_result_json(out)
        assert stored.iterations == 0
        np.testing.assert_allclose(stored.pose.mean.s, 1.0)

    def test_fit_is_reproducible(self, config_file: Path, scene: Path, tmp_path: Path) -> None:
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert _run(config_file, "fit", "-s", str(scene), "-o", str(a), "--seed", "3") == 0
        assert _run(config_file, "fit", "-s", str(scene), "-o", str(b), "--seed", "3") == 0
        assert a.read_bytes() == b.read_bytes()

    def test_render(self, config_file: Path, result: Path, scene: Path, tmp_path: Path) -> None:
        depth, std, beta = tmp_path / "d.pfm", tmp_path / "s.pfm", tmp_path / "b.csv"
        code = _run(
            config_file, "render", "--result", str(result), "--scene", str(scene), "--view", "1",
            "--depth", str(depth), "--std", str(std), "--beta-csv", str(beta),
        )
        assert code == 0
        assert read_pfm(depth).shape == (32, 32)
        assert np.all(read_pfm(std) >= 0)
        assert beta.read_text().splitlines()[0] == "u,v,depth_mean,depth_std,escape_mean,escape_var,alpha,beta"

    def test_render_reuses_fit_bounds(self, config_file: Path, result: Path, scene: Path, tmp_path: Path, mocker) -> None:
        spy = mocker.spy(cli, "render_depth_map")
        code = _run(
            config_file, "render", "-r", str(result), "-s", str(scene),
            "--depth", str(tmp_path / "d.pfm"), "--std", str(tmp_path / "s.pfm"),
        )
        assert code == 0
        center, radius = load_result_json(result).ray_bounds
        bounds = spy.call_args.kwargs["bounds"]
        np.testing.assert_array_equal(bounds.center, center)
        assert bounds.radius == radius

    def test_render_without_stored_bounds(
        self, config_file: Path, result: Path, scene: Path, tmp_path: Path, mocker
    ) -> None:
        data = json.loads(result.read_text())
        del data["ray_bounds"]
        result.write_text(json.dumps(data))
        spy = mocker.spy(cli, "render_depth_map")
        code = _run(
            config_file, "render", "-r", str(result), "-s", str(scene),
            "--depth", str(tmp_path / "d.pfm"), "--std", str(tmp_path / "s.pfm"),
        )
        assert code == 0
        stored = load_result_json(result)
        expected = RayBounds.around(stored.pose.mean, build_decoder("analytic", 8), RayConfig().bound_padding)
        assert spy.call_args.kwargs["bounds"].radius == pytest.approx(expected.radius)

    def test_mesh(self, config_file: Path, result: Path, tmp_path: Path) -> None:
        out = tmp_path / "shape.obj"
        assert _run(config_file, "mesh", "--result", str(result), "--out", str(out), "--resolution", "24") == 0
        assert "\nf " in out.read_text()

    def test_mesh_world_frame(self, config_file: Path, result: Path, tmp_path: Path) -> None:
        local, world = tmp_path / "local.obj", tmp_path / "world.obj"
        assert _run(config_file, "mesh", "-r", str(result), "-o", str(local), "--resolution", "16") == 0
        assert _run(config_file, "mesh", "-r", str(result), "-o", str(world), "--resolution", "16", "--world") == 0
        assert local.read_text() != world.read_text()

    def test_eval_then_summary(self, config_file: Path, result: Path, scene: Path, tmp_path: Path, capsys) -> None:
        metrics, scatter = tmp_path / "metrics.csv", tmp_path / "scatter.csv"
        for name in ("first", "second"):
            code = _run(
                config_file, "eval", "--result", str(result), "--scene", str(scene), "--name", name,
                "--metrics", str(metrics), "--scatter", str(scatter),
                "--points", "300", "--resolution", "24", "--grid", "24",
            )
            assert code == 0
        rows = read_metrics_csv(metrics)
        assert [r["object"] for r in rows] == ["first", "second"]
        assert 0.0 <= float(rows[0]["iou"]) <= 1.0
        assert float(rows[0]["chamfer"]) >= 0.0
        assert len(scatter.read_text().splitlines()) == 301

        capsys.readouterr()
        assert _run(config_file, "summary", str(metrics)) == 0
        out = capsys.readouterr().out
        assert "CORRECT DETECTION RATES" in out
        assert "Objects" in out

"""
Tests for usm.storage: raster, JSON, CSV and OBJ formats.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import trimesh

from usm.config import OptimConfig
from usm.decoder import LatentGaussian
from usm.errors import FormatError
from usm.geometry import Pose9, PoseGaussian
from usm.storage import (
    METRIC_COLUMNS,
    append_metrics_csv,
    load_mesh,
    load_result_json,
    read_metrics_csv,
    read_pfm,
    read_pgm,
    save_history_csv,
    save_obj,
    save_result_json,
    write_pfm,
    write_pgm,
)


# ── PFM depth ─────────────────────────────────────────────────────────────────


class TestPfm:
    def test_row_order_and_values(self, tmp_path: Path) -> None:
        depth = np.arange(12, dtype=float).reshape(3, 4) / 4.0
        path = write_pfm(tmp_path / "d.pfm", depth)
        assert path.read_bytes().startswith(b"Pf\n4 3\n-1.0\n")
        np.testing.assert_array_equal(read_pfm(path), depth)

    def test_bottom_row_written_first(self, tmp_path: Path) -> None:
        depth = np.array([[1.0], [2.0]])
        data = write_pfm(tmp_path / "d.pfm", depth).read_bytes()
        assert np.frombuffer(data[-8:], dtype="<f4").tolist() == [2.0, 1.0]

    def test_header_comment_allowed(self, tmp_path: Path) -> None:
        path = tmp_path / "d.pfm"
        path.write_bytes(b"Pf\n# depth\n1 1\n-1.0\n" + np.array([1.5], dtype="<f4").tobytes())
        assert read_pfm(path)[0, 0] == 1.5

    def test_colour_pfm_rejected(self, tmp_path: Path) -> None:
        path = tmp_path / "d.pfm"
        path.write_bytes(b"PF\n1 1\n-1.0\n" + bytes(12))
        with pytest.raises(FormatError):
            read_pfm(path)

    def test_big_endian_rejected(self, tmp_path: Path) -> None:
        path = tmp_path / "d.pfm"
        path.write_bytes(b"Pf\n1 1\n1.0\n" + bytes(4))
        with pytest.raises(FormatError):
            read_pfm(path)

    def test_short_payload_rejected(self, tmp_path: Path) -> None:
        path = tmp_path / "d.pfm"
        path.write_bytes(b"Pf\n2 2\n-1.0\n" + bytes(12))
        with pytest.raises(FormatError):
            read_pfm(path)

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(FormatError):
            read_pfm(tmp_path / "absent.pfm")


# ── PGM mask ──────────────────────────────────────────────────────────────────


class TestPgm:
    def test_round_trip(self, tmp_path: Path) -> None:
        mask = np.array([[True, False, True], [False, False, True]])
        path = write_pgm(tmp_path / "m.pgm", mask)
        assert path.read_bytes()[:11] == b"P5\n3 2\n255\n"
        np.testing.assert_array_equal(read_pgm(path), mask)

    def test_non_binary_rejected(self, tmp_path: Path) -> None:
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n2 1\n255\n" + bytes([0, 128]))
        with pytest.raises(FormatError):
            read_pgm(path)

    def test_wrong_maxval(self, tmp_path: Path) -> None:
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n1 1\n1\n" + bytes([1]))
        with pytest.raises(FormatError):
            read_pgm(path)

    def test_bad_dimension(self, tmp_path: Path) -> None:
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\nx 1\n255\n" + bytes([0]))
        with pytest.raises(FormatError):
            read_pgm(path)


# ── Results ───────────────────────────────────────────────────────────────────


class TestResultJson:
    @pytest.fixture
    def saved(self, tmp_path: Path) -> Path:
        z = LatentGaussian(np.array([0.1, -0.2, 0.0]), np.array([1e-6, 2e-6, 3e-6]))
        pose = PoseGaussian(Pose9([1.0, 2.0, 3.0], [0.1, 0.0, -0.1], [1.0, 1.5, 0.5]), np.full(9, 1e-4))
        history = [[1, 0.5, 0.25, 0.0, 0.75], [2, 0.4, 0.2, 0.01, 0.6]]
        return save_result_json(tmp_path / "r.json", z, pose, "analytic", 2, history, OptimConfig(iters=2))

    def test_fields_restored(self, saved: Path) -> None:
        stored = load_result_json(saved)
        np.testing.assert_array_equal(stored.z.mean, [0.1, -0.2, 0.0])
        np.testing.assert_array_equal(stored.pose.mean.s, [1.0, 1.5, 0.5])
        np.testing.assert_array_equal(stored.pose.cov_diag, 1e-4)
        assert stored.decoder == "analytic"
        assert stored.iterations == 2
        assert stored.history[1] == [2, 0.4, 0.2, 0.01, 0.6]

    def test_config_echoed(self, saved: Path) -> None:
        config = load_result_json(saved).config
        assert config["iters"] == 2
        assert config["es"]["sample_count"] == 1000
        assert config["ray"]["slope"] == 400.0

    def test_byte_identical_rewrites(self, saved: Path, tmp_path: Path) -> None:
        stored = load_result_json(saved)
        again = save_result_json(
            tmp_path / "again.json", stored.z, stored.pose, stored.decoder, stored.iterations,
            stored.history, OptimConfig(iters=2),
        )
        assert again.read_bytes() == saved.read_bytes()

    def test_ray_bounds_absent_by_default(self, saved: Path) -> None:
        assert load_result_json(saved).ray_bounds is None

    def test_ray_bounds_restored(self, saved: Path, tmp_path: Path) -> None:
        stored = load_result_json(saved)
        path = save_result_json(
            tmp_path / "bounded.json", stored.z, stored.pose, stored.decoder, stored.iterations,
            stored.history, OptimConfig(iters=2), ray_bounds=(np.array([0.5, 0.0, -1.0]), 1.65),
        )
        center, radius = load_result_json(path).ray_bounds
        np.testing.assert_array_equal(center, [0.5, 0.0, -1.0])
        assert radius == 1.65

    def test_missing_field(self, tmp_path: Path) -> None:
        path = tmp_path / "r.json"
        path.write_text('{"decoder": "analytic"}')
        with pytest.raises(FormatError):
            load_result_json(path)

    def test_invalid_json(self, tmp_path: Path) -> None:
        path = tmp_path / "r.json"
        path.write_text("{")
        with pytest.raises(FormatError):
            load_result_json(path)


# ── CSV tables ────────────────────────────────────────────────────────────────


class TestCsv:
    def test_history_header_and_rows(self, tmp_path: Path) -> None:
        path = save_history_csv(tmp_path / "h.csv", [[1, 0.5, 0.25, 0.0, 0.75]])
        lines = path.read_text().splitlines()
        assert lines[0] == "iter,L3D,L2D,reg,total"
        assert lines[1] == "1,0.5,0.25,0.0,0.75"

    def test_metrics_append_writes_header_once(self, tmp_path: Path) -> None:
        path = tmp_path / "m.csv"
        append_metrics_csv(path, {"object": "a", "iou": 0.5})
        append_metrics_csv(path, {"object": "b", "chamfer": 0.1})
        rows = read_metrics_csv(path)
        assert [r["object"] for r in rows] == ["a", "b"]
        assert rows[0]["iou"] == "0.5"
        assert rows[1]["iou"] == ""
        assert path.read_text().count("object,") == 1

    def test_metrics_missing_column(self, tmp_path: Path) -> None:
        path = tmp_path / "m.csv"
        path.write_text(",".join(METRIC_COLUMNS[:-1]) + "\n")
        with pytest.raises(FormatError):
            read_metrics_csv(path)


# ── Meshes ────────────────────────────────────────────────────────────────────


class TestObj:
    def test_writes_vertices_and_faces_without_normals(self, tmp_path: Path) -> None:
        path = save_obj(tmp_path / "box.obj", trimesh.creation.box())
        records = {line.split()[0] for line in path.read_text().splitlines() if line.strip()}
        assert {"v", "f"} <= records
        assert "vn" not in records
        assert len(load_mesh(path).faces) == 12

    def test_empty_mesh_gives_empty_file(self, tmp_path: Path) -> None:
        path = save_obj(tmp_path / "empty.obj", trimesh.Trimesh())
        assert path.read_text() == ""
